#include "sonic/matching.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>

#include "sonic/error.hpp"

namespace sonic {

FeatureMap::FeatureMap(int h, int w, int c, int factor, FeatureLevel lvl)
    : height(h),
      width(w),
      channels(c),
      data(static_cast<std::size_t>(h) * w * c, 0.0),
      level(lvl),
      downsample_factor(factor) {}

PixelCoord FeatureMap::to_pixel(const GridCoord& g) const {
  return {(g.row + 0.5) * downsample_factor, (g.col + 0.5) * downsample_factor};
}

GridCoord FeatureMap::to_grid(const PixelCoord& p) const {
  return {p.u / downsample_factor - 0.5, p.v / downsample_factor - 0.5};
}

void FeatureMap::validate() const {
  if (height < 1 || width < 1 || channels < 1 || downsample_factor < 1)
    throw Error(Errc::shape, "feature map: non-positive extent");
  if (data.size() != static_cast<std::size_t>(height) * width * channels)
    throw Error(Errc::shape, "feature map: data size does not match extent");
  for (double x : data)
    if (!std::isfinite(x)) throw Error(Errc::shape, "feature map: non-finite entry");
}

Window Window::centered(const FeatureMap& m, int center_row, int center_col, int size) {
  center_row = std::clamp(center_row, 0, m.height - 1);
  center_col = std::clamp(center_col, 0, m.width - 1);
  const int half = size / 2;
  const int r0 = std::max(0, center_row - half);
  const int r1 = std::min(m.height, center_row + half + 1);
  const int c0 = std::max(0, center_col - half);
  const int c1 = std::min(m.width, center_col + half + 1);
  return {r0, c0, r1 - r0, c1 - c0};
}

namespace {

struct BilinearTap {
  int r0 = 0, r1 = 0, c0 = 0, c1 = 0;
  double a = 0.0, b = 0.0;
  bool row_free = false;  // derivative along the axis exists
  bool col_free = false;
};

void axis_tap(double x, int n, int& i0, int& i1, double& frac, bool& free_axis) {
  if (n == 1) {
    i0 = i1 = 0;
    frac = 0.0;
    free_axis = false;
    return;
  }
  free_axis = x >= 0.0 && x <= n - 1;
  x = std::clamp(x, 0.0, static_cast<double>(n - 1));
  i0 = std::min(static_cast<int>(std::floor(x)), n - 2);
  i1 = i0 + 1;
  frac = x - i0;
}

BilinearTap make_tap(const FeatureMap& m, const GridCoord& g) {
  BilinearTap t;
  axis_tap(g.row, m.height, t.r0, t.r1, t.a, t.row_free);
  axis_tap(g.col, m.width, t.c0, t.c1, t.b, t.col_free);
  return t;
}

void check_channels(const FeatureMap& a, const FeatureMap& b, const char* where) {
  if (a.channels != b.channels)
    throw Error(Errc::shape, std::string(where) + ": channel mismatch (" + std::to_string(a.channels) +
                                 " vs " + std::to_string(b.channels) + ")");
}

}  // namespace

std::vector<double> sample_descriptor(const FeatureMap& m, const GridCoord& g) {
  const BilinearTap t = make_tap(m, g);
  const double w00 = (1 - t.a) * (1 - t.b), w01 = (1 - t.a) * t.b, w10 = t.a * (1 - t.b), w11 = t.a * t.b;
  const auto m00 = m.cell(t.r0, t.c0), m01 = m.cell(t.r0, t.c1), m10 = m.cell(t.r1, t.c0),
             m11 = m.cell(t.r1, t.c1);
  std::vector<double> d(m.channels);
  for (int ch = 0; ch < m.channels; ++ch)
    d[ch] = w00 * m00[ch] + w01 * m01[ch] + w10 * m10[ch] + w11 * m11[ch];
  return d;
}

MatchDistribution descriptor_distribution(std::span<const double> descriptor, const FeatureMap& target,
                                          const Window& window, double inverse_temperature) {
  if (static_cast<int>(descriptor.size()) != target.channels)
    throw Error(Errc::shape, "descriptor_distribution: channel mismatch");
  MatchDistribution dist;
  dist.window = window;
  dist.probabilities.resize(static_cast<std::size_t>(window.rows) * window.cols);
  double max_logit = -std::numeric_limits<double>::infinity();
  std::size_t k = 0;
  for (int r = window.row0; r < window.row0 + window.rows; ++r) {
    for (int c = window.col0; c < window.col0 + window.cols; ++c, ++k) {
      const auto cell = target.cell(r, c);
      double dot = 0.0;
      for (int ch = 0; ch < target.channels; ++ch) dot += descriptor[ch] * cell[ch];
      dist.probabilities[k] = inverse_temperature * dot;
      max_logit = std::max(max_logit, dist.probabilities[k]);
    }
  }
  double sum = 0.0;
  for (double& p : dist.probabilities) {
    p = std::exp(p - max_logit);
    sum += p;
  }
  for (double& p : dist.probabilities) p /= sum;
  return dist;
}

MatchDistribution correspondence_distribution(const PixelCoord& query, const FeatureMap& m1,
                                              const FeatureMap& m2, double inverse_temperature) {
  check_channels(m1, m2, "correspondence_distribution");
  const auto d = sample_descriptor(m1, m1.to_grid(query));
  auto dist = descriptor_distribution(d, m2, Window::full(m2), inverse_temperature);
  dist.query = query;
  return dist;
}

GridCoord expected_correspondence(const MatchDistribution& dist) {
  GridCoord e;
  for (std::size_t k = 0; k < dist.probabilities.size(); ++k) {
    const GridCoord x = dist.cell_coord(k);
    e.row += dist.probabilities[k] * x.row;
    e.col += dist.probabilities[k] * x.col;
  }
  return e;
}

ExpectationWithGradient expected_correspondence_with_gradient(const MatchDistribution& dist) {
  ExpectationWithGradient out;
  out.value = expected_correspondence(dist);
  const std::size_t n = dist.probabilities.size();
  out.d_row.resize(n);
  out.d_col.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    const GridCoord x = dist.cell_coord(k);
    out.d_row[k] = dist.probabilities[k] * (x.row - out.value.row);
    out.d_col[k] = dist.probabilities[k] * (x.col - out.value.col);
  }
  return out;
}

double distribution_variance(const MatchDistribution& dist, const GridCoord& expectation) {
  double var = 0.0;
  for (std::size_t k = 0; k < dist.probabilities.size(); ++k) {
    const GridCoord x = dist.cell_coord(k);
    const double dr = x.row - expectation.row, dc = x.col - expectation.col;
    var += dist.probabilities[k] * (dr * dr + dc * dc);
  }
  return var;
}

double uncertainty_weight(double variance, double sigma0) {
  return 1.0 / (1.0 + std::max(variance, 0.0) / (sigma0 * sigma0));
}

std::size_t argmax_cell(const MatchDistribution& dist) {
  return static_cast<std::size_t>(
      std::distance(dist.probabilities.begin(),
                    std::max_element(dist.probabilities.begin(), dist.probabilities.end())));
}

Window fine_window_for(const MatchDistribution& coarse, const FeatureMap& coarse_map,
                       const FeatureMap& fine_map, const MatchConfig& cfg) {
  const GridCoord center_coarse = cfg.center == WindowCenter::argmax
                                      ? coarse.cell_coord(argmax_cell(coarse))
                                      : expected_correspondence(coarse);
  const GridCoord g = fine_map.to_grid(coarse_map.to_pixel(center_coarse));
  return Window::centered(fine_map, static_cast<int>(std::lround(g.row)),
                          static_cast<int>(std::lround(g.col)), cfg.window);
}

namespace {

MatchResult make_result(const PixelCoord& query, const MatchDistribution& dist, const FeatureMap& target,
                        const MatchConfig& cfg) {
  MatchResult r;
  r.query = query;
  const GridCoord e = expected_correspondence(dist);
  r.predicted = target.to_pixel(e);
  const double f = target.downsample_factor;
  r.variance = distribution_variance(dist, e) * f * f;
  r.weight = uncertainty_weight(r.variance, cfg.sigma0_px);
  r.low_confidence = r.weight < cfg.confidence_threshold;
  return r;
}

}  // namespace

CoarseToFineResult coarse_to_fine_match(const PixelCoord& query, const FeatureMap& m1_coarse,
                                        const FeatureMap& m2_coarse, const FeatureMap& m1_fine,
                                        const FeatureMap& m2_fine, const MatchConfig& cfg) {
  check_channels(m1_coarse, m2_coarse, "coarse_to_fine_match (coarse)");
  check_channels(m1_fine, m2_fine, "coarse_to_fine_match (fine)");
  if (cfg.window < 1 || cfg.window % 2 == 0)
    throw Error(Errc::domain, "coarse_to_fine_match: window must be odd and positive");
  CoarseToFineResult out;
  const auto coarse = correspondence_distribution(query, m1_coarse, m2_coarse, cfg.inverse_temperature);
  out.coarse = make_result(query, coarse, m2_coarse, cfg);
  out.fine_window = fine_window_for(coarse, m2_coarse, m2_fine, cfg);
  const auto d = sample_descriptor(m1_fine, m1_fine.to_grid(query));
  auto fine = descriptor_distribution(d, m2_fine, out.fine_window, cfg.inverse_temperature);
  fine.query = query;
  out.fine = make_result(query, fine, m2_fine, cfg);
  return out;
}

std::vector<MatchResult> match_keypoints(std::span<const PixelCoord> keypoints, const LevelMaps& image1,
                                         const LevelMaps& image2, const MatchConfig& cfg) {
  std::vector<MatchResult> out;
  out.reserve(keypoints.size());
  for (const auto& kp : keypoints)
    out.push_back(
        coarse_to_fine_match(kp, image1.coarse, image2.coarse, image1.fine, image2.fine, cfg).fine);
  return out;
}

CoAttention co_attention_full(const FeatureMap& g, const FeatureMap& h) {
  check_channels(g, h, "co_attention");
  const std::size_t ng = g.cells(), nh = h.cells();
  const int c = g.channels;
  CoAttention out;
  out.attended = FeatureMap(g.height, g.width, c, g.downsample_factor, g.level);
  out.attention.resize(ng * nh);
  for (std::size_t i = 0; i < ng; ++i) {
    const double* gi = g.data.data() + i * c;
    double* row = out.attention.data() + i * nh;
    double max_logit = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < nh; ++j) {
      const double* hj = h.data.data() + j * c;
      double dot = 0.0;
      for (int ch = 0; ch < c; ++ch) dot += gi[ch] * hj[ch];
      row[j] = dot;
      max_logit = std::max(max_logit, dot);
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < nh; ++j) {
      row[j] = std::exp(row[j] - max_logit);
      sum += row[j];
    }
    double* gi_hat = out.attended.data.data() + i * c;
    for (std::size_t j = 0; j < nh; ++j) {
      row[j] /= sum;
      const double* hj = h.data.data() + j * c;
      for (int ch = 0; ch < c; ++ch) gi_hat[ch] += row[j] * hj[ch];
    }
  }
  return out;
}

FeatureMap co_attention(const FeatureMap& g, const FeatureMap& h) { return co_attention_full(g, h).attended; }

void co_attention_backward(const FeatureMap& g, const FeatureMap& h, const CoAttention& fwd,
                           const FeatureMap& d_attended, FeatureMap& d_g, FeatureMap& d_h) {
  const std::size_t ng = g.cells(), nh = h.cells();
  const int c = g.channels;
  std::vector<double> d_a(nh);
  for (std::size_t i = 0; i < ng; ++i) {
    const double* gi = g.data.data() + i * c;
    const double* grad_i = d_attended.data.data() + i * c;
    const double* a_row = fwd.attention.data() + i * nh;
    double weighted = 0.0;
    for (std::size_t j = 0; j < nh; ++j) {
      const double* hj = h.data.data() + j * c;
      double dot = 0.0;
      for (int ch = 0; ch < c; ++ch) dot += grad_i[ch] * hj[ch];
      d_a[j] = dot;
      weighted += a_row[j] * dot;
    }
    double* dgi = d_g.data.data() + i * c;
    for (std::size_t j = 0; j < nh; ++j) {
      const double d_logit = a_row[j] * (d_a[j] - weighted);
      const double* hj = h.data.data() + j * c;
      double* dhj = d_h.data.data() + j * c;
      for (int ch = 0; ch < c; ++ch) {
        dgi[ch] += d_logit * hj[ch];
        dhj[ch] += d_logit * gi[ch] + a_row[j] * grad_i[ch];
      }
    }
  }
}

FeatureMap concat_channels(const FeatureMap& a, const FeatureMap& b) {
  if (a.height != b.height || a.width != b.width)
    throw Error(Errc::shape, "concat_channels: spatial extent mismatch");
  FeatureMap out(a.height, a.width, a.channels + b.channels, a.downsample_factor, a.level);
  for (std::size_t i = 0; i < a.cells(); ++i) {
    std::copy_n(a.data.data() + i * a.channels, a.channels, out.data.data() + i * out.channels);
    std::copy_n(b.data.data() + i * b.channels, b.channels, out.data.data() + i * out.channels + a.channels);
  }
  return out;
}

SoftArgmaxTrace soft_argmax_forward(const FeatureMap& source, const GridCoord& query,
                                    const FeatureMap& target, const Window& window,
                                    double inverse_temperature) {
  check_channels(source, target, "soft_argmax_forward");
  SoftArgmaxTrace t;
  t.query = query;
  t.descriptor = sample_descriptor(source, query);
  t.distribution = descriptor_distribution(t.descriptor, target, window, inverse_temperature);
  t.distribution.query = source.to_pixel(query);
  t.expectation = expected_correspondence_with_gradient(t.distribution);
  return t;
}

GridCoord soft_argmax_backward(const SoftArgmaxTrace& trace, const FeatureMap& source,
                               const FeatureMap& target, double inverse_temperature,
                               const GridCoord& d_expectation, FeatureMap& d_source,
                               FeatureMap& d_target) {
  const int c = source.channels;
  const Window& w = trace.distribution.window;
  std::vector<double> d_desc(c, 0.0);
  std::size_t k = 0;
  for (int r = w.row0; r < w.row0 + w.rows; ++r) {
    for (int col = w.col0; col < w.col0 + w.cols; ++col, ++k) {
      const double d_logit = d_expectation.row * trace.expectation.d_row[k] +
                             d_expectation.col * trace.expectation.d_col[k];
      if (d_logit == 0.0) continue;
      const double s = inverse_temperature * d_logit;
      const auto cell = target.cell(r, col);
      auto d_cell = d_target.cell(r, col);
      for (int ch = 0; ch < c; ++ch) {
        d_desc[ch] += s * cell[ch];
        d_cell[ch] += s * trace.descriptor[ch];
      }
    }
  }
  const BilinearTap t = make_tap(source, trace.query);
  const double w00 = (1 - t.a) * (1 - t.b), w01 = (1 - t.a) * t.b, w10 = t.a * (1 - t.b), w11 = t.a * t.b;
  auto d00 = d_source.cell(t.r0, t.c0), d01 = d_source.cell(t.r0, t.c1), d10 = d_source.cell(t.r1, t.c0),
       d11 = d_source.cell(t.r1, t.c1);
  const auto m00 = source.cell(t.r0, t.c0), m01 = source.cell(t.r0, t.c1), m10 = source.cell(t.r1, t.c0),
             m11 = source.cell(t.r1, t.c1);
  GridCoord d_query;
  for (int ch = 0; ch < c; ++ch) {
    const double g = d_desc[ch];
    d00[ch] += w00 * g;
    d01[ch] += w01 * g;
    d10[ch] += w10 * g;
    d11[ch] += w11 * g;
    if (t.row_free) d_query.row += g * ((1 - t.b) * (m10[ch] - m00[ch]) + t.b * (m11[ch] - m01[ch]));
    if (t.col_free) d_query.col += g * ((1 - t.a) * (m01[ch] - m00[ch]) + t.a * (m11[ch] - m10[ch]));
  }
  return d_query;
}

void write_matches_csv(const std::filesystem::path& path, std::span<const MatchResult> matches) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::io, "cannot write " + path.string());
  out << "query_u,query_v,pred_u,pred_v,variance,weight,low_confidence\n";
  char buf[256];
  for (const auto& m : matches) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d\n", m.query.u, m.query.v,
                  m.predicted.u, m.predicted.v, m.variance, m.weight, m.low_confidence ? 1 : 0);
    out << buf;
  }
  if (!out) throw Error(Errc::io, "failed writing " + path.string());
}

std::vector<MatchResult> read_matches_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io, "cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line)) return {};
  if (line.rfind("query_u,query_v,pred_u,pred_v", 0) != 0)
    throw Error(Errc::load, path.string() + ": unexpected match CSV header");
  std::vector<MatchResult> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string field;
    double v[7];
    int n = 0;
    while (n < 7 && std::getline(ss, field, ',')) {
      try {
        v[n++] = std::stod(field);
      } catch (const std::exception&) {
        throw Error(Errc::load, path.string() + ":" + std::to_string(line_no) + ": bad number");
      }
    }
    if (n != 7) throw Error(Errc::load, path.string() + ":" + std::to_string(line_no) + ": expected 7 fields");
    MatchResult m;
    m.query = {v[0], v[1]};
    m.predicted = {v[2], v[3]};
    m.variance = v[4];
    m.weight = v[5];
    m.low_confidence = v[6] != 0.0;
    out.push_back(m);
  }
  return out;
}

}  // namespace sonic
