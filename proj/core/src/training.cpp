#include "sonic/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "random_detail.hpp"
#include "sonic/error.hpp"
#include "sonic/evaluation.hpp"
#include "sonic/parallel.hpp"

namespace sonic {

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
    throw Error(Errc::config, "train: learning_rate must be finite and >= 0");
  if (epochs < 1) throw Error(Errc::config, "train: epochs must be >= 1");
  if (batch_pairs < 1) throw Error(Errc::config, "train: batch_pairs must be >= 1");
  if (keypoints_per_frame < 1) throw Error(Errc::config, "train: keypoints_per_frame must be >= 1");
  if (loss_weights.w_epipolar < 0.0 || loss_weights.w_cyclic < 0.0)
    throw Error(Errc::config, "train: loss weights must be >= 0");
  if (arc_samples < 2) throw Error(Errc::config, "train: arc_samples must be >= 2");
  if (!(inverse_temperature > 0.0)) throw Error(Errc::config, "train: inverse_temperature must be positive");
  if (window < 1 || window % 2 == 0) throw Error(Errc::config, "train: window must be odd and positive");
  if (!(sigma0_px > 0.0)) throw Error(Errc::config, "train: sigma0_px must be positive");
  if (jobs < 1) throw Error(Errc::config, "train: jobs must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && adam_epsilon > 0.0))
    throw Error(Errc::config, "train: invalid Adam parameters");
}

MatchConfig TrainConfig::match_config() const {
  MatchConfig mc;
  mc.window = window;
  mc.inverse_temperature = inverse_temperature;
  mc.sigma0_px = sigma0_px;
  return mc;
}

std::vector<PixelCoord> training_keypoints(const PolarImage& image, const TrainConfig& cfg) {
  DetectorConfig dc;
  dc.max_count = cfg.keypoints_per_frame;
  dc.nms_radius = cfg.nms_radius;
  return keypoint_pixels(detect_keypoints(image, dc));
}

namespace {

FeatureMap zeros_like(const FeatureMap& m) {
  return FeatureMap(m.height, m.width, m.channels, m.downsample_factor, m.level);
}

struct GridPolar {
  PolarPoint point;
  double range_per_row;
  double bearing_per_col;
};

GridPolar grid_to_polar(const FeatureMap& m, const GridCoord& g, const SonarIntrinsics& intr) {
  const double f = m.downsample_factor;
  return {pixel_to_polar(m.to_pixel(g), intr), f * intr.range_bin(), f * intr.bearing_bin()};
}

GridCoord polar_grad_to_grid(const PolarGradient& g, const GridPolar& gp, double scale) {
  return {scale * g.d_range * gp.range_per_row, scale * g.d_bearing * gp.bearing_per_col};
}

struct Term {
  SoftArgmaxTrace forward;
  SoftArgmaxTrace backward;
  GridPolar fwd_polar;
  GridPolar bwd_polar;
  EpipolarLossValue epipolar;
  LossValue cyclic;
  double weight = 1.0;
};

struct UsableKeypoint {
  PixelCoord pixel;
  PolarPoint polar;
  EpipolarContour contour;
};

/// Forward-backward matching on one level; the cycle re-enters the source map
/// at the forward expectation.
Term level_term(const UsableKeypoint& kp, const FeatureMap& src, const FeatureMap& dst, const Window& fwd_window,
                const Window& bwd_window_or_full, bool full_backward, const SonarIntrinsics& intr,
                const TrainConfig& cfg) {
  Term t;
  t.forward = soft_argmax_forward(src, src.to_grid(kp.pixel), dst, fwd_window, cfg.inverse_temperature);
  const GridCoord e = t.forward.expectation.value;
  t.fwd_polar = grid_to_polar(dst, e, intr);
  t.epipolar = epipolar_loss(t.fwd_polar.point, kp.contour);
  const Window bw = full_backward ? Window::full(src) : bwd_window_or_full;
  t.backward = soft_argmax_forward(dst, e, src, bw, cfg.inverse_temperature);
  t.bwd_polar = grid_to_polar(src, t.backward.expectation.value, intr);
  t.cyclic = cyclic_loss(kp.polar, t.bwd_polar.point);
  const double f = dst.downsample_factor;
  t.weight = uncertainty_weight(distribution_variance(t.forward.distribution, e) * f * f, cfg.sigma0_px);
  return t;
}

void level_backward(const Term& t, double scale, const FeatureMap& src, const FeatureMap& dst, FeatureMap& d_src,
                    FeatureMap& d_dst, const TrainConfig& cfg) {
  const GridCoord d_back = polar_grad_to_grid(t.cyclic.gradient, t.bwd_polar, scale * cfg.loss_weights.w_cyclic);
  const GridCoord d_query =
      soft_argmax_backward(t.backward, dst, src, cfg.inverse_temperature, d_back, d_dst, d_src);
  GridCoord d_fwd = polar_grad_to_grid(t.epipolar.gradient, t.fwd_polar, scale * cfg.loss_weights.w_epipolar);
  d_fwd.row += d_query.row;
  d_fwd.col += d_query.col;
  soft_argmax_backward(t.forward, src, dst, cfg.inverse_temperature, d_fwd, d_src, d_dst);
}

double level_loss(const std::vector<Term>& terms, const std::vector<double>& weights, const TrainConfig& cfg,
                  std::vector<double>& normalized) {
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  normalized.resize(weights.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    normalized[i] = weights[i] / total;
    loss += normalized[i] *
            (cfg.loss_weights.w_epipolar * terms[i].epipolar.value + cfg.loss_weights.w_cyclic * terms[i].cyclic.value);
  }
  return loss;
}

std::vector<UsableKeypoint> usable_keypoints(const ScenePair& pair, std::span<const PixelCoord> keypoints,
                                             const TrainConfig& cfg) {
  std::vector<UsableKeypoint> out;
  for (const auto& px : keypoints) {
    UsableKeypoint kp;
    kp.pixel = px;
    kp.polar = pixel_to_polar(px, pair.intrinsics);
    SphericalPoint probe{kp.polar.range, kp.polar.bearing, 0.5 * (pair.intrinsics.phi_min + pair.intrinsics.phi_max)};
    if (!in_frustum(probe, pair.intrinsics)) continue;
    kp.contour = epipolar_contour(kp.polar.range, kp.polar.bearing, pair.pose_ab, pair.intrinsics, cfg.arc_samples);
    if (kp.contour.n_in_frustum == 0) continue;
    out.push_back(std::move(kp));
  }
  return out;
}

}  // namespace

PairObjective pair_objective(const ScenePair& pair, std::span<const PixelCoord> keypoints,
                             const ModelWeights& weights, const TrainConfig& cfg, bool with_gradient,
                             const ObjectiveFreeze* freeze) {
  cfg.validate();
  const auto kps = usable_keypoints(pair, keypoints, cfg);
  if (kps.empty())
    throw Error(Errc::degenerate_batch, "pair_objective: no keypoint has an epipolar contour inside the frustum");
  const std::size_t n = kps.size();
  if (freeze != nullptr && (freeze->coarse_weights.size() != n || freeze->fine_weights.size() != n ||
                            freeze->fine_forward_windows.size() != n || freeze->fine_backward_windows.size() != n))
    throw Error(Errc::shape, "pair_objective: frozen values do not match the usable keypoints");

  const SonarIntrinsics& intr = pair.intrinsics;
  EncoderTape tape(pair.image_a, pair.image_b, weights);
  const EncoderOutput& A = tape.output_a();
  const EncoderOutput& B = tape.output_b();
  const MatchConfig mc = cfg.match_config();

  PairObjective out;
  out.used_keypoints = n;
  std::vector<Term> coarse, fine;
  coarse.reserve(n);
  fine.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    coarse.push_back(level_term(kps[i], A.coarse, B.coarse, Window::full(B.coarse), {}, true, intr, cfg));
    Window fw, bw;
    if (freeze != nullptr) {
      fw = freeze->fine_forward_windows[i];
      bw = freeze->fine_backward_windows[i];
    } else {
      fw = fine_window_for(coarse.back().forward.distribution, B.coarse, B.fine, mc);
      // The return trip picks its window with a coarse match from the fine prediction.
      const GridCoord q = A.fine.to_grid(kps[i].pixel);
      const auto probe = soft_argmax_forward(A.fine, q, B.fine, fw, cfg.inverse_temperature);
      const PixelCoord p2 = B.fine.to_pixel(probe.expectation.value);
      const auto back = correspondence_distribution(p2, B.coarse, A.coarse, cfg.inverse_temperature);
      bw = fine_window_for(back, A.coarse, A.fine, mc);
    }
    fine.push_back(level_term(kps[i], A.fine, B.fine, fw, bw, false, intr, cfg));
    out.freeze.fine_forward_windows.push_back(fw);
    out.freeze.fine_backward_windows.push_back(bw);
  }
  for (std::size_t i = 0; i < n; ++i) {
    out.freeze.coarse_weights.push_back(freeze ? freeze->coarse_weights[i] : coarse[i].weight);
    out.freeze.fine_weights.push_back(freeze ? freeze->fine_weights[i] : fine[i].weight);
    out.mean_epipolar += coarse[i].epipolar.value + fine[i].epipolar.value;
    out.mean_cyclic += coarse[i].cyclic.value + fine[i].cyclic.value;
  }
  out.mean_epipolar /= 2.0 * static_cast<double>(n);
  out.mean_cyclic /= 2.0 * static_cast<double>(n);

  std::vector<double> wc, wf;
  out.loss = level_loss(coarse, out.freeze.coarse_weights, cfg, wc) + level_loss(fine, out.freeze.fine_weights, cfg, wf);
  if (!with_gradient) return out;

  EncoderOutput gA{zeros_like(A.coarse), zeros_like(A.fine)};
  EncoderOutput gB{zeros_like(B.coarse), zeros_like(B.fine)};
  for (std::size_t i = 0; i < n; ++i) {
    level_backward(coarse[i], wc[i], A.coarse, B.coarse, gA.coarse, gB.coarse, cfg);
    level_backward(fine[i], wf[i], A.fine, B.fine, gA.fine, gB.fine, cfg);
  }
  out.gradient.assign(weights.parameter_count(), 0.0);
  tape.backward(gA, gB, out.gradient);
  return out;
}

namespace {

void apply_update(ModelWeights& weights, OptimizerState& opt, std::span<const double> grad, const TrainConfig& cfg) {
  std::vector<double> theta = weights.flatten();
  if (opt.m.size() != theta.size()) {
    opt.m.assign(theta.size(), 0.0);
    opt.v.assign(theta.size(), 0.0);
    opt.step = 0;
  }
  ++opt.step;
  if (cfg.optimizer == OptimizerKind::sgd) {
    for (std::size_t k = 0; k < theta.size(); ++k) theta[k] -= cfg.learning_rate * grad[k];
  } else {
    const double t = static_cast<double>(opt.step);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t k = 0; k < theta.size(); ++k) {
      opt.m[k] = cfg.beta1 * opt.m[k] + (1.0 - cfg.beta1) * grad[k];
      opt.v[k] = cfg.beta2 * opt.v[k] + (1.0 - cfg.beta2) * grad[k] * grad[k];
      theta[k] -= cfg.learning_rate * (opt.m[k] / c1) / (std::sqrt(opt.v[k] / c2) + cfg.adam_epsilon);
    }
  }
  weights.assign(theta);
}

}  // namespace

StepResult train_step(std::span<const TrainingSample> batch, ModelWeights& weights, OptimizerState& opt,
                      const TrainConfig& cfg) {
  cfg.validate();
  if (batch.empty()) throw Error(Errc::degenerate_batch, "train_step: empty batch");
  std::vector<PairObjective> results(batch.size());
  parallel_for(batch.size(), cfg.jobs, [&](std::size_t i) {
    results[i] = pair_objective(*batch[i].pair, batch[i].keypoints, weights, cfg, true);
  });

  StepResult step;
  step.gradient.assign(weights.parameter_count(), 0.0);
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (const auto& r : results) {
    step.loss += r.loss * inv;
    for (std::size_t k = 0; k < step.gradient.size(); ++k) step.gradient[k] += r.gradient[k] * inv;
  }
  apply_update(weights, opt, step.gradient, cfg);
  return step;
}

StepResult train_step(const ScenePair& pair, std::span<const PixelCoord> keypoints, ModelWeights& weights,
                      OptimizerState& opt, const TrainConfig& cfg) {
  if (keypoints.empty()) throw Error(Errc::degenerate_batch, "train_step: no keypoints");
  const TrainingSample s{&pair, {keypoints.begin(), keypoints.end()}};
  return train_step(std::span<const TrainingSample>(&s, 1), weights, opt, cfg);
}

TrainResult train(std::span<const ScenePair> pairs, ModelWeights initial, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
  cfg.validate();
  std::vector<TrainingSample> samples;
  for (const auto& p : pairs) {
    TrainingSample s{&p, training_keypoints(p.image_a, cfg)};
    if (usable_keypoints(p, s.keypoints, cfg).empty()) continue;
    samples.push_back(std::move(s));
  }
  if (samples.empty()) throw Error(Errc::degenerate_batch, "train: no pair has usable keypoints");

  TrainResult res;
  res.weights = std::move(initial);
  std::vector<std::size_t> order(samples.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    detail::Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.integer(0, static_cast<int>(i) - 1))]);

    double sum = 0.0;
    std::vector<TrainingSample> batch;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_pairs)) {
      batch.clear();
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_pairs));
      for (std::size_t k = start; k < stop; ++k) batch.push_back(samples[order[k]]);
      const StepResult s = train_step(batch, res.weights, res.optimizer, cfg);
      sum += s.loss * static_cast<double>(batch.size());
    }
    res.epoch_loss.push_back(sum / static_cast<double>(samples.size()));
    if (on_epoch) on_epoch(epoch + 1, res.epoch_loss.back());
  }
  return res;
}

}  // namespace sonic
