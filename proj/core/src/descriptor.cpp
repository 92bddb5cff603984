#include "sonic/descriptor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <string>

#include "binary_io.hpp"
#include "sonic/error.hpp"

namespace sonic {

EncoderConfig EncoderConfig::desk() {
  EncoderConfig cfg;
  cfg.coarse_layers = {{3, 2, 16, Activation::relu},
                       {3, 2, 32, Activation::relu},
                       {3, 2, 32, Activation::relu},
                       {3, 1, 64, Activation::none}};
  cfg.fine_layers = {{3, 1, 32, Activation::relu}, {1, 1, 64, Activation::none}};
  cfg.fine_skip_layer = 0;
  return cfg;
}

namespace {

int stride_product(const std::vector<ConvSpec>& layers, std::size_t count) {
  int f = 1;
  for (std::size_t i = 0; i < count && i < layers.size(); ++i) f *= layers[i].stride;
  return f;
}

const char* activation_name(Activation a) {
  switch (a) {
    case Activation::none: return "none";
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
  }
  return "?";
}

}  // namespace

int EncoderConfig::coarse_factor() const { return stride_product(coarse_layers, coarse_layers.size()); }
int EncoderConfig::fine_factor() const {
  return stride_product(coarse_layers, static_cast<std::size_t>(fine_skip_layer) + 1);
}
int EncoderConfig::context_factor() const {
  return stride_product(coarse_layers, coarse_layers.size() - 1);
}

std::vector<EncoderConfig::LayerShape> EncoderConfig::layer_shapes() const {
  std::vector<LayerShape> shapes;
  const std::size_t n = coarse_layers.size();
  int in = 1;
  for (std::size_t i = 0; i < n; ++i) {
    int layer_in = in;
    if (i + 1 == n && co_attention) layer_in *= 2;
    shapes.push_back({"coarse." + std::to_string(i), coarse_layers[i].kernel, layer_in,
                      coarse_layers[i].out_channels});
    in = coarse_layers[i].out_channels;
  }
  in = coarse_layers[static_cast<std::size_t>(fine_skip_layer)].out_channels + coarse_layers[n - 2].out_channels;
  for (std::size_t i = 0; i < fine_layers.size(); ++i) {
    shapes.push_back({"fine." + std::to_string(i), fine_layers[i].kernel, in, fine_layers[i].out_channels});
    in = fine_layers[i].out_channels;
  }
  return shapes;
}

void EncoderConfig::validate() const {
  if (coarse_layers.size() < 2) throw Error(Errc::config, "encoder: need at least 2 coarse layers");
  if (fine_layers.empty()) throw Error(Errc::config, "encoder: need at least 1 fine layer");
  if (fine_skip_layer < 0 || static_cast<std::size_t>(fine_skip_layer) + 1 >= coarse_layers.size())
    throw Error(Errc::config, "encoder: fine_skip_layer must precede the coarse head");
  for (const auto& l : coarse_layers)
    if (l.kernel < 1 || l.kernel % 2 == 0 || l.stride < 1 || l.out_channels < 1)
      throw Error(Errc::config, "encoder: coarse layers need odd kernels, positive strides and channels");
  for (const auto& l : fine_layers)
    if (l.kernel < 1 || l.kernel % 2 == 0 || l.stride != 1 || l.out_channels < 1)
      throw Error(Errc::config, "encoder: fine layers need odd kernels, stride 1, positive channels");
  if (coarse_layers.back().stride != 1)
    throw Error(Errc::config, "encoder: coarse head must have stride 1");
  if (context_factor() % fine_factor() != 0)
    throw Error(Errc::config, "encoder: context stride must be a multiple of the fine stride");
}

std::uint64_t EncoderConfig::digest() const {
  std::string s = "coarse:";
  for (const auto& l : coarse_layers)
    s += std::to_string(l.kernel) + "," + std::to_string(l.stride) + "," + std::to_string(l.out_channels) +
         "," + activation_name(l.activation) + ";";
  s += "|fine:";
  for (const auto& l : fine_layers)
    s += std::to_string(l.kernel) + "," + std::to_string(l.stride) + "," + std::to_string(l.out_channels) +
         "," + activation_name(l.activation) + ";";
  s += "|skip:" + std::to_string(fine_skip_layer) + "|coam:" + (co_attention ? "1" : "0");
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Weights

ModelWeights ModelWeights::zeros(const EncoderConfig& config) {
  config.validate();
  ModelWeights w;
  w.config = config;
  for (const auto& s : config.layer_shapes()) {
    const std::size_t n = static_cast<std::size_t>(s.out_channels) * s.kernel * s.kernel * s.in_channels;
    w.tensors.push_back({s.name + ".kernel", {s.out_channels, s.kernel, s.kernel, s.in_channels},
                         std::vector<double>(n, 0.0)});
    w.tensors.push_back({s.name + ".bias", {s.out_channels},
                         std::vector<double>(static_cast<std::size_t>(s.out_channels), 0.0)});
  }
  return w;
}

constexpr double kInitialBias = 0.01;

ModelWeights ModelWeights::initialize(const EncoderConfig& config) {
  ModelWeights w = zeros(config);
  std::mt19937_64 rng(config.seed * 0x9E3779B97F4A7C15ull + 0x5EED);
  const auto shapes = config.layer_shapes();
  const std::size_t n_coarse = config.coarse_layers.size();
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    const Activation act = l < n_coarse ? config.coarse_layers[l].activation
                                        : config.fine_layers[l - n_coarse].activation;
    const double fan_in = static_cast<double>(shapes[l].kernel) * shapes[l].kernel * shapes[l].in_channels;
    const double gain = act == Activation::relu ? 2.0 : 1.0;
    std::normal_distribution<double> normal(0.0, std::sqrt(gain / fan_in));
    for (double& v : w.tensors[2 * l].values) v = static_cast<float>(normal(rng));
    // A zero bias leaves blank image regions at exactly zero, where the
    // per-cell normalization is discontinuous.
    for (double& v : w.tensors[2 * l + 1].values) v = static_cast<float>(kInitialBias);
  }
  return w;
}

std::size_t ModelWeights::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.values.size();
  return n;
}

std::vector<double> ModelWeights::flatten() const {
  std::vector<double> flat;
  flat.reserve(parameter_count());
  for (const auto& t : tensors) flat.insert(flat.end(), t.values.begin(), t.values.end());
  return flat;
}

void ModelWeights::assign_exact(std::span<const double> flat) {
  if (flat.size() != parameter_count()) throw Error(Errc::shape, "weights: flat parameter size mismatch");
  std::size_t k = 0;
  for (auto& t : tensors)
    for (double& v : t.values) v = flat[k++];
}

void ModelWeights::assign(std::span<const double> flat) {
  assign_exact(flat);
  for (auto& t : tensors)
    for (double& v : t.values) v = static_cast<float>(v);
}

void save_weights(const ModelWeights& weights, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::io, "cannot write " + path.string());
  out.write("SNCW", 4);
  detail::put_u32(out, weights.version);
  detail::put_u64(out, weights.config.digest());
  detail::put_u32(out, static_cast<std::uint32_t>(weights.tensors.size()));
  for (const auto& t : weights.tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(t.values.size()));
    for (double v : t.values) detail::put_f32(out, static_cast<float>(v));
  }
  if (!out) throw Error(Errc::io, "failed writing " + path.string());
}

ModelWeights load_weights(const std::filesystem::path& path, const EncoderConfig& expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io, "cannot read " + path.string());
  const std::string where = path.string() + ": ";
  char magic[4];
  if (!in.read(magic, 4) || std::string(magic, 4) != "SNCW") throw Error(Errc::load, where + "bad magic");
  std::uint32_t version = 0, count = 0;
  std::uint64_t digest = 0;
  if (!detail::get_u32(in, version) || !detail::get_u64(in, digest) || !detail::get_u32(in, count))
    throw Error(Errc::load, where + "truncated header");
  if (version != kWeightsFormatVersion)
    throw Error(Errc::load, where + "unsupported format version " + std::to_string(version));
  ModelWeights w = ModelWeights::zeros(expected);
  if (count != w.tensors.size())
    throw Error(Errc::shape, where + "file has " + std::to_string(count) + " tensors, config expects " +
                                 std::to_string(w.tensors.size()));
  for (auto& t : w.tensors) {
    std::uint32_t n = 0;
    if (!detail::get_u32(in, n)) throw Error(Errc::load, where + "truncated before tensor " + t.name);
    if (n != t.values.size())
      throw Error(Errc::shape, where + "tensor " + t.name + " has " + std::to_string(n) +
                                   " values, config expects " + std::to_string(t.values.size()));
    std::vector<float> buf(n);
    if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(float))))
      throw Error(Errc::load, where + "truncated data in tensor " + t.name);
    for (std::uint32_t i = 0; i < n; ++i) {
      if (!std::isfinite(buf[i])) throw Error(Errc::load, where + "non-finite value in tensor " + t.name);
      t.values[i] = buf[i];
    }
  }
  if (digest != expected.digest()) throw Error(Errc::shape, where + "config digest mismatch");
  if (in.peek() != std::char_traits<char>::eof()) throw Error(Errc::load, where + "trailing bytes");
  return w;
}

// ---------------------------------------------------------------------------
// Layers

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

int conv_out_extent(int in, int kernel, int stride) { return (in + 2 * (kernel / 2) - kernel) / stride + 1; }

RowMatrix im2col(const FeatureMap& in, int kernel, int stride, int out_h, int out_w) {
  const int pad = kernel / 2;
  const int c = in.channels;
  RowMatrix cols = RowMatrix::Zero(static_cast<Eigen::Index>(out_h) * out_w,
                                   static_cast<Eigen::Index>(kernel) * kernel * c);
  for (int oy = 0; oy < out_h; ++oy) {
    for (int ox = 0; ox < out_w; ++ox) {
      double* row = cols.row(static_cast<Eigen::Index>(oy) * out_w + ox).data();
      for (int ky = 0; ky < kernel; ++ky) {
        const int iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= in.height) continue;
        for (int kx = 0; kx < kernel; ++kx) {
          const int ix = ox * stride + kx - pad;
          if (ix < 0 || ix >= in.width) continue;
          std::copy_n(in.cell(iy, ix).data(), c, row + (ky * kernel + kx) * c);
        }
      }
    }
  }
  return cols;
}

void col2im_add(const RowMatrix& cols, int kernel, int stride, int out_h, int out_w, FeatureMap& d_in) {
  const int pad = kernel / 2;
  const int c = d_in.channels;
  for (int oy = 0; oy < out_h; ++oy) {
    for (int ox = 0; ox < out_w; ++ox) {
      const double* row = cols.row(static_cast<Eigen::Index>(oy) * out_w + ox).data();
      for (int ky = 0; ky < kernel; ++ky) {
        const int iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= d_in.height) continue;
        for (int kx = 0; kx < kernel; ++kx) {
          const int ix = ox * stride + kx - pad;
          if (ix < 0 || ix >= d_in.width) continue;
          double* dst = d_in.cell(iy, ix).data();
          const double* src = row + (ky * kernel + kx) * c;
          for (int ch = 0; ch < c; ++ch) dst[ch] += src[ch];
        }
      }
    }
  }
}

Eigen::Map<const RowMatrix> kernel_matrix(const ParamTensor& k) {
  return {k.values.data(), k.shape[0], static_cast<Eigen::Index>(k.shape[1]) * k.shape[2] * k.shape[3]};
}

FeatureMap conv_forward(const FeatureMap& in, const ParamTensor& kernel, const ParamTensor& bias,
                        const ConvSpec& spec, int out_factor) {
  const int out_h = conv_out_extent(in.height, spec.kernel, spec.stride);
  const int out_w = conv_out_extent(in.width, spec.kernel, spec.stride);
  FeatureMap out(out_h, out_w, spec.out_channels, out_factor, in.level);
  const RowMatrix cols = im2col(in, spec.kernel, spec.stride, out_h, out_w);
  Eigen::Map<RowMatrix> out_mat(out.data.data(), static_cast<Eigen::Index>(out_h) * out_w, spec.out_channels);
  out_mat.noalias() = cols * kernel_matrix(kernel).transpose();
  const Eigen::Map<const Eigen::RowVectorXd> b(bias.values.data(), spec.out_channels);
  out_mat.rowwise() += b;
  switch (spec.activation) {
    case Activation::none: break;
    case Activation::relu:
      for (double& v : out.data) v = v > 0.0 ? v : 0.0;
      break;
    case Activation::tanh:
      for (double& v : out.data) v = std::tanh(v);
      break;
  }
  return out;
}

/// d_out is the gradient w.r.t. the post-activation output; it is consumed.
void conv_backward(const FeatureMap& in, const FeatureMap& out, FeatureMap d_out, const ParamTensor& kernel,
                   const ConvSpec& spec, std::span<double> d_kernel, std::span<double> d_bias,
                   FeatureMap* d_in) {
  switch (spec.activation) {
    case Activation::none: break;
    case Activation::relu:
      for (std::size_t i = 0; i < d_out.data.size(); ++i)
        if (!(out.data[i] > 0.0)) d_out.data[i] = 0.0;
      break;
    case Activation::tanh:
      for (std::size_t i = 0; i < d_out.data.size(); ++i) d_out.data[i] *= 1.0 - out.data[i] * out.data[i];
      break;
  }
  const int out_h = out.height, out_w = out.width;
  const Eigen::Index n = static_cast<Eigen::Index>(out_h) * out_w;
  Eigen::Map<const RowMatrix> g(d_out.data.data(), n, spec.out_channels);
  const RowMatrix cols = im2col(in, spec.kernel, spec.stride, out_h, out_w);
  Eigen::Map<RowMatrix> dk(d_kernel.data(), spec.out_channels, cols.cols());
  dk.noalias() += g.transpose() * cols;
  Eigen::Map<Eigen::RowVectorXd> db(d_bias.data(), spec.out_channels);
  db += g.colwise().sum();
  if (d_in != nullptr) {
    const RowMatrix d_cols = g * kernel_matrix(kernel);
    col2im_add(d_cols, spec.kernel, spec.stride, out_h, out_w, *d_in);
  }
}

FeatureMap upsample_nearest(const FeatureMap& in, int ratio, int out_factor) {
  FeatureMap out(in.height * ratio, in.width * ratio, in.channels, out_factor, FeatureLevel::fine);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      std::copy_n(in.cell(y / ratio, x / ratio).data(), in.channels, out.cell(y, x).data());
  return out;
}

void upsample_nearest_backward(const FeatureMap& d_out, int ratio, FeatureMap& d_in) {
  for (int y = 0; y < d_out.height; ++y)
    for (int x = 0; x < d_out.width; ++x) {
      const auto src = d_out.cell(y, x);
      auto dst = d_in.cell(y / ratio, x / ratio);
      for (int ch = 0; ch < d_out.channels; ++ch) dst[ch] += src[ch];
    }
}

constexpr double kNormEpsilon = 1e-12;

FeatureMap l2_normalize(const FeatureMap& in) {
  FeatureMap out = in;
  for (std::size_t i = 0; i < out.cells(); ++i) {
    double* v = out.data.data() + i * out.channels;
    double sq = 0.0;
    for (int ch = 0; ch < out.channels; ++ch) sq += v[ch] * v[ch];
    const double norm = std::sqrt(sq);
    if (norm <= kNormEpsilon) continue;
    for (int ch = 0; ch < out.channels; ++ch) v[ch] /= norm;
  }
  return out;
}

FeatureMap l2_normalize_backward(const FeatureMap& raw, const FeatureMap& normalized, const FeatureMap& d_out) {
  FeatureMap d_in(raw.height, raw.width, raw.channels, raw.downsample_factor, raw.level);
  const int c = raw.channels;
  for (std::size_t i = 0; i < raw.cells(); ++i) {
    const double* x = raw.data.data() + i * c;
    const double* y = normalized.data.data() + i * c;
    const double* g = d_out.data.data() + i * c;
    double* dx = d_in.data.data() + i * c;
    double sq = 0.0, yg = 0.0;
    for (int ch = 0; ch < c; ++ch) {
      sq += x[ch] * x[ch];
      yg += y[ch] * g[ch];
    }
    const double norm = std::sqrt(sq);
    if (norm <= kNormEpsilon) {
      for (int ch = 0; ch < c; ++ch) dx[ch] = g[ch];
      continue;
    }
    for (int ch = 0; ch < c; ++ch) dx[ch] = (g[ch] - y[ch] * yg) / norm;
  }
  return d_in;
}

FeatureMap image_to_map(const PolarImage& image) {
  FeatureMap m(image.rows, image.cols, 1, 1, FeatureLevel::fine);
  for (std::size_t i = 0; i < image.pixels.size(); ++i) m.data[i] = image.pixels[i];
  return m;
}

void split_channels_add(const FeatureMap& joint, FeatureMap& first, FeatureMap& second) {
  const int c0 = first.channels, c1 = second.channels;
  for (std::size_t i = 0; i < joint.cells(); ++i) {
    const double* src = joint.data.data() + i * joint.channels;
    double* a = first.data.data() + i * c0;
    double* b = second.data.data() + i * c1;
    for (int ch = 0; ch < c0; ++ch) a[ch] += src[ch];
    for (int ch = 0; ch < c1; ++ch) b[ch] += src[c0 + ch];
  }
}

FeatureMap zeros_like(const FeatureMap& m) {
  return FeatureMap(m.height, m.width, m.channels, m.downsample_factor, m.level);
}

}  // namespace

// ---------------------------------------------------------------------------
// Encoder

namespace {

struct EncoderState {
  struct ImagePass {
    FeatureMap input;
    std::vector<FeatureMap> coarse;  // post-activation output of each coarse layer
    FeatureMap head_input;           // context, or context ++ attended context
    CoAttention attention;
    FeatureMap fine_input;
    std::vector<FeatureMap> fine;
    EncoderOutput output;
  };

  const ModelWeights* weights = nullptr;
  ImagePass a;
  ImagePass b;

  std::size_t n_coarse() const { return weights->config.coarse_layers.size(); }
  const ParamTensor& kernel(std::size_t layer) const { return weights->tensors[2 * layer]; }
  const ParamTensor& bias(std::size_t layer) const { return weights->tensors[2 * layer + 1]; }

  void check_image(const PolarImage& img) const {
    const int f = weights->config.coarse_factor();
    if (img.rows < 1 || img.cols < 1 || img.rows % f != 0 || img.cols % f != 0)
      throw Error(Errc::shape, "encoder: image " + std::to_string(img.rows) + "x" + std::to_string(img.cols) +
                                   " is not divisible by the total stride " + std::to_string(f));
  }

  void run_trunk(ImagePass& p, const PolarImage& img) const {
    const auto& cfg = weights->config;
    p.input = image_to_map(img);
    int factor = 1;
    const FeatureMap* x = &p.input;
    for (std::size_t l = 0; l + 1 < n_coarse(); ++l) {
      factor *= cfg.coarse_layers[l].stride;
      p.coarse.push_back(conv_forward(*x, kernel(l), bias(l), cfg.coarse_layers[l], factor));
      x = &p.coarse.back();
    }
  }

  const FeatureMap& context(const ImagePass& p) const { return p.coarse[n_coarse() - 2]; }

  void run_heads(ImagePass& p) const {
    const auto& cfg = weights->config;
    const std::size_t head = n_coarse() - 1;
    p.coarse.push_back(
        conv_forward(p.head_input, kernel(head), bias(head), cfg.coarse_layers[head], cfg.coarse_factor()));
    p.coarse.back().level = FeatureLevel::coarse;

    const int ratio = cfg.context_factor() / cfg.fine_factor();
    const FeatureMap up = upsample_nearest(context(p), ratio, cfg.fine_factor());
    p.fine_input = concat_channels(p.coarse[static_cast<std::size_t>(cfg.fine_skip_layer)], up);
    p.fine_input.level = FeatureLevel::fine;
    const FeatureMap* x = &p.fine_input;
    for (std::size_t l = 0; l < cfg.fine_layers.size(); ++l) {
      const std::size_t idx = n_coarse() + l;
      p.fine.push_back(conv_forward(*x, kernel(idx), bias(idx), cfg.fine_layers[l], cfg.fine_factor()));
      p.fine.back().level = FeatureLevel::fine;
      x = &p.fine.back();
    }
    p.output.coarse = l2_normalize(p.coarse.back());
    p.output.fine = l2_normalize(p.fine.back());
  }

  struct HeadGradients {
    FeatureMap d_attended;            // empty without co-attention
    std::vector<FeatureMap> d_coarse; // per coarse layer output
  };

  /// Fine and coarse heads; the context gradient is accumulated into d_context.
  HeadGradients backward_heads(const ImagePass& p, const EncoderOutput& grad, std::span<double> param_grad,
                               const std::vector<std::size_t>& offsets, FeatureMap& d_context) const {
    const auto& cfg = weights->config;
    const std::size_t nc = n_coarse();
    auto grad_slice = [&](std::size_t tensor) {
      return param_grad.subspan(offsets[tensor], weights->tensors[tensor].values.size());
    };

    // Fine head.
    FeatureMap d = l2_normalize_backward(p.fine.back(), p.output.fine, grad.fine);
    for (std::size_t l = cfg.fine_layers.size(); l-- > 0;) {
      const std::size_t idx = nc + l;
      const FeatureMap& in = l == 0 ? p.fine_input : p.fine[l - 1];
      FeatureMap d_in = zeros_like(in);
      conv_backward(in, p.fine[l], std::move(d), kernel(idx), cfg.fine_layers[l], grad_slice(2 * idx),
                    grad_slice(2 * idx + 1), &d_in);
      d = std::move(d_in);
    }
    const int ratio = cfg.context_factor() / cfg.fine_factor();
    std::vector<FeatureMap> d_coarse;
    d_coarse.reserve(nc);
    for (const auto& m : p.coarse) d_coarse.push_back(zeros_like(m));
    FeatureMap d_up(d.height, d.width, context(p).channels, cfg.fine_factor(), FeatureLevel::fine);
    split_channels_add(d, d_coarse[static_cast<std::size_t>(cfg.fine_skip_layer)], d_up);
    upsample_nearest_backward(d_up, ratio, d_context);

    // Coarse head.
    const std::size_t head = nc - 1;
    FeatureMap d_head_in = zeros_like(p.head_input);
    conv_backward(p.head_input, p.coarse[head], l2_normalize_backward(p.coarse[head], p.output.coarse, grad.coarse),
                  kernel(head), cfg.coarse_layers[head], grad_slice(2 * head), grad_slice(2 * head + 1),
                  &d_head_in);
    HeadGradients out;
    if (cfg.co_attention) {
      out.d_attended = zeros_like(context(p));
      split_channels_add(d_head_in, d_context, out.d_attended);
    } else {
      for (std::size_t i = 0; i < d_context.data.size(); ++i) d_context.data[i] += d_head_in.data[i];
    }
    out.d_coarse = std::move(d_coarse);
    return out;
  }

  void backward_trunk(const ImagePass& p, FeatureMap d_context, std::vector<FeatureMap> d_coarse,
                    std::span<double> param_grad, const std::vector<std::size_t>& offsets) const {
    const auto& cfg = weights->config;
    const std::size_t nc = n_coarse();
    auto grad_slice = [&](std::size_t tensor) {
      return param_grad.subspan(offsets[tensor], weights->tensors[tensor].values.size());
    };
    for (std::size_t i = 0; i < d_context.data.size(); ++i) d_coarse[nc - 2].data[i] += d_context.data[i];
    for (std::size_t l = nc - 1; l-- > 0;) {
      const FeatureMap& in = l == 0 ? p.input : p.coarse[l - 1];
      FeatureMap* d_in = l == 0 ? nullptr : &d_coarse[l - 1];
      conv_backward(in, p.coarse[l], std::move(d_coarse[l]), kernel(l), cfg.coarse_layers[l], grad_slice(2 * l),
                    grad_slice(2 * l + 1), d_in);
    }
  }
};

}  // namespace

struct EncoderTape::Impl : EncoderState {};

EncoderTape::EncoderTape(const PolarImage& a, const PolarImage& b, const ModelWeights& weights)
    : impl_(std::make_unique<Impl>()) {
  weights.config.validate();
  impl_->weights = &weights;
  impl_->check_image(a);
  impl_->check_image(b);
  impl_->run_trunk(impl_->a, a);
  impl_->run_trunk(impl_->b, b);
  if (weights.config.co_attention) {
    const FeatureMap& ca = impl_->context(impl_->a);
    const FeatureMap& cb = impl_->context(impl_->b);
    impl_->a.attention = co_attention_full(ca, cb);
    impl_->b.attention = co_attention_full(cb, ca);
    impl_->a.head_input = concat_channels(ca, impl_->a.attention.attended);
    impl_->b.head_input = concat_channels(cb, impl_->b.attention.attended);
  } else {
    impl_->a.head_input = impl_->context(impl_->a);
    impl_->b.head_input = impl_->context(impl_->b);
  }
  impl_->run_heads(impl_->a);
  impl_->run_heads(impl_->b);
}

EncoderTape::~EncoderTape() = default;
EncoderTape::EncoderTape(EncoderTape&&) noexcept = default;
EncoderTape& EncoderTape::operator=(EncoderTape&&) noexcept = default;

const EncoderOutput& EncoderTape::output_a() const { return impl_->a.output; }
const EncoderOutput& EncoderTape::output_b() const { return impl_->b.output; }

void EncoderTape::backward(const EncoderOutput& grad_a, const EncoderOutput& grad_b,
                           std::span<double> param_grad) const {
  const auto& w = *impl_->weights;
  if (param_grad.size() != w.parameter_count())
    throw Error(Errc::shape, "encoder backward: gradient buffer size mismatch");
  std::vector<std::size_t> offsets(w.tensors.size());
  std::size_t off = 0;
  for (std::size_t t = 0; t < w.tensors.size(); ++t) {
    offsets[t] = off;
    off += w.tensors[t].values.size();
  }
  const FeatureMap& ctx_a = impl_->context(impl_->a);
  const FeatureMap& ctx_b = impl_->context(impl_->b);
  FeatureMap d_ctx_a = zeros_like(ctx_a), d_ctx_b = zeros_like(ctx_b);

  auto heads_a = impl_->backward_heads(impl_->a, grad_a, param_grad, offsets, d_ctx_a);
  auto heads_b = impl_->backward_heads(impl_->b, grad_b, param_grad, offsets, d_ctx_b);
  if (w.config.co_attention) {
    co_attention_backward(ctx_a, ctx_b, impl_->a.attention, heads_a.d_attended, d_ctx_a, d_ctx_b);
    co_attention_backward(ctx_b, ctx_a, impl_->b.attention, heads_b.d_attended, d_ctx_b, d_ctx_a);
  }
  impl_->backward_trunk(impl_->a, std::move(d_ctx_a), std::move(heads_a.d_coarse), param_grad, offsets);
  impl_->backward_trunk(impl_->b, std::move(d_ctx_b), std::move(heads_b.d_coarse), param_grad, offsets);
}

std::pair<EncoderOutput, EncoderOutput> encode_pair(const PolarImage& a, const PolarImage& b,
                                                    const ModelWeights& weights) {
  EncoderTape tape(a, b, weights);
  return {tape.output_a(), tape.output_b()};
}

EncoderOutput encode(const PolarImage& image, const ModelWeights& weights) {
  if (weights.config.co_attention)
    throw Error(Errc::shape, "encode: co-attention encoders need both images (use encode_pair)");
  weights.config.validate();
  EncoderState impl;
  impl.weights = &weights;
  impl.check_image(image);
  impl.run_trunk(impl.a, image);
  impl.a.head_input = impl.context(impl.a);
  impl.run_heads(impl.a);
  return std::move(impl.a.output);
}

std::vector<double> hierarchical_descriptor(const EncoderOutput& maps, const PixelCoord& pixel) {
  auto d = sample_descriptor(maps.coarse, maps.coarse.to_grid(pixel));
  const auto f = sample_descriptor(maps.fine, maps.fine.to_grid(pixel));
  d.insert(d.end(), f.begin(), f.end());
  return d;
}

}  // namespace sonic
