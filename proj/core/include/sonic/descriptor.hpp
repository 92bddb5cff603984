#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sonic/image.hpp"
#include "sonic/matching.hpp"

namespace sonic {

enum class Activation { none, relu, tanh };

struct ConvSpec {
  int kernel = 3;
  int stride = 1;
  int out_channels = 16;
  Activation activation = Activation::relu;
};

/// Convolutional encoder with a coarse head and a fine refinement head.
///
/// The last coarse layer emits the coarse descriptor. Its input (the output of
/// the layer before it, the "context") is also upsampled and concatenated
/// with the output of `fine_skip_layer` to feed the fine head. With
/// co-attention enabled the context of each image is attended against the
/// other image's context and concatenated before the coarse head.
struct EncoderConfig {
  std::vector<ConvSpec> coarse_layers;
  std::vector<ConvSpec> fine_layers;
  int fine_skip_layer = 0;
  bool co_attention = false;
  std::uint64_t seed = 0;

  /// 4 conv layers to stride 8 (64-channel coarse), 2-layer fine head at stride 2.
  static EncoderConfig desk();

  int coarse_factor() const;
  int fine_factor() const;
  int context_factor() const;
  int coarse_channels() const { return coarse_layers.back().out_channels; }
  int fine_channels() const { return fine_layers.back().out_channels; }

  struct LayerShape {
    std::string name;
    int kernel;
    int in_channels;
    int out_channels;
  };
  /// Coarse layers then fine layers, in parameter declaration order.
  std::vector<LayerShape> layer_shapes() const;

  /// Throws Errc::config on inconsistent strides or channel counts.
  void validate() const;

  /// FNV-1a over the architecture (seed excluded).
  std::uint64_t digest() const;
};

struct ParamTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<double> values;
};

inline constexpr std::uint32_t kWeightsFormatVersion = 1;

/// Per-layer kernels ([out][k][k][in]) and biases ([out]), declaration order.
/// Values are always representable in f32 so the on-disk round trip is exact.
struct ModelWeights {
  EncoderConfig config;
  std::uint32_t version = kWeightsFormatVersion;
  std::vector<ParamTensor> tensors;

  static ModelWeights initialize(const EncoderConfig& config);
  static ModelWeights zeros(const EncoderConfig& config);

  std::size_t parameter_count() const;
  std::vector<double> flatten() const;
  /// Assigns from a flat vector, rounding each value to f32 precision.
  void assign(std::span<const double> flat);
  /// Assigns without rounding (finite-difference probes).
  void assign_exact(std::span<const double> flat);
};

/// "SNCW", u32 version, u64 config digest, u32 tensor count, then per tensor
/// a u32 element count followed by little-endian f32 values.
void save_weights(const ModelWeights& weights, const std::filesystem::path& path);
ModelWeights load_weights(const std::filesystem::path& path, const EncoderConfig& expected);

struct EncoderOutput {
  FeatureMap coarse;
  FeatureMap fine;
};

/// Descriptors are L2-normalized per cell; all-zero cells are left as zero.
/// Throws Errc::shape when the image is not divisible by the coarse stride, or
/// when the config needs a second image (co-attention).
EncoderOutput encode(const PolarImage& image, const ModelWeights& weights);

/// Encodes both images of a pair; required when co-attention is enabled.
std::pair<EncoderOutput, EncoderOutput> encode_pair(const PolarImage& a, const PolarImage& b,
                                                    const ModelWeights& weights);

/// Concatenated coarse and fine descriptors at an image pixel.
std::vector<double> hierarchical_descriptor(const EncoderOutput& maps, const PixelCoord& pixel);

inline LevelMaps to_level_maps(EncoderOutput out) { return {std::move(out.coarse), std::move(out.fine)}; }

/// Reverse-mode pass over the encoder for one pair of images.
///
/// Holds the forward activations; `backward` takes gradients with respect to
/// the normalized coarse/fine maps of both images and accumulates parameter
/// gradients into a flat vector laid out like ModelWeights::flatten().
class EncoderTape {
 public:
  EncoderTape(const PolarImage& a, const PolarImage& b, const ModelWeights& weights);
  ~EncoderTape();
  EncoderTape(EncoderTape&&) noexcept;
  EncoderTape& operator=(EncoderTape&&) noexcept;

  const EncoderOutput& output_a() const;
  const EncoderOutput& output_b() const;

  void backward(const EncoderOutput& grad_a, const EncoderOutput& grad_b, std::span<double> param_grad) const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace sonic
