#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "sonic/sonar_model.hpp"

namespace sonic {

enum class FeatureLevel { coarse, fine };

/// Position on a feature grid in cell-index units (cell (i, j) sits at (i, j)).
struct GridCoord {
  double row = 0.0;
  double col = 0.0;
};

/// Dense descriptor grid, row-major with channels innermost. Rows follow the
/// range axis and columns the bearing axis of the source image.
struct FeatureMap {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> data;
  FeatureLevel level = FeatureLevel::coarse;
  int downsample_factor = 1;

  FeatureMap() = default;
  FeatureMap(int h, int w, int c, int factor = 1, FeatureLevel lvl = FeatureLevel::coarse);

  std::size_t cells() const { return static_cast<std::size_t>(height) * width; }
  std::span<double> cell(int r, int c) {
    return {data.data() + (static_cast<std::size_t>(r) * width + c) * channels,
            static_cast<std::size_t>(channels)};
  }
  std::span<const double> cell(int r, int c) const {
    return {data.data() + (static_cast<std::size_t>(r) * width + c) * channels,
            static_cast<std::size_t>(channels)};
  }
  double& at(int r, int c, int ch) { return data[(static_cast<std::size_t>(r) * width + c) * channels + ch]; }
  double at(int r, int c, int ch) const {
    return data[(static_cast<std::size_t>(r) * width + c) * channels + ch];
  }

  /// Image pixel coordinate of a grid position: (cell + 0.5) * factor.
  PixelCoord to_pixel(const GridCoord& g) const;
  GridCoord to_grid(const PixelCoord& p) const;

  /// Throws Errc::shape on inconsistent sizes or non-finite entries.
  void validate() const;
};

/// Rectangular sub-grid [row0, row0 + rows) x [col0, col0 + cols).
struct Window {
  int row0 = 0;
  int col0 = 0;
  int rows = 0;
  int cols = 0;

  static Window full(const FeatureMap& m) { return {0, 0, m.height, m.width}; }
  /// size x size window around a cell, clipped to the map.
  static Window centered(const FeatureMap& m, int center_row, int center_col, int size);
  bool operator==(const Window&) const = default;
};

/// Softmax over a window of a map; probabilities are row-major over the window.
struct MatchDistribution {
  Window window;
  std::vector<double> probabilities;
  PixelCoord query;

  GridCoord cell_coord(std::size_t k) const {
    return {static_cast<double>(window.row0 + static_cast<int>(k) / window.cols),
            static_cast<double>(window.col0 + static_cast<int>(k) % window.cols)};
  }
};

struct MatchResult {
  PixelCoord query;
  PixelCoord predicted;
  double variance = 0.0;  // pixels^2 in the target image
  double weight = 1.0;
  bool low_confidence = false;
};

enum class WindowCenter { expectation, argmax };

struct MatchConfig {
  int window = 9;
  /// Scale applied to descriptor inner products before the softmax.
  double inverse_temperature = 1.0;
  /// Uncertainty-to-weight scale, image pixels.
  double sigma0_px = 4.0;
  double confidence_threshold = 0.5;
  WindowCenter center = WindowCenter::expectation;
};

/// Bilinear descriptor lookup; coordinates are clamped to the grid.
std::vector<double> sample_descriptor(const FeatureMap& m, const GridCoord& g);

/// Softmax of inner products between `descriptor` and every cell of `window` in `target`.
MatchDistribution descriptor_distribution(std::span<const double> descriptor, const FeatureMap& target,
                                          const Window& window, double inverse_temperature = 1.0);

/// p(x | query, m1, m2) over all cells of m2. The query is an image pixel of m1.
MatchDistribution correspondence_distribution(const PixelCoord& query, const FeatureMap& m1,
                                              const FeatureMap& m2, double inverse_temperature = 1.0);

GridCoord expected_correspondence(const MatchDistribution& dist);

struct ExpectationWithGradient {
  GridCoord value;
  /// d value / d logit_k for each window cell k.
  std::vector<double> d_row;
  std::vector<double> d_col;
};
ExpectationWithGradient expected_correspondence_with_gradient(const MatchDistribution& dist);

/// Second moment about the expectation, cell units squared.
double distribution_variance(const MatchDistribution& dist, const GridCoord& expectation);

/// 1 / (1 + variance / sigma0^2), in (0, 1].
double uncertainty_weight(double variance, double sigma0);

std::size_t argmax_cell(const MatchDistribution& dist);

struct LevelMaps {
  FeatureMap coarse;
  FeatureMap fine;
};

struct CoarseToFineResult {
  MatchResult coarse;
  MatchResult fine;
  Window fine_window;
};

/// Full-map matching on the coarse level, then windowed matching on the fine
/// level around the coarse prediction. Predictions are image pixels.
CoarseToFineResult coarse_to_fine_match(const PixelCoord& query, const FeatureMap& m1_coarse,
                                        const FeatureMap& m2_coarse, const FeatureMap& m1_fine,
                                        const FeatureMap& m2_fine, const MatchConfig& cfg = {});

/// Fine window position for a coarse-level distribution.
Window fine_window_for(const MatchDistribution& coarse, const FeatureMap& coarse_map,
                       const FeatureMap& fine_map, const MatchConfig& cfg);

/// One result per keypoint, in input order.
std::vector<MatchResult> match_keypoints(std::span<const PixelCoord> keypoints, const LevelMaps& image1,
                                         const LevelMaps& image2, const MatchConfig& cfg = {});

struct CoAttention {
  FeatureMap attended;
  /// Row-major |g cells| x |h cells| attention matrix.
  std::vector<double> attention;
};

/// g_hat_i = sum_j softmax_j(g_i . h_j) h_j; output has g's grid and h's channels.
CoAttention co_attention_full(const FeatureMap& g, const FeatureMap& h);
FeatureMap co_attention(const FeatureMap& g, const FeatureMap& h);

/// Reverse pass of co_attention_full; accumulates into d_g and d_h.
void co_attention_backward(const FeatureMap& g, const FeatureMap& h, const CoAttention& fwd,
                           const FeatureMap& d_attended, FeatureMap& d_g, FeatureMap& d_h);

FeatureMap concat_channels(const FeatureMap& a, const FeatureMap& b);

// Differentiable soft-argmax used by training.

/// Forward record of one query descriptor matched against a window of a map.
struct SoftArgmaxTrace {
  GridCoord query;
  std::vector<double> descriptor;
  MatchDistribution distribution;
  ExpectationWithGradient expectation;
};

SoftArgmaxTrace soft_argmax_forward(const FeatureMap& source, const GridCoord& query,
                                    const FeatureMap& target, const Window& window,
                                    double inverse_temperature);

/// Pushes dL/d(expectation) back into both maps; returns dL/d(query position).
/// The query gradient is zero along any axis where the lookup was clamped.
GridCoord soft_argmax_backward(const SoftArgmaxTrace& trace, const FeatureMap& source,
                               const FeatureMap& target, double inverse_temperature,
                               const GridCoord& d_expectation, FeatureMap& d_source,
                               FeatureMap& d_target);

/// CSV: query_u,query_v,pred_u,pred_v,variance,weight,low_confidence
void write_matches_csv(const std::filesystem::path& path, std::span<const MatchResult> matches);
std::vector<MatchResult> read_matches_csv(const std::filesystem::path& path);

}  // namespace sonic
