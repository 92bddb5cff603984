#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "sonic/descriptor.hpp"
#include "sonic/epipolar.hpp"
#include "sonic/matching.hpp"
#include "sonic/simulator.hpp"

namespace sonic {

enum class OptimizerKind { sgd, adam };

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_pairs = 4;
  int epochs = 10;
  LossWeights loss_weights;
  int keypoints_per_frame = 32;
  OptimizerKind optimizer = OptimizerKind::adam;
  std::size_t arc_samples = kDefaultArcSamples;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  /// Softmax scale shared by training and inference (descriptors are unit length).
  double inverse_temperature = 20.0;
  int window = 9;
  double sigma0_px = 4.0;
  int nms_radius = 2;
  std::uint64_t seed = 0;
  int jobs = 1;

  /// Throws Errc::config on out-of-range values.
  void validate() const;
  MatchConfig match_config() const;
};

/// Strongest Harris corners of the image, keypoints_per_frame at most.
std::vector<PixelCoord> training_keypoints(const PolarImage& image, const TrainConfig& cfg);

/// Values pinned at a base point so finite differences see a smooth objective.
struct ObjectiveFreeze {
  std::vector<double> coarse_weights;
  std::vector<double> fine_weights;
  std::vector<Window> fine_forward_windows;
  std::vector<Window> fine_backward_windows;
};

struct PairObjective {
  double loss = 0.0;
  /// Laid out like ModelWeights::flatten(); empty when not requested.
  std::vector<double> gradient;
  std::size_t used_keypoints = 0;
  double mean_epipolar = 0.0;  // unweighted means over used keypoints and levels
  double mean_cyclic = 0.0;
  ObjectiveFreeze freeze;
};

/// Uncertainty-reweighted joint loss summed over the coarse and fine levels:
/// per level, sum_i w_i (a L_ep,i + b L_cy,i) / sum_i w_i with the weights held
/// constant. Keypoints whose contour misses the frustum are skipped; if none
/// remain, throws Errc::degenerate_batch.
PairObjective pair_objective(const ScenePair& pair, std::span<const PixelCoord> keypoints,
                             const ModelWeights& weights, const TrainConfig& cfg, bool with_gradient = true,
                             const ObjectiveFreeze* freeze = nullptr);

struct OptimizerState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
};

struct TrainingSample {
  const ScenePair* pair = nullptr;
  std::vector<PixelCoord> keypoints;
};

struct StepResult {
  double loss = 0.0;
  std::vector<double> gradient;
};

/// Mean loss and gradient over the batch, then one optimizer update. Per-pair
/// terms are reduced in batch order, so results do not depend on cfg.jobs.
StepResult train_step(std::span<const TrainingSample> batch, ModelWeights& weights, OptimizerState& opt,
                      const TrainConfig& cfg);
StepResult train_step(const ScenePair& pair, std::span<const PixelCoord> keypoints, ModelWeights& weights,
                      OptimizerState& opt, const TrainConfig& cfg);

struct TrainResult {
  ModelWeights weights;
  OptimizerState optimizer;
  std::vector<double> epoch_loss;
};

using EpochCallback = std::function<void(int epoch, double mean_loss)>;

/// Shuffles pairs per epoch from cfg.seed; pairs without usable keypoints are skipped.
TrainResult train(std::span<const ScenePair> pairs, ModelWeights initial, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

}  // namespace sonic
