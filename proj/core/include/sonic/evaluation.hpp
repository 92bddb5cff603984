#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "sonic/epipolar.hpp"
#include "sonic/image.hpp"
#include "sonic/matching.hpp"
#include "sonic/simulator.hpp"
#include "sonic/sonar_model.hpp"

namespace sonic {

struct Keypoint {
  PixelCoord pixel;
  double score = 0.0;
};

struct DetectorConfig {
  int max_count = 64;
  int nms_radius = 3;
  /// Responses below this fraction of the image maximum are discarded.
  double relative_threshold = 0.01;
  double harris_k = 0.04;
  /// Pixels this close to the border never fire.
  int border = 2;
};

/// Harris response on the polar grid, square non-maximum suppression, then the
/// strongest max_count sorted by score (desc), u, v. Keypoints sit at bin centers.
std::vector<Keypoint> detect_keypoints(const PolarImage& image, const DetectorConfig& cfg = {});
std::vector<Keypoint> detect_keypoints(const PolarImage& image, int max_count, int nms_radius);

std::vector<PixelCoord> keypoint_pixels(std::span<const Keypoint> keypoints);

/// Pixel distance from `point` (image b) to the polyline through the valid
/// contour samples of `query` (image a).
double contour_distance_px(const PixelCoord& query, const PixelCoord& point, const RelativePose& pose,
                           const SonarIntrinsics& intr, std::size_t arc_samples = kDefaultArcSamples);

struct InlierReport {
  double ratio = 0.0;
  std::size_t inliers = 0;
  std::vector<bool> inlier;
  std::vector<double> distance_px;
};

/// A match is an inlier when its prediction lies within threshold_px of the
/// ground-truth contour. Throws Errc::undefined_ratio on an empty list.
InlierReport classify_inliers(std::span<const MatchResult> matches, const RelativePose& gt_pose,
                              const SonarIntrinsics& intr, double threshold_px,
                              std::size_t arc_samples = kDefaultArcSamples);

struct PruneResult {
  std::vector<MatchResult> kept;
  std::vector<bool> keep;
  std::vector<double> distance_px;
  std::size_t pruned = 0;
  /// Fewer than 3 matches: nothing was tested.
  bool skipped = false;
};

/// Standardizes contour distances under the prior pose over this match set
/// (population standard deviation) and drops matches with z > z_threshold.
PruneResult z_test_prune(std::span<const MatchResult> matches, const RelativePose& prior_pose,
                         const SonarIntrinsics& intr, double z_threshold = 2.0,
                         std::size_t arc_samples = kDefaultArcSamples);

// Gauss-Newton

struct ResidualEval {
  Eigen::VectorXd residual;  // whitened
  Eigen::MatrixXd jacobian;
};
using ResidualFunction = std::function<ResidualEval(const Eigen::VectorXd&)>;
/// Maps a raw updated state back onto the feasible set (wrapping, clamping).
using StateProjection = std::function<void(Eigen::VectorXd&)>;

struct GaussNewtonConfig {
  int max_iters = 50;
  /// Stops once the update norm drops below tol.
  double tol = 1e-10;
  bool levenberg_fallback = true;
  /// Relative eigenvalue floor below which the normal matrix counts as singular.
  double singular_threshold = 1e-12;
};

struct GaussNewtonResult {
  Eigen::VectorXd state;
  double cost = 0.0;  // squared norm of the whitened residual
  /// Accepted updates at or above tol; a final negligible update is not counted.
  int iterations = 0;
  bool converged = false;
  bool damped = false;
  std::vector<double> cost_trace;
};

/// Delta = (A^T A)^-1 A^T b with A the whitened Jacobian and b = -residual.
/// Singular or cost-increasing steps retry with Levenberg damping when enabled;
/// otherwise a singular system throws Errc::singular_system.
GaussNewtonResult gauss_newton_solve(const ResidualFunction& f, const Eigen::VectorXd& initial,
                                     const GaussNewtonConfig& cfg = {}, const StateProjection& project = {});

// Two-view bundle adjustment

/// Pose of sonar b in sonar a's gravity-level frame (origin at a, x along a's
/// heading, z up). z, pitch and roll are held fixed during adjustment.
struct PlanarPoseEstimate {
  double x = 0.0;
  double y = 0.0;
  double yaw = 0.0;
  double z = 0.0;
  double pitch = 0.0;
  double roll = 0.0;
};

struct BundlePrior {
  PlanarPoseEstimate b;
  double pitch_a = 0.0;
  double roll_a = 0.0;
};

BundlePrior bundle_prior(const SensorPose& a, const SensorPose& b);
RelativePose relative_pose(const BundlePrior& prior);

struct PolarMatch {
  PolarPoint a;
  PolarPoint b;
};

struct BundleNoiseModel {
  /// Measurement sigmas; 0 selects one bin of the intrinsics.
  double sigma_range = 0.0;
  double sigma_bearing = 0.0;
  double prior_sigma_xy = 10.0;
  double prior_sigma_yaw = kPi;
};

struct BundleResult {
  PlanarPoseEstimate pose;
  std::vector<double> elevations;
  GaussNewtonResult solve;
};

/// Jointly refines (x, y, yaw) of b and one elevation per landmark anchored at
/// its frame-a (r, theta). Elevations start at 0 and stay inside the frustum
/// (the solver state holds psi, phi = mid + half * sin(psi)). Restarts re-seed
/// them from a scan along each arc under the refined pose and from mirrored
/// signs while the cost drops. `solve.iterations` sums over all rounds.
/// Throws Errc::degenerate_geometry with fewer than 3 matches.
BundleResult two_view_bundle_adjust(std::span<const PolarMatch> matches, const BundlePrior& prior,
                                    const SonarIntrinsics& intr, const BundleNoiseModel& noise = {},
                                    const GaussNewtonConfig& solver = {});

struct PoseError {
  double translation = 0.0;
  double rotation = 0.0;
};
PoseError pose_error(const PlanarPoseEstimate& estimate, const PlanarPoseEstimate& truth);

std::vector<PolarMatch> to_polar_matches(std::span<const MatchResult> matches, const SonarIntrinsics& intr);

// Raw-patch correlation baseline

struct PatchBaselineConfig {
  int coarse_factor = 8;
  int fine_factor = 2;
  int coarse_patch_radius = 2;
  int fine_patch_radius = 3;
};

/// Mean-subtracted, L2-normalized intensity patches per cell, so inner
/// products are normalized cross-correlations.
FeatureMap patch_descriptor_map(const PolarImage& image, int factor, int patch_radius, FeatureLevel level);
LevelMaps patch_baseline_maps(const PolarImage& image, const PatchBaselineConfig& cfg = {});

}  // namespace sonic
