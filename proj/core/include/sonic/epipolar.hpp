#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <span>
#include <vector>

#include "sonic/sonar_model.hpp"

namespace sonic {

/// Rigid transform taking points from sonar frame a into sonar frame b:
/// p_b = rotation * p_a + translation.
struct RelativePose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static RelativePose identity() { return {}; }

  /// Pose of frame b relative to frame a given both frames' sensor-to-world transforms.
  static RelativePose between(const Eigen::Matrix3d& rot_world_a, const Eigen::Vector3d& pos_world_a,
                              const Eigen::Matrix3d& rot_world_b, const Eigen::Vector3d& pos_world_b);

  CartesianPoint apply(const CartesianPoint& p) const { return rotation * p + translation; }
  RelativePose inverse() const;

  /// Throws Errc::domain unless the rotation is orthonormal with det +1 (tol 1e-10).
  void validate(double tol = 1e-10) const;
};

/// R = Rz(yaw) * Ry(pitch) * Rx(roll). Positive pitch tips the x axis toward -z.
Eigen::Matrix3d rotation_zyx(double yaw, double pitch, double roll);

struct EulerZYX {
  double yaw = 0.0;
  double pitch = 0.0;
  double roll = 0.0;
};
EulerZYX euler_zyx(const Eigen::Matrix3d& rotation);

struct ContourSample {
  PolarPoint point;
  double elevation = 0.0;
  bool in_frustum = false;
  /// False when the transformed arc point landed on the sensor origin.
  bool valid = true;
};

struct EpipolarContour {
  std::vector<ContourSample> samples;
  std::size_t n_in_frustum = 0;
};

struct PolarGradient {
  double d_range = 0.0;
  double d_bearing = 0.0;
};

struct LossValue {
  double value = 0.0;
  PolarGradient gradient;
};

struct EpipolarLossValue {
  double value = 0.0;
  PolarGradient gradient;
  std::size_t argmin = 0;
};

struct LossWeights {
  double w_epipolar = 0.7;
  double w_cyclic = 0.3;

  double lambda() const { return w_cyclic / w_epipolar; }
};

inline constexpr std::size_t kDefaultArcSamples = 64;

/// Points along the elevation arc of (range, bearing), elevations uniformly
/// spaced over [phi_min, phi_max] inclusive.
std::vector<CartesianPoint> sample_elevation_arc(double range, double bearing,
                                                 const SonarIntrinsics& intr,
                                                 std::size_t n_samples = kDefaultArcSamples);

/// Elevation arc of a frame-a pixel, moved into frame b and projected.
EpipolarContour epipolar_contour(double range, double bearing, const RelativePose& pose,
                                 const SonarIntrinsics& intr,
                                 std::size_t n_samples = kDefaultArcSamples);

/// Law-of-cosines squared chord between two planar polar points.
double polar_sq_distance(const PolarPoint& a, const PolarPoint& b);

/// Gradient of polar_sq_distance with respect to its first argument.
PolarGradient polar_sq_distance_gradient(const PolarPoint& a, const PolarPoint& b);

/// Minimum squared polar distance from the prediction to the valid contour samples;
/// ties resolve to the lowest-elevation sample.
EpipolarLossValue epipolar_loss(const PolarPoint& predicted, const EpipolarContour& contour);

LossValue cyclic_loss(const PolarPoint& query, const PolarPoint& roundtrip);

double joint_loss(std::span<const double> epipolar, std::span<const double> cyclic,
                  const LossWeights& weights = {});

}  // namespace sonic
