#include "sonic/epipolar.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "sonic/error.hpp"

namespace sonic {

RelativePose RelativePose::between(const Eigen::Matrix3d& rot_world_a,
                                   const Eigen::Vector3d& pos_world_a,
                                   const Eigen::Matrix3d& rot_world_b,
                                   const Eigen::Vector3d& pos_world_b) {
  RelativePose pose;
  pose.rotation = rot_world_b.transpose() * rot_world_a;
  pose.translation = rot_world_b.transpose() * (pos_world_a - pos_world_b);
  return pose;
}

RelativePose RelativePose::inverse() const {
  RelativePose inv;
  inv.rotation = rotation.transpose();
  inv.translation = -(inv.rotation * translation);
  return inv;
}

void RelativePose::validate(double tol) const {
  const double ortho = (rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  const double det = rotation.determinant();
  if (!(ortho <= tol) || !(std::abs(det - 1.0) <= tol))
    throw Error(Errc::domain, "relative pose rotation is not a proper rotation");
  if (!translation.allFinite()) throw Error(Errc::domain, "relative pose translation is not finite");
}

Eigen::Matrix3d rotation_zyx(double yaw, double pitch, double roll) {
  return (Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitZ()) *
          Eigen::AngleAxisd(pitch, Eigen::Vector3d::UnitY()) *
          Eigen::AngleAxisd(roll, Eigen::Vector3d::UnitX()))
      .toRotationMatrix();
}

EulerZYX euler_zyx(const Eigen::Matrix3d& r) {
  EulerZYX e;
  e.pitch = std::asin(std::clamp(-r(2, 0), -1.0, 1.0));
  e.yaw = std::atan2(r(1, 0), r(0, 0));
  e.roll = std::atan2(r(2, 1), r(2, 2));
  return e;
}

std::vector<CartesianPoint> sample_elevation_arc(double range, double bearing,
                                                 const SonarIntrinsics& intr, std::size_t n_samples) {
  if (n_samples < 2) throw Error(Errc::domain, "sample_elevation_arc: need at least 2 samples");
  if (range < intr.r_min || range > intr.r_max || bearing < intr.theta_min || bearing > intr.theta_max)
    throw Error(Errc::domain, "sample_elevation_arc: (range, bearing) outside the frustum");
  std::vector<CartesianPoint> arc;
  arc.reserve(n_samples);
  const double step = (intr.phi_max - intr.phi_min) / static_cast<double>(n_samples - 1);
  for (std::size_t k = 0; k < n_samples; ++k) {
    const double phi = k + 1 == n_samples ? intr.phi_max : intr.phi_min + step * static_cast<double>(k);
    arc.push_back(spherical_to_cartesian({range, bearing, phi}));
  }
  return arc;
}

EpipolarContour epipolar_contour(double range, double bearing, const RelativePose& pose,
                                 const SonarIntrinsics& intr, std::size_t n_samples) {
  const auto arc = sample_elevation_arc(range, bearing, intr, n_samples);
  const double step = (intr.phi_max - intr.phi_min) / static_cast<double>(n_samples - 1);
  EpipolarContour contour;
  contour.samples.reserve(arc.size());
  for (std::size_t k = 0; k < arc.size(); ++k) {
    ContourSample s;
    s.elevation = k + 1 == arc.size() ? intr.phi_max : intr.phi_min + step * static_cast<double>(k);
    const CartesianPoint moved = pose.apply(arc[k]);
    if (!(moved.norm() > 0.0)) {
      s.valid = false;
      contour.samples.push_back(s);
      continue;
    }
    s.point = project_to_image_plane(moved);
    // The round trip through Cartesian coordinates can push arc endpoints a
    // few ulps past the elevation limits.
    auto sph = cartesian_to_spherical(moved);
    if (std::abs(sph.elevation - intr.phi_min) < 1e-12) sph.elevation = intr.phi_min;
    if (std::abs(sph.elevation - intr.phi_max) < 1e-12) sph.elevation = intr.phi_max;
    s.in_frustum = in_frustum(sph, intr);
    if (s.in_frustum) ++contour.n_in_frustum;
    contour.samples.push_back(s);
  }
  return contour;
}

double polar_sq_distance(const PolarPoint& a, const PolarPoint& b) {
  return a.range * a.range + b.range * b.range -
         2.0 * a.range * b.range * std::cos(a.bearing - b.bearing);
}

PolarGradient polar_sq_distance_gradient(const PolarPoint& a, const PolarPoint& b) {
  const double d = a.bearing - b.bearing;
  return {2.0 * a.range - 2.0 * b.range * std::cos(d), 2.0 * a.range * b.range * std::sin(d)};
}

EpipolarLossValue epipolar_loss(const PolarPoint& predicted, const EpipolarContour& contour) {
  EpipolarLossValue best;
  best.value = std::numeric_limits<double>::infinity();
  bool found = false;
  for (std::size_t k = 0; k < contour.samples.size(); ++k) {
    const auto& s = contour.samples[k];
    if (!s.valid) continue;
    const double d = polar_sq_distance(predicted, s.point);
    if (d < best.value) {
      best.value = d;
      best.argmin = k;
      found = true;
    }
  }
  if (!found) throw Error(Errc::empty_contour, "epipolar_loss: contour has no valid samples");
  best.gradient = polar_sq_distance_gradient(predicted, contour.samples[best.argmin].point);
  return best;
}

LossValue cyclic_loss(const PolarPoint& query, const PolarPoint& roundtrip) {
  return {polar_sq_distance(roundtrip, query), polar_sq_distance_gradient(roundtrip, query)};
}

double joint_loss(std::span<const double> epipolar, std::span<const double> cyclic,
                  const LossWeights& weights) {
  if (epipolar.size() != cyclic.size())
    throw Error(Errc::shape, "joint_loss: " + std::to_string(epipolar.size()) + " epipolar vs " +
                                 std::to_string(cyclic.size()) + " cyclic terms");
  double total = 0.0;
  for (std::size_t i = 0; i < epipolar.size(); ++i)
    total += weights.w_epipolar * epipolar[i] + weights.w_cyclic * cyclic[i];
  return total;
}

}  // namespace sonic
