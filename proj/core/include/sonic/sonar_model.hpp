#pragma once

#include <Eigen/Core>

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace sonic {

inline constexpr double kPi = 3.14159265358979323846;

inline constexpr double deg2rad(double deg) { return deg * kPi / 180.0; }
inline constexpr double rad2deg(double rad) { return rad * 180.0 / kPi; }

/// Wraps an angle into [-pi, pi).
double wrap_angle(double angle);

/// Range (m), azimuth/bearing (rad) and elevation (rad) in the sonar frame.
struct SphericalPoint {
  double range = 0.0;
  double bearing = 0.0;
  double elevation = 0.0;
};

/// Sonar frame: x forward, y left, z up.
using CartesianPoint = Eigen::Vector3d;

/// A point on the zero-elevation image plane, in range-bearing form.
struct PolarPoint {
  double range = 0.0;
  double bearing = 0.0;
};

/// Continuous image coordinate. u indexes range bins, v indexes bearing bins;
/// bin i spans [i, i + 1), so its center sits at i + 0.5.
struct PixelCoord {
  double u = 0.0;
  double v = 0.0;
};

struct SonarIntrinsics {
  double r_min = 0.0;
  double r_max = 10.0;
  double theta_min = -deg2rad(65.0);
  double theta_max = deg2rad(65.0);
  double phi_min = -deg2rad(10.0);
  double phi_max = deg2rad(10.0);
  int n_range = 512;
  int n_bearing = 512;

  /// Throws Errc::config when the frustum or bin counts are inconsistent.
  void validate() const;

  double range_bin() const { return (r_max - r_min) / n_range; }
  double bearing_bin() const { return (theta_max - theta_min) / n_bearing; }

  /// Same frustum, different discretization.
  SonarIntrinsics resampled(int range_bins, int bearing_bins) const;

  bool operator==(const SonarIntrinsics&) const = default;
};

CartesianPoint spherical_to_cartesian(const SphericalPoint& p);

/// Inverse of spherical_to_cartesian. Throws Errc::degenerate_point at the origin.
SphericalPoint cartesian_to_spherical(const CartesianPoint& p);

/// Maps a 3D point onto the zero-elevation plane: (|p|, atan2(y, x)).
/// Throws Errc::degenerate_point at the origin.
PolarPoint project_to_image_plane(const CartesianPoint& p);

PixelCoord polar_to_pixel(const PolarPoint& p, const SonarIntrinsics& intr);
PolarPoint pixel_to_polar(const PixelCoord& px, const SonarIntrinsics& intr);

/// Closed-interval frustum test on all three spherical coordinates.
bool in_frustum(const SphericalPoint& p, const SonarIntrinsics& intr);

/// True when the pixel lies inside [0, n_range) x [0, n_bearing).
bool in_image(const PixelCoord& px, const SonarIntrinsics& intr);

/// Squared metric size of one pixel at the far edge of the image: the larger
/// of the range bin and the bearing-bin arc length at r_max, squared.
double pixel_equivalent_sq_distance(const SonarIntrinsics& intr);

/// Named sensor configurations: "m1200d-lf", "m1200d-lf-64", "didson".
SonarIntrinsics intrinsics_preset(std::string_view name);
std::vector<std::string> intrinsics_preset_names();

/// JSON with keys r_min, r_max, theta_min_deg, theta_max_deg, phi_min_deg,
/// phi_max_deg, n_range, n_bearing. Unknown keys are rejected.
SonarIntrinsics parse_intrinsics(std::string_view json_text);
std::string intrinsics_to_json(const SonarIntrinsics& intr);

/// Accepts either a preset name or a path to a JSON file.
SonarIntrinsics resolve_intrinsics(const std::string& preset_or_path);

}  // namespace sonic
