#include "sonic/sonar_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json_detail.hpp"
#include "sonic/error.hpp"

namespace sonic {

double wrap_angle(double angle) {
  if (angle >= -kPi && angle < kPi) return angle;
  double a = std::fmod(angle + kPi, 2.0 * kPi);
  if (a < 0.0) a += 2.0 * kPi;
  return a - kPi;
}

void SonarIntrinsics::validate() const {
  if (!(r_min < r_max) || r_min < 0.0)
    throw Error(Errc::config, "intrinsics: require 0 <= r_min < r_max");
  if (!(theta_min < theta_max)) throw Error(Errc::config, "intrinsics: require theta_min < theta_max");
  if (!(phi_min < phi_max)) throw Error(Errc::config, "intrinsics: require phi_min < phi_max");
  if (n_range < 1 || n_bearing < 1) throw Error(Errc::config, "intrinsics: bin counts must be >= 1");
}

SonarIntrinsics SonarIntrinsics::resampled(int range_bins, int bearing_bins) const {
  SonarIntrinsics out = *this;
  out.n_range = range_bins;
  out.n_bearing = bearing_bins;
  return out;
}

CartesianPoint spherical_to_cartesian(const SphericalPoint& p) {
  const double cphi = std::cos(p.elevation);
  return {p.range * std::cos(p.bearing) * cphi, p.range * std::sin(p.bearing) * cphi,
          -p.range * std::sin(p.elevation)};
}

SphericalPoint cartesian_to_spherical(const CartesianPoint& p) {
  const double r = p.norm();
  if (!(r > 0.0)) throw Error(Errc::degenerate_point, "cartesian_to_spherical: zero-norm point");
  const double planar = std::hypot(p.x(), p.y());
  return {r, std::atan2(p.y(), p.x()), std::atan2(-p.z(), planar)};
}

PolarPoint project_to_image_plane(const CartesianPoint& p) {
  const double r = p.norm();
  if (!(r > 0.0)) throw Error(Errc::degenerate_point, "project_to_image_plane: zero-norm point");
  return {r, std::atan2(p.y(), p.x())};
}

PixelCoord polar_to_pixel(const PolarPoint& p, const SonarIntrinsics& intr) {
  return {(p.range - intr.r_min) / (intr.r_max - intr.r_min) * intr.n_range,
          (p.bearing - intr.theta_min) / (intr.theta_max - intr.theta_min) * intr.n_bearing};
}

PolarPoint pixel_to_polar(const PixelCoord& px, const SonarIntrinsics& intr) {
  return {intr.r_min + px.u / intr.n_range * (intr.r_max - intr.r_min),
          intr.theta_min + px.v / intr.n_bearing * (intr.theta_max - intr.theta_min)};
}

bool in_frustum(const SphericalPoint& p, const SonarIntrinsics& intr) {
  return p.range >= intr.r_min && p.range <= intr.r_max && p.bearing >= intr.theta_min &&
         p.bearing <= intr.theta_max && p.elevation >= intr.phi_min && p.elevation <= intr.phi_max;
}

bool in_image(const PixelCoord& px, const SonarIntrinsics& intr) {
  return px.u >= 0.0 && px.u < intr.n_range && px.v >= 0.0 && px.v < intr.n_bearing;
}

double pixel_equivalent_sq_distance(const SonarIntrinsics& intr) {
  const double side = std::max(intr.range_bin(), intr.r_max * intr.bearing_bin());
  return side * side;
}

namespace {

SonarIntrinsics make_intrinsics(double r_min, double r_max, double azimuth_deg, double elevation_deg,
                                int n_range, int n_bearing) {
  SonarIntrinsics intr;
  intr.r_min = r_min;
  intr.r_max = r_max;
  intr.theta_min = -deg2rad(azimuth_deg / 2.0);
  intr.theta_max = deg2rad(azimuth_deg / 2.0);
  intr.phi_min = -deg2rad(elevation_deg / 2.0);
  intr.phi_max = deg2rad(elevation_deg / 2.0);
  intr.n_range = n_range;
  intr.n_bearing = n_bearing;
  return intr;
}

}  // namespace

SonarIntrinsics intrinsics_preset(std::string_view name) {
  // Oculus M1200d low-frequency mode: 130 deg azimuth, 20 deg elevation, 10 m.
  if (name == "m1200d-lf") return make_intrinsics(0.0, 10.0, 130.0, 20.0, 512, 512);
  if (name == "m1200d-lf-64") return make_intrinsics(0.0, 10.0, 130.0, 20.0, 64, 64);
  // DIDSON: 96 beams over ~29 deg, 512 range samples.
  if (name == "didson") return make_intrinsics(1.0, 10.0, 28.8, 14.0, 512, 96);
  throw Error(Errc::config, "unknown intrinsics preset '" + std::string(name) + "'");
}

std::vector<std::string> intrinsics_preset_names() { return {"m1200d-lf", "m1200d-lf-64", "didson"}; }

namespace detail {

void reject_unknown_keys(const Json& obj, std::initializer_list<std::string_view> known,
                         std::string_view context) {
  if (!obj.is_object()) throw Error(Errc::config, std::string(context) + ": expected a JSON object");
  for (const auto& [key, value] : obj.items()) {
    bool ok = false;
    for (auto k : known) ok = ok || key == k;
    if (!ok) throw Error(Errc::config, std::string(context) + ": unknown key '" + key + "'");
  }
}

Json intrinsics_to_json_value(const SonarIntrinsics& intr) {
  return Json{{"r_min", intr.r_min},
              {"r_max", intr.r_max},
              {"theta_min_deg", rad2deg(intr.theta_min)},
              {"theta_max_deg", rad2deg(intr.theta_max)},
              {"phi_min_deg", rad2deg(intr.phi_min)},
              {"phi_max_deg", rad2deg(intr.phi_max)},
              {"n_range", intr.n_range},
              {"n_bearing", intr.n_bearing}};
}

SonarIntrinsics intrinsics_from_json_value(const Json& j) {
  reject_unknown_keys(j,
                      {"r_min", "r_max", "theta_min_deg", "theta_max_deg", "phi_min_deg",
                       "phi_max_deg", "n_range", "n_bearing"},
                      "intrinsics");
  SonarIntrinsics intr;
  try {
    intr.r_min = j.at("r_min").get<double>();
    intr.r_max = j.at("r_max").get<double>();
    intr.theta_min = deg2rad(j.at("theta_min_deg").get<double>());
    intr.theta_max = deg2rad(j.at("theta_max_deg").get<double>());
    intr.phi_min = deg2rad(j.at("phi_min_deg").get<double>());
    intr.phi_max = deg2rad(j.at("phi_max_deg").get<double>());
    intr.n_range = j.at("n_range").get<int>();
    intr.n_bearing = j.at("n_bearing").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::config, std::string("intrinsics: ") + e.what());
  }
  intr.validate();
  return intr;
}

}  // namespace detail

SonarIntrinsics parse_intrinsics(std::string_view json_text) {
  detail::Json j;
  try {
    j = detail::Json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::config, std::string("intrinsics: ") + e.what());
  }
  return detail::intrinsics_from_json_value(j);
}

std::string intrinsics_to_json(const SonarIntrinsics& intr) {
  return detail::intrinsics_to_json_value(intr).dump(2);
}

SonarIntrinsics resolve_intrinsics(const std::string& preset_or_path) {
  for (const auto& name : intrinsics_preset_names())
    if (name == preset_or_path) return intrinsics_preset(name);
  std::ifstream in(preset_or_path);
  if (!in) throw Error(Errc::io, "cannot open intrinsics file '" + preset_or_path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_intrinsics(ss.str());
}

}  // namespace sonic
