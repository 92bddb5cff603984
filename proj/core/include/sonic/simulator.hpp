#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "sonic/epipolar.hpp"
#include "sonic/image.hpp"
#include "sonic/sonar_model.hpp"

namespace sonic {

/// Point reflector in the world frame (x, y horizontal, z up).
struct Landmark {
  CartesianPoint position = CartesianPoint::Zero();
  double reflectivity = 1.0;
  double spot_radius = 0.2;  // meters
};

/// Horizontal seabed at world height `height`.
struct FloorPlane {
  double height = 0.0;
  double reflectivity = 0.1;
};

struct Scene {
  std::vector<Landmark> landmarks;
  std::optional<FloorPlane> floor;
  std::uint64_t seed = 0;

  /// Throws Errc::config on an empty scene or reflectivity outside (0, 1].
  void validate() const;
};

/// Sensor-to-world placement. Positive pitch points the sensor down.
struct SensorPose {
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
  double yaw = 0.0;
  double pitch = 0.0;
  double roll = 0.0;

  Eigen::Matrix3d rotation() const { return rotation_zyx(yaw, pitch, roll); }
  CartesianPoint world_to_sensor(const CartesianPoint& world) const;
  CartesianPoint sensor_to_world(const CartesianPoint& sensor) const;
};

/// Pose of `b` relative to `a` (maps frame-a points into frame b).
RelativePose relative_pose(const SensorPose& a, const SensorPose& b);

struct NoiseConfig {
  double speckle_strength = 0.0;
  double additive_sigma = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Intensity at polar offset d (meters) from a spot: exp(-d^2 / (2 radius^2)).
/// Elevation falloff is cos^2((phi / phi_edge) * pi / 2), phi_edge being the
/// frustum limit on phi's side.
double elevation_falloff(double elevation, const SonarIntrinsics& intr);

PolarImage render(const Scene& scene, const SensorPose& pose, const SonarIntrinsics& intr,
                  const NoiseConfig& noise);

struct SceneConfig {
  int objects = 6;
  int points_per_object = 4;
  double object_radius = 0.4;
  int isolated_points = 12;
  double reflectivity_min = 0.4;
  double spot_radius_min = 0.15;
  double spot_radius_max = 0.3;
  /// Landmarks are drawn at ranges inside [r_min + margin, r_max - margin].
  double range_margin = 0.5;
  std::optional<FloorPlane> floor;
};

/// Landmarks drawn inside the frustum of `around`, clustered into objects plus
/// isolated points.
Scene random_scene(const SceneConfig& cfg, const SensorPose& around, const SonarIntrinsics& intr,
                   std::uint64_t seed);

/// Sampling envelope for pair generation. Pose a is the base pose plus a jitter
/// (altitude and pitch clamped to their bands); pose b is pose a plus an offset
/// expressed in a's gravity-level frame. Each entry is a symmetric bound.
struct OffsetConfig {
  double jitter_xy = 0.0;
  double jitter_yaw = 0.0;
  double jitter_altitude = 0.0;
  double jitter_pitch = 0.0;

  double dx = 0.0;
  double dy = 0.0;
  double dz = 0.0;
  double dyaw = 0.0;
  double dpitch = 0.0;
  double droll = 0.0;

  double altitude_min = 1.0;
  double altitude_max = 4.0;
  double pitch_min = deg2rad(10.0);
  double pitch_max = deg2rad(20.0);

  static OffsetConfig none() { return {}; }
  /// Mixed small/large variation envelope used for the desk-scale datasets.
  static OffsetConfig desk();
};

/// Polar coordinates of one landmark in both images.
struct LandmarkObservation {
  std::size_t id = 0;
  PolarPoint a;
  PolarPoint b;
  bool visible_a = false;
  bool visible_b = false;
  bool covisible() const { return visible_a && visible_b; }
};

struct ScenePair {
  PolarImage image_a;
  PolarImage image_b;
  RelativePose pose_ab;
  SonarIntrinsics intrinsics;
  SensorPose pose_a;
  SensorPose pose_b;
  /// Landmarks visible in at least one image, in scene order.
  std::vector<LandmarkObservation> landmarks;
  std::uint64_t scene_seed = 0;
  std::uint64_t noise_seed_a = 0;
  std::uint64_t noise_seed_b = 0;
};

/// Observation record of every landmark for a pose pair (no rendering).
std::vector<LandmarkObservation> observe_landmarks(const Scene& scene, const SensorPose& a,
                                                   const SensorPose& b, const SonarIntrinsics& intr);

/// Pair i draws its poses and noise streams from (noise.seed, i) only.
std::vector<ScenePair> generate_trajectory_pairs(const Scene& scene, const SensorPose& base,
                                                 const OffsetConfig& offsets, const SonarIntrinsics& intr,
                                                 const NoiseConfig& noise, std::size_t count);

struct VariationThresholds {
  double yaw = deg2rad(5.0);
  double translation = 1.5;
};

/// Planar motion of b in a's gravity-level frame: (dx, dy, dyaw).
Eigen::Vector3d planar_motion(const SensorPose& a, const SensorPose& b);

/// Small when |dyaw| < yaw and |dx|, |dy| < translation (strict); large otherwise.
bool is_small_variation(const ScenePair& pair, const VariationThresholds& t = {});

struct DatasetSplit {
  std::vector<std::size_t> small;
  std::vector<std::size_t> large;
};
DatasetSplit split_dataset(std::span<const ScenePair> pairs, const VariationThresholds& t = {});

/// Many scenes, each contributing `pairs_per_scene` pairs around its own base
/// pose. Held-out pairs come from scenes never used for the training pairs.
struct DatasetSpec {
  std::size_t pairs = 200;
  std::size_t held_out = 50;
  std::size_t pairs_per_scene = 10;
  SonarIntrinsics intrinsics;
  SceneConfig scene;
  OffsetConfig offsets = OffsetConfig::desk();
  /// Noise strength; seeds are derived from `seed`.
  NoiseConfig noise{0.3, 0.02, 0};
  std::uint64_t seed = 0;

  void validate() const;
};

struct GeneratedDataset {
  std::vector<ScenePair> pairs;  // training pairs first, then held-out pairs
  std::size_t train_count = 0;
};

GeneratedDataset generate_dataset(const DatasetSpec& spec, int jobs = 1);

/// splitmix64 step; used to derive independent per-frame seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

// Dataset directory: a.img, b.img, pair.json, landmarks.csv.
void write_pair(const std::filesystem::path& dir, const ScenePair& pair);
ScenePair read_pair(const std::filesystem::path& dir);

}  // namespace sonic
