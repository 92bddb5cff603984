#include "sonic/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include "json_detail.hpp"
#include "random_detail.hpp"
#include "sonic/error.hpp"
#include "sonic/parallel.hpp"

namespace sonic {

void Scene::validate() const {
  if (landmarks.empty()) throw Error(Errc::config, "scene: at least one landmark required");
  for (const auto& l : landmarks) {
    if (!(l.reflectivity > 0.0 && l.reflectivity <= 1.0))
      throw Error(Errc::config, "scene: landmark reflectivity must lie in (0, 1]");
    if (!(l.spot_radius > 0.0)) throw Error(Errc::config, "scene: spot radius must be positive");
    if (!l.position.allFinite()) throw Error(Errc::config, "scene: non-finite landmark position");
  }
  if (floor && !(floor->reflectivity > 0.0 && floor->reflectivity <= 1.0))
    throw Error(Errc::config, "scene: floor reflectivity must lie in (0, 1]");
}

void NoiseConfig::validate() const {
  if (!(speckle_strength >= 0.0 && speckle_strength <= 1.0))
    throw Error(Errc::config, "noise: speckle_strength must lie in [0, 1]");
  if (!(additive_sigma >= 0.0)) throw Error(Errc::config, "noise: additive_sigma must be >= 0");
}

CartesianPoint SensorPose::world_to_sensor(const CartesianPoint& world) const {
  return rotation().transpose() * (world - position);
}

CartesianPoint SensorPose::sensor_to_world(const CartesianPoint& sensor) const {
  return rotation() * sensor + position;
}

RelativePose relative_pose(const SensorPose& a, const SensorPose& b) {
  return RelativePose::between(a.rotation(), a.position, b.rotation(), b.position);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

double elevation_falloff(double elevation, const SonarIntrinsics& intr) {
  const double edge = elevation >= 0.0 ? intr.phi_max : -intr.phi_min;
  if (!(edge > 0.0)) return 1.0;
  const double c = std::cos(std::clamp(elevation / edge, -1.0, 1.0) * kPi / 2.0);
  return c * c;
}

namespace {

double row_range(int i, const SonarIntrinsics& intr) { return intr.r_min + (i + 0.5) * intr.range_bin(); }
double col_bearing(int j, const SonarIntrinsics& intr) {
  return intr.theta_min + (j + 0.5) * intr.bearing_bin();
}

void deposit_spot(std::vector<double>& acc, const SonarIntrinsics& intr, const PolarPoint& center,
                  double amplitude, double radius) {
  const double reach = 4.0 * radius;
  const int i0 = std::max(0, static_cast<int>(std::floor((center.range - reach - intr.r_min) / intr.range_bin())));
  const int i1 = std::min(intr.n_range - 1,
                          static_cast<int>(std::floor((center.range + reach - intr.r_min) / intr.range_bin())));
  const double half_angle = center.range > reach ? std::asin(std::min(1.0, reach / center.range)) : kPi;
  const int j0 = std::max(
      0, static_cast<int>(std::floor((center.bearing - half_angle - intr.theta_min) / intr.bearing_bin())));
  const int j1 = std::min(intr.n_bearing - 1, static_cast<int>(std::floor(
                                                 (center.bearing + half_angle - intr.theta_min) / intr.bearing_bin())));
  const double inv = 1.0 / (2.0 * radius * radius);
  for (int i = i0; i <= i1; ++i)
    for (int j = j0; j <= j1; ++j) {
      const double d2 = polar_sq_distance({row_range(i, intr), col_bearing(j, intr)}, center);
      acc[static_cast<std::size_t>(i) * intr.n_bearing + j] += amplitude * std::exp(-d2 * inv);
    }
}

constexpr int kFloorElevationSteps = 16;

void deposit_floor(std::vector<double>& acc, const FloorPlane& floor, const SensorPose& pose,
                   const SonarIntrinsics& intr) {
  const Eigen::Matrix3d R = pose.rotation();
  for (int i = 0; i < intr.n_range; ++i) {
    const double r = row_range(i, intr);
    for (int j = 0; j < intr.n_bearing; ++j) {
      const double theta = col_bearing(j, intr);
      auto height = [&](double phi) {
        return (R * spherical_to_cartesian({r, theta, phi})).z() + pose.position.z() - floor.height;
      };
      double prev_phi = intr.phi_min, prev_h = height(prev_phi);
      for (int k = 1; k <= kFloorElevationSteps; ++k) {
        const double phi = intr.phi_min + (intr.phi_max - intr.phi_min) * k / kFloorElevationSteps;
        const double h = height(phi);
        if ((prev_h > 0.0) != (h > 0.0)) {
          const double hit = prev_phi + (phi - prev_phi) * prev_h / (prev_h - h);
          acc[static_cast<std::size_t>(i) * intr.n_bearing + j] +=
              floor.reflectivity * elevation_falloff(hit, intr);
          break;
        }
        prev_phi = phi;
        prev_h = h;
      }
    }
  }
}

}  // namespace

PolarImage render(const Scene& scene, const SensorPose& pose, const SonarIntrinsics& intr,
                  const NoiseConfig& noise) {
  intr.validate();
  noise.validate();
  std::vector<double> acc(static_cast<std::size_t>(intr.n_range) * intr.n_bearing, 0.0);
  for (const auto& l : scene.landmarks) {
    const CartesianPoint s = pose.world_to_sensor(l.position);
    if (!(s.norm() > 0.0)) continue;
    const SphericalPoint sph = cartesian_to_spherical(s);
    if (!in_frustum(sph, intr)) continue;
    deposit_spot(acc, intr, {sph.range, sph.bearing}, l.reflectivity * elevation_falloff(sph.elevation, intr),
                 l.spot_radius);
  }
  if (scene.floor) deposit_floor(acc, *scene.floor, pose, intr);

  PolarImage img(intr.n_range, intr.n_bearing);
  detail::Rng rng(noise.seed);
  const double s = noise.speckle_strength;
  for (std::size_t k = 0; k < acc.size(); ++k) {
    double v = std::min(acc[k], 1.0);
    if (s > 0.0) v *= (1.0 - s) + s * rng.exponential();
    if (noise.additive_sigma > 0.0) v += noise.additive_sigma * rng.normal();
    img.pixels[k] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  return img;
}

Scene random_scene(const SceneConfig& cfg, const SensorPose& around, const SonarIntrinsics& intr,
                   std::uint64_t seed) {
  intr.validate();
  detail::Rng rng(mix_seed(seed, 0x5CE9E));
  const double r_lo = intr.r_min + cfg.range_margin;
  const double r_hi = intr.r_max - cfg.range_margin;
  if (!(r_lo < r_hi)) throw Error(Errc::config, "scene: range margin leaves no room in the frustum");
  // Margins keep cluster members inside the frustum most of the time.
  const double t_margin = std::min(0.1 * (intr.theta_max - intr.theta_min), deg2rad(5.0));
  auto frustum_point = [&]() {
    const SphericalPoint p{rng.uniform(r_lo, r_hi), rng.uniform(intr.theta_min + t_margin, intr.theta_max - t_margin),
                           rng.uniform(intr.phi_min, intr.phi_max)};
    return around.sensor_to_world(spherical_to_cartesian(p));
  };
  auto make = [&](const CartesianPoint& pos) {
    return Landmark{pos, rng.uniform(cfg.reflectivity_min, 1.0), rng.uniform(cfg.spot_radius_min, cfg.spot_radius_max)};
  };
  Scene scene;
  scene.seed = seed;
  scene.floor = cfg.floor;
  for (int o = 0; o < cfg.objects; ++o) {
    const CartesianPoint center = frustum_point();
    for (int k = 0; k < cfg.points_per_object; ++k) {
      const CartesianPoint off(rng.symmetric(cfg.object_radius), rng.symmetric(cfg.object_radius),
                               rng.symmetric(cfg.object_radius));
      scene.landmarks.push_back(make(center + off));
    }
  }
  for (int k = 0; k < cfg.isolated_points; ++k) scene.landmarks.push_back(make(frustum_point()));
  scene.validate();
  return scene;
}

OffsetConfig OffsetConfig::desk() {
  OffsetConfig o;
  o.jitter_xy = 0.5;
  o.jitter_yaw = deg2rad(10.0);
  o.jitter_altitude = 0.5;
  o.jitter_pitch = deg2rad(3.0);
  o.dx = 1.5;
  o.dy = 1.5;
  o.dz = 0.1;
  o.dyaw = deg2rad(15.0);
  o.dpitch = deg2rad(1.0);
  o.droll = deg2rad(1.0);
  return o;
}

std::vector<LandmarkObservation> observe_landmarks(const Scene& scene, const SensorPose& a,
                                                   const SensorPose& b, const SonarIntrinsics& intr) {
  std::vector<LandmarkObservation> out;
  for (std::size_t id = 0; id < scene.landmarks.size(); ++id) {
    LandmarkObservation obs;
    obs.id = id;
    const CartesianPoint pa = a.world_to_sensor(scene.landmarks[id].position);
    const CartesianPoint pb = b.world_to_sensor(scene.landmarks[id].position);
    if (pa.norm() > 0.0) {
      const SphericalPoint s = cartesian_to_spherical(pa);
      obs.a = {s.range, s.bearing};
      obs.visible_a = in_frustum(s, intr);
    }
    if (pb.norm() > 0.0) {
      const SphericalPoint s = cartesian_to_spherical(pb);
      obs.b = {s.range, s.bearing};
      obs.visible_b = in_frustum(s, intr);
    }
    if (obs.visible_a || obs.visible_b) out.push_back(obs);
  }
  return out;
}

namespace {

constexpr int kMaxMotionDraws = 64;
constexpr long kMinCovisible = 3;

}  // namespace

std::vector<ScenePair> generate_trajectory_pairs(const Scene& scene, const SensorPose& base,
                                                 const OffsetConfig& o, const SonarIntrinsics& intr,
                                                 const NoiseConfig& noise, std::size_t count) {
  scene.validate();
  intr.validate();
  noise.validate();
  std::vector<ScenePair> pairs;
  pairs.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t pair_seed = mix_seed(noise.seed, i);
    detail::Rng rng(pair_seed);
    SensorPose a = base;
    a.position.x() += rng.symmetric(o.jitter_xy);
    a.position.y() += rng.symmetric(o.jitter_xy);
    a.yaw = wrap_angle(a.yaw + rng.symmetric(o.jitter_yaw));
    if (o.jitter_altitude > 0.0)
      a.position.z() = std::clamp(a.position.z() + rng.symmetric(o.jitter_altitude), o.altitude_min, o.altitude_max);
    if (o.jitter_pitch > 0.0)
      a.pitch = std::clamp(a.pitch + rng.symmetric(o.jitter_pitch), o.pitch_min, o.pitch_max);

    // A relative pose is only recoverable from 3 or more co-visible
    // landmarks; redraw the motion (same stream) until the pair has them.
    SensorPose b;
    std::vector<LandmarkObservation> landmarks;
    for (int attempt = 0; attempt < kMaxMotionDraws; ++attempt) {
      const double dx = rng.symmetric(o.dx), dy = rng.symmetric(o.dy);
      b = a;
      b.position.x() += std::cos(a.yaw) * dx - std::sin(a.yaw) * dy;
      b.position.y() += std::sin(a.yaw) * dx + std::cos(a.yaw) * dy;
      if (o.dz > 0.0)
        b.position.z() = std::clamp(a.position.z() + rng.symmetric(o.dz), o.altitude_min, o.altitude_max);
      b.yaw = wrap_angle(a.yaw + rng.symmetric(o.dyaw));
      if (o.dpitch > 0.0) b.pitch = std::clamp(a.pitch + rng.symmetric(o.dpitch), o.pitch_min, o.pitch_max);
      b.roll = a.roll + rng.symmetric(o.droll);
      landmarks = observe_landmarks(scene, a, b, intr);
      const auto covisible = std::count_if(landmarks.begin(), landmarks.end(),
                                           [](const LandmarkObservation& l) { return l.covisible(); });
      if (covisible >= kMinCovisible) break;
    }

    ScenePair p;
    p.intrinsics = intr;
    p.pose_a = a;
    p.pose_b = b;
    p.pose_ab = relative_pose(a, b);
    p.scene_seed = scene.seed;
    p.noise_seed_a = mix_seed(pair_seed, 1);
    p.noise_seed_b = mix_seed(pair_seed, 2);
    NoiseConfig na = noise, nb = noise;
    na.seed = p.noise_seed_a;
    nb.seed = p.noise_seed_b;
    p.image_a = render(scene, a, intr, na);
    p.image_b = render(scene, b, intr, nb);
    p.landmarks = std::move(landmarks);
    pairs.push_back(std::move(p));
  }
  return pairs;
}

void DatasetSpec::validate() const {
  intrinsics.validate();
  noise.validate();
  if (pairs_per_scene < 1) throw Error(Errc::config, "dataset: pairs_per_scene must be >= 1");
  if (!(offsets.altitude_min <= offsets.altitude_max && offsets.pitch_min <= offsets.pitch_max))
    throw Error(Errc::config, "dataset: empty altitude or pitch band");
}

GeneratedDataset generate_dataset(const DatasetSpec& spec, int jobs) {
  spec.validate();
  const std::size_t train_scenes = (spec.pairs + spec.pairs_per_scene - 1) / spec.pairs_per_scene;
  const std::size_t test_scenes = (spec.held_out + spec.pairs_per_scene - 1) / spec.pairs_per_scene;
  std::vector<std::vector<ScenePair>> groups(train_scenes + test_scenes);
  parallel_for(groups.size(), jobs, [&](std::size_t s) {
    const bool held = s >= train_scenes;
    const std::size_t first = held ? (s - train_scenes) * spec.pairs_per_scene : s * spec.pairs_per_scene;
    const std::size_t total = held ? spec.held_out : spec.pairs;
    const std::size_t count = std::min(spec.pairs_per_scene, total - first);
    const std::uint64_t scene_seed = mix_seed(spec.seed, s);
    detail::Rng rng(mix_seed(scene_seed, 0xBA5E));
    SensorPose base;
    base.position.z() = rng.uniform(spec.offsets.altitude_min, spec.offsets.altitude_max);
    base.pitch = rng.uniform(spec.offsets.pitch_min, spec.offsets.pitch_max);
    const Scene scene = random_scene(spec.scene, base, spec.intrinsics, scene_seed);
    NoiseConfig noise = spec.noise;
    noise.seed = mix_seed(scene_seed, 0x401CE);
    groups[s] = generate_trajectory_pairs(scene, base, spec.offsets, spec.intrinsics, noise, count);
  });
  GeneratedDataset out;
  for (auto& g : groups)
    for (auto& p : g) out.pairs.push_back(std::move(p));
  out.train_count = spec.pairs;
  return out;
}

Eigen::Vector3d planar_motion(const SensorPose& a, const SensorPose& b) {
  const Eigen::Vector3d d = b.position - a.position;
  const double c = std::cos(a.yaw), s = std::sin(a.yaw);
  return {c * d.x() + s * d.y(), -s * d.x() + c * d.y(), wrap_angle(b.yaw - a.yaw)};
}

bool is_small_variation(const ScenePair& pair, const VariationThresholds& t) {
  const Eigen::Vector3d m = planar_motion(pair.pose_a, pair.pose_b);
  return std::abs(m.z()) < t.yaw && std::abs(m.x()) < t.translation && std::abs(m.y()) < t.translation;
}

DatasetSplit split_dataset(std::span<const ScenePair> pairs, const VariationThresholds& t) {
  DatasetSplit split;
  for (std::size_t i = 0; i < pairs.size(); ++i)
    (is_small_variation(pairs[i], t) ? split.small : split.large).push_back(i);
  return split;
}

// ---------------------------------------------------------------------------
// Dataset I/O

namespace {

using detail::Json;

Json pose_to_json(const SensorPose& p) {
  return {{"position", {p.position.x(), p.position.y(), p.position.z()}},
          {"yaw", p.yaw},
          {"pitch", p.pitch},
          {"roll", p.roll}};
}

SensorPose pose_from_json(const Json& j) {
  detail::reject_unknown_keys(j, {"position", "yaw", "pitch", "roll"}, "pair.json pose");
  SensorPose p;
  const auto pos = j.at("position").get<std::vector<double>>();
  if (pos.size() != 3) throw Error(Errc::load, "pair.json: pose position needs 3 values");
  p.position = {pos[0], pos[1], pos[2]};
  p.yaw = j.at("yaw").get<double>();
  p.pitch = j.at("pitch").get<double>();
  p.roll = j.at("roll").get<double>();
  return p;
}

}  // namespace

void write_pair(const std::filesystem::path& dir, const ScenePair& pair) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(Errc::io, "cannot create " + dir.string() + ": " + ec.message());
  write_image(dir / "a.img", pair.image_a);
  write_image(dir / "b.img", pair.image_b);

  Json j;
  std::vector<double> rot;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) rot.push_back(pair.pose_ab.rotation(r, c));
  j["rotation"] = rot;
  j["translation"] = {pair.pose_ab.translation.x(), pair.pose_ab.translation.y(), pair.pose_ab.translation.z()};
  j["intrinsics"] = detail::intrinsics_to_json_value(pair.intrinsics);
  j["pose_a"] = pose_to_json(pair.pose_a);
  j["pose_b"] = pose_to_json(pair.pose_b);
  j["seeds"] = {{"scene", pair.scene_seed}, {"noise_a", pair.noise_seed_a}, {"noise_b", pair.noise_seed_b}};
  {
    std::ofstream out(dir / "pair.json");
    if (!out) throw Error(Errc::io, "cannot write " + (dir / "pair.json").string());
    out << j.dump(2) << "\n";
  }

  std::ofstream csv(dir / "landmarks.csv");
  if (!csv) throw Error(Errc::io, "cannot write " + (dir / "landmarks.csv").string());
  csv << "id,ra,thetaa,rb,thetab,covisible,visible_a,visible_b\n";
  char buf[256];
  for (const auto& l : pair.landmarks) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.17g,%d,%d,%d\n", l.id, l.a.range, l.a.bearing,
                  l.b.range, l.b.bearing, l.covisible() ? 1 : 0, l.visible_a ? 1 : 0, l.visible_b ? 1 : 0);
    csv << buf;
  }
  if (!csv) throw Error(Errc::io, "failed writing " + (dir / "landmarks.csv").string());
}

ScenePair read_pair(const std::filesystem::path& dir) {
  ScenePair p;
  p.image_a = read_image(dir / "a.img");
  p.image_b = read_image(dir / "b.img");

  std::ifstream in(dir / "pair.json");
  if (!in) throw Error(Errc::io, "cannot read " + (dir / "pair.json").string());
  Json j;
  try {
    j = Json::parse(in);
    detail::reject_unknown_keys(j, {"rotation", "translation", "intrinsics", "pose_a", "pose_b", "seeds"},
                                "pair.json");
    const auto rot = j.at("rotation").get<std::vector<double>>();
    const auto tr = j.at("translation").get<std::vector<double>>();
    if (rot.size() != 9 || tr.size() != 3) throw Error(Errc::load, "pair.json: rotation/translation size");
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) p.pose_ab.rotation(r, c) = rot[static_cast<std::size_t>(r * 3 + c)];
    p.pose_ab.translation = {tr[0], tr[1], tr[2]};
    p.intrinsics = detail::intrinsics_from_json_value(j.at("intrinsics"));
    p.pose_a = pose_from_json(j.at("pose_a"));
    p.pose_b = pose_from_json(j.at("pose_b"));
    const auto& seeds = j.at("seeds");
    p.scene_seed = seeds.at("scene").get<std::uint64_t>();
    p.noise_seed_a = seeds.at("noise_a").get<std::uint64_t>();
    p.noise_seed_b = seeds.at("noise_b").get<std::uint64_t>();
  } catch (const Json::exception& e) {
    throw Error(Errc::load, (dir / "pair.json").string() + ": " + e.what());
  }
  p.pose_ab.validate(1e-9);
  if (p.image_a.rows != p.intrinsics.n_range || p.image_a.cols != p.intrinsics.n_bearing ||
      !(p.image_b.rows == p.image_a.rows && p.image_b.cols == p.image_a.cols))
    throw Error(Errc::shape, dir.string() + ": image size does not match intrinsics");

  std::ifstream csv(dir / "landmarks.csv");
  if (!csv) throw Error(Errc::io, "cannot read " + (dir / "landmarks.csv").string());
  std::string line;
  std::getline(csv, line);
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ss(line);
    LandmarkObservation l;
    int cov = 0, va = 0, vb = 0;
    if (!(ss >> l.id >> l.a.range >> l.a.bearing >> l.b.range >> l.b.bearing >> cov >> va >> vb))
      throw Error(Errc::load, (dir / "landmarks.csv").string() + ": malformed row '" + line + "'");
    l.visible_a = va != 0;
    l.visible_b = vb != 0;
    p.landmarks.push_back(l);
  }
  return p;
}

}  // namespace sonic
