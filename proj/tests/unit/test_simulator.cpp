#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>

#include <sonic/epipolar.hpp>
#include <sonic/error.hpp>
#include <sonic/image.hpp>
#include <sonic/simulator.hpp>

#include "test_support.hpp"

using namespace sonic;

namespace {

std::pair<int, int> argmax_pixel(const PolarImage& img) {
  const auto it = std::max_element(img.pixels.begin(), img.pixels.end());
  const int k = static_cast<int>(it - img.pixels.begin());
  return {k / img.cols, k % img.cols};
}

SensorPose level_pose() {
  SensorPose p;
  p.position = {0, 0, 2};
  return p;
}

}  // namespace

TEST(Render, EmptySceneNoNoiseIsBlack) {
  const auto intr = intrinsics_preset("m1200d-lf-64");
  const auto img = render(Scene{}, level_pose(), intr, {});
  EXPECT_EQ(img.rows, 64);
  EXPECT_EQ(img.cols, 64);
  for (float v : img.pixels) EXPECT_EQ(v, 0.0f);
}

TEST(Render, SpotPeaksAtProjectedPixel) {
  const auto intr = intrinsics_preset("m1200d-lf").resampled(128, 128);
  test::Draw d(1);
  for (int t = 0; t < 20; ++t) {
    const auto s = test::random_in_frustum(d, intr, 0.1);
    const SensorPose pose = level_pose();
    Scene scene;
    scene.landmarks.push_back({pose.sensor_to_world(spherical_to_cartesian(s)), 1.0, 0.05});
    const auto img = render(scene, pose, intr, {});
    const auto [r, c] = argmax_pixel(img);
    const auto px = polar_to_pixel({s.range, s.bearing}, intr);
    EXPECT_EQ(r, static_cast<int>(std::floor(px.u)));
    EXPECT_NEAR(c, px.v - 0.5, 1.0);
  }
}

TEST(Render, CoincidentSpotsAddThenClamp) {
  const auto intr = intrinsics_preset("m1200d-lf-64");
  const SensorPose pose = level_pose();
  // Both landmarks sit exactly at a bin center, one at phi = 0 and one at 5 deg.
  const double r = intr.r_min + 30.5 * intr.range_bin();
  const double th = intr.theta_min + 20.5 * intr.bearing_bin();
  const double phi2 = deg2rad(5.0);
  auto scene_with = [&](double refl) {
    Scene s;
    s.landmarks.push_back({pose.sensor_to_world(spherical_to_cartesian({r, th, 0.0})), refl, 0.3});
    s.landmarks.push_back({pose.sensor_to_world(spherical_to_cartesian({r, th, phi2})), refl, 0.3});
    return s;
  };
  const double fall = elevation_falloff(phi2, intr);
  EXPECT_NEAR(fall, std::pow(std::cos(0.5 * kPi / 2), 2), 1e-15);

  auto img = render(scene_with(0.3), pose, intr, {});
  const auto [pr, pc] = argmax_pixel(img);
  EXPECT_EQ(pr, 30);
  EXPECT_EQ(pc, 20);
  EXPECT_NEAR(img.at(30, 20), static_cast<float>(0.3 * (1.0 + fall)), 1e-6);
  // Neighbour one range bin away: both spots contribute the same Gaussian factor.
  const double g = std::exp(-intr.range_bin() * intr.range_bin() / (2 * 0.09));
  EXPECT_NEAR(img.at(31, 20), static_cast<float>(0.3 * (1.0 + fall) * g), 1e-6);

  img = render(scene_with(0.9), pose, intr, {});
  EXPECT_EQ(img.at(30, 20), 1.0f);
  for (float x : img.pixels) EXPECT_LE(x, 1.0f);
}

TEST(Render, FalloffShape) {
  const auto intr = intrinsics_preset("m1200d-lf");
  EXPECT_DOUBLE_EQ(elevation_falloff(0.0, intr), 1.0);
  EXPECT_NEAR(elevation_falloff(intr.phi_max, intr), 0.0, 1e-30);
  EXPECT_NEAR(elevation_falloff(intr.phi_min / 2, intr), 0.5, 1e-15);
}

TEST(Render, NoiseIsSeededAndBounded) {
  const auto intr = intrinsics_preset("m1200d-lf-64");
  SensorPose pose = level_pose();
  pose.pitch = deg2rad(15);
  const Scene scene = random_scene(SceneConfig{}, pose, intr, 3);
  const NoiseConfig n{0.5, 0.1, 42};
  const auto a = render(scene, pose, intr, n), b = render(scene, pose, intr, n);
  EXPECT_EQ(a, b);
  auto n2 = n;
  n2.seed = 43;
  EXPECT_NE(render(scene, pose, intr, n2), a);
  for (float v : a.pixels) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  EXPECT_THROW(render(scene, pose, intr, NoiseConfig{1.5, 0, 0}), Error);
}

TEST(Render, FloorAppearsWhenPitchedDown) {
  const auto intr = intrinsics_preset("m1200d-lf-64");
  SensorPose pose = level_pose();
  pose.pitch = deg2rad(15);
  Scene scene;
  scene.floor = FloorPlane{0.0, 0.2};
  const auto img = render(scene, pose, intr, {});
  EXPECT_GT(*std::max_element(img.pixels.begin(), img.pixels.end()), 0.0f);
}

TEST(SceneConfig, RandomSceneIsVisibleAndSeeded) {
  const auto intr = intrinsics_preset("m1200d-lf-64");
  SensorPose pose = level_pose();
  pose.pitch = deg2rad(12);
  const SceneConfig cfg;
  const auto s = random_scene(cfg, pose, intr, 9);
  EXPECT_EQ(s.landmarks.size(), static_cast<std::size_t>(cfg.objects * cfg.points_per_object + cfg.isolated_points));
  EXPECT_NO_THROW(s.validate());
  const auto s2 = random_scene(cfg, pose, intr, 9);
  for (std::size_t i = 0; i < s.landmarks.size(); ++i) EXPECT_EQ(s.landmarks[i].position, s2.landmarks[i].position);
}

TEST(TrajectoryPairs, ZeroOffsetsGiveIdentityPose) {
  const auto intr = intrinsics_preset("m1200d-lf-64");
  SensorPose base = level_pose();
  base.pitch = deg2rad(15);
  const Scene scene = random_scene(SceneConfig{}, base, intr, 4);
  const auto pairs = generate_trajectory_pairs(scene, base, OffsetConfig::none(), intr, {0, 0, 5}, 3);
  ASSERT_EQ(pairs.size(), 3u);
  for (const auto& p : pairs) {
    EXPECT_LT((p.pose_ab.rotation - Eigen::Matrix3d::Identity()).norm(), 1e-15);
    EXPECT_LT(p.pose_ab.translation.norm(), 1e-15);
    EXPECT_EQ(p.image_a, p.image_b);
    EXPECT_TRUE(is_small_variation(p));
  }
}

TEST(TrajectoryPairs, SeededAndBitIdentical) {
  const auto intr = intrinsics_preset("m1200d-lf-64");
  SensorPose base = level_pose();
  base.pitch = deg2rad(15);
  const Scene scene = random_scene(SceneConfig{}, base, intr, 4);
  const NoiseConfig n{0.3, 0.02, 77};
  const auto a = generate_trajectory_pairs(scene, base, OffsetConfig::desk(), intr, n, 4);
  const auto b = generate_trajectory_pairs(scene, base, OffsetConfig::desk(), intr, n, 4);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].image_a, b[i].image_a);
    EXPECT_EQ(a[i].image_b, b[i].image_b);
    EXPECT_EQ(a[i].pose_ab.translation, b[i].pose_ab.translation);
  }
  EXPECT_NE(a[0].image_b, a[1].image_b);
}

TEST(TrajectoryPairs, EnvelopeRespected) {
  const auto intr = intrinsics_preset("m1200d-lf-64");
  SensorPose base = level_pose();
  base.pitch = deg2rad(15);
  const Scene scene = random_scene(SceneConfig{}, base, intr, 4);
  const auto off = OffsetConfig::desk();
  const auto pairs = generate_trajectory_pairs(scene, base, off, intr, {0, 0, 8}, 40);
  for (const auto& p : pairs) {
    p.pose_ab.validate();
    for (const auto* s : {&p.pose_a, &p.pose_b}) {
      EXPECT_GE(s->position.z(), off.altitude_min - 1e-12);
      EXPECT_LE(s->position.z(), off.altitude_max + 1e-12);
    }
    EXPECT_GE(p.pose_a.pitch, off.pitch_min - 1e-12);
    EXPECT_LE(p.pose_a.pitch, off.pitch_max + 1e-12);
    const auto m = planar_motion(p.pose_a, p.pose_b);
    EXPECT_LE(std::abs(m.x()), off.dx + 1e-12);
    EXPECT_LE(std::abs(m.y()), off.dy + 1e-12);
    EXPECT_LE(std::abs(m.z()), off.dyaw + 1e-12);
  }
}

TEST(TrajectoryPairs, CovisibleLandmarksLieOnContours) {
  const auto intr = intrinsics_preset("m1200d-lf-64");
  const double px2 = pixel_equivalent_sq_distance(intr);
  SensorPose base = level_pose();
  base.pitch = deg2rad(15);
  std::size_t checked = 0;
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Scene scene = random_scene(SceneConfig{}, base, intr, s);
    for (const auto& p : generate_trajectory_pairs(scene, base, OffsetConfig::desk(), intr, {0, 0, s}, 10))
      for (const auto& l : p.landmarks) {
        if (!l.covisible()) continue;
        const auto c = epipolar_contour(l.a.range, l.a.bearing, p.pose_ab, intr, 64);
        EXPECT_LT(epipolar_loss(l.b, c).value, px2);
        ++checked;
      }
  }
  EXPECT_GT(checked, 100u);
}

TEST(TrajectoryPairs, ObservationsMatchPoses) {
  const auto intr = intrinsics_preset("m1200d-lf-64");
  SensorPose base = level_pose();
  base.pitch = deg2rad(15);
  const Scene scene = random_scene(SceneConfig{}, base, intr, 12);
  const auto p = generate_trajectory_pairs(scene, base, OffsetConfig::desk(), intr, {0, 0, 1}, 1).front();
  for (const auto& l : p.landmarks) {
    const auto sa = cartesian_to_spherical(p.pose_a.world_to_sensor(scene.landmarks[l.id].position));
    EXPECT_NEAR(l.a.range, sa.range, 1e-12);
    EXPECT_NEAR(l.a.bearing, sa.bearing, 1e-12);
    EXPECT_EQ(l.visible_a, in_frustum(sa, intr));
    const auto sb = cartesian_to_spherical(p.pose_b.world_to_sensor(scene.landmarks[l.id].position));
    EXPECT_NEAR(l.b.range, sb.range, 1e-12);
    EXPECT_EQ(l.visible_b, in_frustum(sb, intr));
    EXPECT_TRUE(l.visible_a || l.visible_b);
  }
  const auto rel = relative_pose(p.pose_a, p.pose_b);
  EXPECT_LT((rel.rotation - p.pose_ab.rotation).norm(), 1e-14);
}

TEST(SplitDataset, VariationRule) {
  ScenePair p;
  EXPECT_TRUE(is_small_variation(p));
  p.pose_b.yaw = deg2rad(30);
  EXPECT_FALSE(is_small_variation(p));
  p.pose_b.yaw = deg2rad(5.0);
  EXPECT_FALSE(is_small_variation(p));  // strict
  p.pose_b.yaw = deg2rad(4.99);
  EXPECT_TRUE(is_small_variation(p));
  p.pose_b.position = {1.5, 0, 0};
  EXPECT_FALSE(is_small_variation(p));
  p.pose_b.position = {1.49, -1.49, 3.0};  // altitude change does not count
  EXPECT_TRUE(is_small_variation(p));
  // Translation measured in a's heading frame.
  p.pose_a.yaw = deg2rad(90);
  p.pose_b.yaw = deg2rad(90);
  p.pose_b.position = {0.2, 1.7, 0};
  EXPECT_FALSE(is_small_variation(p));
  const auto m = planar_motion(p.pose_a, p.pose_b);
  EXPECT_NEAR(m.x(), 1.7, 1e-12);
  EXPECT_NEAR(m.y(), -0.2, 1e-12);

  std::vector<ScenePair> v(3);
  v[1].pose_b.yaw = deg2rad(20);
  const auto split = split_dataset(v);
  EXPECT_EQ(split.small, (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(split.large, (std::vector<std::size_t>{1}));
}

TEST(GenerateDataset, HeldOutScenesAreDistinctAndDeterministic) {
  DatasetSpec spec;
  spec.intrinsics = intrinsics_preset("m1200d-lf-64");
  spec.pairs = 20;
  spec.held_out = 10;
  spec.pairs_per_scene = 5;
  spec.seed = 3;
  const auto a = generate_dataset(spec, 1);
  const auto b = generate_dataset(spec, 3);
  ASSERT_EQ(a.pairs.size(), 30u);
  EXPECT_EQ(a.train_count, 20u);
  for (std::size_t i = 0; i < a.pairs.size(); ++i) {
    EXPECT_EQ(a.pairs[i].image_a, b.pairs[i].image_a);
    EXPECT_EQ(a.pairs[i].scene_seed, b.pairs[i].scene_seed);
  }
  for (std::size_t i = 0; i < 20; ++i)
    for (std::size_t j = 20; j < 30; ++j) EXPECT_NE(a.pairs[i].scene_seed, a.pairs[j].scene_seed);
  spec.pairs = 0;
  spec.held_out = 0;
  EXPECT_TRUE(generate_dataset(spec).pairs.empty());
}

TEST(PairFiles, RoundTrip) {
  test::TempDir dir("pair");
  const auto intr = intrinsics_preset("m1200d-lf-64");
  const auto p = test::simple_pair(5, intr, OffsetConfig::desk(), 0.3);
  write_pair(dir.path / "p", p);
  EXPECT_TRUE(std::filesystem::exists(dir.path / "p" / "a.img"));
  EXPECT_TRUE(std::filesystem::exists(dir.path / "p" / "pair.json"));
  const auto head = test::slurp(dir.path / "p" / "landmarks.csv").substr(0, 32);
  EXPECT_EQ(head, "id,ra,thetaa,rb,thetab,covisible");
  const auto q = read_pair(dir.path / "p");
  EXPECT_EQ(q.image_a, p.image_a);
  EXPECT_EQ(q.image_b, p.image_b);
  EXPECT_EQ(q.pose_ab.rotation, p.pose_ab.rotation);
  EXPECT_EQ(q.pose_ab.translation, p.pose_ab.translation);
  EXPECT_EQ(q.intrinsics.n_range, 64);
  EXPECT_NEAR(q.intrinsics.theta_max, p.intrinsics.theta_max, 1e-15);
  ASSERT_EQ(q.landmarks.size(), p.landmarks.size());
  for (std::size_t i = 0; i < q.landmarks.size(); ++i) {
    EXPECT_EQ(q.landmarks[i].a.range, p.landmarks[i].a.range);
    EXPECT_EQ(q.landmarks[i].b.bearing, p.landmarks[i].b.bearing);
    EXPECT_EQ(q.landmarks[i].covisible(), p.landmarks[i].covisible());
  }
  EXPECT_EQ(q.pose_a.yaw, p.pose_a.yaw);
  EXPECT_EQ(q.noise_seed_b, p.noise_seed_b);
}

TEST(PairFiles, ImageFormat) {
  test::TempDir dir("img");
  PolarImage img(2, 3);
  img.at(1, 2) = 0.5f;
  write_image(dir.path / "x.img", img);
  const auto bytes = test::slurp(dir.path / "x.img");
  ASSERT_EQ(bytes.size(), 4u + 8u + 24u);
  EXPECT_EQ(bytes.substr(0, 4), "SNRI");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 2);
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 3);
  EXPECT_EQ(read_image(dir.path / "x.img"), img);
  std::ofstream(dir.path / "bad.img", std::ios::binary) << bytes.substr(0, 20);
  EXPECT_THROW(read_image(dir.path / "bad.img"), Error);
}
