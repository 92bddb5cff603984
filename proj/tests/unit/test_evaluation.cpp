#include <gtest/gtest.h>

#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <limits>

#include <sonic/error.hpp>
#include <sonic/evaluation.hpp>

#include "test_support.hpp"

using namespace sonic;

namespace {

std::vector<MatchResult> truth_matches(const ScenePair& p) {
  std::vector<MatchResult> out;
  for (const auto& l : p.landmarks) {
    if (!l.covisible()) continue;
    MatchResult m;
    m.query = polar_to_pixel(l.a, p.intrinsics);
    m.predicted = polar_to_pixel(l.b, p.intrinsics);
    out.push_back(m);
  }
  return out;
}

std::vector<PolarMatch> truth_polar(const ScenePair& p) {
  std::vector<PolarMatch> out;
  for (const auto& l : p.landmarks)
    if (l.covisible()) out.push_back({l.a, l.b});
  return out;
}

ScenePair desk_pair(std::uint64_t seed) {
  return test::simple_pair(seed, intrinsics_preset("m1200d-lf-64"), OffsetConfig::desk());
}

}  // namespace

TEST(DetectKeypoints, ConstantImageIsEmpty) {
  PolarImage img(32, 32, 0.4f);
  EXPECT_TRUE(detect_keypoints(img, 10, 3).empty());
  EXPECT_TRUE(detect_keypoints(PolarImage(32, 32)).empty());
}

TEST(DetectKeypoints, SingleSpot) {
  test::Draw d(1);
  for (int t = 0; t < 10; ++t) {
    PolarImage img(48, 48);
    const int r = d.integer(8, 40), c = d.integer(8, 40);
    for (int i = 0; i < 48; ++i)
      for (int j = 0; j < 48; ++j)
        img.at(i, j) = static_cast<float>(std::exp(-((i - r) * (i - r) + (j - c) * (j - c)) / 4.0));
    const auto k = detect_keypoints(img, 10, 5);
    ASSERT_EQ(k.size(), 1u);
    EXPECT_NEAR(k[0].pixel.u, r + 0.5, 1.0);
    EXPECT_NEAR(k[0].pixel.v, c + 0.5, 1.0);
  }
}

TEST(DetectKeypoints, CountBoundAndOrdering) {
  const auto p = desk_pair(2);
  for (int n : {0, 1, 5, 40}) {
    const auto k = detect_keypoints(p.image_a, n, 2);
    EXPECT_LE(k.size(), static_cast<std::size_t>(n));
    for (std::size_t i = 1; i < k.size(); ++i) {
      const bool ordered = k[i - 1].score > k[i].score ||
                           (k[i - 1].score == k[i].score &&
                            (k[i - 1].pixel.u < k[i].pixel.u ||
                             (k[i - 1].pixel.u == k[i].pixel.u && k[i - 1].pixel.v < k[i].pixel.v)));
      EXPECT_TRUE(ordered);
    }
    for (const auto& x : k) {
      EXPECT_TRUE(std::isfinite(x.score));
      EXPECT_TRUE(in_image(x.pixel, p.intrinsics));
    }
  }
}

TEST(DetectKeypoints, NonMaximumSuppression) {
  const auto p = desk_pair(3);
  const auto k = detect_keypoints(p.image_a, 100, 4);
  for (std::size_t i = 0; i < k.size(); ++i)
    for (std::size_t j = i + 1; j < k.size(); ++j)
      EXPECT_TRUE(std::abs(k[i].pixel.u - k[j].pixel.u) > 4 || std::abs(k[i].pixel.v - k[j].pixel.v) > 4);
}

TEST(ClassifyInliers, ThresholdsInMeters) {
  const auto intr = intrinsics_preset("m1200d-lf");
  EXPECT_NEAR(12 * intr.range_bin(), 0.234, 1e-3);
  EXPECT_NEAR(rad2deg(12 * intr.bearing_bin()), 3.05, 0.01);
  EXPECT_NEAR(20 * 0.01, 0.2, 1e-15);  // real-image threshold at 1 cm range bins
}

TEST(ClassifyInliers, GroundTruthCorrespondencesAreAllInliers) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto p = desk_pair(10 + s);
    const auto m = truth_matches(p);
    if (m.empty()) continue;
    const auto rep = classify_inliers(m, p.pose_ab, p.intrinsics, 12.0);
    EXPECT_DOUBLE_EQ(rep.ratio, 1.0);
    EXPECT_EQ(rep.inliers, m.size());
    for (double dist : rep.distance_px) EXPECT_LT(dist, 1.0);
  }
}

TEST(ClassifyInliers, ExtremeThresholds) {
  const auto p = desk_pair(4);
  auto m = truth_matches(p);
  ASSERT_FALSE(m.empty());
  test::Draw d(4);
  for (auto& x : m) {
    x.predicted.u += d.uniform(2, 20) * (d.uniform(0, 1) < 0.5 ? -1 : 1);
    x.predicted.v += d.uniform(2, 20);
  }
  EXPECT_DOUBLE_EQ(classify_inliers(m, p.pose_ab, p.intrinsics, std::numeric_limits<double>::infinity()).ratio, 1.0);
  EXPECT_DOUBLE_EQ(classify_inliers(m, p.pose_ab, p.intrinsics, 0.0).ratio, 0.0);
}

TEST(ClassifyInliers, OrderInvariant) {
  const auto p = desk_pair(5);
  auto m = truth_matches(p);
  test::Draw d(5);
  for (auto& x : m) x.predicted.v += d.uniform(-15, 15);
  const auto a = classify_inliers(m, p.pose_ab, p.intrinsics, 6.0);
  auto r = m;
  std::reverse(r.begin(), r.end());
  const auto b = classify_inliers(r, p.pose_ab, p.intrinsics, 6.0);
  EXPECT_EQ(a.ratio, b.ratio);
  for (std::size_t i = 0; i < m.size(); ++i) EXPECT_EQ(a.inlier[i], b.inlier[m.size() - 1 - i]);
}

TEST(ClassifyInliers, EmptyAndNegative) {
  const auto p = desk_pair(6);
  try {
    classify_inliers({}, p.pose_ab, p.intrinsics, 12.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::undefined_ratio);
  }
  const auto m = truth_matches(p);
  EXPECT_THROW(classify_inliers(m, p.pose_ab, p.intrinsics, -1.0), Error);
}

TEST(ContourDistance, ZeroOnContourAndPositiveOff) {
  const auto intr = intrinsics_preset("m1200d-lf-64");
  test::Draw d(7);
  const auto pose = test::random_pose(d, 0.5, 0.1);
  const PixelCoord q{30.5, 32.5};
  const auto pol = pixel_to_polar(q, intr);
  const auto c = epipolar_contour(pol.range, pol.bearing, pose, intr, 64);
  const auto on = polar_to_pixel(c.samples[20].point, intr);
  EXPECT_NEAR(contour_distance_px(q, on, pose, intr), 0.0, 1e-9);
  const PixelCoord off{on.u + 5.0, on.v};
  const double dist = contour_distance_px(q, off, pose, intr);
  EXPECT_GT(dist, 0.0);
  EXPECT_LE(dist, 5.0 + 1e-9);
}

TEST(ZTestPrune, PerfectMatchesKept) {
  const auto p = desk_pair(8);
  const auto m = truth_matches(p);
  ASSERT_GE(m.size(), 3u);
  const auto r = z_test_prune(m, p.pose_ab, p.intrinsics);
  EXPECT_EQ(r.pruned, 0u);
  EXPECT_FALSE(r.skipped);
  EXPECT_EQ(r.kept.size(), m.size());
}

TEST(ZTestPrune, SingleGrossOutlier) {
  // 20 matches exactly on their contours (contour samples), one far away.
  const auto intr = intrinsics_preset("m1200d-lf-64");
  test::Draw d(9);
  const auto pose = test::random_pose(d, 0.5, 0.1);
  std::vector<MatchResult> m;
  while (m.size() < 20) {
    const PixelCoord q{d.uniform(15, 50), d.uniform(15, 50)};
    const auto pol = pixel_to_polar(q, intr);
    const auto c = epipolar_contour(pol.range, pol.bearing, pose, intr, 64);
    MatchResult x;
    x.query = q;
    x.predicted = polar_to_pixel(c.samples[32].point, intr);
    m.push_back(x);
  }
  MatchResult out = m[3];
  out.predicted.u += 25.0;
  out.predicted.v -= 25.0;
  m.insert(m.begin() + 7, out);
  const auto r = z_test_prune(m, pose, intr);
  EXPECT_EQ(r.pruned, 1u);
  EXPECT_FALSE(r.keep[7]);
  for (std::size_t i = 0; i < m.size(); ++i)
    if (i != 7) {
      EXPECT_TRUE(r.keep[i]);
    }
  // Standardization by hand reproduces the decision.
  double mean = 0, sq = 0;
  for (double x : r.distance_px) mean += x;
  mean /= r.distance_px.size();
  for (double x : r.distance_px) sq += (x - mean) * (x - mean);
  const double sd = std::sqrt(sq / r.distance_px.size());
  EXPECT_GT((r.distance_px[7] - mean) / sd, 2.0);
  // idempotent on its output
  const auto again = z_test_prune(r.kept, pose, intr);
  EXPECT_EQ(again.pruned, 0u);
}

TEST(ZTestPrune, TooFewMatchesSkipped) {
  const auto p = desk_pair(9);
  auto m = truth_matches(p);
  m.resize(2);
  const auto r = z_test_prune(m, p.pose_ab, p.intrinsics);
  EXPECT_TRUE(r.skipped);
  EXPECT_EQ(r.kept.size(), 2u);
}

TEST(GaussNewton, LinearProblemOneIteration) {
  test::Draw d(10);
  for (int t = 0; t < 20; ++t) {
    Eigen::MatrixXd A(8, 3);
    Eigen::VectorXd b(8);
    for (int i = 0; i < 8; ++i) {
      b(i) = d.normal();
      for (int j = 0; j < 3; ++j) A(i, j) = d.normal();
    }
    auto f = [&](const Eigen::VectorXd& x) { return ResidualEval{A * x - b, A}; };
    const auto r = gauss_newton_solve(f, Eigen::VectorXd::Zero(3));
    EXPECT_EQ(r.iterations, 1);
    EXPECT_TRUE(r.converged);
    const Eigen::VectorXd ls = A.colPivHouseholderQr().solve(b);
    EXPECT_LT((r.state - ls).norm(), 1e-10);
  }
}

TEST(GaussNewton, StartAtSolution) {
  auto f = [](const Eigen::VectorXd& x) {
    Eigen::MatrixXd J(2, 1);
    J << 2 * x(0), 1;
    return ResidualEval{(Eigen::VectorXd(2) << x(0) * x(0) - 4, x(0) - 2).finished(), J};
  };
  const auto r = gauss_newton_solve(f, Eigen::VectorXd::Constant(1, 2.0));
  EXPECT_EQ(r.cost, 0.0);
  EXPECT_LE(r.iterations, 1);
}

TEST(GaussNewton, ScalarQuadraticResidual) {
  // r(x) = x^2 - 2 has its least-squares minimum at sqrt(2).
  auto f = [](const Eigen::VectorXd& x) {
    return ResidualEval{Eigen::VectorXd::Constant(1, x(0) * x(0) - 2.0), Eigen::MatrixXd::Constant(1, 1, 2 * x(0))};
  };
  GaussNewtonConfig cfg;
  cfg.tol = 1e-12;
  const auto r = gauss_newton_solve(f, Eigen::VectorXd::Constant(1, 1.0), cfg);
  EXPECT_TRUE(r.converged);
  EXPECT_NEAR(r.state(0), std::sqrt(2.0), 1e-12);
  for (std::size_t i = 1; i < r.cost_trace.size(); ++i) EXPECT_LE(r.cost_trace[i], r.cost_trace[i - 1]);
}

TEST(GaussNewton, RankDeficientThrowsWithoutFallback) {
  Eigen::MatrixXd A(3, 2);
  A << 1, 2, 2, 4, 3, 6;
  const Eigen::VectorXd b = Eigen::VectorXd::Ones(3);
  auto f = [&](const Eigen::VectorXd& x) { return ResidualEval{A * x - b, A}; };
  GaussNewtonConfig cfg;
  cfg.levenberg_fallback = false;
  try {
    gauss_newton_solve(f, Eigen::VectorXd::Zero(2), cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::singular_system);
    EXPECT_NE(std::string(e.what()).find("condition"), std::string::npos);
  }
  cfg.levenberg_fallback = true;
  const auto r = gauss_newton_solve(f, Eigen::VectorXd::Zero(2), cfg);
  EXPECT_TRUE(r.damped);
  EXPECT_LT(r.cost, 3.0);
}

TEST(BundleAdjust, PriorAtTruthIsFixedPoint) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto p = desk_pair(20 + s);
    const auto m = truth_polar(p);
    if (m.size() < 3) continue;
    const auto truth = bundle_prior(p.pose_a, p.pose_b);
    const auto r = two_view_bundle_adjust(m, truth, p.intrinsics);
    const auto e = pose_error(r.pose, truth.b);
    EXPECT_LT(e.translation, 1e-6);
    EXPECT_LT(e.rotation, 1e-8);
    for (double phi : r.elevations) {
      EXPECT_GE(phi, p.intrinsics.phi_min);
      EXPECT_LE(phi, p.intrinsics.phi_max);
    }
  }
}

TEST(BundleAdjust, ResidualVanishesAtTruth) {
  const auto p = desk_pair(30);
  const auto truth = bundle_prior(p.pose_a, p.pose_b);
  const auto rel = relative_pose(truth);
  EXPECT_LT((rel.rotation - p.pose_ab.rotation).norm(), 1e-12);
  EXPECT_LT((rel.translation - p.pose_ab.translation).norm(), 1e-12);
}

TEST(BundleAdjust, RecoversFromPerturbedPrior) {
  test::Draw d(11);
  int ok = 0, total = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto p = desk_pair(40 + s);
    const auto m = truth_polar(p);
    if (m.size() < 3) continue;
    const auto truth = bundle_prior(p.pose_a, p.pose_b);
    auto prior = truth;
    prior.b.x += (d.uniform(0, 1) < 0.5 ? -0.3 : 0.3);
    prior.b.y += (d.uniform(0, 1) < 0.5 ? -0.3 : 0.3);
    prior.b.yaw += deg2rad(d.uniform(0, 1) < 0.5 ? -5.0 : 5.0);
    const auto r = two_view_bundle_adjust(m, prior, p.intrinsics);
    const auto e = pose_error(r.pose, truth.b);
    ++total;
    ok += e.translation < 1e-3 && e.rotation < 1e-4;
  }
  EXPECT_GE(total, 15);
  EXPECT_EQ(ok, total);
}

TEST(BundleAdjust, TwoMatchesIsDegenerate) {
  const auto p = desk_pair(50);
  auto m = truth_polar(p);
  m.resize(2);
  try {
    two_view_bundle_adjust(m, bundle_prior(p.pose_a, p.pose_b), p.intrinsics);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::degenerate_geometry);
  }
}

TEST(PoseError, Examples) {
  PlanarPoseEstimate a, b;
  auto e = pose_error(a, a);
  EXPECT_EQ(e.translation, 0.0);
  EXPECT_EQ(e.rotation, 0.0);
  a.yaw = deg2rad(179);
  b.yaw = deg2rad(-179);
  e = pose_error(a, b);
  EXPECT_NEAR(e.rotation, deg2rad(2.0), 1e-12);
  EXPECT_NEAR(e.rotation, 0.0349, 1e-4);
  EXPECT_EQ(pose_error(b, a).rotation, e.rotation);
  PlanarPoseEstimate c, f;
  c.x = 1;
  f.y = 1;
  EXPECT_DOUBLE_EQ(pose_error(c, f).translation, std::sqrt(2.0));
  c.z = 5;  // out-of-plane terms ignored
  EXPECT_DOUBLE_EQ(pose_error(c, f).translation, std::sqrt(2.0));
}

TEST(PoseError, SymmetricAndBounded) {
  test::Draw d(12);
  for (int i = 0; i < 200; ++i) {
    PlanarPoseEstimate a, b;
    a.yaw = d.uniform(-kPi, kPi);
    b.yaw = d.uniform(-kPi, kPi);
    const auto e1 = pose_error(a, b), e2 = pose_error(b, a);
    EXPECT_NEAR(e1.rotation, e2.rotation, 1e-12);
    EXPECT_GE(e1.rotation, 0.0);
    EXPECT_LE(e1.rotation, kPi);
  }
}

TEST(PatchBaseline, DescriptorsAreUnitOrZero) {
  const auto p = desk_pair(60);
  const auto maps = patch_baseline_maps(p.image_a);
  EXPECT_EQ(maps.coarse.downsample_factor, 8);
  EXPECT_EQ(maps.fine.downsample_factor, 2);
  EXPECT_EQ(maps.coarse.height, 8);
  EXPECT_EQ(maps.fine.height, 32);
  for (const auto* m : {&maps.coarse, &maps.fine})
    for (int r = 0; r < m->height; ++r)
      for (int c = 0; c < m->width; ++c) {
        double n = 0, mean = 0;
        for (double x : m->cell(r, c)) {
          n += x * x;
          mean += x;
        }
        if (n > 0) {
          EXPECT_NEAR(n, 1.0, 1e-9);
          EXPECT_NEAR(mean, 0.0, 1e-9);
        }
      }
}

TEST(PatchBaseline, IdenticalImagesSelfMatch) {
  const auto p = desk_pair(61);
  const auto maps = patch_baseline_maps(p.image_a);
  MatchConfig cfg;
  cfg.inverse_temperature = 50.0;
  const auto kps = keypoint_pixels(detect_keypoints(p.image_a, 16, 3));
  ASSERT_FALSE(kps.empty());
  const auto res = match_keypoints(kps, maps, maps, cfg);
  int near = 0;
  for (std::size_t i = 0; i < kps.size(); ++i)
    near += std::hypot(res[i].predicted.u - kps[i].u, res[i].predicted.v - kps[i].v) <= 2.0;
  EXPECT_GE(near, static_cast<int>(0.9 * kps.size()));
}

TEST(ToPolarMatches, UsesIntrinsics) {
  const auto intr = intrinsics_preset("m1200d-lf-64");
  MatchResult m;
  m.query = {32, 32};
  m.predicted = {0, 64};
  const auto pm = to_polar_matches(std::span<const MatchResult>(&m, 1), intr);
  ASSERT_EQ(pm.size(), 1u);
  EXPECT_DOUBLE_EQ(pm[0].a.range, 5.0);
  EXPECT_NEAR(pm[0].a.bearing, 0.0, 1e-15);
  EXPECT_DOUBLE_EQ(pm[0].b.range, 0.0);
  EXPECT_DOUBLE_EQ(pm[0].b.bearing, intr.theta_max);
}
