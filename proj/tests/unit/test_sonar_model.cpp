#include <gtest/gtest.h>

#include <cmath>

#include <sonic/error.hpp>
#include <sonic/sonar_model.hpp>

#include "test_support.hpp"

using namespace sonic;

namespace {

void expect_vec(const CartesianPoint& p, double x, double y, double z, double tol) {
  EXPECT_NEAR(p.x(), x, tol);
  EXPECT_NEAR(p.y(), y, tol);
  EXPECT_NEAR(p.z(), z, tol);
}

}  // namespace

TEST(SphericalToCartesian, ForwardAxis) { expect_vec(spherical_to_cartesian({1, 0, 0}), 1, 0, 0, 1e-15); }

TEST(SphericalToCartesian, LeftAxis) { expect_vec(spherical_to_cartesian({2, kPi / 2, 0}), 0, 2, 0, 1e-15); }

TEST(SphericalToCartesian, PositiveElevationPointsDown) {
  const auto p = spherical_to_cartesian({1, 0, kPi / 6});
  expect_vec(p, std::sqrt(3.0) / 2.0, 0, -0.5, 1e-15);
  EXPECT_NEAR(p.x(), 0.86603, 5e-6);
}

TEST(CartesianToSpherical, Examples) {
  auto s = cartesian_to_spherical({1, 0, 0});
  EXPECT_DOUBLE_EQ(s.range, 1.0);
  EXPECT_DOUBLE_EQ(s.bearing, 0.0);
  EXPECT_DOUBLE_EQ(s.elevation, 0.0);

  s = cartesian_to_spherical({0, 0, -1});
  EXPECT_DOUBLE_EQ(s.range, 1.0);
  EXPECT_DOUBLE_EQ(s.bearing, 0.0);
  EXPECT_DOUBLE_EQ(s.elevation, kPi / 2);

  s = cartesian_to_spherical({std::sqrt(3.0) / 2.0, 0, -0.5});
  EXPECT_NEAR(s.range, 1.0, 1e-15);
  EXPECT_NEAR(s.bearing, 0.0, 1e-15);
  EXPECT_NEAR(s.elevation, kPi / 6, 1e-15);
}

TEST(CartesianToSpherical, OriginIsDegenerate) {
  try {
    cartesian_to_spherical({0, 0, 0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::degenerate_point);
  }
}

TEST(ProjectToImagePlane, Examples) {
  auto p = project_to_image_plane({3, 4, 0});
  EXPECT_DOUBLE_EQ(p.range, 5.0);
  EXPECT_NEAR(p.bearing, 0.9273, 1e-4);
  EXPECT_DOUBLE_EQ(p.bearing, std::atan2(4.0, 3.0));

  p = project_to_image_plane({1, 0, -1});
  EXPECT_DOUBLE_EQ(p.range, std::sqrt(2.0));
  EXPECT_DOUBLE_EQ(p.bearing, 0.0);

  p = project_to_image_plane({std::sqrt(3.0) / 2.0, 0, -0.5});
  EXPECT_NEAR(p.range, 1.0, 1e-15);
  EXPECT_DOUBLE_EQ(p.bearing, 0.0);
}

TEST(ProjectToImagePlane, EquivalentPlanarForm) {
  // r (cos t, sin t) = (x, y) / cos(phi)
  test::Draw d(5);
  for (int i = 0; i < 200; ++i) {
    const SphericalPoint s{d.uniform(0.1, 10), d.uniform(-3, 3), d.uniform(-1.4, 1.4)};
    const auto c = spherical_to_cartesian(s);
    const auto p = project_to_image_plane(c);
    EXPECT_NEAR(p.range * std::cos(p.bearing), c.x() / std::cos(s.elevation), 1e-12 * s.range);
    EXPECT_NEAR(p.range * std::sin(p.bearing), c.y() / std::cos(s.elevation), 1e-12 * s.range);
  }
}

TEST(ProjectToImagePlane, OriginIsDegenerate) { EXPECT_THROW(project_to_image_plane({0, 0, 0}), Error); }

TEST(PolarToPixel, Corners) {
  const auto intr = intrinsics_preset("m1200d-lf");
  const auto px = polar_to_pixel({intr.r_min, intr.theta_min}, intr);
  EXPECT_DOUBLE_EQ(px.u, 0.0);
  EXPECT_DOUBLE_EQ(px.v, 0.0);
  const auto mid = polar_to_pixel({(intr.r_min + intr.r_max) / 2, 0.0}, intr);
  EXPECT_DOUBLE_EQ(mid.u, intr.n_range / 2.0);
  EXPECT_NEAR(mid.v, intr.n_bearing / 2.0, 1e-12);
}

TEST(PolarToPixel, TwelvePixelsIsAboutQuarterMeter) {
  const auto intr = intrinsics_preset("m1200d-lf");
  const auto px = polar_to_pixel({0.23, 0.0}, intr);
  EXPECT_NEAR(px.u, 11.776, 1e-12);
  EXPECT_EQ(std::lround(px.u), 12);
}

TEST(PolarToPixel, MutualInverse) {
  const auto intr = intrinsics_preset("didson");
  test::Draw d(9);
  for (int i = 0; i < 1000; ++i) {
    const PolarPoint p{d.uniform(intr.r_min, intr.r_max), d.uniform(intr.theta_min, intr.theta_max)};
    const auto back = pixel_to_polar(polar_to_pixel(p, intr), intr);
    EXPECT_NEAR(back.range, p.range, 1e-14 * intr.r_max);
    EXPECT_NEAR(back.bearing, p.bearing, 1e-14);
    const PixelCoord px{d.uniform(0, intr.n_range), d.uniform(0, intr.n_bearing)};
    const auto fwd = polar_to_pixel(pixel_to_polar(px, intr), intr);
    EXPECT_NEAR(fwd.u, px.u, 1e-12);
    EXPECT_NEAR(fwd.v, px.v, 1e-12);
  }
}

TEST(PolarToPixel, OutOfFrustumLeavesImage) {
  const auto intr = intrinsics_preset("m1200d-lf-64");
  EXPECT_FALSE(in_image(polar_to_pixel({intr.r_max + 0.5, 0.0}, intr), intr));
  EXPECT_FALSE(in_image(polar_to_pixel({5.0, intr.theta_min - 0.1}, intr), intr));
  EXPECT_TRUE(in_image(polar_to_pixel({5.0, 0.0}, intr), intr));
}

TEST(InFrustum, ClosedIntervals) {
  const auto intr = intrinsics_preset("m1200d-lf");
  const SphericalPoint center{(intr.r_min + intr.r_max) / 2, (intr.theta_min + intr.theta_max) / 2,
                              (intr.phi_min + intr.phi_max) / 2};
  EXPECT_TRUE(in_frustum(center, intr));
  EXPECT_FALSE(in_frustum({intr.r_max + 1e-9, 0, 0}, intr));
  EXPECT_TRUE(in_frustum({5, 0, intr.phi_max}, intr));
  EXPECT_TRUE(in_frustum({intr.r_min, intr.theta_min, intr.phi_min}, intr));
  EXPECT_FALSE(in_frustum({5, 0, intr.phi_max + 1e-9}, intr));
  EXPECT_FALSE(in_frustum({5, intr.theta_min - 1e-9, 0}, intr));
}

TEST(Intrinsics, Presets) {
  const auto m = intrinsics_preset("m1200d-lf");
  EXPECT_NEAR(rad2deg(m.theta_max - m.theta_min), 130.0, 1e-12);
  EXPECT_NEAR(rad2deg(m.phi_max - m.phi_min), 20.0, 1e-12);
  EXPECT_DOUBLE_EQ(m.r_max, 10.0);
  EXPECT_EQ(m.n_range, 512);
  EXPECT_EQ(m.n_bearing, 512);
  const auto d = intrinsics_preset("didson");
  EXPECT_EQ(d.n_bearing, 96);
  EXPECT_EQ(d.n_range, 512);
  const auto s = intrinsics_preset("m1200d-lf-64");
  EXPECT_EQ(s, m.resampled(64, 64));
  EXPECT_THROW(intrinsics_preset("nope"), Error);
}

TEST(Intrinsics, JsonRoundTrip) {
  const auto d = intrinsics_preset("didson");
  const auto back = parse_intrinsics(intrinsics_to_json(d));
  EXPECT_NEAR(back.theta_min, d.theta_min, 1e-15);
  EXPECT_NEAR(back.phi_max, d.phi_max, 1e-15);
  EXPECT_EQ(back.n_bearing, d.n_bearing);
  EXPECT_EQ(back.r_min, d.r_min);
}

TEST(Intrinsics, JsonRejectsUnknownKeysAndBadFrustum) {
  const std::string ok =
      R"({"r_min":0,"r_max":10,"theta_min_deg":-65,"theta_max_deg":65,"phi_min_deg":-10,"phi_max_deg":10,"n_range":64,"n_bearing":64)";
  EXPECT_NO_THROW(parse_intrinsics(ok + "}"));
  EXPECT_THROW(parse_intrinsics(ok + R"(,"gain":2})"), Error);
  EXPECT_THROW(parse_intrinsics(
                   R"({"r_min":10,"r_max":1,"theta_min_deg":-65,"theta_max_deg":65,"phi_min_deg":-10,"phi_max_deg":10,"n_range":64,"n_bearing":64})"),
               Error);
  EXPECT_THROW(parse_intrinsics("{"), Error);
}

TEST(WrapAngle, HalfOpenInterval) {
  EXPECT_DOUBLE_EQ(wrap_angle(kPi), -kPi);
  EXPECT_NEAR(wrap_angle(3 * kPi / 2), -kPi / 2, 1e-15);
  EXPECT_NEAR(wrap_angle(-3 * kPi / 2), kPi / 2, 1e-15);
  EXPECT_DOUBLE_EQ(wrap_angle(0.25), 0.25);
}

// Properties over random valid points.

TEST(SonarModelProperty, RoundTrip) {
  test::Draw d(1);
  for (int i = 0; i < 10000; ++i) {
    const SphericalPoint s{d.uniform(0.01, 50), d.uniform(-kPi, kPi), d.uniform(-kPi / 2 + 1e-6, kPi / 2 - 1e-6)};
    const auto back = cartesian_to_spherical(spherical_to_cartesian(s));
    ASSERT_NEAR(back.range, s.range, 1e-12 * s.range);
    ASSERT_NEAR(wrap_angle(back.bearing - s.bearing), 0.0, 1e-12);
    ASSERT_NEAR(back.elevation, s.elevation, 1e-12);
  }
}

TEST(SonarModelProperty, ProjectionDropsElevation) {
  test::Draw d(2);
  for (int i = 0; i < 10000; ++i) {
    const SphericalPoint s{d.uniform(0.01, 50), d.uniform(-kPi, kPi), d.uniform(-kPi / 2 + 1e-6, kPi / 2 - 1e-6)};
    const auto p = project_to_image_plane(spherical_to_cartesian(s));
    ASSERT_NEAR(p.range, s.range, 1e-12 * s.range);
    ASSERT_NEAR(wrap_angle(p.bearing - s.bearing), 0.0, 1e-12);
  }
}
