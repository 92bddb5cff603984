#include "sonic/evaluation.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "sonic/error.hpp"

namespace sonic {

// ---------------------------------------------------------------------------
// Keypoints

std::vector<Keypoint> detect_keypoints(const PolarImage& image, const DetectorConfig& cfg) {
  const int H = image.rows, W = image.cols;
  if (H < 3 || W < 3 || cfg.max_count <= 0) return {};
  auto px = [&](int r, int c) {
    r = std::clamp(r, 0, H - 1);
    c = std::clamp(c, 0, W - 1);
    return static_cast<double>(image.at(r, c));
  };
  const std::size_t n = static_cast<std::size_t>(H) * W;
  std::vector<double> ixx(n), iyy(n), ixy(n);
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      const double gx = (px(r - 1, c + 1) + 2 * px(r, c + 1) + px(r + 1, c + 1) - px(r - 1, c - 1) -
                         2 * px(r, c - 1) - px(r + 1, c - 1)) / 8.0;
      const double gy = (px(r + 1, c - 1) + 2 * px(r + 1, c) + px(r + 1, c + 1) - px(r - 1, c - 1) -
                         2 * px(r - 1, c) - px(r - 1, c + 1)) / 8.0;
      const std::size_t k = static_cast<std::size_t>(r) * W + c;
      ixx[k] = gx * gx;
      iyy[k] = gy * gy;
      ixy[k] = gx * gy;
    }
  // 5x5 binomial window (Gaussian, sigma ~ 1).
  static constexpr double w5[5] = {1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};
  auto smooth = [&](const std::vector<double>& src) {
    std::vector<double> tmp(n, 0.0), out(n, 0.0);
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) {
        double s = 0.0;
        for (int d = -2; d <= 2; ++d) s += w5[d + 2] * src[static_cast<std::size_t>(r) * W + std::clamp(c + d, 0, W - 1)];
        tmp[static_cast<std::size_t>(r) * W + c] = s;
      }
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) {
        double s = 0.0;
        for (int d = -2; d <= 2; ++d) s += w5[d + 2] * tmp[static_cast<std::size_t>(std::clamp(r + d, 0, H - 1)) * W + c];
        out[static_cast<std::size_t>(r) * W + c] = s;
      }
    return out;
  };
  const auto sxx = smooth(ixx), syy = smooth(iyy), sxy = smooth(ixy);
  std::vector<double> resp(n, 0.0);
  double max_resp = 0.0;
  for (int r = cfg.border; r < H - cfg.border; ++r)
    for (int c = cfg.border; c < W - cfg.border; ++c) {
      const std::size_t k = static_cast<std::size_t>(r) * W + c;
      const double tr = sxx[k] + syy[k];
      resp[k] = sxx[k] * syy[k] - sxy[k] * sxy[k] - cfg.harris_k * tr * tr;
      max_resp = std::max(max_resp, resp[k]);
    }
  if (!(max_resp > 0.0)) return {};
  const double floor_resp = cfg.relative_threshold * max_resp;

  std::vector<Keypoint> out;
  const int rad = std::max(0, cfg.nms_radius);
  for (int r = cfg.border; r < H - cfg.border; ++r)
    for (int c = cfg.border; c < W - cfg.border; ++c) {
      const std::size_t k = static_cast<std::size_t>(r) * W + c;
      const double v = resp[k];
      if (!(v > floor_resp) || !(v > 0.0)) continue;
      bool is_max = true;
      for (int dr = -rad; dr <= rad && is_max; ++dr)
        for (int dc = -rad; dc <= rad; ++dc) {
          const int rr = r + dr, cc = c + dc;
          if ((dr == 0 && dc == 0) || rr < 0 || rr >= H || cc < 0 || cc >= W) continue;
          const double q = resp[static_cast<std::size_t>(rr) * W + cc];
          // Plateaus keep their first pixel in scan order.
          const bool earlier = dr < 0 || (dr == 0 && dc < 0);
          if (q > v || (earlier && q == v)) {
            is_max = false;
            break;
          }
        }
      if (is_max) out.push_back({{r + 0.5, c + 0.5}, v});
    }
  std::sort(out.begin(), out.end(), [](const Keypoint& a, const Keypoint& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.pixel.u != b.pixel.u) return a.pixel.u < b.pixel.u;
    return a.pixel.v < b.pixel.v;
  });
  if (out.size() > static_cast<std::size_t>(cfg.max_count)) out.resize(static_cast<std::size_t>(cfg.max_count));
  return out;
}

std::vector<Keypoint> detect_keypoints(const PolarImage& image, int max_count, int nms_radius) {
  DetectorConfig cfg;
  cfg.max_count = max_count;
  cfg.nms_radius = nms_radius;
  return detect_keypoints(image, cfg);
}

std::vector<PixelCoord> keypoint_pixels(std::span<const Keypoint> keypoints) {
  std::vector<PixelCoord> out;
  out.reserve(keypoints.size());
  for (const auto& k : keypoints) out.push_back(k.pixel);
  return out;
}

// ---------------------------------------------------------------------------
// Inliers and pruning

double contour_distance_px(const PixelCoord& query, const PixelCoord& point, const RelativePose& pose,
                           const SonarIntrinsics& intr, std::size_t arc_samples) {
  const PolarPoint q = pixel_to_polar(query, intr);
  const EpipolarContour contour = epipolar_contour(q.range, q.bearing, pose, intr, arc_samples);
  std::vector<Eigen::Vector2d> poly;
  for (const auto& s : contour.samples) {
    if (!s.valid) continue;
    const PixelCoord p = polar_to_pixel(s.point, intr);
    poly.emplace_back(p.u, p.v);
  }
  if (poly.empty()) throw Error(Errc::empty_contour, "contour_distance_px: no valid contour samples");
  const Eigen::Vector2d x(point.u, point.v);
  double best = (x - poly[0]).norm();
  for (std::size_t i = 1; i < poly.size(); ++i) {
    const Eigen::Vector2d d = poly[i] - poly[i - 1];
    const double len2 = d.squaredNorm();
    const double t = len2 > 0.0 ? std::clamp((x - poly[i - 1]).dot(d) / len2, 0.0, 1.0) : 0.0;
    best = std::min(best, (x - (poly[i - 1] + t * d)).norm());
  }
  return best;
}

InlierReport classify_inliers(std::span<const MatchResult> matches, const RelativePose& gt_pose,
                              const SonarIntrinsics& intr, double threshold_px, std::size_t arc_samples) {
  if (matches.empty()) throw Error(Errc::undefined_ratio, "classify_inliers: no matches");
  if (!(threshold_px >= 0.0)) throw Error(Errc::domain, "classify_inliers: threshold must be >= 0");
  InlierReport rep;
  for (const auto& m : matches) {
    const double d = contour_distance_px(m.query, m.predicted, gt_pose, intr, arc_samples);
    const bool ok = d <= threshold_px;
    rep.distance_px.push_back(d);
    rep.inlier.push_back(ok);
    rep.inliers += ok ? 1 : 0;
  }
  rep.ratio = static_cast<double>(rep.inliers) / static_cast<double>(matches.size());
  return rep;
}

namespace {
// Spreads below this are rounding noise of matches already on their contours.
constexpr double kMinDistanceSpreadPx = 1e-9;
}  // namespace

PruneResult z_test_prune(std::span<const MatchResult> matches, const RelativePose& prior_pose,
                         const SonarIntrinsics& intr, double z_threshold, std::size_t arc_samples) {
  if (!(z_threshold > 0.0)) throw Error(Errc::domain, "z_test_prune: threshold must be positive");
  PruneResult res;
  res.keep.assign(matches.size(), true);
  if (matches.size() < 3) {
    res.skipped = true;
    res.kept.assign(matches.begin(), matches.end());
    return res;
  }
  for (const auto& m : matches)
    res.distance_px.push_back(contour_distance_px(m.query, m.predicted, prior_pose, intr, arc_samples));
  const double n = static_cast<double>(matches.size());
  const double mean = std::accumulate(res.distance_px.begin(), res.distance_px.end(), 0.0) / n;
  double var = 0.0;
  for (double d : res.distance_px) var += (d - mean) * (d - mean);
  const double sd = std::sqrt(var / n);
  for (std::size_t i = 0; i < matches.size(); ++i) {
    if (sd > kMinDistanceSpreadPx && (res.distance_px[i] - mean) / sd > z_threshold) {
      res.keep[i] = false;
      ++res.pruned;
    } else {
      res.kept.push_back(matches[i]);
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Gauss-Newton

GaussNewtonResult gauss_newton_solve(const ResidualFunction& f, const Eigen::VectorXd& initial,
                                     const GaussNewtonConfig& cfg, const StateProjection& project) {
  GaussNewtonResult res;
  res.state = initial;
  if (project) project(res.state);
  ResidualEval ev = f(res.state);
  res.cost = ev.residual.squaredNorm();
  res.cost_trace.push_back(res.cost);
  const Eigen::Index n = res.state.size();

  for (int it = 0; it < cfg.max_iters; ++it) {
    if (ev.jacobian.rows() != ev.residual.size() || ev.jacobian.cols() != n)
      throw Error(Errc::shape, "gauss_newton_solve: Jacobian shape does not match residual/state");
    const Eigen::MatrixXd H = ev.jacobian.transpose() * ev.jacobian;
    const Eigen::VectorXd g = ev.jacobian.transpose() * ev.residual;

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(H, Eigen::EigenvaluesOnly);
    const double lmax = eig.eigenvalues().maxCoeff();
    const double lmin = eig.eigenvalues().minCoeff();
    const bool singular = !(lmax > 0.0) || lmin <= cfg.singular_threshold * lmax;

    auto try_step = [&](double lambda, Eigen::VectorXd& delta, Eigen::VectorXd& next, ResidualEval& next_ev) {
      Eigen::MatrixXd A = H;
      if (lambda > 0.0) A.diagonal().array() += lambda;
      delta = A.ldlt().solve(-g);
      next = res.state + delta;
      if (project) project(next);
      next_ev = f(next);
      return next_ev.residual.squaredNorm();
    };

    Eigen::VectorXd delta, next;
    ResidualEval next_ev;
    double next_cost = 0.0;
    if (singular) {
      if (!cfg.levenberg_fallback) {
        const double cond = lmin > 0.0 ? lmax / lmin : std::numeric_limits<double>::infinity();
        throw Error(Errc::singular_system, "gauss_newton_solve: normal matrix is rank deficient (condition " +
                                               std::to_string(cond) + ")");
      }
    } else {
      next_cost = try_step(0.0, delta, next, next_ev);
    }
    if (singular || (cfg.levenberg_fallback && next_cost > res.cost)) {
      res.damped = true;
      double lambda = 1e-6 * std::max(lmax, 1e-12);
      bool improved = false;
      for (int k = 0; k < 20; ++k, lambda *= 10.0) {
        next_cost = try_step(lambda, delta, next, next_ev);
        if (next_cost <= res.cost) {
          improved = true;
          break;
        }
      }
      if (!improved) {
        res.converged = delta.norm() < cfg.tol;
        break;
      }
    }
    const bool negligible = delta.norm() < cfg.tol;
    res.state = std::move(next);
    ev = std::move(next_ev);
    res.cost = next_cost;
    res.cost_trace.push_back(res.cost);
    if (negligible) {
      res.converged = true;
      break;
    }
    ++res.iterations;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Two-view bundle adjustment

namespace {

Eigen::Matrix3d rz(double yaw) { return rotation_zyx(yaw, 0.0, 0.0); }

}  // namespace

BundlePrior bundle_prior(const SensorPose& a, const SensorPose& b) {
  BundlePrior p;
  const Eigen::Vector3d m = planar_motion(a, b);
  p.b = {m.x(), m.y(), m.z(), b.position.z() - a.position.z(), b.pitch, b.roll};
  p.pitch_a = a.pitch;
  p.roll_a = a.roll;
  return p;
}

RelativePose relative_pose(const BundlePrior& prior) {
  SensorPose a, b;
  a.pitch = prior.pitch_a;
  a.roll = prior.roll_a;
  b.position = {prior.b.x, prior.b.y, prior.b.z};
  b.yaw = prior.b.yaw;
  b.pitch = prior.b.pitch;
  b.roll = prior.b.roll;
  return relative_pose(a, b);
}

std::vector<PolarMatch> to_polar_matches(std::span<const MatchResult> matches, const SonarIntrinsics& intr) {
  std::vector<PolarMatch> out;
  out.reserve(matches.size());
  for (const auto& m : matches) out.push_back({pixel_to_polar(m.query, intr), pixel_to_polar(m.predicted, intr)});
  return out;
}

BundleResult two_view_bundle_adjust(std::span<const PolarMatch> matches, const BundlePrior& prior,
                                    const SonarIntrinsics& intr, const BundleNoiseModel& noise,
                                    const GaussNewtonConfig& solver) {
  if (matches.size() < 3)
    throw Error(Errc::degenerate_geometry,
                "two_view_bundle_adjust: need at least 3 matches, got " + std::to_string(matches.size()));
  const double sr = noise.sigma_range > 0.0 ? noise.sigma_range : intr.range_bin();
  const double sb = noise.sigma_bearing > 0.0 ? noise.sigma_bearing : intr.bearing_bin();
  const std::size_t m = matches.size();
  const Eigen::Matrix3d Ra = rotation_zyx(0.0, prior.pitch_a, prior.roll_a);
  const Eigen::Matrix3d P = rotation_zyx(0.0, prior.b.pitch, prior.b.roll);
  const Eigen::Matrix3d ez_cross = (Eigen::Matrix3d() << 0, -1, 0, 1, 0, 0, 0, 0, 0).finished();
  // Elevations are carried as psi with phi = mid + half * sin(psi), which keeps
  // them inside the frustum without clamping. Clamped steps stall on landmarks
  // whose elevation wants to leave the frustum early in the solve.
  const double phi_mid = 0.5 * (intr.phi_max + intr.phi_min);
  const double phi_half = 0.5 * (intr.phi_max - intr.phi_min);
  auto to_phi = [&](double psi) { return phi_mid + phi_half * std::sin(psi); };
  auto to_psi = [&](double phi) { return std::asin(std::clamp((phi - phi_mid) / phi_half, -1.0, 1.0)); };

  auto residuals = [&](const Eigen::VectorXd& s) {
    ResidualEval ev;
    ev.residual = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(2 * m + 3));
    ev.jacobian = Eigen::MatrixXd::Zero(ev.residual.size(), s.size());
    const Eigen::Vector3d t(s[0], s[1], prior.b.z);
    const Eigen::Matrix3d Rzt = rz(s[2]).transpose();
    const Eigen::Matrix3d Pt = P.transpose();
    for (std::size_t j = 0; j < m; ++j) {
      const auto& mt = matches[j];
      const double psi = s[static_cast<Eigen::Index>(3 + j)];
      const double phi = to_phi(psi);
      const double ra = mt.a.range, ta = mt.a.bearing;
      const Eigen::Vector3d sa = spherical_to_cartesian({ra, ta, phi});
      const Eigen::Vector3d dsa_dphi = phi_half * std::cos(psi) *
                                       Eigen::Vector3d(-ra * std::cos(ta) * std::sin(phi),
                                                       -ra * std::sin(ta) * std::sin(phi), -ra * std::cos(phi));
      const Eigen::Vector3d pg = Ra * sa - t;
      const Eigen::Vector3d sbv = Pt * Rzt * pg;
      const double r = sbv.norm();
      const double rho2 = sbv.x() * sbv.x() + sbv.y() * sbv.y();
      if (!(r > 0.0) || !(rho2 > 0.0))
        throw Error(Errc::degenerate_geometry, "two_view_bundle_adjust: landmark projects onto the sensor axis");
      const double theta = std::atan2(sbv.y(), sbv.x());
      const Eigen::Index row = static_cast<Eigen::Index>(2 * j);
      ev.residual[row] = (r - mt.b.range) / sr;
      ev.residual[row + 1] = wrap_angle(theta - mt.b.bearing) / sb;

      Eigen::Matrix<double, 2, 3> dmeas;
      dmeas.row(0) = sbv.transpose() / r / sr;
      dmeas.row(1) = Eigen::RowVector3d(-sbv.y(), sbv.x(), 0.0) / rho2 / sb;
      const Eigen::Matrix3d A = Pt * Rzt;
      ev.jacobian.block<2, 1>(row, 0) = dmeas * (-A.col(0));
      ev.jacobian.block<2, 1>(row, 1) = dmeas * (-A.col(1));
      ev.jacobian.block<2, 1>(row, 2) = dmeas * (-Pt * ez_cross * Rzt * pg);
      ev.jacobian.block<2, 1>(row, static_cast<Eigen::Index>(3 + j)) = dmeas * (A * Ra * dsa_dphi);
    }
    const Eigen::Index pr = static_cast<Eigen::Index>(2 * m);
    ev.residual[pr] = (s[0] - prior.b.x) / noise.prior_sigma_xy;
    ev.residual[pr + 1] = (s[1] - prior.b.y) / noise.prior_sigma_xy;
    ev.residual[pr + 2] = wrap_angle(s[2] - prior.b.yaw) / noise.prior_sigma_yaw;
    ev.jacobian(pr, 0) = 1.0 / noise.prior_sigma_xy;
    ev.jacobian(pr + 1, 1) = 1.0 / noise.prior_sigma_xy;
    ev.jacobian(pr + 2, 2) = 1.0 / noise.prior_sigma_yaw;
    return ev;
  };
  auto project = [&](Eigen::VectorXd& s) { s[2] = wrap_angle(s[2]); };

  // Elevations start at 0. Near-planar motion leaves the sign of each
  // elevation nearly ambiguous, so a solve can settle on mirrored branches.
  // Each refined pose seeds restarts from a scan along every arc and from
  // mirrored elevations, repeated while the cost keeps dropping.
  auto scan_elevations = [&](Eigen::VectorXd& x) {
    BundlePrior at = prior;
    at.b.x = x[0];
    at.b.y = x[1];
    at.b.yaw = x[2];
    const RelativePose rel = relative_pose(at);
    constexpr int kScan = 81;
    for (std::size_t j = 0; j < m; ++j) {
      double best = std::numeric_limits<double>::infinity();
      double best_phi = 0.0;
      for (int k = 0; k < kScan; ++k) {
        const double phi = intr.phi_min + (intr.phi_max - intr.phi_min) * (k + 0.5) / kScan;
        const CartesianPoint q = rel.apply(spherical_to_cartesian({matches[j].a.range, matches[j].a.bearing, phi}));
        if (!(q.norm() > 0.0)) continue;
        const PolarPoint pb = project_to_image_plane(q);
        const double dr = (pb.range - matches[j].b.range) / sr;
        const double db = wrap_angle(pb.bearing - matches[j].b.bearing) / sb;
        const double c = dr * dr + db * db;
        if (c < best) {
          best = c;
          best_phi = phi;
        }
      }
      x[static_cast<Eigen::Index>(3 + j)] = to_psi(best_phi);
    }
  };

  Eigen::VectorXd x0 = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(3 + m));
  x0[0] = prior.b.x;
  x0[1] = prior.b.y;
  x0[2] = prior.b.yaw;
  for (Eigen::Index k = 3; k < x0.size(); ++k) x0[k] = to_psi(std::clamp(0.0, intr.phi_min, intr.phi_max));
  BundleResult out;
  out.solve = gauss_newton_solve(residuals, x0, solver, project);
  int total_iters = out.solve.iterations;
  auto attempt = [&](const Eigen::VectorXd& x) {
    if (x == out.solve.state) return false;
    auto again = gauss_newton_solve(residuals, x, solver, project);
    total_iters += again.iterations;
    if (!(again.cost < out.solve.cost * (1.0 - 1e-9))) return false;
    out.solve = std::move(again);
    return true;
  };
  auto mirrored = [&](double psi) { return to_psi(std::clamp(-to_phi(psi), intr.phi_min, intr.phi_max)); };
  for (int round = 0; round < 4; ++round) {
    bool improved = false;
    Eigen::VectorXd x = out.solve.state;
    scan_elevations(x);
    improved |= attempt(x);
    x = out.solve.state;
    for (Eigen::Index k = 3; k < x.size(); ++k) x[k] = mirrored(x[k]);
    improved |= attempt(x);
    for (Eigen::Index k = 3; k < x.size(); ++k) {
      x = out.solve.state;
      x[k] = mirrored(x[k]);
      improved |= attempt(x);
    }
    if (!improved) break;
  }
  out.solve.iterations = total_iters;
  const auto& s = out.solve.state;
  out.pose = prior.b;
  out.pose.x = s[0];
  out.pose.y = s[1];
  out.pose.yaw = s[2];
  out.elevations.clear();
  for (Eigen::Index k = 3; k < s.size(); ++k) out.elevations.push_back(to_phi(s[k]));
  return out;
}

PoseError pose_error(const PlanarPoseEstimate& estimate, const PlanarPoseEstimate& truth) {
  return {std::hypot(estimate.x - truth.x, estimate.y - truth.y), std::abs(wrap_angle(estimate.yaw - truth.yaw))};
}

// ---------------------------------------------------------------------------
// Patch baseline

FeatureMap patch_descriptor_map(const PolarImage& image, int factor, int patch_radius, FeatureLevel level) {
  if (factor < 1 || image.rows % factor != 0 || image.cols % factor != 0)
    throw Error(Errc::shape, "patch_descriptor_map: image not divisible by factor " + std::to_string(factor));
  const int pool = std::max(1, factor / 2);
  const int ph = image.rows / pool, pw = image.cols / pool;
  std::vector<double> pooled(static_cast<std::size_t>(ph) * pw, 0.0);
  for (int r = 0; r < image.rows; ++r)
    for (int c = 0; c < image.cols; ++c)
      pooled[static_cast<std::size_t>(r / pool) * pw + c / pool] += image.at(r, c);
  for (double& v : pooled) v /= pool * pool;

  const int side = 2 * patch_radius + 1;
  FeatureMap m(image.rows / factor, image.cols / factor, side * side, factor, level);
  for (int i = 0; i < m.height; ++i)
    for (int j = 0; j < m.width; ++j) {
      const int cr = (2 * i + 1) * factor / (2 * pool);
      const int cc = (2 * j + 1) * factor / (2 * pool);
      auto d = m.cell(i, j);
      int k = 0;
      for (int dr = -patch_radius; dr <= patch_radius; ++dr)
        for (int dc = -patch_radius; dc <= patch_radius; ++dc, ++k) {
          const int r = cr + dr, c = cc + dc;
          d[static_cast<std::size_t>(k)] =
              (r >= 0 && r < ph && c >= 0 && c < pw) ? pooled[static_cast<std::size_t>(r) * pw + c] : 0.0;
        }
      double mean = 0.0;
      for (double v : d) mean += v;
      mean /= static_cast<double>(d.size());
      double sq = 0.0;
      for (double& v : d) {
        v -= mean;
        sq += v * v;
      }
      const double norm = std::sqrt(sq);
      if (norm > 1e-12)
        for (double& v : d) v /= norm;
      else
        std::fill(d.begin(), d.end(), 0.0);
    }
  return m;
}

LevelMaps patch_baseline_maps(const PolarImage& image, const PatchBaselineConfig& cfg) {
  return {patch_descriptor_map(image, cfg.coarse_factor, cfg.coarse_patch_radius, FeatureLevel::coarse),
          patch_descriptor_map(image, cfg.fine_factor, cfg.fine_patch_radius, FeatureLevel::fine)};
}

}  // namespace sonic
