#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "crowdcalib/types.hpp"

namespace crowdcalib {

inline Eigen::Matrix3d skew(const Eigen::Vector3d& v) {
  Eigen::Matrix3d m;
  // clang-format off
  m <<     0, -v.z(),  v.y(),
       v.z(),      0, -v.x(),
      -v.y(),  v.x(),      0;
  // clang-format on
  return m;
}

// Forward distortion on normalized coordinates.
inline Eigen::Vector2d distort(const Eigen::Vector2d& n, const CameraIntrinsics& k) {
  const double x = n.x();
  const double y = n.y();
  const double r2 = x * x + y * y;
  const double k1 = k.dist[0], k2 = k.dist[1], p1 = k.dist[2], p2 = k.dist[3], k3 = k.dist[4];
  const double radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3));
  return {x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x),
          y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y};
}

// Pixel -> normalized camera coordinates, undoing distortion by fixed-point
// iteration (at most 20 rounds, stops once the step falls below 1e-12).
inline Eigen::Vector2d undistort_normalize(const Eigen::Vector2d& px,
                                           const CameraIntrinsics& k) {
  const double xd = (px.x() - k.cx) / k.fx;
  const double yd = (px.y() - k.cy) / k.fy;
  if (!k.has_distortion()) return {xd, yd};

  const double k1 = k.dist[0], k2 = k.dist[1], p1 = k.dist[2], p2 = k.dist[3], k3 = k.dist[4];
  double x = xd;
  double y = yd;
  for (int iter = 0; iter < 20; ++iter) {
    const double r2 = x * x + y * y;
    const double radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3));
    const double dx = 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x);
    const double dy = p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y;
    const double xn = (xd - dx) / radial;
    const double yn = (yd - dy) / radial;
    const double step = std::max(std::abs(xn - x), std::abs(yn - y));
    x = xn;
    y = yn;
    if (step < 1e-12) return {x, y};
  }
  throw Error(ErrorCode::FlaggedPoint, "undistort_normalize: inverse distortion did not converge");
}

// Point in the reference frame -> pixel in the given camera.
inline Eigen::Vector2d project(const Eigen::Vector3d& point, const PoseSE3& pose,
                               const CameraIntrinsics& k) {
  const Eigen::Vector3d xc = pose.apply(point);
  if (xc.z() <= 0.0)
    throw Error(ErrorCode::BehindCamera, "project: point has nonpositive depth");
  const Eigen::Vector2d d = distort({xc.x() / xc.z(), xc.y() / xc.z()}, k);
  return {k.fx * d.x() + k.cx, k.fy * d.y() + k.cy};
}

// E for a known relative pose, scaled to Frobenius norm sqrt(2).
// With x_b = R x_a + t the constraint a' E b = 0 holds for E = R' [t]x.
inline EssentialMatrix essential_from_pose(const PoseSE3& pose) {
  Eigen::Matrix3d e = pose.rotation.transpose() * skew(pose.translation);
  const double norm = e.norm();
  if (norm > 0.0) e *= std::sqrt(2.0) / norm;
  return {e};
}

namespace detail {

// Hartley conditioning: centroid to the origin, RMS radius sqrt(2).
inline Eigen::Matrix3d conditioning_transform(std::span<const PointPair> pairs,
                                              bool side_a) {
  Eigen::Vector2d mean = Eigen::Vector2d::Zero();
  for (const auto& p : pairs) mean += side_a ? p.a : p.b;
  mean /= static_cast<double>(pairs.size());

  double rms = 0.0;
  for (const auto& p : pairs) rms += ((side_a ? p.a : p.b) - mean).squaredNorm();
  rms = std::sqrt(rms / static_cast<double>(pairs.size()));
  const double s = rms > 1e-15 ? std::sqrt(2.0) / rms : 1.0;

  Eigen::Matrix3d t = Eigen::Matrix3d::Identity();
  t(0, 0) = s;
  t(1, 1) = s;
  t(0, 2) = -s * mean.x();
  t(1, 2) = -s * mean.y();
  return t;
}

// Conditioned linear solve of a' E b = 0, optionally with per-pair row
// weights, followed by (sigma, sigma, 0) enforcement. The caller owns the
// choice of weights; nullptr means the plain algebraic solve.
inline EssentialMatrix solve_eight_point(std::span<const PointPair> pairs,
                                         const Eigen::VectorXd* weights) {
  const Eigen::Matrix3d ta = conditioning_transform(pairs, true);
  const Eigen::Matrix3d tb = conditioning_transform(pairs, false);

  Eigen::MatrixXd design(static_cast<Eigen::Index>(pairs.size()), 9);
  for (Eigen::Index i = 0; i < design.rows(); ++i) {
    const auto& p = pairs[static_cast<std::size_t>(i)];
    const Eigen::Vector3d a = ta * p.a.homogeneous();
    const Eigen::Vector3d b = tb * p.b.homogeneous();
    design.row(i) << a.x() * b.x(), a.x() * b.y(), a.x() * b.z(),
                     a.y() * b.x(), a.y() * b.y(), a.y() * b.z(),
                     a.z() * b.x(), a.z() * b.y(), a.z() * b.z();
    if (weights) design.row(i) *= (*weights)(i);
  }

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(design, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  // A one-dimensional null space needs the first 8 singular values alive.
  if (sv(7) <= 1e-12 * sv(0))
    throw Error(ErrorCode::DegenerateConfiguration,
                "estimate_essential: rank-deficient design matrix");

  const Eigen::Matrix<double, 9, 1> e = svd.matrixV().col(8);
  Eigen::Matrix3d raw;
  raw << e(0), e(1), e(2), e(3), e(4), e(5), e(6), e(7), e(8);
  raw = (ta.transpose() * raw * tb).eval();

  Eigen::JacobiSVD<Eigen::Matrix3d> esvd(raw, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Vector3d s = esvd.singularValues();
  const double sigma = 0.5 * (s(0) + s(1));
  if (sigma <= 0.0)
    throw Error(ErrorCode::DegenerateConfiguration, "estimate_essential: zero solution");
  // Unit leading singular values give Frobenius norm sqrt(2) directly.
  return {esvd.matrixU() * Eigen::Vector3d(1.0, 1.0, 0.0).asDiagonal() *
          esvd.matrixV().transpose()};
}

}  // namespace detail

// Normalized 8-point solve of a' E b = 0 over the given (already
// normalized-coordinate) pairs, with (sigma, sigma, 0) singular value
// enforcement. Result has Frobenius norm sqrt(2).
inline EssentialMatrix estimate_essential(std::span<const PointPair> pairs) {
  if (pairs.size() < 8)
    throw Error(ErrorCode::DegenerateConfiguration,
                "estimate_essential: need at least 8 pairs, got " + std::to_string(pairs.size()));
  return detail::solve_eight_point(pairs, nullptr);
}

// First-order geometric epipolar distance of one normalized pair.
// Falls back to the algebraic residual |a' E b| when every gradient
// term vanishes.
inline double sampson_distance(const EssentialMatrix& e, const PointPair& pair) {
  const Eigen::Vector3d a = pair.a.homogeneous();
  const Eigen::Vector3d b = pair.b.homogeneous();
  const Eigen::Vector3d eb = e.e * b;
  const Eigen::Vector3d eta = e.e.transpose() * a;
  const double alg = a.dot(eb);
  const double g2 = eb.x() * eb.x() + eb.y() * eb.y() + eta.x() * eta.x() + eta.y() * eta.y();
  if (g2 <= 0.0) return std::abs(alg);
  return std::abs(alg) / std::sqrt(g2);
}

// Iteratively reweighted re-solve: every pass scales the linear system's
// rows by the inverse Sampson denominator of the current estimate, so the
// fixed point minimizes summed squared Sampson distance instead of the raw
// algebraic error. The plain solve is ill-conditioned on near-coplanar
// points (people on a common ground plane); the reweighting recovers the
// geometric optimum there. Returns the lowest-cost iterate seen.
inline EssentialMatrix refine_essential(const EssentialMatrix& initial,
                                        std::span<const PointPair> pairs,
                                        int iterations = 5) {
  if (pairs.size() < 8)
    throw Error(ErrorCode::DegenerateConfiguration,
                "refine_essential: need at least 8 pairs, got " + std::to_string(pairs.size()));

  const auto cost = [&pairs](const EssentialMatrix& e) {
    double c = 0.0;
    for (const auto& p : pairs) {
      const double d = sampson_distance(e, p);
      c += d * d;
    }
    return c;
  };

  EssentialMatrix best = initial;
  double best_cost = cost(best);
  EssentialMatrix current = initial;
  Eigen::VectorXd weights(static_cast<Eigen::Index>(pairs.size()));
  for (int it = 0; it < iterations; ++it) {
    for (Eigen::Index i = 0; i < weights.size(); ++i) {
      const auto& p = pairs[static_cast<std::size_t>(i)];
      const Eigen::Vector3d eb = current.e * p.b.homogeneous();
      const Eigen::Vector3d eta = current.e.transpose() * p.a.homogeneous();
      const double g2 = eb.x() * eb.x() + eb.y() * eb.y() +
                        eta.x() * eta.x() + eta.y() * eta.y();
      weights(i) = 1.0 / std::sqrt(std::max(g2, 1e-12));
    }
    try {
      current = detail::solve_eight_point(pairs, &weights);
    } catch (const Error&) {
      break;
    }
    const double c = cost(current);
    if (c < best_cost) {
      best_cost = c;
      best = current;
    }
  }
  return best;
}

namespace detail {

// Linear two-view DLT. Returns false when the homogeneous solution is
// at infinity (parallel rays). Depths are signed.
inline bool triangulate_linear(const PointPair& pair, const PoseSE3& pose,
                               Eigen::Vector3d& point, double& depth_a, double& depth_b) {
  const Eigen::Matrix3d& r = pose.rotation;
  const Eigen::Vector3d& t = pose.translation;

  Eigen::Matrix4d design;
  design.row(0) << -1.0, 0.0, pair.a.x(), 0.0;
  design.row(1) << 0.0, -1.0, pair.a.y(), 0.0;
  design.row(2) << pair.b.x() * r.row(2) - r.row(0), pair.b.x() * t.z() - t.x();
  design.row(3) << pair.b.y() * r.row(2) - r.row(1), pair.b.y() * t.z() - t.y();

  Eigen::JacobiSVD<Eigen::Matrix4d> svd(design, Eigen::ComputeFullV);
  const Eigen::Vector4d xh = svd.matrixV().col(3);
  if (std::abs(xh(3)) <= 1e-12 * xh.head<3>().norm()) return false;

  point = xh.head<3>() / xh(3);
  depth_a = point.z();
  depth_b = (r * point + t).z();
  return true;
}

}  // namespace detail

constexpr double kMinParallaxRad = 0.1 * M_PI / 180.0;

// DLT triangulation of one normalized pair; result in the frame of
// camera A. Throws for points behind either camera or rays closer to
// parallel than 0.1 degrees.
inline Eigen::Vector3d triangulate(const PointPair& pair, const PoseSE3& pose) {
  Eigen::Vector3d point;
  double depth_a = 0.0, depth_b = 0.0;
  if (!detail::triangulate_linear(pair, pose, point, depth_a, depth_b))
    throw Error(ErrorCode::LowParallax, "triangulate: parallel rays");
  if (depth_a <= 0.0 || depth_b <= 0.0)
    throw Error(ErrorCode::BehindCamera, "triangulate: point behind a camera");

  const Eigen::Vector3d ray_a = point;
  const Eigen::Vector3d ray_b = point - pose.center();
  const double denom = ray_a.norm() * ray_b.norm();
  if (denom <= 0.0)
    throw Error(ErrorCode::LowParallax, "triangulate: degenerate rays");
  const double cosang = std::clamp(ray_a.dot(ray_b) / denom, -1.0, 1.0);
  if (std::acos(cosang) < kMinParallaxRad)
    throw Error(ErrorCode::LowParallax, "triangulate: parallax below 0.1 deg");
  return point;
}

namespace detail {

// The four (R, t) candidates of the textbook SVD decomposition, unit
// translation, no cheirality filtering.
inline std::array<PoseSE3, 4> pose_candidates_from_essential(const EssentialMatrix& e) {
  // a' E b = 0 is b' G a = 0 for G = E', the [t]x R form the textbook
  // decomposition expects.
  const Eigen::Matrix3d g = e.e.transpose();
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(g, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d u = svd.matrixU();
  Eigen::Matrix3d v = svd.matrixV();
  if (u.determinant() < 0.0) u = -u;
  if (v.determinant() < 0.0) v = -v;

  Eigen::Matrix3d w;
  w << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  const Eigen::Matrix3d r1 = u * w * v.transpose();
  const Eigen::Matrix3d r2 = u * w.transpose() * v.transpose();
  const Eigen::Vector3d t = u.col(2).normalized();

  std::array<PoseSE3, 4> out;
  const std::array<std::pair<const Eigen::Matrix3d*, double>, 4> combos = {
      {{&r1, 1.0}, {&r1, -1.0}, {&r2, 1.0}, {&r2, -1.0}}};
  for (std::size_t c = 0; c < 4; ++c) {
    out[c].rotation = *combos[c].first;
    out[c].translation = combos[c].second * t;
    out[c].metric = false;
  }
  return out;
}

// Positive-depth votes a candidate pose collects over the pairs.
inline std::size_t cheirality_count(const PoseSE3& pose, std::span<const PointPair> pairs) {
  std::size_t count = 0;
  for (const auto& p : pairs) {
    Eigen::Vector3d x;
    double da = 0.0, db = 0.0;
    if (triangulate_linear(p, pose, x, da, db) && da > 0.0 && db > 0.0) ++count;
  }
  return count;
}

}  // namespace detail

// Four-candidate SVD decomposition with cheirality voting over the
// given normalized inlier pairs. Translation comes back unit-norm.
inline PoseSE3 decompose_essential(const EssentialMatrix& e, std::span<const PointPair> pairs) {
  if (pairs.empty())
    throw Error(ErrorCode::CheiralityAmbiguity, "decompose_essential: no pairs to vote with");

  const std::array<PoseSE3, 4> candidates = detail::pose_candidates_from_essential(e);
  int best = -1;
  std::size_t best_count = 0;
  for (int c = 0; c < 4; ++c) {
    const std::size_t count =
        detail::cheirality_count(candidates[static_cast<std::size_t>(c)], pairs);
    if (count > best_count) {
      best_count = count;
      best = c;
    }
  }

  if (best < 0 || 2 * best_count <= pairs.size())
    throw Error(ErrorCode::CheiralityAmbiguity,
                "decompose_essential: no candidate passes the cheirality vote");

  return candidates[static_cast<std::size_t>(best)];
}

// Conditioned DLT homography with b ~ H a, sign-fixed so the third
// coordinate of H a is positive for most of the fitted pairs. Used as a
// hypothesis generator on dominant-plane scenes, where the essential
// design matrix loses rank but the plane induces a well-behaved H.
inline Eigen::Matrix3d estimate_homography(std::span<const PointPair> pairs) {
  if (pairs.size() < 4)
    throw Error(ErrorCode::DegenerateConfiguration,
                "estimate_homography: need at least 4 pairs, got " + std::to_string(pairs.size()));

  const Eigen::Matrix3d ta = detail::conditioning_transform(pairs, true);
  const Eigen::Matrix3d tb = detail::conditioning_transform(pairs, false);

  Eigen::MatrixXd design(2 * static_cast<Eigen::Index>(pairs.size()), 9);
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(pairs.size()); ++i) {
    const auto& p = pairs[static_cast<std::size_t>(i)];
    const Eigen::Vector3d a = ta * p.a.homogeneous();
    const Eigen::Vector3d b = tb * p.b.homogeneous();
    design.row(2 * i) << -a.transpose(), 0.0, 0.0, 0.0, b.x() * a.transpose();
    design.row(2 * i + 1) << 0.0, 0.0, 0.0, -a.transpose(), b.y() * a.transpose();
  }

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(design, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  if (sv(7) <= 1e-12 * sv(0))
    throw Error(ErrorCode::DegenerateConfiguration,
                "estimate_homography: rank-deficient design matrix");

  const Eigen::Matrix<double, 9, 1> h = svd.matrixV().col(8);
  Eigen::Matrix3d raw;
  raw << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
  Eigen::Matrix3d out = tb.inverse() * raw * ta;

  int positive = 0;
  for (const auto& p : pairs)
    if ((out * p.a.homogeneous()).z() > 0.0) ++positive;
  if (2 * positive < static_cast<int>(pairs.size())) out = -out;
  return out;
}

// Faugeras-style decomposition of a calibrated homography b ~ H a with
// H proportional to R + t n' / d. Returns up to eight unit-translation
// pose candidates; the caller disambiguates by consensus and cheirality.
// Near-pure-rotation homographies (all singular values close) yield an
// empty list since the translation direction is then unobservable.
inline std::vector<PoseSE3> decompose_homography(const Eigen::Matrix3d& h) {
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Matrix3d u = svd.matrixU();
  const Eigen::Matrix3d v = svd.matrixV();
  const double s = u.determinant() * v.determinant();
  const double d1 = svd.singularValues()(0);
  const double d2 = svd.singularValues()(1);
  const double d3 = svd.singularValues()(2);

  std::vector<PoseSE3> out;
  if (!(d1 > 0.0) || d1 / d2 < 1.00001 || d2 / d3 < 1.00001) return out;

  const double aux1 = std::sqrt((d1 * d1 - d2 * d2) / (d1 * d1 - d3 * d3));
  const double aux3 = std::sqrt((d2 * d2 - d3 * d3) / (d1 * d1 - d3 * d3));
  const std::array<double, 4> x1 = {aux1, aux1, -aux1, -aux1};
  const std::array<double, 4> x3 = {aux3, -aux3, aux3, -aux3};

  const auto push = [&](const Eigen::Matrix3d& rp, const Eigen::Vector3d& tp) {
    PoseSE3 pose;
    pose.rotation = s * u * rp * v.transpose();
    const Eigen::Vector3d t = u * tp;
    const double norm = t.norm();
    if (norm <= 1e-12) return;
    pose.translation = t / norm;
    pose.metric = false;
    out.push_back(pose);
  };

  // d' = +d2 branch: rotation about the intermediate axis by theta.
  const double stheta_mag = std::sqrt((d1 * d1 - d2 * d2) * (d2 * d2 - d3 * d3)) / ((d1 + d3) * d2);
  const double ctheta = (d2 * d2 + d1 * d3) / ((d1 + d3) * d2);
  for (std::size_t i = 0; i < 4; ++i) {
    const double stheta = x1[i] * x3[i] >= 0.0 ? stheta_mag : -stheta_mag;
    Eigen::Matrix3d rp;
    rp << ctheta, 0, -stheta, 0, 1, 0, stheta, 0, ctheta;
    push(rp, (d1 - d3) * Eigen::Vector3d(x1[i], 0.0, -x3[i]));
  }

  // d' = -d2 branch: the reflected family.
  const double sphi_mag = std::sqrt((d1 * d1 - d2 * d2) * (d2 * d2 - d3 * d3)) / ((d1 - d3) * d2);
  const double cphi = (d1 * d3 - d2 * d2) / ((d1 - d3) * d2);
  for (std::size_t i = 0; i < 4; ++i) {
    const double sphi = x1[i] * x3[i] >= 0.0 ? sphi_mag : -sphi_mag;
    Eigen::Matrix3d rp;
    rp << cphi, 0, sphi, 0, -1, 0, sphi, 0, -cphi;
    push(rp, (d1 + d3) * Eigen::Vector3d(x1[i], 0.0, x3[i]));
  }
  return out;
}

namespace detail {

// Rodrigues exponential map, stable for small angles.
inline Eigen::Matrix3d rodrigues(const Eigen::Vector3d& w) {
  const double angle = w.norm();
  if (angle < 1e-12) return Eigen::Matrix3d::Identity() + skew(w);
  const Eigen::Vector3d axis = w / angle;
  const Eigen::Matrix3d k = skew(axis);
  return Eigen::Matrix3d::Identity() + std::sin(angle) * k +
         (1.0 - std::cos(angle)) * k * k;
}

}  // namespace detail

// Levenberg-Marquardt over the five-parameter relative pose manifold
// (rotation, unit translation direction), minimizing summed squared
// Sampson distance. The linear solvers cannot impose the manifold
// structure, which is exactly what goes missing on near-coplanar point
// sets; this step recovers it from any reasonable starting pose. The
// Jacobian is a central difference: five parameters and a cheap residual
// make that both simple and accurate.
inline PoseSE3 refine_relative_pose(const PoseSE3& initial, std::span<const PointPair> pairs,
                                    int max_iters = 30) {
  if (pairs.size() < 5)
    throw Error(ErrorCode::DegenerateConfiguration,
                "refine_relative_pose: need at least 5 pairs, got " + std::to_string(pairs.size()));

  PoseSE3 pose = initial;
  pose.translation.normalize();
  pose.metric = false;

  const auto residuals = [&pairs](const PoseSE3& p, Eigen::VectorXd& r) {
    const EssentialMatrix e = essential_from_pose(p);
    for (Eigen::Index i = 0; i < r.size(); ++i)
      r(i) = sampson_distance(e, pairs[static_cast<std::size_t>(i)]);
  };

  // Tangent step: left-applied rotation increment, translation moved in
  // the sphere tangent plane and renormalized.
  const auto step = [](const PoseSE3& p, const Eigen::Matrix<double, 5, 1>& d) {
    const Eigen::Vector3d t = p.translation;
    const int smallest = std::abs(t.x()) < std::abs(t.y())
                             ? (std::abs(t.x()) < std::abs(t.z()) ? 0 : 2)
                             : (std::abs(t.y()) < std::abs(t.z()) ? 1 : 2);
    const Eigen::Vector3d b1 = t.cross(Eigen::Vector3d::Unit(smallest)).normalized();
    const Eigen::Vector3d b2 = t.cross(b1);
    PoseSE3 q = p;
    q.rotation = detail::rodrigues(d.head<3>()) * p.rotation;
    q.translation = (t + d(3) * b1 + d(4) * b2).normalized();
    return q;
  };

  const Eigen::Index n = static_cast<Eigen::Index>(pairs.size());
  Eigen::VectorXd r(n), r_plus(n), r_minus(n), r_try(n);
  residuals(pose, r);
  double cost = r.squaredNorm();

  double damping = 1e-6;
  for (int iter = 0; iter < max_iters; ++iter) {
    Eigen::MatrixXd jac(n, 5);
    constexpr double kStep = 1e-7;
    for (int k = 0; k < 5; ++k) {
      Eigen::Matrix<double, 5, 1> d = Eigen::Matrix<double, 5, 1>::Zero();
      d(k) = kStep;
      residuals(step(pose, d), r_plus);
      d(k) = -kStep;
      residuals(step(pose, d), r_minus);
      jac.col(k) = (r_plus - r_minus) / (2.0 * kStep);
    }

    const Eigen::Matrix<double, 5, 5> jtj = jac.transpose() * jac;
    const Eigen::Matrix<double, 5, 1> jtr = jac.transpose() * r;
    bool accepted = false;
    for (int attempt = 0; attempt < 8; ++attempt) {
      Eigen::Matrix<double, 5, 5> lhs = jtj;
      lhs.diagonal() += damping * jtj.diagonal().cwiseMax(1e-12);
      const Eigen::Matrix<double, 5, 1> delta = lhs.ldlt().solve(-jtr);
      if (!delta.allFinite()) {
        damping *= 10.0;
        continue;
      }
      const PoseSE3 trial = step(pose, delta);
      residuals(trial, r_try);
      const double trial_cost = r_try.squaredNorm();
      if (trial_cost < cost) {
        pose = trial;
        r = r_try;
        const double rel = (cost - trial_cost) / std::max(cost, 1e-300);
        cost = trial_cost;
        damping = std::max(damping * 0.5, 1e-12);
        accepted = true;
        if (rel < 1e-12) iter = max_iters;
        break;
      }
      damping *= 10.0;
    }
    if (!accepted) break;
  }
  return pose;
}

}  // namespace crowdcalib
