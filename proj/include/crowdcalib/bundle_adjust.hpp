#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "crowdcalib/geometry.hpp"
#include "crowdcalib/types.hpp"

namespace crowdcalib {

struct BAObservation {
  int camera = 0;
  int point = 0;
  Eigen::Vector2d pixel = Eigen::Vector2d::Zero();
  double weight = 1.0;
};

struct BACamera {
  PoseSE3 pose;
  CameraIntrinsics intrinsics;
  bool fixed = false;
  // When set, the translation is rescaled to this norm after every
  // accepted step. Used to pin the scale gauge.
  std::optional<double> translation_norm;
};

struct BAProblem {
  std::vector<BACamera> cameras;
  std::vector<Eigen::Vector3d> points;
  std::vector<BAObservation> observations;

  void validate() const {
    if (cameras.empty()) throw Error(ErrorCode::ConfigError, "BAProblem: no cameras");
    if (points.empty()) throw Error(ErrorCode::ConfigError, "BAProblem: no points");
    if (observations.empty()) throw Error(ErrorCode::ConfigError, "BAProblem: no observations");
    for (const auto& cam : cameras) cam.intrinsics.validate();
    std::vector<std::pair<int, int>> seen(points.size(), {-1, -1});
    for (const auto& obs : observations) {
      if (obs.camera < 0 || obs.camera >= static_cast<int>(cameras.size()))
        throw Error(ErrorCode::ConfigError, "BAProblem: observation camera index out of range");
      if (obs.point < 0 || obs.point >= static_cast<int>(points.size()))
        throw Error(ErrorCode::ConfigError, "BAProblem: observation point index out of range");
      if (!(obs.weight > 0.0) || !obs.pixel.allFinite())
        throw Error(ErrorCode::ConfigError, "BAProblem: invalid observation");
      auto& s = seen[obs.point];
      if (s.first < 0)
        s.first = obs.camera;
      else if (s.first != obs.camera)
        s.second = obs.camera;
    }
    for (std::size_t i = 0; i < seen.size(); ++i)
      if (seen[i].second < 0)
        throw Error(ErrorCode::ConfigError,
                    "BAProblem: point " + std::to_string(i) + " is not observed by two cameras");
    if (std::none_of(cameras.begin(), cameras.end(),
                     [](const BACamera& c) { return c.fixed; }))
      throw Error(ErrorCode::ConfigError, "BAProblem: no fixed camera to pin the gauge");
  }
};

struct LMConfig {
  int max_iters = 100;
  double cost_tolerance = 1e-10;   // relative decrease between accepted steps
  double param_tolerance = 1e-12;  // step norm relative to parameter norm
  double initial_damping = 1e-3;
  double damping_up = 10.0;
  double damping_down = 0.5;
  double damping_max = 1e12;
  // Huber scale in pixels; nullopt gives a plain quadratic loss.
  std::optional<double> huber_scale_px = 3.0;
};

enum class LMStatus { Converged, MaxIterations, NonConvergence };

struct LMResult {
  BAProblem problem;               // best state reached
  std::vector<double> cost_trace;  // initial cost, then each accepted cost
  LMStatus status = LMStatus::Converged;
  int accepted_steps = 0;
  std::string message;
};

namespace detail {

struct ActiveLayout {
  std::vector<int> camera_slot;  // -1 for fixed cameras
  int n_active = 0;
};

inline ActiveLayout make_layout(const BAProblem& p) {
  ActiveLayout layout;
  layout.camera_slot.assign(p.cameras.size(), -1);
  for (std::size_t i = 0; i < p.cameras.size(); ++i)
    if (!p.cameras[i].fixed) layout.camera_slot[i] = layout.n_active++;
  return layout;
}

// Huber loss on the squared pixel norm s: quadratic up to the scale,
// linear beyond it.
inline double robust_cost(double s, const std::optional<double>& huber) {
  if (!huber) return s;
  const double delta = *huber;
  const double r = std::sqrt(s);
  if (r <= delta) return s;
  return 2.0 * delta * r - delta * delta;
}

inline double robust_weight(double s, const std::optional<double>& huber) {
  if (!huber) return 1.0;
  const double delta = *huber;
  const double r = std::sqrt(s);
  if (r <= delta) return 1.0;
  return delta / r;
}

// Jacobian of the pixel projection with respect to the camera-frame
// point. Chain: perspective division, distortion, focal scaling.
inline Eigen::Matrix<double, 2, 3> projection_jacobian(const Eigen::Vector3d& x_cam,
                                                       const CameraIntrinsics& k) {
  const double z = x_cam.z();
  const double inv_z = 1.0 / z;
  Eigen::Matrix<double, 2, 3> j_persp;
  j_persp << inv_z, 0.0, -x_cam.x() * inv_z * inv_z,
             0.0, inv_z, -x_cam.y() * inv_z * inv_z;
  Eigen::Matrix2d j_dist = Eigen::Matrix2d::Identity();
  if (k.has_distortion()) {
    const double x = x_cam.x() * inv_z;
    const double y = x_cam.y() * inv_z;
    const double k1 = k.dist[0], k2 = k.dist[1], p1 = k.dist[2], p2 = k.dist[3], k3 = k.dist[4];
    const double r2 = x * x + y * y;
    const double radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3));
    const double dradial = k1 + r2 * (2.0 * k2 + 3.0 * k3 * r2);
    j_dist(0, 0) = radial + 2.0 * x * x * dradial + 2.0 * p1 * y + 6.0 * p2 * x;
    j_dist(0, 1) = 2.0 * x * y * dradial + 2.0 * p1 * x + 2.0 * p2 * y;
    j_dist(1, 0) = j_dist(0, 1);
    j_dist(1, 1) = radial + 2.0 * y * y * dradial + 6.0 * p1 * y + 2.0 * p2 * x;
  }
  Eigen::Matrix<double, 2, 3> j = j_dist * j_persp;
  j.row(0) *= k.fx;
  j.row(1) *= k.fy;
  return j;
}

inline bool evaluate_cost(const BAProblem& p, const LMConfig& cfg, double& cost) {
  cost = 0.0;
  for (const auto& obs : p.observations) {
    const BACamera& cam = p.cameras[obs.camera];
    const Eigen::Vector3d x_cam = cam.pose.apply(p.points[obs.point]);
    if (x_cam.z() <= 1e-12) return false;
    Eigen::Vector2d px;
    try {
      px = project(p.points[obs.point], cam.pose, cam.intrinsics);
    } catch (const Error&) {
      return false;
    }
    const Eigen::Vector2d r = px - obs.pixel;
    cost += obs.weight * robust_cost(r.squaredNorm(), cfg.huber_scale_px);
  }
  return std::isfinite(cost);
}

// Rotation increments compose on the left: R <- exp([dtheta]x) R.
inline void apply_increment(PoseSE3& pose, const Eigen::Vector3d& dtheta,
                            const Eigen::Vector3d& dt) {
  const double angle = dtheta.norm();
  if (angle > 0.0)
    pose.rotation = Eigen::AngleAxisd(angle, dtheta / angle).toRotationMatrix() * pose.rotation;
  pose.translation += dt;
}

inline BAProblem apply_step(const BAProblem& p, const ActiveLayout& layout,
                            const Eigen::VectorXd& delta, bool renormalize) {
  BAProblem out = p;
  const int nc = 6 * layout.n_active;
  for (std::size_t i = 0; i < out.cameras.size(); ++i) {
    const int slot = layout.camera_slot[i];
    if (slot < 0) continue;
    BACamera& cam = out.cameras[i];
    apply_increment(cam.pose, delta.segment<3>(6 * slot), delta.segment<3>(6 * slot + 3));
    if (renormalize && cam.translation_norm) {
      const double n = cam.pose.translation.norm();
      if (n > 1e-12) cam.pose.translation *= *cam.translation_norm / n;
    }
  }
  for (std::size_t i = 0; i < out.points.size(); ++i)
    out.points[i] += delta.segment<3>(nc + 3 * static_cast<int>(i));
  return out;
}

inline double parameter_norm(const BAProblem& p, const ActiveLayout& layout) {
  double sum = 0.0;
  for (std::size_t i = 0; i < p.cameras.size(); ++i)
    if (layout.camera_slot[i] >= 0) sum += p.cameras[i].pose.translation.squaredNorm();
  for (const auto& pt : p.points) sum += pt.squaredNorm();
  return std::sqrt(sum);
}

}  // namespace detail

inline int ba_parameter_count(const BAProblem& p) {
  const detail::ActiveLayout layout = detail::make_layout(p);
  return 6 * layout.n_active + 3 * static_cast<int>(p.points.size());
}

// Stacked residual vector (sqrt-weighted, no robust scaling). Throws
// on a point behind a camera.
inline Eigen::VectorXd ba_residual_vector(const BAProblem& p) {
  Eigen::VectorXd r(2 * p.observations.size());
  for (std::size_t i = 0; i < p.observations.size(); ++i) {
    const auto& obs = p.observations[i];
    const BACamera& cam = p.cameras[obs.camera];
    const Eigen::Vector2d px = project(p.points[obs.point], cam.pose, cam.intrinsics);
    r.segment<2>(2 * i) = std::sqrt(obs.weight) * (px - obs.pixel);
  }
  return r;
}

// Dense analytic Jacobian of ba_residual_vector, for verification and
// small problems. Column layout: active cameras ([dtheta, dt] per
// camera, left-composed rotation), then points.
inline Eigen::MatrixXd ba_jacobian(const BAProblem& p) {
  const detail::ActiveLayout layout = detail::make_layout(p);
  const int nc = 6 * layout.n_active;
  Eigen::MatrixXd j = Eigen::MatrixXd::Zero(2 * p.observations.size(), ba_parameter_count(p));
  for (std::size_t i = 0; i < p.observations.size(); ++i) {
    const auto& obs = p.observations[i];
    const BACamera& cam = p.cameras[obs.camera];
    const Eigen::Vector3d x_cam = cam.pose.apply(p.points[obs.point]);
    if (x_cam.z() <= 1e-12)
      throw Error(ErrorCode::BehindCamera, "ba_jacobian: point behind camera");
    const Eigen::Matrix<double, 2, 3> a =
        std::sqrt(obs.weight) * detail::projection_jacobian(x_cam, cam.intrinsics);
    const int slot = layout.camera_slot[obs.camera];
    if (slot >= 0) {
      j.block<2, 3>(2 * i, 6 * slot) = a * (-skew(x_cam - cam.pose.translation));
      j.block<2, 3>(2 * i, 6 * slot + 3) = a;
    }
    j.block<2, 3>(2 * i, nc + 3 * obs.point) = a * cam.pose.rotation;
  }
  return j;
}

// Applies a raw parameter increment without gauge renormalization.
// Matches the column layout of ba_jacobian.
inline BAProblem ba_apply_step(const BAProblem& p, const Eigen::VectorXd& delta) {
  const detail::ActiveLayout layout = detail::make_layout(p);
  if (delta.size() != ba_parameter_count(p))
    throw Error(ErrorCode::DimensionMismatch, "ba_apply_step: wrong increment size");
  return detail::apply_step(p, layout, delta, false);
}

// Levenberg-Marquardt with a Schur complement on the point block.
// Fixed cameras are excluded from the parameter vector. Accepted costs
// are strictly decreasing; on damping overflow the best state reached
// is returned with a non-convergence status.
inline LMResult lm_minimize(const BAProblem& problem, const LMConfig& cfg = {}) {
  problem.validate();
  const detail::ActiveLayout layout = detail::make_layout(problem);
  const int nc = 6 * layout.n_active;
  const int n_points = static_cast<int>(problem.points.size());

  LMResult result;
  result.problem = problem;
  double cost;
  if (!detail::evaluate_cost(result.problem, cfg, cost))
    throw Error(ErrorCode::BehindCamera, "lm_minimize: initial state has a point behind a camera");
  result.cost_trace.push_back(cost);
  if (cost < 1e-18) {
    result.message = "already at optimum";
    return result;
  }

  double damping = cfg.initial_damping;
  Eigen::MatrixXd hcc(nc, nc), hcp(nc, 3 * n_points);
  Eigen::VectorXd bc(nc), bp(3 * n_points);
  std::vector<Eigen::Matrix3d> hpp(n_points);

  bool done = false;
  while (!done && result.accepted_steps < cfg.max_iters) {
    // Assemble the damped normal equations at the current state.
    hcc.setZero();
    hcp.setZero();
    bc.setZero();
    bp.setZero();
    for (auto& h : hpp) h.setZero();
    for (const auto& obs : result.problem.observations) {
      const BACamera& cam = result.problem.cameras[obs.camera];
      const Eigen::Vector3d x_cam = cam.pose.apply(result.problem.points[obs.point]);
      const Eigen::Vector2d px = project(result.problem.points[obs.point], cam.pose, cam.intrinsics);
      const Eigen::Vector2d r = px - obs.pixel;
      const double w = obs.weight * detail::robust_weight(r.squaredNorm(), cfg.huber_scale_px);
      const Eigen::Matrix<double, 2, 3> a = detail::projection_jacobian(x_cam, cam.intrinsics);
      const Eigen::Matrix<double, 2, 3> j_pt = a * cam.pose.rotation;
      hpp[obs.point].noalias() += w * j_pt.transpose() * j_pt;
      bp.segment<3>(3 * obs.point).noalias() -= w * j_pt.transpose() * r;
      const int slot = layout.camera_slot[obs.camera];
      if (slot < 0) continue;
      Eigen::Matrix<double, 2, 6> j_cam;
      j_cam.block<2, 3>(0, 0) = a * (-skew(x_cam - cam.pose.translation));
      j_cam.block<2, 3>(0, 3) = a;
      hcc.block<6, 6>(6 * slot, 6 * slot).noalias() += w * j_cam.transpose() * j_cam;
      hcp.block(6 * slot, 3 * obs.point, 6, 3).noalias() += w * j_cam.transpose() * j_pt;
      bc.segment<6>(6 * slot).noalias() -= w * j_cam.transpose() * r;
    }

    // Inner loop: retry with increased damping until a step is accepted.
    while (true) {
      std::vector<Eigen::Matrix3d> hpp_inv(n_points);
      bool solvable = true;
      for (int i = 0; i < n_points && solvable; ++i) {
        Eigen::Matrix3d h = hpp[i];
        for (int d = 0; d < 3; ++d) h(d, d) += damping * std::max(h(d, d), 1e-8);
        bool invertible = false;
        h.computeInverseWithCheck(hpp_inv[i], invertible);
        solvable = invertible;
      }

      Eigen::VectorXd delta(nc + 3 * n_points);
      if (solvable) {
        Eigen::MatrixXd s = hcc;
        for (int d = 0; d < nc; ++d) s(d, d) += damping * std::max(hcc(d, d), 1e-8);
        Eigen::VectorXd rhs = bc;
        for (int i = 0; i < n_points; ++i) {
          const auto w_i = hcp.block(0, 3 * i, nc, 3);
          s.noalias() -= w_i * hpp_inv[i] * w_i.transpose();
          rhs.noalias() -= w_i * (hpp_inv[i] * bp.segment<3>(3 * i));
        }
        Eigen::VectorXd delta_c(nc);
        if (nc > 0) delta_c = s.ldlt().solve(rhs);
        delta.head(nc) = delta_c;
        for (int i = 0; i < n_points; ++i)
          delta.segment<3>(nc + 3 * i) =
              hpp_inv[i] * (bp.segment<3>(3 * i) - hcp.block(0, 3 * i, nc, 3).transpose() * delta_c);
        solvable = delta.allFinite();
      }

      if (solvable &&
          delta.norm() <= cfg.param_tolerance *
                              (1.0 + detail::parameter_norm(result.problem, layout))) {
        result.status = LMStatus::Converged;
        result.message = "step size below tolerance";
        done = true;
        break;
      }

      double cand_cost = std::numeric_limits<double>::infinity();
      if (solvable) {
        const BAProblem candidate = detail::apply_step(result.problem, layout, delta, true);
        if (!detail::evaluate_cost(candidate, cfg, cand_cost))
          cand_cost = std::numeric_limits<double>::infinity();
        if (cand_cost < cost) {
          const double rel = (cost - cand_cost) / cost;
          result.problem = candidate;
          cost = cand_cost;
          result.cost_trace.push_back(cost);
          ++result.accepted_steps;
          damping = std::max(damping * cfg.damping_down, 1e-15);
          if (rel < cfg.cost_tolerance || cost < 1e-18) {
            result.status = LMStatus::Converged;
            result.message = "cost decrease below tolerance";
            done = true;
          }
          break;
        }
      }

      damping *= cfg.damping_up;
      if (damping > cfg.damping_max) {
        result.status = LMStatus::NonConvergence;
        result.message = "damping overflow, returning best state";
        done = true;
        break;
      }
    }
  }

  if (!done) {
    result.status = LMStatus::MaxIterations;
    result.message = "iteration limit reached";
  }
  return result;
}

struct LocalBAResult {
  PoseSE3 pose;  // unit-norm translation, non-metric
  std::vector<Eigen::Vector3d> points;
  LMResult lm;
};

// Two-view refinement. Camera A is fixed at the identity; camera B's
// translation is held on the unit sphere as the scale gauge.
inline LocalBAResult local_ba(std::span<const PointPair> pixel_pairs, const PoseSE3& pose,
                              std::span<const Eigen::Vector3d> points,
                              const CameraIntrinsics& k_a, const CameraIntrinsics& k_b,
                              const LMConfig& cfg = {}) {
  if (pixel_pairs.size() != points.size())
    throw Error(ErrorCode::ConfigError, "local_ba: pairs and points differ in size");
  if (pixel_pairs.empty()) throw Error(ErrorCode::ConfigError, "local_ba: no correspondences");

  BAProblem problem;
  BACamera cam_a;
  cam_a.pose = PoseSE3::identity();
  cam_a.intrinsics = k_a;
  cam_a.fixed = true;
  BACamera cam_b;
  cam_b.pose = pose;
  const double t_norm = cam_b.pose.translation.norm();
  if (t_norm > 1e-12) cam_b.pose.translation /= t_norm;
  cam_b.intrinsics = k_b;
  cam_b.translation_norm = 1.0;
  problem.cameras = {cam_a, cam_b};
  problem.points.assign(points.begin(), points.end());
  problem.observations.reserve(2 * pixel_pairs.size());
  for (std::size_t i = 0; i < pixel_pairs.size(); ++i) {
    const auto& pp = pixel_pairs[i];
    problem.observations.push_back({0, static_cast<int>(i), pp.a, pp.weight});
    problem.observations.push_back({1, static_cast<int>(i), pp.b, pp.weight});
  }

  LocalBAResult result;
  result.lm = lm_minimize(problem, cfg);
  if (result.lm.status == LMStatus::NonConvergence)
    throw Error(ErrorCode::NonConvergence,
                "local_ba: " + result.lm.message +
                    " (best cost " + std::to_string(result.lm.cost_trace.back()) + ")");
  result.pose = result.lm.problem.cameras[1].pose;
  result.points = result.lm.problem.points;
  return result;
}

struct ScalePrior {
  std::size_t index_a = 0;
  std::size_t index_b = 0;
  double length = 0.0;  // meters
};

struct ScaledReconstruction {
  PoseSE3 pose;
  std::vector<Eigen::Vector3d> points;
  double scale = 1.0;
};

// Promotes a unit-gauge two-view reconstruction to metric units using
// one known segment length between two reconstructed points.
inline ScaledReconstruction resolve_scale(const PoseSE3& pose,
                                          std::span<const Eigen::Vector3d> points,
                                          const ScalePrior& prior) {
  if (prior.index_a >= points.size() || prior.index_b >= points.size() ||
      prior.index_a == prior.index_b)
    throw Error(ErrorCode::ConfigError, "resolve_scale: bad prior indices");
  if (!(prior.length > 0.0))
    throw Error(ErrorCode::ConfigError, "resolve_scale: prior length must be positive");
  const double d = (points[prior.index_a] - points[prior.index_b]).norm();
  if (d < 1e-9)
    throw Error(ErrorCode::DegeneratePrior, "resolve_scale: prior endpoints coincide");

  ScaledReconstruction out;
  out.scale = prior.length / d;
  out.pose = pose;
  out.pose.translation *= out.scale;
  out.pose.metric = true;
  out.points.assign(points.begin(), points.end());
  for (auto& p : out.points) p *= out.scale;
  return out;
}

using PairKey = std::pair<int, int>;

// Averages per-pair reconstructions of the same (person, frame) point.
// Deterministic: accumulation follows the sorted pair keys, so any
// insertion order gives bit-identical output.
inline std::map<PointKey, Eigen::Vector3d> merge_3d_points(
    const std::map<PairKey, std::map<PointKey, Eigen::Vector3d>>& per_pair) {
  std::map<PointKey, Eigen::Vector3d> sums;
  std::map<PointKey, int> counts;
  for (const auto& [pair_key, points] : per_pair) {
    for (const auto& [key, p] : points) {
      auto [it, inserted] = sums.try_emplace(key, p);
      if (!inserted) it->second += p;
      ++counts[key];
    }
  }
  for (auto& [key, sum] : sums) sum /= static_cast<double>(counts[key]);
  return sums;
}

struct GlobalObservation {
  int camera_id = 0;
  PointKey key = {0, 0};
  Eigen::Vector2d pixel = Eigen::Vector2d::Zero();
  double weight = 1.0;
};

struct GlobalBAResult {
  std::map<int, PoseSE3> poses;
  std::map<PointKey, Eigen::Vector3d> points;
  LMResult lm;
};

// Joint refinement of all cameras and merged points. The reference
// camera is fixed; the first other camera's translation norm is held
// to pin the metric scale.
inline GlobalBAResult global_ba(const std::map<int, PoseSE3>& poses,
                                const std::map<PointKey, Eigen::Vector3d>& points,
                                std::span<const GlobalObservation> observations,
                                const std::map<int, CameraIntrinsics>& intrinsics,
                                int reference_camera, const LMConfig& cfg = {}) {
  if (!poses.count(reference_camera))
    throw Error(ErrorCode::CameraIdMismatch, "global_ba: reference camera missing from poses");
  for (const auto& [id, pose] : poses)
    if (!intrinsics.count(id))
      throw Error(ErrorCode::CameraIdMismatch,
                  "global_ba: no intrinsics for camera " + std::to_string(id));

  std::map<int, int> cam_index;
  for (const auto& [id, pose] : poses) cam_index.emplace(id, static_cast<int>(cam_index.size()));

  // Keep only points with observations from two distinct cameras.
  std::map<PointKey, std::pair<int, int>> seen;
  for (const auto& obs : observations) {
    if (!cam_index.count(obs.camera_id))
      throw Error(ErrorCode::CameraIdMismatch,
                  "global_ba: observation references unknown camera " +
                      std::to_string(obs.camera_id));
    if (!points.count(obs.key)) continue;
    auto [it, inserted] = seen.try_emplace(obs.key, std::make_pair(obs.camera_id, -1));
    if (!inserted && it->second.first != obs.camera_id) it->second.second = obs.camera_id;
  }
  std::map<PointKey, int> point_index;
  for (const auto& [key, cams] : seen)
    if (cams.second >= 0) point_index.emplace(key, static_cast<int>(point_index.size()));
  if (point_index.empty())
    throw Error(ErrorCode::ConfigError, "global_ba: no point observed by two cameras");

  BAProblem problem;
  problem.cameras.reserve(poses.size());
  bool gauge_set = false;
  for (const auto& [id, pose] : poses) {
    BACamera cam;
    cam.pose = pose;
    cam.intrinsics = intrinsics.at(id);
    cam.fixed = (id == reference_camera);
    if (!cam.fixed && !gauge_set && cam.pose.translation.norm() > 1e-12) {
      cam.translation_norm = cam.pose.translation.norm();
      gauge_set = true;
    }
    problem.cameras.push_back(cam);
  }
  problem.points.resize(point_index.size());
  for (const auto& [key, idx] : point_index) problem.points[idx] = points.at(key);
  for (const auto& obs : observations) {
    const auto it = point_index.find(obs.key);
    if (it == point_index.end()) continue;
    problem.observations.push_back({cam_index.at(obs.camera_id), it->second, obs.pixel, obs.weight});
  }

  GlobalBAResult result;
  result.lm = lm_minimize(problem, cfg);
  if (result.lm.status == LMStatus::NonConvergence)
    throw Error(ErrorCode::NonConvergence,
                "global_ba: " + result.lm.message +
                    " (best cost " + std::to_string(result.lm.cost_trace.back()) + ")");
  for (const auto& [id, idx] : cam_index) result.poses[id] = result.lm.problem.cameras[idx].pose;
  result.points = points;
  for (const auto& [key, idx] : point_index) result.points[key] = result.lm.problem.points[idx];
  return result;
}

struct MetricBAResult {
  std::map<int, PoseSE3> poses;
  std::map<PointKey, Eigen::Vector3d> points;
  std::vector<double> cost_trace;  // initial cost, then each accepted cost
  int accepted_steps = 0;
  LMStatus status = LMStatus::Converged;
  std::size_t n_priors_used = 0;
  std::size_t n_observations = 0;  // regular observations kept after filtering
};

// Joint refinement of poses, points, and scale-prior segments. On
// nearly planar scenes the reprojection cost alone leaves a flat valley
// that trades network shape against depth; the known segment lengths
// slope that valley, so they enter the objective as residuals instead
// of being applied as an after-the-fact rescale. Each segment's two
// endpoints form one 6-wide block eliminated together, which keeps the
// point block of the normal equations blockwise invertible. Length
// residuals are weighted by the segment's image scale (pixels per
// meter at its initial depth) and stay quadratic; the Huber loss
// applies to reprojection terms only. The reference camera pose is the
// gauge; scale is pinned by the priors themselves.
inline MetricBAResult metric_ba(const std::map<int, PoseSE3>& poses,
                                const std::map<PointKey, Eigen::Vector3d>& points,
                                std::span<const GlobalObservation> observations,
                                const std::map<int, CameraIntrinsics>& intrinsics,
                                std::span<const ScalePriorObs> priors, int reference_camera,
                                const LMConfig& cfg = {}) {
  if (!poses.count(reference_camera))
    throw Error(ErrorCode::CameraIdMismatch, "metric_ba: reference camera missing from poses");
  for (const auto& [id, pose] : poses)
    if (!intrinsics.count(id))
      throw Error(ErrorCode::CameraIdMismatch,
                  "metric_ba: no intrinsics for camera " + std::to_string(id));

  std::map<int, int> cam_index;
  for (const auto& [id, pose] : poses) cam_index.emplace(id, static_cast<int>(cam_index.size()));
  const int n_cams = static_cast<int>(cam_index.size());

  std::vector<PoseSE3> cam_pose(n_cams);
  std::vector<CameraIntrinsics> cam_intr(n_cams);
  std::vector<int> cam_slot(n_cams, -1);
  std::vector<int> cam_id_of(n_cams);
  int n_active = 0;
  for (const auto& [id, idx] : cam_index) {
    cam_pose[idx] = poses.at(id);
    cam_intr[idx] = intrinsics.at(id);
    cam_id_of[idx] = id;
    if (id != reference_camera) cam_slot[idx] = n_active++;
  }
  const int nc = 6 * n_active;

  // Regular observations whose initial point sits in front of the
  // observing camera, restricted to points that keep two views. The
  // joint problem must start at a finite cost, and a point the earlier
  // refinement left behind one camera should only lose that view.
  std::vector<GlobalObservation> reg_obs;
  reg_obs.reserve(observations.size());
  std::map<PointKey, std::pair<int, int>> seen;
  for (const auto& obs : observations) {
    if (!cam_index.count(obs.camera_id))
      throw Error(ErrorCode::CameraIdMismatch,
                  "metric_ba: observation references unknown camera " +
                      std::to_string(obs.camera_id));
    const auto pt = points.find(obs.key);
    if (pt == points.end()) continue;
    if (cam_pose[cam_index.at(obs.camera_id)].apply(pt->second).z() <= 1e-9) continue;
    reg_obs.push_back(obs);
    auto [it, inserted] = seen.try_emplace(obs.key, std::make_pair(obs.camera_id, -1));
    if (!inserted && it->second.first != obs.camera_id) it->second.second = obs.camera_id;
  }
  std::map<PointKey, int> point_index;
  for (const auto& [key, cams] : seen)
    if (cams.second >= 0) point_index.emplace(key, static_cast<int>(point_index.size()));
  if (point_index.empty())
    throw Error(ErrorCode::ConfigError, "metric_ba: no point observed by two cameras");
  std::erase_if(reg_obs, [&](const GlobalObservation& o) { return !point_index.count(o.key); });
  const int n_reg = static_cast<int>(point_index.size());
  std::vector<Eigen::Vector3d> reg_pts(n_reg);
  for (const auto& [key, idx] : point_index) reg_pts[idx] = points.at(key);

  struct EndpointObs {
    int cam = 0;
    int seg = 0;
    int end = 0;
    Eigen::Vector2d pixel = Eigen::Vector2d::Zero();
  };
  struct Segment {
    Eigen::Vector3d ends[2];
    double length = 0.0;
    double weight = 0.0;  // pixels per meter of length error
  };
  std::vector<Segment> segs;
  std::vector<EndpointObs> end_obs;
  for (const auto& p : priors) {
    std::vector<int> annotated;
    for (const auto& [id, px] : p.pixels)
      if (cam_index.count(id)) annotated.push_back(cam_index.at(id));
    if (annotated.size() < 2 || !(p.length > 0.0)) continue;
    const int ia = annotated[0];
    const int ib = annotated[1];
    const auto& px_a = p.pixels.at(cam_id_of[ia]);
    const auto& px_b = p.pixels.at(cam_id_of[ib]);
    Segment seg;
    seg.length = p.length;
    try {
      const PoseSE3 rel = cam_pose[ib].compose(cam_pose[ia].inverse());
      PointPair first, second;
      first.a = undistort_normalize(px_a.first, cam_intr[ia]);
      first.b = undistort_normalize(px_b.first, cam_intr[ib]);
      second.a = undistort_normalize(px_a.second, cam_intr[ia]);
      second.b = undistort_normalize(px_b.second, cam_intr[ib]);
      const Eigen::Vector3d e0 = triangulate(first, rel);
      const Eigen::Vector3d e1 = triangulate(second, rel);
      seg.ends[0] = cam_pose[ia].inverse().apply(e0);
      seg.ends[1] = cam_pose[ia].inverse().apply(e1);
    } catch (const Error&) {
      continue;
    }
    // Keep only annotating cameras that see both initial endpoints in
    // front of them; the segment needs two views to stay constrained.
    std::vector<int> usable;
    for (const int ci : annotated)
      if (cam_pose[ci].apply(seg.ends[0]).z() > 1e-9 &&
          cam_pose[ci].apply(seg.ends[1]).z() > 1e-9)
        usable.push_back(ci);
    if (usable.size() < 2) continue;
    const double depth = cam_pose[usable[0]].apply(0.5 * (seg.ends[0] + seg.ends[1])).z();
    seg.weight = 0.5 * (cam_intr[usable[0]].fx + cam_intr[usable[0]].fy) / depth;
    const int seg_idx = static_cast<int>(segs.size());
    for (const int ci : usable) {
      const auto& px = p.pixels.at(cam_id_of[ci]);
      end_obs.push_back({ci, seg_idx, 0, px.first});
      end_obs.push_back({ci, seg_idx, 1, px.second});
    }
    segs.push_back(seg);
  }
  if (segs.empty())
    throw Error(ErrorCode::DegeneratePrior,
                "metric_ba: no scale prior triangulates under the given poses");
  const int n_seg = static_cast<int>(segs.size());
  const int np = 3 * n_reg + 6 * n_seg;

  struct State {
    std::vector<PoseSE3> cams;
    std::vector<Eigen::Vector3d> reg;
    std::vector<Segment> segs;
  };
  State state{cam_pose, reg_pts, segs};

  auto evaluate = [&](const State& s, double& cost) {
    cost = 0.0;
    for (const auto& obs : reg_obs) {
      const int ci = cam_index.at(obs.camera_id);
      const Eigen::Vector3d x = s.cams[ci].apply(s.reg[point_index.at(obs.key)]);
      if (x.z() <= 1e-9) return false;
      const Eigen::Vector2d r =
          project(s.reg[point_index.at(obs.key)], s.cams[ci], cam_intr[ci]) - obs.pixel;
      cost += obs.weight * detail::robust_cost(r.squaredNorm(), cfg.huber_scale_px);
    }
    for (const auto& eo : end_obs) {
      const Eigen::Vector3d& pt = s.segs[eo.seg].ends[eo.end];
      const Eigen::Vector3d x = s.cams[eo.cam].apply(pt);
      if (x.z() <= 1e-9) return false;
      const Eigen::Vector2d r = project(pt, s.cams[eo.cam], cam_intr[eo.cam]) - eo.pixel;
      cost += detail::robust_cost(r.squaredNorm(), cfg.huber_scale_px);
    }
    for (const auto& seg : s.segs) {
      const double r = seg.weight * ((seg.ends[0] - seg.ends[1]).norm() - seg.length);
      cost += r * r;
    }
    return true;
  };

  MetricBAResult result;
  result.n_priors_used = segs.size();
  result.n_observations = reg_obs.size();
  double cost;
  if (!evaluate(state, cost))
    throw Error(ErrorCode::BehindCamera, "metric_ba: initial state has a point behind a camera");
  result.cost_trace.push_back(cost);

  auto param_norm = [&](const State& s) {
    double n = 0.0;
    for (int i = 0; i < n_cams; ++i)
      if (cam_slot[i] >= 0) n += s.cams[i].translation.squaredNorm();
    for (const auto& x : s.reg) n += x.squaredNorm();
    for (const auto& seg : s.segs) n += seg.ends[0].squaredNorm() + seg.ends[1].squaredNorm();
    return std::sqrt(n);
  };

  double damping = cfg.initial_damping;
  Eigen::MatrixXd hcc(nc, nc), hcp(nc, np);
  Eigen::VectorXd bc(nc), bp(np);
  // Block b spans bp/hcp columns [off(b), off(b)+dim(b)): 3 wide for a
  // regular point, 6 for a segment's endpoint pair.
  auto block_off = [&](int block) {
    return block < n_reg ? 3 * block : 3 * n_reg + 6 * (block - n_reg);
  };
  const int n_blocks = n_reg + n_seg;
  std::vector<Eigen::MatrixXd> hpp(n_blocks);

  bool done = false;
  while (!done && result.accepted_steps < cfg.max_iters && cost >= 1e-18) {
    hcc.setZero();
    hcp.setZero();
    bc.setZero();
    bp.setZero();
    for (int b = 0; b < n_blocks; ++b)
      hpp[b] = Eigen::MatrixXd::Zero(b < n_reg ? 3 : 6, b < n_reg ? 3 : 6);

    auto add_reprojection = [&](int ci, const Eigen::Vector3d& pt, const Eigen::Vector2d& pixel,
                                double w_obs, int block, int col_in_block) {
      const Eigen::Vector3d x_cam = state.cams[ci].apply(pt);
      const Eigen::Vector2d r = project(pt, state.cams[ci], cam_intr[ci]) - pixel;
      const double w = w_obs * detail::robust_weight(r.squaredNorm(), cfg.huber_scale_px);
      const Eigen::Matrix<double, 2, 3> a = detail::projection_jacobian(x_cam, cam_intr[ci]);
      const Eigen::Matrix<double, 2, 3> j_pt = a * state.cams[ci].rotation;
      const int off = block_off(block) + col_in_block;
      hpp[block].block<3, 3>(col_in_block, col_in_block).noalias() +=
          w * j_pt.transpose() * j_pt;
      bp.segment<3>(off).noalias() -= w * j_pt.transpose() * r;
      const int slot = cam_slot[ci];
      if (slot < 0) return;
      Eigen::Matrix<double, 2, 6> j_cam;
      j_cam.block<2, 3>(0, 0) = a * (-skew(x_cam - state.cams[ci].translation));
      j_cam.block<2, 3>(0, 3) = a;
      hcc.block<6, 6>(6 * slot, 6 * slot).noalias() += w * j_cam.transpose() * j_cam;
      hcp.block(6 * slot, off, 6, 3).noalias() += w * j_cam.transpose() * j_pt;
      bc.segment<6>(6 * slot).noalias() -= w * j_cam.transpose() * r;
    };

    for (const auto& obs : reg_obs)
      add_reprojection(cam_index.at(obs.camera_id), state.reg[point_index.at(obs.key)], obs.pixel,
                       obs.weight, point_index.at(obs.key), 0);
    for (const auto& eo : end_obs)
      add_reprojection(eo.cam, state.segs[eo.seg].ends[eo.end], eo.pixel, 1.0, n_reg + eo.seg,
                       3 * eo.end);
    for (int si = 0; si < n_seg; ++si) {
      const Segment& seg = state.segs[si];
      const Eigen::Vector3d diff = seg.ends[0] - seg.ends[1];
      const double d = diff.norm();
      if (d <= 1e-12) continue;
      const double r = seg.weight * (d - seg.length);
      Eigen::Matrix<double, 1, 6> j;
      j.head<3>() = seg.weight * diff.transpose() / d;
      j.tail<3>() = -j.head<3>();
      hpp[n_reg + si].noalias() += j.transpose() * j;
      bp.segment<6>(block_off(n_reg + si)).noalias() -= j.transpose() * r;
    }

    while (true) {
      std::vector<Eigen::MatrixXd> hpp_inv(n_blocks);
      bool solvable = true;
      for (int b = 0; b < n_blocks && solvable; ++b) {
        Eigen::MatrixXd h = hpp[b];
        for (int d = 0; d < h.rows(); ++d) h(d, d) += damping * std::max(h(d, d), 1e-8);
        Eigen::FullPivLU<Eigen::MatrixXd> lu(h);
        solvable = lu.isInvertible();
        if (solvable) hpp_inv[b] = lu.inverse();
      }

      Eigen::VectorXd delta(nc + np);
      if (solvable) {
        Eigen::MatrixXd s = hcc;
        for (int d = 0; d < nc; ++d) s(d, d) += damping * std::max(hcc(d, d), 1e-8);
        Eigen::VectorXd rhs = bc;
        for (int b = 0; b < n_blocks; ++b) {
          const int off = block_off(b);
          const int dim = b < n_reg ? 3 : 6;
          const auto w_b = hcp.block(0, off, nc, dim);
          s.noalias() -= w_b * hpp_inv[b] * w_b.transpose();
          rhs.noalias() -= w_b * (hpp_inv[b] * bp.segment(off, dim));
        }
        Eigen::VectorXd delta_c(nc);
        if (nc > 0) delta_c = s.ldlt().solve(rhs);
        delta.head(nc) = delta_c;
        for (int b = 0; b < n_blocks; ++b) {
          const int off = block_off(b);
          const int dim = b < n_reg ? 3 : 6;
          delta.segment(nc + off, dim) =
              hpp_inv[b] *
              (bp.segment(off, dim) - hcp.block(0, off, nc, dim).transpose() * delta_c);
        }
        solvable = delta.allFinite();
      }

      if (solvable && delta.norm() <= cfg.param_tolerance * (1.0 + param_norm(state))) {
        result.status = LMStatus::Converged;
        done = true;
        break;
      }

      double cand_cost = std::numeric_limits<double>::infinity();
      if (solvable) {
        State cand = state;
        for (int i = 0; i < n_cams; ++i) {
          const int slot = cam_slot[i];
          if (slot < 0) continue;
          detail::apply_increment(cand.cams[i], delta.segment<3>(6 * slot),
                                  delta.segment<3>(6 * slot + 3));
        }
        for (int i = 0; i < n_reg; ++i) cand.reg[i] += delta.segment<3>(nc + 3 * i);
        for (int si = 0; si < n_seg; ++si) {
          const int off = nc + block_off(n_reg + si);
          cand.segs[si].ends[0] += delta.segment<3>(off);
          cand.segs[si].ends[1] += delta.segment<3>(off + 3);
        }
        if (!evaluate(cand, cand_cost)) cand_cost = std::numeric_limits<double>::infinity();
        if (cand_cost < cost) {
          const double rel = (cost - cand_cost) / cost;
          state = std::move(cand);
          cost = cand_cost;
          result.cost_trace.push_back(cost);
          ++result.accepted_steps;
          damping = std::max(damping * cfg.damping_down, 1e-15);
          if (rel < cfg.cost_tolerance || cost < 1e-18) {
            result.status = LMStatus::Converged;
            done = true;
          }
          break;
        }
      }

      damping *= cfg.damping_up;
      if (damping > cfg.damping_max) {
        result.status = LMStatus::NonConvergence;
        done = true;
        break;
      }
    }
  }
  if (!done) result.status = LMStatus::MaxIterations;

  for (const auto& [id, idx] : cam_index) result.poses[id] = state.cams[idx];
  for (const auto& [key, idx] : point_index) result.points[key] = state.reg[idx];
  return result;
}

}  // namespace crowdcalib
