#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "crowdcalib/geometry.hpp"
#include "crowdcalib/types.hpp"

namespace crowdcalib {

// Re-expresses every pose relative to the reference camera, which
// becomes the identity.
inline std::map<int, PoseSE3> rebase_onto(const std::map<int, PoseSE3>& poses, int reference) {
  const auto it = poses.find(reference);
  if (it == poses.end())
    throw Error(ErrorCode::CameraIdMismatch, "rebase_onto: reference camera missing");
  const PoseSE3 inv_ref = it->second.inverse();
  std::map<int, PoseSE3> out;
  for (const auto& [id, pose] : poses) {
    PoseSE3 p = pose.compose(inv_ref);
    p.metric = pose.metric;
    out.emplace(id, p);
  }
  return out;
}

struct PoseError {
  double position_mm = 0.0;
  double rotation_deg = 0.0;
};

struct PoseErrorReport {
  std::map<int, PoseError> per_camera;
  // Means and maxima over non-reference cameras.
  double mean_position_mm = 0.0;
  double mean_rotation_deg = 0.0;
  double max_position_mm = 0.0;
  double max_rotation_deg = 0.0;
};

// Camera pose error: distance between camera centers in millimeters
// and geodesic rotation angle in degrees. Both pose sets must be
// expressed relative to the same reference camera.
inline PoseErrorReport camera_pose_error(const std::map<int, PoseSE3>& estimated,
                                         const std::map<int, PoseSE3>& ground_truth,
                                         int reference_camera) {
  if (estimated.size() != ground_truth.size())
    throw Error(ErrorCode::CameraIdMismatch, "camera_pose_error: camera sets differ in size");
  PoseErrorReport report;
  int n = 0;
  for (const auto& [id, est] : estimated) {
    const auto it = ground_truth.find(id);
    if (it == ground_truth.end())
      throw Error(ErrorCode::CameraIdMismatch,
                  "camera_pose_error: camera " + std::to_string(id) + " missing from ground truth");
    const PoseSE3& gt = it->second;

    PoseError e;
    e.position_mm = 1000.0 * (est.center() - gt.center()).norm();
    const double c = std::clamp(0.5 * ((est.rotation * gt.rotation.transpose()).trace() - 1.0),
                                -1.0, 1.0);
    e.rotation_deg = std::acos(c) * 180.0 / M_PI;
    report.per_camera.emplace(id, e);

    if (id == reference_camera) continue;
    report.mean_position_mm += e.position_mm;
    report.mean_rotation_deg += e.rotation_deg;
    report.max_position_mm = std::max(report.max_position_mm, e.position_mm);
    report.max_rotation_deg = std::max(report.max_rotation_deg, e.rotation_deg);
    ++n;
  }
  if (n > 0) {
    report.mean_position_mm /= n;
    report.mean_rotation_deg /= n;
  }
  return report;
}

struct RpeReport {
  double rpe_px = 0.0;  // mean over all annotated points, both views
  std::size_t n_points = 0;
  std::size_t n_excluded = 0;  // behind-camera or low-parallax points
  std::map<std::pair<int, int>, double> per_pair;
};

// Reprojection error on held-out annotated pixel pairs: triangulate
// each pair under the estimated relative pose, reproject into both
// views, average the pixel distances.
inline RpeReport reprojection_error_metric(
    const std::map<int, PoseSE3>& poses, const std::map<int, CameraIntrinsics>& intrinsics,
    const std::map<std::pair<int, int>, std::vector<PointPair>>& annotated) {
  RpeReport report;
  double total = 0.0;
  for (const auto& [pair_key, pixel_pairs] : annotated) {
    const auto [cam_a, cam_b] = pair_key;
    if (!poses.count(cam_a) || !poses.count(cam_b))
      throw Error(ErrorCode::CameraIdMismatch,
                  "reprojection_error_metric: missing pose for annotated pair " +
                      std::to_string(cam_a) + "," + std::to_string(cam_b));
    if (!intrinsics.count(cam_a) || !intrinsics.count(cam_b))
      throw Error(ErrorCode::CameraIdMismatch,
                  "reprojection_error_metric: missing intrinsics for annotated pair");
    const CameraIntrinsics& k_a = intrinsics.at(cam_a);
    const CameraIntrinsics& k_b = intrinsics.at(cam_b);
    const PoseSE3 rel = poses.at(cam_b).compose(poses.at(cam_a).inverse());

    double pair_total = 0.0;
    std::size_t pair_n = 0;
    for (const PointPair& pp : pixel_pairs) {
      try {
        PointPair norm = pp;
        norm.a = undistort_normalize(pp.a, k_a);
        norm.b = undistort_normalize(pp.b, k_b);
        const Eigen::Vector3d x_a = triangulate(norm, rel);
        const Eigen::Vector2d px_a = project(x_a, PoseSE3::identity(), k_a);
        const Eigen::Vector2d px_b = project(x_a, rel, k_b);
        pair_total += (px_a - pp.a).norm() + (px_b - pp.b).norm();
        ++pair_n;
      } catch (const Error&) {
        ++report.n_excluded;
      }
    }
    if (pair_n > 0)
      report.per_pair[pair_key] = pair_total / static_cast<double>(2 * pair_n);
    total += pair_total;
    report.n_points += pair_n;
  }
  if (report.n_points == 0)
    throw Error(ErrorCode::DegenerateConfiguration,
                "reprojection_error_metric: no annotated point survived triangulation");
  report.rpe_px = total / static_cast<double>(2 * report.n_points);
  return report;
}

// Resolution-normalized reprojection error, in percent of the shorter
// image side.
inline double err_ratio(double rpe_px, int width, int height) {
  if (width <= 0 || height <= 0)
    throw Error(ErrorCode::ConfigError, "err_ratio: image dimensions must be positive");
  return 100.0 * rpe_px / static_cast<double>(std::min(width, height));
}

}  // namespace crowdcalib
