#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <array>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace crowdcalib {

enum class ErrorCode {
  ConfigError,
  IoError,
  FlaggedPoint,
  DegenerateConfiguration,
  InsufficientInliers,
  CheiralityAmbiguity,
  BehindCamera,
  LowParallax,
  DegeneratePrior,
  NonConvergence,
  MissingFeature,
  DimensionMismatch,
  EmptyCorrespondence,
  CameraIdMismatch,
};

class Error : public std::runtime_error {
public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

private:
  ErrorCode code_;
};

// Pinhole intrinsics with the usual 5-coefficient distortion model
// (k1, k2, p1, p2, k3).
struct CameraIntrinsics {
  double fx = 0.0;
  double fy = 0.0;
  double cx = 0.0;
  double cy = 0.0;
  std::array<double, 5> dist{};
  int width = 0;
  int height = 0;

  double mean_focal() const { return 0.5 * (fx + fy); }

  bool has_distortion() const {
    for (double d : dist) {
      if (d != 0.0) return true;
    }
    return false;
  }

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0))
      throw Error(ErrorCode::ConfigError, "intrinsics: focal lengths must be positive");
    if (cx < 0.0 || cx >= width || cy < 0.0 || cy >= height)
      throw Error(ErrorCode::ConfigError, "intrinsics: principal point outside image");
  }
};

// Rigid transform taking reference-frame coordinates into this camera's
// frame: x_cam = rotation * x_ref + translation. The project-wide
// convention; triangulation, projection and BA all assume it.
struct PoseSE3 {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  bool metric = false;

  static PoseSE3 identity(bool metric_flag = true) {
    PoseSE3 p;
    p.metric = metric_flag;
    return p;
  }

  Eigen::Vector3d apply(const Eigen::Vector3d& x) const {
    return rotation * x + translation;
  }

  // Camera center expressed in the reference frame.
  Eigen::Vector3d center() const { return -rotation.transpose() * translation; }

  PoseSE3 inverse() const {
    PoseSE3 inv;
    inv.rotation = rotation.transpose();
    inv.translation = -(rotation.transpose() * translation);
    inv.metric = metric;
    return inv;
  }

  // this ∘ inner: maps x through inner first, then through this.
  PoseSE3 compose(const PoseSE3& inner) const {
    PoseSE3 out;
    out.rotation = rotation * inner.rotation;
    out.translation = rotation * inner.translation + translation;
    out.metric = metric && inner.metric;
    return out;
  }
};

// 3x3 essential matrix on normalized image coordinates, epipolar
// constraint a' * E * b = 0 with a in camera A and b in camera B.
struct EssentialMatrix {
  Eigen::Matrix3d e = Eigen::Matrix3d::Zero();
};

// One 2D-2D correspondence between a camera pair, traceable to the
// person and frame it came from. Coordinates are pixels on ingestion
// and normalized camera coordinates once undistorted.
struct PointPair {
  Eigen::Vector2d a = Eigen::Vector2d::Zero();
  Eigen::Vector2d b = Eigen::Vector2d::Zero();
  int frame = 0;
  int person_id = 0;
  double weight = 1.0;
};

struct CorrespondenceSet {
  int cam_a = 0;
  int cam_b = 0;
  std::vector<PointPair> pairs;
};

// Axis-aligned detection rectangle, MOT-style.
struct BBox {
  double u_tl = 0.0;
  double v_tl = 0.0;
  double u_br = 0.0;
  double v_br = 0.0;
  int frame = 0;
  int person_id = 0;
  int camera_id = 0;

  bool valid() const {
    return u_tl < u_br && v_tl < v_br && std::isfinite(u_tl) && std::isfinite(v_tl) &&
           std::isfinite(u_br) && std::isfinite(v_br);
  }
};

// Time-ordered boxes of one person in one camera, with optional
// per-box appearance embeddings (all of one dimension).
struct Tracklet {
  int camera_id = 0;
  int person_id = 0;
  std::vector<BBox> boxes;
  std::vector<Eigen::VectorXd> embeddings;  // empty, or one per box

  bool has_embeddings() const {
    return !embeddings.empty() && embeddings.size() == boxes.size();
  }

  void validate() const {
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      if (!boxes[i].valid())
        throw Error(ErrorCode::ConfigError, "tracklet: invalid box");
      if (boxes[i].camera_id != camera_id || boxes[i].person_id != person_id)
        throw Error(ErrorCode::ConfigError, "tracklet: box ids disagree with tracklet ids");
      if (i > 0 && boxes[i].frame <= boxes[i - 1].frame)
        throw Error(ErrorCode::ConfigError, "tracklet: frames not strictly increasing");
    }
    if (!embeddings.empty()) {
      if (embeddings.size() != boxes.size())
        throw Error(ErrorCode::ConfigError, "tracklet: embedding count != box count");
      for (const auto& e : embeddings) {
        if (e.size() != embeddings.front().size())
          throw Error(ErrorCode::DimensionMismatch, "tracklet: embedding dimensions differ");
      }
    }
  }
};

// Result of a one-to-one matching between two tracklet lists.
struct Assignment {
  std::vector<std::pair<int, int>> matches;  // (index in A, index in B)
  std::vector<int> unmatched_a;
  std::vector<int> unmatched_b;
  double total_cost = 0.0;
};

// Identity of a reconstructed 3D point: (person id, frame).
using PointKey = std::pair<int, int>;

// A known metric length observed as two pixel endpoints in at least
// one camera pair, e.g. a person's foot-to-head segment.
struct ScalePriorObs {
  double length = 0.0;  // meters
  // camera id -> (first endpoint, second endpoint) in pixels
  std::map<int, std::pair<Eigen::Vector2d, Eigen::Vector2d>> pixels;
};

}  // namespace crowdcalib
