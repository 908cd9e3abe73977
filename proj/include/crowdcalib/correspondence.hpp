#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <map>
#include <vector>

#include "crowdcalib/random.hpp"
#include "crowdcalib/types.hpp"

namespace crowdcalib {

// Geometric center of the box. Detector boxes wrap the whole body, so
// the center tracks the body mass point rather than feet or head.
inline Eigen::Vector2d bbox_center(const BBox& b) {
  return {0.5 * (b.u_tl + b.u_br), 0.5 * (b.v_tl + b.v_br)};
}

// Turns matched tracklet pairs into point correspondences: one pair of
// box centers per common frame, keeping every frame_stride-th common
// frame starting from the first and thinning frames where neither
// center moved at least min_motion_px since the last kept one. Output
// is ordered by (person id, frame); person ids are the reference (A)
// side's.
inline CorrespondenceSet extract_correspondences(const Assignment& assignment,
                                                 const std::vector<Tracklet>& tracklets_a,
                                                 const std::vector<Tracklet>& tracklets_b,
                                                 int frame_stride, double min_motion_px = 2.0) {
  if (frame_stride < 1)
    throw Error(ErrorCode::ConfigError, "extract_correspondences: frame_stride must be >= 1");
  if (min_motion_px < 0.0)
    throw Error(ErrorCode::ConfigError, "extract_correspondences: negative min_motion_px");

  CorrespondenceSet out;
  if (!tracklets_a.empty()) out.cam_a = tracklets_a.front().camera_id;
  if (!tracklets_b.empty()) out.cam_b = tracklets_b.front().camera_id;

  for (const auto& [ia, ib] : assignment.matches) {
    if (ia < 0 || ia >= static_cast<int>(tracklets_a.size()) || ib < 0 ||
        ib >= static_cast<int>(tracklets_b.size()))
      throw Error(ErrorCode::ConfigError, "extract_correspondences: match index out of range");
    const Tracklet& ta = tracklets_a[ia];
    const Tracklet& tb = tracklets_b[ib];

    std::map<int, const BBox*> frames_b;
    for (const auto& box : tb.boxes) frames_b.emplace(box.frame, &box);

    bool have_last = false;
    Eigen::Vector2d last_a = Eigen::Vector2d::Zero(), last_b = Eigen::Vector2d::Zero();
    std::map<int, const BBox*> frames_a;
    for (const auto& box : ta.boxes) frames_a.emplace(box.frame, &box);
    std::size_t common_index = 0;
    for (const auto& [frame, box_a] : frames_a) {
      const auto it = frames_b.find(frame);
      if (it == frames_b.end()) continue;
      const bool keep = common_index % static_cast<std::size_t>(frame_stride) == 0;
      ++common_index;
      if (!keep) continue;
      const Eigen::Vector2d ca = bbox_center(*box_a);
      const Eigen::Vector2d cb = bbox_center(*it->second);
      if (have_last && (ca - last_a).norm() < min_motion_px &&
          (cb - last_b).norm() < min_motion_px)
        continue;
      PointPair pp;
      pp.a = ca;
      pp.b = cb;
      pp.frame = frame;
      pp.person_id = ta.person_id;
      out.pairs.push_back(pp);
      last_a = ca;
      last_b = cb;
      have_last = true;
    }
  }

  std::sort(out.pairs.begin(), out.pairs.end(), [](const PointPair& x, const PointPair& y) {
    return std::tie(x.person_id, x.frame) < std::tie(y.person_id, y.frame);
  });
  if (out.pairs.empty())
    throw Error(ErrorCode::EmptyCorrespondence,
                "extract_correspondences: no correspondences between cameras " +
                    std::to_string(out.cam_a) + " and " + std::to_string(out.cam_b));
  return out;
}

// Perturbs each box corner coordinate by an independent uniform draw
// from [-magnitude, magnitude], re-sorting corners if they cross.
// Fixed draw order: u_tl, v_tl, u_br, v_br.
inline BBox inject_bbox_noise(const BBox& box, double magnitude, std::uint64_t seed) {
  if (magnitude < 0.0)
    throw Error(ErrorCode::ConfigError, "inject_bbox_noise: negative magnitude");
  Rng rng(seed);
  BBox out = box;
  out.u_tl += rng.uniform(-magnitude, magnitude);
  out.v_tl += rng.uniform(-magnitude, magnitude);
  out.u_br += rng.uniform(-magnitude, magnitude);
  out.v_br += rng.uniform(-magnitude, magnitude);
  if (out.u_tl > out.u_br) std::swap(out.u_tl, out.u_br);
  if (out.v_tl > out.v_br) std::swap(out.v_tl, out.v_br);
  return out;
}

}  // namespace crowdcalib
