#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "crowdcalib/association.hpp"
#include "crowdcalib/bundle_adjust.hpp"
#include "crowdcalib/correspondence.hpp"
#include "crowdcalib/geometry.hpp"
#include "crowdcalib/metrics.hpp"
#include "crowdcalib/random.hpp"
#include "crowdcalib/ransac.hpp"
#include "crowdcalib/synthetic.hpp"
#include "crowdcalib/types.hpp"

namespace crowdcalib {

struct AssociationConfig {
  int sample_size = 8;
  std::optional<double> max_cost;  // match demotion threshold
};

struct CorrespondenceConfig {
  int frame_stride = 25;
  double min_motion_px = 2.0;
};

struct PipelineConfig {
  int reference_camera = 0;
  std::uint64_t seed = 1;
  // Cap on correspondences per camera pair after extraction; 0 keeps
  // all. Used by the correspondence-count study.
  std::size_t max_correspondences = 0;
  AssociationConfig association;
  CorrespondenceConfig correspondence;
  RansacConfig ransac;
  LMConfig lm;
};

struct CameraData {
  CameraIntrinsics intrinsics;
  std::vector<Tracklet> tracklets;
};

struct CalibrationInput {
  std::map<int, CameraData> cameras;
  std::vector<ScalePriorObs> priors;
  PipelineConfig config;
};

struct PairReport {
  int cam_a = 0;
  int cam_b = 0;
  std::size_t n_correspondences = 0;
  std::size_t n_dropped_normalization = 0;
  std::size_t n_dropped_low_consensus = 0;  // removed by the per-person gate
  std::size_t n_inliers = 0;
  std::size_t n_triangulated = 0;
  int ransac_iterations = 0;
  double mean_inlier_sampson_px = 0.0;
  double scale = 1.0;
  PoseSE3 pairwise_pose;  // metric two-view estimate before global refinement
  std::vector<double> local_cost_trace;
  std::vector<PointPair> correspondences;   // extracted pixel pairs
  std::vector<std::uint8_t> inlier_mask;    // aligned with correspondences
};

struct CalibrationResult {
  int reference_camera = 0;
  std::map<int, PoseSE3> poses;  // reference camera is the identity
  std::map<PointKey, Eigen::Vector3d> points;
  std::map<PairKey, PairReport> pair_reports;
  std::vector<double> global_cost_trace;
  int global_accepted_steps = 0;
  std::vector<double> metric_cost_trace;  // empty when no scale priors were given
  int metric_accepted_steps = 0;
  PipelineConfig config;  // snapshot of the configuration used
};

namespace detail {

struct PairEstimate {
  PoseSE3 pose;
  std::map<PointKey, Eigen::Vector3d> points;
  std::vector<std::pair<PointKey, PointPair>> pixel_pairs;  // surviving inliers
  PairReport report;
};

struct PosePick {
  PoseSE3 pose;
  std::vector<std::uint8_t> mask;  // over the normalized pairs, under the picked pose
  std::size_t survivors = 0;       // masked pairs that triangulate
  std::size_t count = 0;
  double mean_sampson = 0.0;
};

// Pose selection hardened against the dominant-plane degeneracy. The
// RANSAC winner can be a plane-consistent impostor that wins the inlier
// count yet puts a chunk of its own consensus behind a camera. Candidate
// poses from the essential decomposition and from a homography fit of
// the consensus set are each refined on the consensus, re-masked, and
// scored by how many of their own inliers actually triangulate.
inline PosePick select_pair_pose(const EssentialMatrix& ransac_e,
                                 std::span<const PointPair> pairs,
                                 const std::vector<std::uint8_t>& ransac_mask, double threshold,
                                 bool refine = true) {
  std::vector<PointPair> consensus;
  for (std::size_t i = 0; i < pairs.size(); ++i)
    if (ransac_mask[i]) consensus.push_back(pairs[i]);

  std::vector<PoseSE3> candidates;
  try {
    candidates.push_back(decompose_essential(ransac_e, consensus));
  } catch (const Error&) {
    // Ambiguous vote; the raw candidates below still get their shot.
  }
  for (const PoseSE3& c : detail::pose_candidates_from_essential(ransac_e))
    candidates.push_back(c);
  try {
    for (const PoseSE3& c : decompose_homography(estimate_homography(consensus)))
      candidates.push_back(c);
  } catch (const Error&) {
    // Degenerate homography fit; skip that family.
  }

  PosePick best;
  bool have = false;
  std::vector<std::uint8_t> mask;
  for (PoseSE3 cand : candidates) {
    if (refine) {
      try {
        cand = refine_relative_pose(cand, consensus);
      } catch (const Error&) {
        continue;
      }
    }
    const EssentialMatrix e = essential_from_pose(cand);
    double mean = 0.0;
    const std::size_t count = detail::count_inliers(e, pairs, threshold, mask, mean);
    std::size_t survivors = 0;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      if (!mask[i]) continue;
      try {
        triangulate(pairs[i], cand);
        ++survivors;
      } catch (const Error&) {
        // Behind a camera or too little parallax under this pose.
      }
    }
    const bool better =
        !have || survivors > best.survivors ||
        (survivors == best.survivors &&
         (count > best.count || (count == best.count && mean < best.mean_sampson)));
    if (better) {
      best.pose = cand;
      best.mask = mask;
      best.survivors = survivors;
      best.count = count;
      best.mean_sampson = mean;
      have = true;
    }
  }
  if (!have || best.survivors < 8)
    throw Error(ErrorCode::CheiralityAmbiguity,
                "select_pair_pose: no pose candidate survives triangulation scoring");
  return best;
}

inline PairEstimate estimate_pair(const CameraData& ref, const CameraData& other, int ref_id,
                                  int other_id, const std::vector<ScalePriorObs>& priors,
                                  const PipelineConfig& cfg, int attempt, bool refine_pair_pose) {
  PairEstimate est;
  est.report.cam_a = ref_id;
  est.report.cam_b = other_id;

  const Assignment assignment = match_across_cameras(
      ref.tracklets, other.tracklets, cfg.association.max_cost, cfg.association.sample_size,
      derive_seed(cfg.seed, 0x1000 + static_cast<std::uint64_t>(other_id)));

  CorrespondenceSet corr =
      extract_correspondences(assignment, ref.tracklets, other.tracklets,
                              cfg.correspondence.frame_stride, cfg.correspondence.min_motion_px);
  // The cap keeps the first entries of the (person, frame)-ordered
  // extraction, so a small budget spends itself on a few whole tracks
  // rather than snippets of many.
  if (cfg.max_correspondences > 0 && corr.pairs.size() > cfg.max_correspondences)
    corr.pairs.resize(cfg.max_correspondences);
  est.report.n_correspondences = corr.pairs.size();

  const NormalizedSet norm = normalize_correspondences(corr, ref.intrinsics, other.intrinsics);
  est.report.n_dropped_normalization = norm.n_dropped;

  const double f_mean = 0.25 * (ref.intrinsics.fx + ref.intrinsics.fy + other.intrinsics.fx +
                                other.intrinsics.fy);
  const double threshold = cfg.ransac.threshold_px / f_mean;
  RansacConfig rcfg = cfg.ransac;
  // Retries reseed the sampler, leaving everything else untouched.
  rcfg.seed = derive_seed(cfg.seed, 0x2000 + static_cast<std::uint64_t>(other_id) +
                                        (static_cast<std::uint64_t>(attempt) << 16));
  RansacResult rr = ransac_essential_normalized(norm.pairs, threshold, rcfg);
  PosePick pick = select_pair_pose(rr.e, norm.pairs, rr.inlier_mask, threshold, refine_pair_pose);
  std::vector<PointPair> active = norm.pairs;
  std::vector<std::size_t> active_index = norm.original_index;

  // Association errors arrive as whole matched tracklets, so their
  // correspondences form per-person blocks that are mostly outliers.
  // A person whose inlier fraction under the picked pose falls far
  // below the median is treated as a wrong match: the whole block is
  // removed and the pair is re-estimated on what remains.
  {
    std::map<int, std::pair<int, int>> by_person;  // inliers, total
    for (std::size_t i = 0; i < active.size(); ++i) {
      auto& s = by_person[active[i].person_id];
      ++s.second;
      if (pick.mask[i]) ++s.first;
    }
    // Fractions over a handful of samples say nothing, so blocks that
    // small neither vote for the median nor get dropped.
    constexpr int kMinBlock = 5;
    std::vector<double> fracs;
    for (const auto& [p, s] : by_person)
      if (s.second >= kMinBlock)
        fracs.push_back(static_cast<double>(s.first) / static_cast<double>(s.second));
    std::sort(fracs.begin(), fracs.end());
    const double med = fracs.empty() ? 0.0 : fracs[fracs.size() / 2];
    std::set<int> drop;
    if (med >= 0.2)
      for (const auto& [p, s] : by_person)
        if (s.second >= kMinBlock &&
            static_cast<double>(s.first) / static_cast<double>(s.second) < 0.5 * med)
          drop.insert(p);
    if (!drop.empty()) {
      std::vector<PointPair> kept;
      std::vector<std::size_t> kept_idx;
      for (std::size_t i = 0; i < active.size(); ++i) {
        if (drop.count(active[i].person_id)) continue;
        kept.push_back(active[i]);
        kept_idx.push_back(active_index[i]);
      }
      if (kept.size() >= 16) {
        try {
          RansacConfig regate = rcfg;
          regate.seed = derive_seed(cfg.seed, 0x3000 + static_cast<std::uint64_t>(other_id) +
                                                  (static_cast<std::uint64_t>(attempt) << 16));
          RansacResult rr2 = ransac_essential_normalized(kept, threshold, regate);
          PosePick pick2 =
              select_pair_pose(rr2.e, kept, rr2.inlier_mask, threshold, refine_pair_pose);
          est.report.n_dropped_low_consensus = active.size() - kept.size();
          rr = std::move(rr2);
          pick = std::move(pick2);
          active = std::move(kept);
          active_index = std::move(kept_idx);
        } catch (const Error&) {
          // Gated re-estimation failed; the ungated result stands.
        }
      }
    }
  }

  est.report.n_inliers = rr.n_inliers;
  est.report.ransac_iterations = rr.iterations;
  est.report.mean_inlier_sampson_px = rr.mean_inlier_sampson * f_mean;
  const PoseSE3& pose0 = pick.pose;

  std::vector<PointPair> norm_inliers;
  std::vector<std::size_t> corr_index;
  for (std::size_t i = 0; i < active.size(); ++i) {
    if (!pick.mask[i]) continue;
    norm_inliers.push_back(active[i]);
    corr_index.push_back(active_index[i]);
  }

  // Triangulate the inliers; points that resist (behind a camera or
  // too little parallax) are dropped from the refinement.
  std::vector<Eigen::Vector3d> points0;
  std::vector<PointPair> px_kept;
  std::vector<std::size_t> kept_index;
  for (std::size_t i = 0; i < norm_inliers.size(); ++i) {
    Eigen::Vector3d x;
    try {
      x = triangulate(norm_inliers[i], pose0);
    } catch (const Error&) {
      continue;
    }
    points0.push_back(x);
    px_kept.push_back(corr.pairs[corr_index[i]]);
    kept_index.push_back(corr_index[i]);
  }
  if (px_kept.size() < 8)
    throw Error(ErrorCode::InsufficientInliers,
                "fewer than 8 inliers survived triangulation");
  est.report.n_triangulated = px_kept.size();
  est.report.inlier_mask.assign(corr.pairs.size(), 0);
  for (const std::size_t i : kept_index) est.report.inlier_mask[i] = 1;

  const LocalBAResult lba =
      local_ba(px_kept, pose0, points0, ref.intrinsics, other.intrinsics, cfg.lm);
  est.report.local_cost_trace = lba.lm.cost_trace;

  // Metric scale from the covering priors. Each prior observed by both
  // cameras whose endpoints triangulate under the refined pose implies a
  // scale; the median implied scale is applied, which keeps one badly
  // annotated or poorly triangulated prior from setting the pair's scale.
  bool any_covering = false;
  struct PriorFix {
    double implied;
    Eigen::Vector3d end_a, end_b;
    double length;
  };
  std::vector<PriorFix> fixes;
  for (const auto& p : priors) {
    if (!p.pixels.count(ref_id) || !p.pixels.count(other_id)) continue;
    any_covering = true;
    PointPair end_a, end_b;
    PriorFix fix;
    try {
      end_a.a = undistort_normalize(p.pixels.at(ref_id).first, ref.intrinsics);
      end_a.b = undistort_normalize(p.pixels.at(other_id).first, other.intrinsics);
      end_b.a = undistort_normalize(p.pixels.at(ref_id).second, ref.intrinsics);
      end_b.b = undistort_normalize(p.pixels.at(other_id).second, other.intrinsics);
      fix.end_a = triangulate(end_a, lba.pose);
      fix.end_b = triangulate(end_b, lba.pose);
    } catch (const Error&) {
      continue;
    }
    const double d = (fix.end_a - fix.end_b).norm();
    if (d <= 1e-12) continue;
    fix.implied = p.length / d;
    fix.length = p.length;
    fixes.push_back(fix);
  }
  if (!any_covering)
    throw Error(ErrorCode::ConfigError, "no scale prior covers this camera pair");
  if (fixes.empty())
    throw Error(ErrorCode::DegeneratePrior,
                "no covering scale prior triangulates under the estimated pose");
  std::nth_element(fixes.begin(), fixes.begin() + fixes.size() / 2, fixes.end(),
                   [](const PriorFix& l, const PriorFix& r) { return l.implied < r.implied; });
  const PriorFix& median_fix = fixes[fixes.size() / 2];
  std::vector<Eigen::Vector3d> with_prior = lba.points;
  with_prior.push_back(median_fix.end_a);
  with_prior.push_back(median_fix.end_b);
  ScalePrior sp;
  sp.index_a = with_prior.size() - 2;
  sp.index_b = with_prior.size() - 1;
  sp.length = median_fix.length;
  ScaledReconstruction scaled = resolve_scale(lba.pose, with_prior, sp);
  scaled.points.resize(lba.points.size());
  est.report.scale = scaled.scale;
  est.report.pairwise_pose = scaled.pose;

  est.pose = scaled.pose;
  for (std::size_t i = 0; i < px_kept.size(); ++i) {
    const PointKey key{px_kept[i].person_id, px_kept[i].frame};
    est.points.emplace(key, scaled.points[i]);
    est.pixel_pairs.emplace_back(key, px_kept[i]);
  }
  return est;
}

// Median distance, in meters, between one pair's reconstruction and the
// mean of the other pairs' positions of the same (person, frame) points.
// All reconstructions share the reference camera frame, so shared points
// must agree; a wrong-basin pose disagrees by meters.
inline double pair_disagreement(const std::map<int, PairEstimate>& estimates, int target) {
  std::vector<double> ds;
  for (const auto& [key, x] : estimates.at(target).points) {
    Eigen::Vector3d sum = Eigen::Vector3d::Zero();
    int n = 0;
    for (const auto& [id, est] : estimates) {
      if (id == target) continue;
      const auto it = est.points.find(key);
      if (it == est.points.end()) continue;
      sum += it->second;
      ++n;
    }
    if (n == 0) continue;
    ds.push_back((x - sum / static_cast<double>(n)).norm());
  }
  if (ds.empty()) return 0.0;
  std::nth_element(ds.begin(), ds.begin() + static_cast<std::ptrdiff_t>(ds.size() / 2), ds.end());
  return ds[ds.size() / 2];
}

}  // namespace detail

// Full calibration: per-pair association, correspondence extraction,
// essential-matrix RANSAC, two-view refinement and metric scaling
// against the reference camera, joint refinement of all cameras, and a
// final metric refinement against the scale priors.
inline CalibrationResult calibrate(const CalibrationInput& input) {
  const PipelineConfig& cfg = input.config;
  if (input.cameras.size() < 2)
    throw Error(ErrorCode::ConfigError, "calibrate: need at least two cameras");
  if (!input.cameras.count(cfg.reference_camera))
    throw Error(ErrorCode::CameraIdMismatch, "calibrate: reference camera " +
                                                 std::to_string(cfg.reference_camera) +
                                                 " has no data");
  for (const auto& [id, cam] : input.cameras) {
    cam.intrinsics.validate();
    for (const auto& t : cam.tracklets) {
      t.validate();
      if (!t.has_embeddings())
        throw Error(ErrorCode::MissingFeature,
                    "calibrate: tracklet without embeddings in camera " + std::to_string(id));
    }
  }

  CalibrationResult result;
  result.reference_camera = cfg.reference_camera;
  result.config = cfg;

  const CameraData& ref = input.cameras.at(cfg.reference_camera);

  constexpr int kMaxPairAttempts = 4;
  constexpr double kConsistencyTolM = 1.0;

  // One full pass of the pipeline. Two-view Sampson refinement sharpens
  // pair poses on well-conditioned data but drifts along the degeneracy
  // valley when the scene is nearly planar, and no two-view score can
  // tell those cases apart. Calibrate therefore runs one pass with
  // refined pair poses and one with the raw decompositions, and keeps
  // whichever refined network explains the observations best.
  struct NetworkCandidate {
    std::map<int, PoseSE3> poses;
    std::map<PointKey, Eigen::Vector3d> points;
    std::vector<double> cost_trace;
    int accepted_steps = 0;
    std::vector<double> metric_cost_trace;
    int metric_accepted_steps = 0;
    std::map<PairKey, PairReport> pair_reports;
    double mean_cost = std::numeric_limits<double>::infinity();
  };

  auto run_pass = [&](bool refine_pair_pose) -> NetworkCandidate {
  std::map<PairKey, std::map<PointKey, Eigen::Vector3d>> per_pair_points;
  std::map<std::pair<int, PointKey>, Eigen::Vector2d> pixel_by_cam_key;
  std::map<int, PoseSE3> initial_poses;
  PoseSE3 identity = PoseSE3::identity();
  identity.metric = true;
  initial_poses.emplace(cfg.reference_camera, identity);

  std::map<int, detail::PairEstimate> estimates;
  std::map<int, int> next_attempt;
  for (const auto& [id, cam] : input.cameras) {
    if (id == cfg.reference_camera) continue;
    bool ok = false;
    ErrorCode last_code = ErrorCode::ConfigError;
    std::string last_msg;
    for (int attempt = 0; attempt < kMaxPairAttempts && !ok; ++attempt) {
      next_attempt[id] = attempt + 1;
      try {
        estimates[id] = detail::estimate_pair(ref, cam, cfg.reference_camera, id, input.priors,
                                              cfg, attempt, refine_pair_pose);
        ok = true;
      } catch (const Error& e) {
        last_code = e.code();
        last_msg = e.what();
      }
    }
    if (!ok)
      throw Error(last_code, "camera pair (" + std::to_string(cfg.reference_camera) + "," +
                                 std::to_string(id) + "): " + last_msg);
  }

  // All pair reconstructions live in the reference camera's metric frame,
  // so they must agree on shared people. A pair that landed in a wrong
  // basin disagrees by meters; re-run the worst offender with a reseeded
  // sampler while the budget lasts, keeping whichever attempt agrees
  // best with the rest of the network.
  if (estimates.size() >= 2) {
    const int budget = static_cast<int>(estimates.size()) * kMaxPairAttempts;
    for (int round = 0; round < budget; ++round) {
      int worst_id = -1;
      double worst = 0.0;
      for (const auto& [id, est] : estimates) {
        const double d = detail::pair_disagreement(estimates, id);
        if (d > worst) {
          worst = d;
          worst_id = id;
        }
      }
      if (worst_id < 0 || worst <= kConsistencyTolM) break;
      int& attempt = next_attempt[worst_id];
      if (attempt >= kMaxPairAttempts) break;
      detail::PairEstimate retry;
      bool have_retry = false;
      try {
        retry = detail::estimate_pair(ref, input.cameras.at(worst_id), cfg.reference_camera,
                                      worst_id, input.priors, cfg, attempt, refine_pair_pose);
        have_retry = true;
      } catch (const Error&) {
        // Failed attempt; the budget is spent either way.
      }
      ++attempt;
      if (!have_retry) continue;
      detail::PairEstimate incumbent = std::move(estimates.at(worst_id));
      estimates.at(worst_id) = std::move(retry);
      if (detail::pair_disagreement(estimates, worst_id) >= worst)
        estimates.at(worst_id) = std::move(incumbent);
    }
  }

  NetworkCandidate cand;
  for (auto& [id, est] : estimates) {
    const PairKey pair_key{cfg.reference_camera, id};
    per_pair_points.emplace(pair_key, std::move(est.points));
    for (const auto& [key, pp] : est.pixel_pairs) {
      pixel_by_cam_key.try_emplace({cfg.reference_camera, key}, pp.a);
      pixel_by_cam_key.try_emplace({id, key}, pp.b);
    }
    initial_poses.emplace(id, est.pose);
    cand.pair_reports.emplace(pair_key, std::move(est.report));
  }

  const std::map<PointKey, Eigen::Vector3d> merged = merge_3d_points(per_pair_points);

  // Merged points come from independently scaled pair reconstructions; a
  // point can land behind a camera that observes it, which would leave
  // the joint problem with an undefined initial cost. Drop those
  // observations up front (the later per-point visibility filter then
  // drops any point left with fewer than two cameras).
  std::vector<GlobalObservation> observations;
  observations.reserve(pixel_by_cam_key.size());
  for (const auto& [cam_key, px] : pixel_by_cam_key) {
    const auto pt = merged.find(cam_key.second);
    if (pt == merged.end()) continue;
    const Eigen::Vector3d x_cam = initial_poses.at(cam_key.first).apply(pt->second);
    if (x_cam.z() <= 1e-6) continue;
    observations.push_back({cam_key.first, cam_key.second, px, 1.0});
  }

  std::map<int, CameraIntrinsics> intrinsics;
  for (const auto& [id, cam] : input.cameras) intrinsics.emplace(id, cam.intrinsics);

  GlobalBAResult g = global_ba(initial_poses, merged, observations, intrinsics,
                               cfg.reference_camera, cfg.lm);

  cand.poses = std::move(g.poses);
  cand.points = std::move(g.points);
  cand.cost_trace = std::move(g.lm.cost_trace);
  cand.accepted_steps = g.lm.accepted_steps;
  if (!observations.empty() && !cand.cost_trace.empty())
    cand.mean_cost = cand.cost_trace.back() / static_cast<double>(observations.size());

  // The reprojection-only refinement fixes the gauge at whatever scale
  // the first pair initialized, and on nearly planar scenes its cost is
  // almost flat along a direction that trades network shape against
  // depth. The prior segments carry the missing metric information, so
  // a second refinement folds their lengths into the objective rather
  // than rescaling after the fact.
  if (!input.priors.empty()) {
    MetricBAResult m = metric_ba(cand.poses, cand.points, observations, intrinsics, input.priors,
                                 cfg.reference_camera, cfg.lm);
    cand.poses = std::move(m.poses);
    cand.points = std::move(m.points);
    cand.metric_cost_trace = std::move(m.cost_trace);
    cand.metric_accepted_steps = m.accepted_steps;
    if (m.n_observations > 0 && !cand.metric_cost_trace.empty())
      cand.mean_cost =
          cand.metric_cost_trace.back() / static_cast<double>(m.n_observations);
  }
  return cand;
  };

  NetworkCandidate best;
  bool have_best = false;
  ErrorCode fail_code = ErrorCode::ConfigError;
  std::string fail_msg;
  for (const bool refine_pair_pose : {true, false}) {
    NetworkCandidate cand;
    try {
      cand = run_pass(refine_pair_pose);
    } catch (const Error& e) {
      fail_code = e.code();
      fail_msg = e.what();
      continue;
    }
    if (!have_best || cand.mean_cost < best.mean_cost) {
      best = std::move(cand);
      have_best = true;
    }
    // A network already fitting to numerical noise cannot be improved
    // by another pass.
    if (best.mean_cost < 1e-15) break;
  }
  if (!have_best) throw Error(fail_code, fail_msg);

  result.poses = std::move(best.poses);
  result.points = std::move(best.points);
  result.global_cost_trace = std::move(best.cost_trace);
  result.global_accepted_steps = best.accepted_steps;
  result.metric_cost_trace = std::move(best.metric_cost_trace);
  result.metric_accepted_steps = best.metric_accepted_steps;
  result.pair_reports = std::move(best.pair_reports);
  return result;
}

inline CalibrationInput make_calibration_input(const GroundTruth& gt, const RenderedScene& scene,
                                               const PipelineConfig& cfg) {
  CalibrationInput input;
  input.config = cfg;
  for (int c = 0; c < static_cast<int>(gt.world_to_cam.size()); ++c)
    input.cameras.emplace(c, CameraData{gt.intrinsics[c], scene.tracklets[c]});
  input.priors = scene.priors;
  return input;
}

struct StudyRow {
  double level = 0.0;  // noise magnitude or correspondence count
  bool ok = false;
  double mean_position_mm = 0.0;
  double mean_rotation_deg = 0.0;
  double max_position_mm = 0.0;
  double max_rotation_deg = 0.0;
  std::string message;
};

namespace detail {

inline StudyRow evaluate_calibration(const CalibrationInput& input,
                                     const std::map<int, PoseSE3>& gt_poses, double level) {
  StudyRow row;
  row.level = level;
  try {
    const CalibrationResult result = calibrate(input);
    const PoseErrorReport rep =
        camera_pose_error(result.poses, gt_poses, input.config.reference_camera);
    row.ok = true;
    row.mean_position_mm = rep.mean_position_mm;
    row.mean_rotation_deg = rep.mean_rotation_deg;
    row.max_position_mm = rep.max_position_mm;
    row.max_rotation_deg = rep.max_rotation_deg;
  } catch (const Error& e) {
    row.message = e.what();
  }
  return row;
}

}  // namespace detail

// Pose error against ground truth as a function of box noise. Boxes
// are perturbed with per-box derived seeds; embeddings stay clean so
// every level sees the same association problem. Failed levels are
// reported, not thrown.
inline std::vector<StudyRow> study_noise(const CalibrationInput& input,
                                         const std::map<int, PoseSE3>& gt_poses,
                                         const std::vector<double>& levels) {
  std::vector<StudyRow> rows;
  for (std::size_t li = 0; li < levels.size(); ++li) {
    CalibrationInput noisy = input;
    const std::uint64_t level_seed =
        derive_seed(input.config.seed, 0x5000 + static_cast<std::uint64_t>(li));
    for (auto& [id, cam] : noisy.cameras) {
      for (auto& t : cam.tracklets) {
        for (auto& box : t.boxes) {
          const std::uint64_t salt = (static_cast<std::uint64_t>(id) << 40) ^
                                     (static_cast<std::uint64_t>(t.person_id) << 20) ^
                                     static_cast<std::uint64_t>(box.frame);
          box = inject_bbox_noise(box, levels[li], derive_seed(level_seed, salt));
        }
      }
    }
    rows.push_back(detail::evaluate_calibration(noisy, gt_poses, levels[li]));
  }
  return rows;
}

// Pose error as a function of the number of correspondences kept per
// camera pair. Counts below the 8-point minimum come back as failed
// rows rather than exceptions.
inline std::vector<StudyRow> study_count(const CalibrationInput& input,
                                         const std::map<int, PoseSE3>& gt_poses,
                                         const std::vector<std::size_t>& counts) {
  std::vector<StudyRow> rows;
  for (const std::size_t count : counts) {
    CalibrationInput limited = input;
    limited.config.max_correspondences = count;
    rows.push_back(
        detail::evaluate_calibration(limited, gt_poses, static_cast<double>(count)));
  }
  return rows;
}

struct Trajectory {
  std::vector<int> frames;
  std::vector<Eigen::Vector3d> positions;  // reference camera frame, meters
  std::vector<int> skipped_frames;
};

// Triangulates one person's box centers across all camera pairs that
// see them in the same frame, averaging the per-pair estimates.
inline Trajectory track_person(const std::map<int, PoseSE3>& poses,
                               const std::map<int, CameraIntrinsics>& intrinsics,
                               const std::map<int, std::vector<Tracklet>>& tracks,
                               int person_id) {
  std::map<int, std::map<int, Eigen::Vector2d>> centers;  // camera -> frame -> center
  for (const auto& [cam, tracklets] : tracks) {
    if (!poses.count(cam) || !intrinsics.count(cam))
      throw Error(ErrorCode::CameraIdMismatch,
                  "track_person: no pose for camera " + std::to_string(cam));
    for (const auto& t : tracklets) {
      if (t.person_id != person_id) continue;
      for (const auto& box : t.boxes) centers[cam][box.frame] = bbox_center(box);
    }
  }

  std::map<int, std::vector<std::pair<int, Eigen::Vector2d>>> by_frame;
  for (const auto& [cam, frames] : centers)
    for (const auto& [frame, px] : frames) by_frame[frame].emplace_back(cam, px);

  Trajectory out;
  for (const auto& [frame, views] : by_frame) {
    if (views.size() < 2) {
      out.skipped_frames.push_back(frame);
      continue;
    }
    Eigen::Vector3d sum = Eigen::Vector3d::Zero();
    int n = 0;
    for (std::size_t i = 0; i < views.size(); ++i) {
      for (std::size_t j = i + 1; j < views.size(); ++j) {
        const auto& [cam_i, px_i] = views[i];
        const auto& [cam_j, px_j] = views[j];
        try {
          PointPair pp;
          pp.a = undistort_normalize(px_i, intrinsics.at(cam_i));
          pp.b = undistort_normalize(px_j, intrinsics.at(cam_j));
          const PoseSE3 rel = poses.at(cam_j).compose(poses.at(cam_i).inverse());
          const Eigen::Vector3d x = triangulate(pp, rel);
          sum += poses.at(cam_i).inverse().apply(x);
          ++n;
        } catch (const Error&) {
          continue;
        }
      }
    }
    if (n == 0) {
      out.skipped_frames.push_back(frame);
      continue;
    }
    out.frames.push_back(frame);
    out.positions.push_back(sum / static_cast<double>(n));
  }
  return out;
}

}  // namespace crowdcalib
