#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "crowdcalib/geometry.hpp"
#include "crowdcalib/random.hpp"
#include "crowdcalib/types.hpp"

namespace crowdcalib {

struct RansacConfig {
  double threshold_px = 2.0;  // divided by the mean focal length of the pair
  double confidence = 0.999;
  int max_iters = 2000;
  std::uint64_t seed = 0;
};

struct NormalizedSet {
  std::vector<PointPair> pairs;              // normalized coordinates
  std::vector<std::size_t> original_index;   // into the source set
  std::size_t n_dropped = 0;                 // inverse distortion failures
};

// Undistort both sides of every pair; pairs whose inverse distortion
// does not converge are dropped.
inline NormalizedSet normalize_correspondences(const CorrespondenceSet& set,
                                               const CameraIntrinsics& k_a,
                                               const CameraIntrinsics& k_b) {
  NormalizedSet out;
  out.pairs.reserve(set.pairs.size());
  for (std::size_t i = 0; i < set.pairs.size(); ++i) {
    PointPair p = set.pairs[i];
    try {
      p.a = undistort_normalize(p.a, k_a);
      p.b = undistort_normalize(p.b, k_b);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::FlaggedPoint) {
        ++out.n_dropped;
        continue;
      }
      throw;
    }
    out.pairs.push_back(p);
    out.original_index.push_back(i);
  }
  return out;
}

struct RansacResult {
  EssentialMatrix e;
  std::vector<std::uint8_t> inlier_mask;  // aligned with the input pairs
  std::size_t n_inliers = 0;
  int iterations = 0;
  double mean_inlier_sampson = 0.0;  // normalized units
};

namespace detail {

inline std::size_t count_inliers(const EssentialMatrix& e, std::span<const PointPair> pairs,
                                 double threshold, std::vector<std::uint8_t>& mask,
                                 double& mean_sampson) {
  mask.assign(pairs.size(), 0);
  std::size_t count = 0;
  double sum = 0.0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const double d = sampson_distance(e, pairs[i]);
    if (d < threshold) {
      mask[i] = 1;
      sum += d;
      ++count;
    }
  }
  mean_sampson = count > 0 ? sum / static_cast<double>(count) : 0.0;
  return count;
}

inline int adaptive_iterations(double inlier_ratio, double confidence, int cap,
                               std::size_t sample_size) {
  const double p_sample = std::pow(inlier_ratio, static_cast<double>(sample_size));
  if (p_sample >= 1.0 - 1e-15) return 1;
  if (p_sample <= 1e-15) return cap;
  const double n = std::log(1.0 - confidence) / std::log(1.0 - p_sample);
  if (!(n > 0.0) || n >= static_cast<double>(cap)) return cap;
  return static_cast<int>(std::ceil(n));
}

}  // namespace detail

// Minimal-sample hypothesis generator. The default is the normalized
// eight-point solve; a five-point solver can slot in without touching
// the consensus loop.
struct EssentialSolver {
  std::size_t sample_size = 8;
  EssentialMatrix (*solve)(std::span<const PointPair>) = &estimate_essential;
};

// RANSAC over normalized pairs with a normalized-unit threshold.
// Best model by inlier count, ties broken by lower mean Sampson
// distance; the winner is re-estimated on its inliers and the mask
// recomputed under the refit, so every returned inlier is within the
// threshold of the returned E.
inline RansacResult ransac_essential_normalized(std::span<const PointPair> pairs,
                                                double threshold,
                                                const RansacConfig& cfg,
                                                const EssentialSolver& solver = {}) {
  if (pairs.size() < 8 || pairs.size() < solver.sample_size)
    throw Error(ErrorCode::InsufficientInliers,
                "ransac_essential: fewer than 8 pairs after normalization");
  if (solver.sample_size < 4 || solver.solve == nullptr)
    throw Error(ErrorCode::ConfigError, "ransac_essential: invalid minimal solver");

  Rng rng(cfg.seed);
  std::vector<std::size_t> indices(pairs.size());
  std::iota(indices.begin(), indices.end(), 0);

  std::vector<std::uint8_t> mask, best_mask;
  std::size_t best_count = 0;
  double best_mean = std::numeric_limits<double>::infinity();
  EssentialMatrix best_e;
  std::vector<PointPair> sample(solver.sample_size);

  // Evaluates a candidate on the full set and adopts it when it beats the
  // incumbent by inlier count, ties by mean Sampson distance.
  const auto consider = [&](const EssentialMatrix& e) {
    double mean = 0.0;
    const std::size_t count = detail::count_inliers(e, pairs, threshold, mask, mean);
    if (count > best_count || (count == best_count && mean < best_mean)) {
      best_count = count;
      best_mean = mean;
      best_mask = mask;
      best_e = e;
      return true;
    }
    return false;
  };

  const auto gather = [&pairs](const std::vector<std::uint8_t>& m, std::size_t n) {
    std::vector<PointPair> inl;
    inl.reserve(n);
    for (std::size_t i = 0; i < pairs.size(); ++i)
      if (m[i]) inl.push_back(pairs[i]);
    return inl;
  };

  // Local optimization on the incumbent: a wide reweighted linear refit
  // first, then pose-manifold refinement from each decomposition
  // candidate over a generous consensus. Minimal-sample hypotheses on
  // near-coplanar points land far from the geometric optimum; this pulls
  // them in. Each improvement is adopted through consider(), so the
  // anneal chains on the running best.
  const auto locally_optimize = [&]() {
    std::vector<PointPair> inl;
    const auto gather_within = [&](double mult) {
      inl.clear();
      for (const auto& p : pairs)
        if (sampson_distance(best_e, p) < mult * threshold) inl.push_back(p);
    };

    gather_within(4.0);
    if (inl.size() >= 8) {
      try {
        consider(refine_essential(best_e, inl));
      } catch (const Error&) {
        // Degenerate refit; keep the incumbent.
      }
    }

    gather_within(2.0);
    if (inl.size() >= 8) {
      const auto candidates = detail::pose_candidates_from_essential(best_e);
      for (const PoseSE3& cand : candidates) {
        try {
          consider(essential_from_pose(refine_relative_pose(cand, inl)));
        } catch (const Error&) {
          // Refinement fell apart for this candidate; try the next.
        }
      }
    }
  };

  int lo_budget = 50;
  int needed = cfg.max_iters;
  int iter = 0;
  for (; iter < needed; ++iter) {
    // Partial Fisher-Yates for distinct sample indices.
    for (std::size_t j = 0; j < solver.sample_size; ++j) {
      const std::size_t pick = j + rng.index(indices.size() - j);
      std::swap(indices[j], indices[pick]);
      sample[j] = pairs[indices[j]];
    }

    bool improved = false;
    try {
      if (consider(solver.solve(sample))) improved = true;
    } catch (const Error&) {
      // Degenerate sample for the essential solve; the homography
      // branch below can still produce hypotheses from it.
    }

    // Homography-seeded hypotheses carry the dominant-plane regime,
    // where the essential design matrix is rank-deficient in practice
    // and its null vector is noise-directed.
    try {
      for (const PoseSE3& cand : decompose_homography(estimate_homography(sample)))
        if (consider(essential_from_pose(cand))) improved = true;
    } catch (const Error&) {
      // Degenerate homography sample; skip.
    }

    if (improved && best_count >= 8) {
      if (lo_budget > 0) {
        --lo_budget;
        locally_optimize();
      }
      const double ratio = static_cast<double>(best_count) / static_cast<double>(pairs.size());
      needed = std::min(cfg.max_iters,
                        std::max(iter + 1, detail::adaptive_iterations(ratio, cfg.confidence,
                                                                       cfg.max_iters,
                                                                       solver.sample_size)));
    }
  }

  if (best_count < 8)
    throw Error(ErrorCode::InsufficientInliers,
                "ransac_essential: best consensus has fewer than 8 inliers");

  // Final re-estimation on the consensus set plus one more local
  // optimization round. Candidates are adopted only when they keep at
  // least as wide a consensus, so the returned mask always agrees with
  // the returned E.
  try {
    consider(estimate_essential(gather(best_mask, best_count)));
  } catch (const Error&) {
    // Degenerate refit; the incumbent stands.
  }
  locally_optimize();

  RansacResult result;
  result.e = best_e;
  result.inlier_mask = best_mask;
  result.n_inliers = best_count;
  result.mean_inlier_sampson = best_mean;
  result.iterations = iter;
  return result;
}

// Pixel-level entry point: pixel correspondences plus intrinsics. The
// returned mask is aligned with set.pairs (dropped points are false).
inline RansacResult ransac_essential(const CorrespondenceSet& set, const CameraIntrinsics& k_a,
                                     const CameraIntrinsics& k_b, const RansacConfig& cfg,
                                     const EssentialSolver& solver = {}) {
  const NormalizedSet normalized = normalize_correspondences(set, k_a, k_b);
  const double f_mean = 0.25 * (k_a.fx + k_a.fy + k_b.fx + k_b.fy);
  const double threshold = cfg.threshold_px / f_mean;
  RansacResult r = ransac_essential_normalized(normalized.pairs, threshold, cfg, solver);

  std::vector<std::uint8_t> full_mask(set.pairs.size(), 0);
  for (std::size_t i = 0; i < normalized.pairs.size(); ++i)
    if (r.inlier_mask[i]) full_mask[normalized.original_index[i]] = 1;
  r.inlier_mask = std::move(full_mask);
  return r;
}

}  // namespace crowdcalib
