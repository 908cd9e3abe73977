#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "crowdcalib/random.hpp"
#include "crowdcalib/types.hpp"

namespace crowdcalib {

// Restricted random sampling: the tracklet is split into n equal time
// chunks and one detection is drawn per chunk, so the sample spans the
// whole observation window. Tracklets shorter than n cycle through
// their detections instead.
inline Tracklet sample_tracklet(const Tracklet& t, int n, std::uint64_t seed) {
  if (n < 1) throw Error(ErrorCode::ConfigError, "sample_tracklet: n must be positive");
  if (t.boxes.empty()) throw Error(ErrorCode::ConfigError, "sample_tracklet: empty tracklet");

  const std::size_t m = t.boxes.size();
  std::vector<std::size_t> picks(static_cast<std::size_t>(n));
  if (m >= static_cast<std::size_t>(n)) {
    Rng rng(seed);
    for (std::size_t k = 0; k < picks.size(); ++k) {
      const std::size_t lo = k * m / static_cast<std::size_t>(n);
      const std::size_t hi = (k + 1) * m / static_cast<std::size_t>(n);
      picks[k] = lo + rng.index(hi - lo);
    }
  } else {
    for (std::size_t k = 0; k < picks.size(); ++k) picks[k] = k % m;
  }

  Tracklet out;
  out.camera_id = t.camera_id;
  out.person_id = t.person_id;
  out.boxes.reserve(picks.size());
  if (t.has_embeddings()) out.embeddings.reserve(picks.size());
  for (const std::size_t idx : picks) {
    out.boxes.push_back(t.boxes[idx]);
    if (t.has_embeddings()) out.embeddings.push_back(t.embeddings[idx]);
  }
  return out;
}

// Mean of the per-detection embeddings, L2-normalized.
inline Eigen::VectorXd pool_features(const Tracklet& t) {
  if (t.boxes.empty() || !t.has_embeddings())
    throw Error(ErrorCode::MissingFeature,
                "pool_features: tracklet has no per-detection embeddings");
  Eigen::VectorXd mean = t.embeddings.front();
  for (std::size_t i = 1; i < t.embeddings.size(); ++i) {
    if (t.embeddings[i].size() != mean.size())
      throw Error(ErrorCode::DimensionMismatch, "pool_features: mixed embedding dimensions");
    mean += t.embeddings[i];
  }
  mean /= static_cast<double>(t.embeddings.size());
  const double norm = mean.norm();
  if (norm <= 0.0)
    throw Error(ErrorCode::DegenerateConfiguration, "pool_features: pooled feature has zero norm");
  return mean / norm;
}

inline double feature_distance(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size())
    throw Error(ErrorCode::DimensionMismatch, "feature_distance: dimension mismatch");
  return (a - b).norm();
}

namespace detail {

// Kuhn-Munkres on a rows <= cols matrix; returns the column assigned
// to each row. Classic potentials-and-augmenting-paths form, O(n^2 m).
inline std::vector<int> km_solve(const Eigen::MatrixXd& cost) {
  const int n = static_cast<int>(cost.rows());
  const int m = static_cast<int>(cost.cols());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = -1;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= m; ++j)
    if (p[j] != 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

// Minimum total cost of matching min(rows, cols) pairs.
inline double km_value(const Eigen::MatrixXd& cost) {
  const bool transpose = cost.rows() > cost.cols();
  const Eigen::MatrixXd c =
      transpose ? Eigen::MatrixXd(cost.transpose()) : cost;
  const std::vector<int> match = km_solve(c);
  double total = 0.0;
  for (int i = 0; i < static_cast<int>(match.size()); ++i) total += c(i, match[i]);
  return total;
}

}  // namespace detail

// Optimal one-to-one assignment on a rectangular cost matrix. Among
// all minimum-cost assignments the lexicographically smallest match
// list is returned (matches sorted by row, compared pairwise), found
// by fixing one match at a time and re-solving the remainder. Matches
// above max_cost are demoted to unmatched after the solve.
inline Assignment hungarian_assign(const Eigen::MatrixXd& cost,
                                   std::optional<double> max_cost = std::nullopt) {
  const int n_rows = static_cast<int>(cost.rows());
  const int n_cols = static_cast<int>(cost.cols());
  if (!cost.allFinite())
    throw Error(ErrorCode::ConfigError, "hungarian_assign: non-finite cost entry");

  Assignment out;
  out.total_cost = 0.0;
  const int n_match = std::min(n_rows, n_cols);
  if (n_match == 0) {
    for (int r = 0; r < n_rows; ++r) out.unmatched_a.push_back(r);
    for (int c = 0; c < n_cols; ++c) out.unmatched_b.push_back(c);
    return out;
  }

  const double optimum = detail::km_value(cost);
  const double tol = 1e-9 * std::max(1.0, std::abs(optimum));

  // Greedy lexicographic refinement: for each position in the sorted
  // match list take the smallest (row, col) whose forced choice still
  // completes to the optimal total.
  std::vector<std::pair<int, int>> matches;
  std::vector<char> col_used(n_cols, 0);
  double fixed_cost = 0.0;
  int next_row = 0;
  for (int position = 0; position < n_match; ++position) {
    const int remaining = n_match - position;
    bool placed = false;
    for (int r = next_row; r <= n_rows - remaining && !placed; ++r) {
      for (int c = 0; c < n_cols && !placed; ++c) {
        if (col_used[c]) continue;
        // Remaining subproblem: rows after r, free columns.
        const int sub_rows = n_rows - r - 1;
        int sub_cols = 0;
        for (int cc = 0; cc < n_cols; ++cc)
          if (!col_used[cc] && cc != c) ++sub_cols;
        if (sub_rows < remaining - 1) continue;
        double rest = 0.0;
        if (remaining > 1) {
          Eigen::MatrixXd sub(sub_rows, sub_cols);
          for (int rr = 0; rr < sub_rows; ++rr) {
            int k = 0;
            for (int cc = 0; cc < n_cols; ++cc)
              if (!col_used[cc] && cc != c) sub(rr, k++) = cost(r + 1 + rr, cc);
          }
          rest = detail::km_value(sub);
        }
        if (fixed_cost + cost(r, c) + rest <= optimum + tol) {
          matches.emplace_back(r, c);
          col_used[c] = 1;
          fixed_cost += cost(r, c);
          next_row = r + 1;
          placed = true;
        }
      }
    }
    if (!placed)
      throw Error(ErrorCode::DegenerateConfiguration,
                  "hungarian_assign: failed to reconstruct optimal assignment");
  }

  std::vector<char> row_used(n_rows, 0);
  for (const auto& [r, c] : matches) {
    if (max_cost && cost(r, c) > *max_cost) continue;
    out.matches.emplace_back(r, c);
    out.total_cost += cost(r, c);
    row_used[r] = 1;
  }
  std::vector<char> col_kept(n_cols, 0);
  for (const auto& [r, c] : out.matches) col_kept[c] = 1;
  for (int r = 0; r < n_rows; ++r)
    if (!row_used[r]) out.unmatched_a.push_back(r);
  for (int c = 0; c < n_cols; ++c)
    if (!col_kept[c]) out.unmatched_b.push_back(c);
  return out;
}

namespace detail {

// Sampling seed tied to the tracklet identity, not the side of the
// cost matrix, so swapping the camera arguments transposes the result.
inline std::uint64_t tracklet_salt(const Tracklet& t) {
  const std::uint64_t cam = static_cast<std::uint64_t>(static_cast<std::int64_t>(t.camera_id));
  const std::uint64_t person = static_cast<std::uint64_t>(static_cast<std::int64_t>(t.person_id));
  return (cam << 32) ^ (person & 0xffffffffULL);
}

inline Eigen::VectorXd tracklet_feature(const Tracklet& t, int n_sample, std::uint64_t seed) {
  return pool_features(sample_tracklet(t, n_sample, derive_seed(seed, tracklet_salt(t))));
}

}  // namespace detail

// Cross-camera person association: pooled appearance features from
// restricted random samples, Euclidean cost, Hungarian assignment.
inline Assignment match_across_cameras(const std::vector<Tracklet>& tracklets_a,
                                       const std::vector<Tracklet>& tracklets_b,
                                       std::optional<double> max_cost = std::nullopt,
                                       int n_sample = 8, std::uint64_t seed = 0) {
  Assignment out;
  out.total_cost = 0.0;
  if (tracklets_a.empty() || tracklets_b.empty()) {
    for (int r = 0; r < static_cast<int>(tracklets_a.size()); ++r) out.unmatched_a.push_back(r);
    for (int c = 0; c < static_cast<int>(tracklets_b.size()); ++c) out.unmatched_b.push_back(c);
    return out;
  }

  std::vector<Eigen::VectorXd> feat_a, feat_b;
  feat_a.reserve(tracklets_a.size());
  feat_b.reserve(tracklets_b.size());
  for (const auto& t : tracklets_a) feat_a.push_back(detail::tracklet_feature(t, n_sample, seed));
  for (const auto& t : tracklets_b) feat_b.push_back(detail::tracklet_feature(t, n_sample, seed));

  Eigen::MatrixXd cost(tracklets_a.size(), tracklets_b.size());
  for (std::size_t i = 0; i < feat_a.size(); ++i)
    for (std::size_t j = 0; j < feat_b.size(); ++j)
      cost(static_cast<int>(i), static_cast<int>(j)) = feature_distance(feat_a[i], feat_b[j]);

  return hungarian_assign(cost, max_cost);
}

}  // namespace crowdcalib
