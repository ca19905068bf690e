#pragma once

/**
 * @file token_merging.hpp
 * @brief Clip-count schedule, order-preserving token merging, and the
 *        similarity-adaptive bipartite merging used for clip alignment.
 */

#include <string>
#include <vector>

#include "prvr/tensor.hpp"

namespace prvr {

/// Tokens plus the bookkeeping that merging maintains: per-token sizes
/// (number of original frames absorbed) and provenance (the original frame
/// indices each token covers). Order-preserving merging keeps every
/// provenance set a contiguous interval; bipartite merging may union
/// arbitrary sets.
struct SizedTokenSeq {
    Tensor tokens;                              // [L x d]
    std::vector<int> sizes;                     // [L], all >= 1
    std::vector<std::vector<int>> provenance;   // [L], sorted original indices

    size_t length() const { return sizes.size(); }
    int total_size() const;
    /// Throws unless provenance sets are disjoint, sorted, and cover
    /// [0, total) exactly, with sizes matching set cardinalities.
    void check_partition(int total) const;
};

struct ClipSchedule {
    std::vector<int> levels;  // strictly decreasing, levels[0] = initial count
    int merge_rate = 75;      // percent
    int c_min = 5;

    int depth() const { return static_cast<int>(levels.size()); }
};

/// Precomputes the decreasing list of clip counts reached by iterated
/// merging at `rate_percent`, stopping at `c_min` (or when the recurrence
/// stalls). levels[i+1] = max(2*floor((L - (L/2)*(N/100) + 1)/2), c_min).
ClipSchedule clip_schedule(int initial, int rate_percent, int c_min);

/// Order-preserving token merging: repeatedly scores disjoint adjacent pairs
/// by cosine similarity and merges the highest-scoring ones (size-weighted
/// mean) until `target` tokens remain. Per-iteration merge counts follow
/// clip_schedule(L, rate, target), so output lengths match the schedule
/// exactly. Expects a detached (constant) input.
SizedTokenSeq op_tome(const Tensor& frames, int rate_percent, int target);

/// Fraction of unordered clip pairs whose cosine similarity exceeds tau.
double high_sim_ratio(const Tensor& clips, double tau);

enum class DepthMode { literal, monotone };
DepthMode depth_mode_from_string(const std::string& s);

/// Number of merge rounds (1 = keep all clips) chosen from the
/// high-similarity ratio. `literal` keeps the published two-branch rule
/// (range {1, 2}); `monotone` maps omega onto [1, K] nondecreasingly.
int select_merge_depth(double omega, int k_levels, DepthMode mode);

/// One round of bipartite merging: alternating tokens form sets A (odd
/// 1-based positions) and B (even); each A token proposes its most similar B
/// token and the `merge_count` strongest proposals are folded into their
/// targets by size-weighted mean. Output keeps original-position order.
/// Differentiable in the token values (assignments are treated as constant).
SizedTokenSeq bipartite_merge(const SizedTokenSeq& seq, int merge_count);

struct AdaptiveClipResult {
    SizedTokenSeq clips;             // merged encoded clips, length levels[depth-1]
    double omega = 0.0;
    int depth = 1;                   // k*, number of schedule levels used
    std::vector<int> frame_to_clip;  // delta: original frame -> merged clip index
    std::vector<std::vector<int>> frame_sets;  // F_i = delta^-1(i)
};

/// Stage pipeline for adaptive alignment: omega from the frozen (raw) clips,
/// merge depth from omega, then depth-1 rounds of bipartite merging over the
/// encoded clips with per-round counts taken from the schedule.
AdaptiveClipResult adaptive_clips(const Tensor& encoded_clips, const SizedTokenSeq& raw_clips,
                                  const ClipSchedule& schedule, double tau, DepthMode mode);

}  // namespace prvr
