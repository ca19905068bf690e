#pragma once

/**
 * @file analysis.hpp
 * @brief Embedding-collapse diagnostics, rank-structure comparison against
 *        the frozen teacher, ranker outcome matrices, and the query-latency
 *        benchmark harness.
 */

#include <map>
#include <string>
#include <vector>

#include "prvr/retrieval.hpp"
#include "prvr/tensor.hpp"

namespace prvr {

struct CollapseReport {
    double intra_sim = 0.0;   // mean cosine over ordered same-video pairs
    double total_sim = 0.0;   // mean cosine over all ordered pairs
    double diff_norm = 0.0;   // (intra - total) / (intra + total)
    bool degenerate = false;  // intra + total == 0, diff_norm reported as 0
};

/// Collapse indicator over instance embeddings grouped by owning video.
/// Requires at least one video owning two or more instances.
CollapseReport collapse_metrics(const Tensor& embeddings,
                                const std::vector<std::string>& owner_video);

struct SpearmanReport {
    double rho_times_100 = 0.0;  // per-anchor Spearman, averaged, scaled by 100
    size_t anchors_used = 0;
    size_t anchors_skipped = 0;  // constant similarity rows (undefined rho)
};

/// For every anchor, ranks the remaining items by cosine in the student and
/// teacher spaces and correlates the two rankings (average ranks on ties).
SpearmanReport spearman_vs_teacher(const Tensor& student, const Tensor& teacher);

struct ConfusionCounts {
    size_t both = 0;
    size_t a_only = 0;
    size_t b_only = 0;
    size_t neither = 0;

    size_t total() const { return both + a_only + b_only + neither; }
};

/// 2x2 outcome matrix of two rankers: success = ground-truth rank <= Q.
/// Both maps must cover the same query set.
ConfusionCounts ranker_confusion(const std::map<std::string, int>& ranks_a,
                                 const std::map<std::string, int>& ranks_b, int q);

struct BenchRow {
    size_t db_size = 0;
    double mean_latency_ms = 0.0;
    double peak_memory_mb = 0.0;
};

/// Times rank() over the first `size` videos for each requested size,
/// averaging `runs` passes over all queries (wall clock: steady_clock;
/// memory: peak resident set from /proc/self/status).
std::vector<BenchRow> bench(const RetrievalIndex& index, const std::vector<Tensor>& queries,
                            const std::vector<size_t>& db_sizes, int runs = 5);

}  // namespace prvr
