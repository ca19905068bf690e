#pragma once

/**
 * @file retrieval.hpp
 * @brief Index construction, late-fusion scoring over frame and clip tokens,
 *        ranking, and recall metrics.
 */

#include <map>
#include <string>
#include <vector>

#include "prvr/dataset.hpp"
#include "prvr/encoders.hpp"
#include "prvr/token_merging.hpp"

namespace prvr {

struct MergeConfig {
    int rate = 75;         // percent, shared by both merging stages
    int target_clips = 32; // clip count produced by order-preserving merging
    int c_min = 5;
    double tau = 0.7;
    DepthMode mode = DepthMode::literal;
    // When set, the index's clip branch stores the adaptively merged clips
    // instead of the full clip set (used by the tau sweep).
    bool adaptive_index = false;
};

struct IndexEntry {
    std::string video_id;
    Tensor frames_unit;           // [L_f x d], rows unit-norm
    Tensor clips_unit;            // [L_c x d], rows unit-norm
    std::vector<int> clip_sizes;
};

struct RetrievalIndex {
    std::vector<IndexEntry> entries;
    double w_frame = 0.6;
    double w_clip = 0.4;

    void validate() const;
};

RetrievalIndex build_index(const std::vector<VideoRecord>& videos, const EncoderParams& params,
                           const MergeConfig& merge, double w_frame, double w_clip);

void save_index(const RetrievalIndex& index, const std::string& path);
RetrievalIndex load_index(const std::string& path);

/// w_f * max_i cos(query, frame_i) + w_c * max_j cos(query, clip_j).
/// Inputs are unit-normalized.
double score(const std::vector<double>& query_unit, const IndexEntry& entry, double w_frame,
             double w_clip);

struct Ranking {
    std::string query_id;
    std::vector<std::string> video_ids;  // descending score, ties by id
    std::vector<double> scores;

    /// 1-based rank of a video; 0 when absent.
    int rank_of(const std::string& video_id) const;
};

/// Ranks the index for one pooled query embedding (normalized internally).
/// `limit` restricts the search to the first `limit` entries (0 = all).
Ranking rank(const std::string& query_id, const Tensor& query, const RetrievalIndex& index,
             size_t limit = 0);

struct RecallReport {
    std::vector<int> qs;
    std::vector<double> r_at;   // percentages aligned with qs
    double sum_r = 0.0;
    std::vector<int> saturated; // Q values larger than the index (R@Q = 100 by definition)
};

/// R@Q = 100 * |{queries whose ground-truth video ranks <= Q}| / |queries|.
RecallReport recall_at(const std::vector<Ranking>& rankings,
                       const std::map<std::string, std::string>& gt_video,
                       const std::vector<int>& qs);

}  // namespace prvr
