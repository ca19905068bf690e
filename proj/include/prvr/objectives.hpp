#pragma once

/**
 * @file objectives.hpp
 * @brief Training losses: the dual-branch retrieval loss, relational text
 *        distillation (pairwise distances + triplet angles under Huber), the
 *        frame/clip alignment NCE, and their weighted total.
 */

#include <string>
#include <vector>

#include "prvr/rng.hpp"
#include "prvr/tensor.hpp"
#include "prvr/token_merging.hpp"

namespace prvr {

struct LossWeights {
    double lambda_e = 15.0;
    double lambda_a = 30.0;
    double lambda_cbva = 0.1;
    double nce_temperature = 0.07;
    double triplet_margin = 0.2;
    double huber_delta = 1.0;
    // The angle loss enumerates B^3 index triples; above this budget the
    // triples are uniformly subsampled (seeded by the caller's rng).
    size_t angle_triple_budget = 8000;

    void validate() const;
};

/// One training batch after the encoders.
struct EncodedBatch {
    std::vector<Tensor> t_seq;                 // per query [L_q x d]
    Tensor t_pooled;                           // [B_q x d]
    std::vector<Tensor> v_frame;               // per video [L_f x d]
    std::vector<Tensor> v_clip;                // per video [L_c x d]
    std::vector<std::vector<int>> clip_sizes;  // per video
    std::vector<int> pairing;                  // query -> video index within the batch
};

/// ||x - y|| / mu. A zero mu (all batch embeddings identical) yields the
/// defined degenerate value 0 rather than NaN; callers surface the warning.
Tensor pair_dist_e(const Tensor& x, const Tensor& y, const Tensor& mu);

/// <(x-y)/||x-y||, (z-y)/||z-y||> in [-1, 1]; coincident points are an error
/// (loss-level code skips those triples instead of calling in).
Tensor triplet_angle_a(const Tensor& x, const Tensor& y, const Tensor& z);

struct TcplResult {
    Tensor loss_e;  // mean Huber gap between teacher and student pair distances
    Tensor loss_a;  // mean Huber gap between teacher and student triplet angles
    size_t triples_enumerated = 0;
    size_t triples_skipped = 0;
    std::vector<std::string> warnings;
};

/// Distills the teacher's relational structure into the pooled student
/// embeddings. Distances are normalized by each space's own mean pair
/// distance; degenerate triples (repeated points) are skipped while the
/// normalizer keeps the full triple count.
TcplResult tcpl_loss(const Tensor& teacher, const Tensor& student, const LossWeights& weights,
                     Rng& rng);

struct BaseLossTerms {
    Tensor clip_nce, clip_trip, frame_nce, frame_trip;
    std::vector<std::string> warnings;

    Tensor total() const;
};

/// Video score = max-over-tokens cosine per branch. InfoNCE is symmetric
/// (query->video and video->query averaged) with same-video positives summed
/// in the numerator; the triplet term averages the query-anchor and
/// video-anchor hinges against hardest in-batch negatives.
BaseLossTerms base_loss(const EncodedBatch& batch, const LossWeights& weights);

/// Frame-to-clip and clip-to-frame NCE for one video (both terms >= 0);
/// exactly 0 when a single merged clip remains.
Tensor cbva_loss(const Tensor& v_frame, const AdaptiveClipResult& clips);

struct LossBreakdown {
    double clip_nce = 0, clip_trip = 0, frame_nce = 0, frame_trip = 0;
    double base = 0;
    double tcpl_e = 0, tcpl_a = 0;
    double cbva = 0;
    double total = 0;
    Tensor total_node;
    std::vector<std::string> warnings;
};

/// total = base + lambda_e * L_E + lambda_a * L_A + lambda_cbva * L_CBVA.
LossBreakdown total_loss(const EncodedBatch& batch, const Tensor& teacher_eos,
                         const std::vector<AdaptiveClipResult>& adaptive,
                         const LossWeights& weights, Rng& rng);

}  // namespace prvr
