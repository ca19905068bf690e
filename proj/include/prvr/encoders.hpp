#pragma once

/**
 * @file encoders.hpp
 * @brief Trainable heads mapping raw features into the joint space: a text
 *        head (projection + pre-norm transformer blocks + attention pooling)
 *        and dual-branch video heads. The clip branch applies proportional
 *        attention (additive log-size bias on the keys) so merged tokens
 *        weigh in according to the frames they absorbed.
 */

#include <functional>
#include <string>
#include <vector>

#include "prvr/rng.hpp"
#include "prvr/tensor.hpp"
#include "prvr/token_merging.hpp"

namespace prvr {

struct EncoderConfig {
    int d_q = 32;          // raw text feature dim
    int d_v = 32;          // raw video feature dim
    int d = 64;            // joint space dim
    int blocks = 1;        // pre-norm transformer blocks per branch, single head
    int mlp_ratio = 2;
    int max_text_len = 32;
    int max_frames = 256;
    int max_clips = 32;
};

struct BlockParams {
    Tensor ln1_gain, ln1_bias;
    Tensor wq, wk, wv, wo;  // [d x d]
    Tensor ln2_gain, ln2_bias;
    Tensor w1;  // [d x mlp]
    Tensor w2;  // [mlp x d]
};

struct BranchParams {
    Tensor proj;  // [d_in x d]
    Tensor pos;   // [max_len x d] learned position embeddings
    std::vector<BlockParams> blocks;
};

struct EncoderParams {
    EncoderConfig cfg;
    BranchParams text, frame, clip;
    Tensor pool_query;  // [d]

    static EncoderParams init(const EncoderConfig& cfg, Rng& rng);

    /// Visits every parameter tensor with a stable name (checkpoint order).
    void for_each(const std::function<void(const std::string&, Tensor&)>& fn);
    void for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const;

    /// Binds every parameter as a leaf of `g`; the returned copy is what the
    /// training step differentiates through.
    EncoderParams bind(Graph& g) const;

    size_t param_count() const;
};

/// softmax(seq . query / sqrt(d))-weighted sum of the rows of `seq`.
Tensor attention_pool(const Tensor& seq, const Tensor& query);

struct EncodedText {
    Tensor seq;     // [L_q x d]
    Tensor pooled;  // [d]
};

EncodedText encode_text(const Tensor& words, const EncoderParams& params);
Tensor encode_frames(const Tensor& frames, const EncoderParams& params);
/// As encode_frames but every attention score matrix gets the additive
/// log(size_j) key bias; with unit sizes this is bit-identical to the frame
/// path's attention.
Tensor encode_clips(const SizedTokenSeq& clips, const EncoderParams& params);

}  // namespace prvr
