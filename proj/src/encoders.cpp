#include "prvr/encoders.hpp"

#include <cmath>

namespace prvr {

namespace {

Tensor randn_matrix(Rng& rng, size_t rows, size_t cols, double stddev) {
    std::vector<double> data(rows * cols);
    for (auto& v : data) v = stddev * rng.next_gaussian();
    return Tensor::matrix(rows, cols, std::move(data));
}

BlockParams init_block(const EncoderConfig& cfg, Rng& rng) {
    size_t d = static_cast<size_t>(cfg.d);
    size_t mlp = d * static_cast<size_t>(cfg.mlp_ratio);
    double attn_std = 1.0 / std::sqrt(static_cast<double>(d));
    BlockParams b;
    b.ln1_gain = Tensor::full({d}, 1.0);
    b.ln1_bias = Tensor::zeros({d});
    b.wq = randn_matrix(rng, d, d, attn_std);
    b.wk = randn_matrix(rng, d, d, attn_std);
    b.wv = randn_matrix(rng, d, d, attn_std);
    b.wo = randn_matrix(rng, d, d, attn_std);
    b.ln2_gain = Tensor::full({d}, 1.0);
    b.ln2_bias = Tensor::zeros({d});
    b.w1 = randn_matrix(rng, d, mlp, attn_std);
    b.w2 = randn_matrix(rng, mlp, d, 1.0 / std::sqrt(static_cast<double>(mlp)));
    return b;
}

BranchParams init_branch(const EncoderConfig& cfg, Rng& rng, int d_in, int max_len) {
    BranchParams br;
    br.proj = randn_matrix(rng, static_cast<size_t>(d_in), static_cast<size_t>(cfg.d),
                           1.0 / std::sqrt(static_cast<double>(d_in)));
    br.pos = randn_matrix(rng, static_cast<size_t>(max_len), static_cast<size_t>(cfg.d), 0.02);
    for (int i = 0; i < cfg.blocks; ++i) br.blocks.push_back(init_block(cfg, rng));
    return br;
}

// One pre-norm block: x += Attn(LN(x)); x += MLP(LN(x)). Single head.
// `key_bias` is the optional proportional-attention logit bias per key.
Tensor run_block(const Tensor& x, const BlockParams& b, const Tensor* key_bias) {
    size_t d = x.cols();
    double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

    Tensor h = layer_norm_rows(x, b.ln1_gain, b.ln1_bias);
    Tensor q = matmul(h, b.wq);
    Tensor k = matmul(h, b.wk);
    Tensor v = matmul(h, b.wv);
    Tensor scores = scale(matmul(q, transpose(k)), inv_sqrt_d);
    Tensor attn = softmax_rows(scores, key_bias);
    Tensor x1 = add(x, matmul(matmul(attn, v), b.wo));

    Tensor h2 = layer_norm_rows(x1, b.ln2_gain, b.ln2_bias);
    Tensor mlp = matmul(gelu(matmul(h2, b.w1)), b.w2);
    return add(x1, mlp);
}

Tensor run_branch(const Tensor& input, const BranchParams& br, const char* branch_name,
                  const Tensor* key_bias) {
    if (input.rank() != 2 || input.cols() != br.proj.rows()) {
        throw std::invalid_argument(std::string(branch_name) + " encoder: input shape " +
                                    shape_str(input.shape()) + " does not match projection " +
                                    shape_str(br.proj.shape()));
    }
    size_t L = input.rows();
    if (L > br.pos.rows()) {
        throw std::invalid_argument(std::string(branch_name) + " encoder: sequence length " +
                                    std::to_string(L) + " exceeds the configured maximum " +
                                    std::to_string(br.pos.rows()));
    }
    Tensor x = add(matmul(input, br.proj), slice_rows(br.pos, 0, L));
    for (const auto& b : br.blocks) x = run_block(x, b, key_bias);
    return x;
}

}  // namespace

EncoderParams EncoderParams::init(const EncoderConfig& cfg, Rng& rng) {
    EncoderParams p;
    p.cfg = cfg;
    p.text = init_branch(cfg, rng, cfg.d_q, cfg.max_text_len);
    p.frame = init_branch(cfg, rng, cfg.d_v, cfg.max_frames);
    p.clip = init_branch(cfg, rng, cfg.d_v, cfg.max_clips);
    std::vector<double> pq(static_cast<size_t>(cfg.d));
    for (auto& v : pq) v = 0.2 * rng.next_gaussian();
    p.pool_query = Tensor::vec(std::move(pq));
    return p;
}

void EncoderParams::for_each(const std::function<void(const std::string&, Tensor&)>& fn) {
    auto branch = [&](const std::string& name, BranchParams& br) {
        fn(name + ".proj", br.proj);
        fn(name + ".pos", br.pos);
        for (size_t i = 0; i < br.blocks.size(); ++i) {
            auto& b = br.blocks[i];
            std::string p = name + ".block" + std::to_string(i);
            fn(p + ".ln1_gain", b.ln1_gain);
            fn(p + ".ln1_bias", b.ln1_bias);
            fn(p + ".wq", b.wq);
            fn(p + ".wk", b.wk);
            fn(p + ".wv", b.wv);
            fn(p + ".wo", b.wo);
            fn(p + ".ln2_gain", b.ln2_gain);
            fn(p + ".ln2_bias", b.ln2_bias);
            fn(p + ".w1", b.w1);
            fn(p + ".w2", b.w2);
        }
    };
    branch("text", text);
    branch("frame", frame);
    branch("clip", clip);
    fn("pool_query", pool_query);
}

void EncoderParams::for_each(
    const std::function<void(const std::string&, const Tensor&)>& fn) const {
    const_cast<EncoderParams*>(this)->for_each(
        [&](const std::string& name, Tensor& t) { fn(name, t); });
}

EncoderParams EncoderParams::bind(Graph& g) const {
    EncoderParams bound = *this;
    bound.for_each([&](const std::string&, Tensor& t) { t = g.leaf(t); });
    return bound;
}

size_t EncoderParams::param_count() const {
    size_t n = 0;
    for_each([&](const std::string&, const Tensor& t) { n += t.numel(); });
    return n;
}

Tensor attention_pool(const Tensor& seq, const Tensor& query) {
    if (seq.rank() != 2 || query.rank() != 1 || seq.cols() != query.numel()) {
        throw std::invalid_argument("attention_pool: shapes " + shape_str(seq.shape()) + " and " +
                                    shape_str(query.shape()) + " are incompatible");
    }
    size_t d = seq.cols();
    Tensor q_row = reshape(query, {1, d});
    Tensor scores = scale(matmul(q_row, transpose(seq)), 1.0 / std::sqrt(static_cast<double>(d)));
    Tensor weights = softmax_rows(scores);  // [1 x L]
    return reshape(matmul(weights, seq), {d});
}

EncodedText encode_text(const Tensor& words, const EncoderParams& params) {
    if (words.rank() != 2 || words.rows() < 2) {
        throw std::invalid_argument("encode_text: need at least 2 word rows, got shape " +
                                    shape_str(words.shape()));
    }
    EncodedText out;
    out.seq = run_branch(words, params.text, "text", nullptr);
    out.pooled = attention_pool(out.seq, params.pool_query);
    return out;
}

Tensor encode_frames(const Tensor& frames, const EncoderParams& params) {
    return run_branch(frames, params.frame, "frame", nullptr);
}

Tensor encode_clips(const SizedTokenSeq& clips, const EncoderParams& params) {
    std::vector<double> bias(clips.length());
    for (size_t i = 0; i < clips.length(); ++i) {
        if (clips.sizes[i] < 1) {
            throw std::invalid_argument("encode_clips: clip " + std::to_string(i) +
                                        " has size " + std::to_string(clips.sizes[i]));
        }
        bias[i] = std::log(static_cast<double>(clips.sizes[i]));
    }
    Tensor key_bias = Tensor::vec(std::move(bias));
    return run_branch(clips.tokens, params.clip, "clip", &key_bias);
}

}  // namespace prvr
