#include <doctest.h>

#include <cmath>

#include "prvr/encoders.hpp"
#include "prvr/rng.hpp"

using namespace prvr;

namespace {

EncoderConfig small_cfg() {
    EncoderConfig cfg;
    cfg.d_q = 8;
    cfg.d_v = 10;
    cfg.d = 16;
    cfg.blocks = 1;
    cfg.mlp_ratio = 2;
    cfg.max_text_len = 8;
    cfg.max_frames = 64;
    cfg.max_clips = 8;
    return cfg;
}

Tensor randn_mat(Rng& rng, size_t rows, size_t cols) {
    std::vector<double> d(rows * cols);
    for (auto& v : d) v = rng.next_gaussian();
    return Tensor::matrix(rows, cols, std::move(d));
}

}  // namespace

TEST_CASE("attention pool: singleton, uniform, and saturated regimes") {
    Tensor row = Tensor::matrix(1, 3, {1, 2, 3});
    Tensor q = Tensor::vec({0.3, -1, 2});
    Tensor pooled = attention_pool(row, q);
    CHECK(pooled.data() == std::vector<double>{1, 2, 3});

    // Query orthogonal to both rows: uniform weights, arithmetic mean.
    Tensor two = Tensor::matrix(2, 3, {1, 0, 0, 0, 1, 0});
    Tensor ortho = Tensor::vec({0, 0, 5});
    Tensor mean_pool = attention_pool(two, ortho);
    CHECK(mean_pool.data()[0] == doctest::Approx(0.5));
    CHECK(mean_pool.data()[1] == doctest::Approx(0.5));
    CHECK(mean_pool.data()[2] == doctest::Approx(0.0));

    // Query aligned with row 0 and scaled x100: softmax saturates onto row 0.
    Tensor big_q = Tensor::vec({100, 0, 0});
    Tensor sat = attention_pool(two, big_q);
    CHECK(std::abs(sat.data()[0] - 1.0) < 1e-3);
    CHECK(std::abs(sat.data()[1]) < 1e-3);
}

TEST_CASE("attention pool output stays in the convex hull of rows") {
    Rng rng(3);
    Tensor seq = randn_mat(rng, 5, 4);
    Tensor q = Tensor::vec({1.0, -0.5, 0.25, 2.0});
    Tensor pooled = attention_pool(seq, q);
    // Weights are a probability vector, so each coordinate lies within the
    // min/max of that column.
    for (size_t j = 0; j < 4; ++j) {
        double lo = 1e300, hi = -1e300;
        for (size_t i = 0; i < 5; ++i) {
            lo = std::min(lo, seq.at(i, j));
            hi = std::max(hi, seq.at(i, j));
        }
        CHECK(pooled.data()[j] >= lo - 1e-12);
        CHECK(pooled.data()[j] <= hi + 1e-12);
    }
}

TEST_CASE("encode_text shape contract and pooled identity on repeated rows") {
    Rng rng(7);
    EncoderParams params = EncoderParams::init(small_cfg(), rng);

    Tensor words = randn_mat(rng, 4, 8);
    EncodedText enc = encode_text(words, params);
    CHECK(enc.seq.shape() == std::vector<size_t>{4, 16});
    CHECK(enc.pooled.shape() == std::vector<size_t>{16});

    // Identical word rows with identical positions: pooling over equal tokens
    // returns that token. Positions differ per row, so collapse them first.
    EncoderParams flat = params;
    flat.text.pos = Tensor::zeros({8, 16});
    std::vector<double> same;
    Tensor w = randn_mat(rng, 1, 8);
    for (int i = 0; i < 4; ++i) same.insert(same.end(), w.data().begin(), w.data().end());
    EncodedText enc2 = encode_text(Tensor::matrix(4, 8, same), flat);
    for (size_t j = 0; j < 16; ++j) {
        CHECK(enc2.pooled.data()[j] == doctest::Approx(enc2.seq.at(0, j)));
    }

    CHECK_THROWS_AS(encode_text(randn_mat(rng, 1, 8), params), std::invalid_argument);
    CHECK_THROWS_AS(encode_text(randn_mat(rng, 4, 9), params), std::invalid_argument);
}

TEST_CASE("encoders are deterministic") {
    Rng rng(11);
    EncoderParams params = EncoderParams::init(small_cfg(), rng);
    Tensor frames = randn_mat(rng, 20, 10);
    Tensor a = encode_frames(frames, params);
    Tensor b = encode_frames(frames, params);
    CHECK(a.data() == b.data());
    CHECK(a.shape() == std::vector<size_t>{20, 16});
}

TEST_CASE("batch of queries is equivariant to ordering") {
    Rng rng(13);
    EncoderParams params = EncoderParams::init(small_cfg(), rng);
    Tensor q1 = randn_mat(rng, 4, 8);
    Tensor q2 = randn_mat(rng, 4, 8);
    Tensor p1 = encode_text(q1, params).pooled;
    Tensor p2 = encode_text(q2, params).pooled;
    // Each query is encoded independently, so swapping them swaps outputs.
    CHECK(encode_text(q2, params).pooled.data() == p2.data());
    CHECK(encode_text(q1, params).pooled.data() == p1.data());
}

TEST_CASE("proportional attention with unit sizes is bit-identical to plain attention") {
    Rng rng(17);
    EncoderConfig cfg = small_cfg();
    EncoderParams params = EncoderParams::init(cfg, rng);
    // Make the clip branch equal to the frame branch so the only difference
    // can come from the size bias.
    params.clip = params.frame;

    Tensor tokens = randn_mat(rng, 6, 10);
    SizedTokenSeq clips;
    clips.tokens = tokens;
    clips.sizes.assign(6, 1);
    clips.provenance.resize(6);
    for (int i = 0; i < 6; ++i) clips.provenance[static_cast<size_t>(i)] = {i};

    Tensor via_clips = encode_clips(clips, params);
    Tensor via_frames = encode_frames(tokens, params);
    REQUIRE(via_clips.shape() == via_frames.shape());
    for (size_t i = 0; i < via_clips.numel(); ++i) {
        CHECK(via_clips.data()[i] == via_frames.data()[i]);  // bit-identical
    }

    clips.sizes[0] = 0;
    CHECK_THROWS_AS(encode_clips(clips, params), std::invalid_argument);
}

TEST_CASE("larger token size strictly raises its attention weight") {
    // Directly compare the two softmaxes on a fixed score row: adding
    // log(size) to key 0 must increase its weight.
    Tensor scores = Tensor::matrix(1, 3, {0.2, 0.1, -0.3});
    Tensor plain = softmax_rows(scores);
    Tensor bias = Tensor::vec({std::log(4.0), 0.0, 0.0});
    Tensor prop = softmax_rows(scores, &bias);
    CHECK(prop.at(0, 0) > plain.at(0, 0));
    // And the proportional weight matches the size-multiplied odds exactly.
    double expected =
        4.0 * std::exp(0.2) / (4.0 * std::exp(0.2) + std::exp(0.1) + std::exp(-0.3));
    CHECK(prop.at(0, 0) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("clip encoder shape contract") {
    Rng rng(23);
    EncoderConfig cfg = small_cfg();
    cfg.max_clips = 32;
    EncoderParams params = EncoderParams::init(cfg, rng);
    SizedTokenSeq clips;
    clips.tokens = randn_mat(rng, 32, 10);
    clips.sizes.assign(32, 2);
    clips.provenance.resize(32);
    for (int i = 0; i < 32; ++i) clips.provenance[static_cast<size_t>(i)] = {2 * i, 2 * i + 1};
    Tensor out = encode_clips(clips, params);
    CHECK(out.shape() == std::vector<size_t>{32, 16});
}

TEST_CASE("sequences beyond the position table are rejected") {
    Rng rng(29);
    EncoderConfig cfg = small_cfg();
    cfg.max_frames = 16;
    EncoderParams params = EncoderParams::init(cfg, rng);
    CHECK_THROWS_WITH_AS(encode_frames(randn_mat(rng, 17, 10), params),
                         doctest::Contains("exceeds"), std::invalid_argument);
}
