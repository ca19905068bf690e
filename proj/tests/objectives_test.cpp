#include <doctest.h>

#include <cmath>

#include "prvr/encoders.hpp"
#include "prvr/grad_check.hpp"
#include "prvr/objectives.hpp"
#include "prvr/rng.hpp"

using namespace prvr;

namespace {

Tensor randn_mat(Rng& rng, size_t rows, size_t cols, double scale = 1.0) {
    std::vector<double> d(rows * cols);
    for (auto& v : d) v = scale * rng.next_gaussian();
    return Tensor::matrix(rows, cols, std::move(d));
}

// Random orthogonal matrix via Gram-Schmidt on Gaussian columns.
std::vector<std::vector<double>> random_rotation(Rng& rng, size_t d) {
    std::vector<std::vector<double>> cols;
    while (cols.size() < d) {
        std::vector<double> v(d);
        for (auto& x : v) x = rng.next_gaussian();
        for (const auto& b : cols) {
            double proj = 0.0;
            for (size_t i = 0; i < d; ++i) proj += v[i] * b[i];
            for (size_t i = 0; i < d; ++i) v[i] -= proj * b[i];
        }
        double nrm = 0.0;
        for (double x : v) nrm += x * x;
        nrm = std::sqrt(nrm);
        if (nrm < 1e-8) continue;
        for (auto& x : v) x /= nrm;
        cols.push_back(v);
    }
    return cols;
}

Tensor similarity_transform(const Tensor& m, Rng& rng, double scale_c) {
    size_t n = m.rows(), d = m.cols();
    auto rot = random_rotation(rng, d);
    std::vector<double> shift(d);
    for (auto& v : shift) v = rng.next_gaussian();
    std::vector<double> out(n * d, 0.0);
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = 0; j < d; ++j) {
            double acc = 0.0;
            for (size_t k = 0; k < d; ++k) acc += rot[j][k] * m.at(i, k);
            out[i * d + j] = scale_c * acc + shift[j];
        }
    }
    return Tensor::matrix(n, d, std::move(out));
}

AdaptiveClipResult manual_clips(const Tensor& tokens, std::vector<int> frame_to_clip) {
    AdaptiveClipResult res;
    res.clips.tokens = tokens;
    res.clips.sizes.assign(tokens.rows(), 0);
    res.clips.provenance.resize(tokens.rows());
    res.frame_sets.resize(tokens.rows());
    for (size_t f = 0; f < frame_to_clip.size(); ++f) {
        int c = frame_to_clip[f];
        res.clips.sizes[static_cast<size_t>(c)]++;
        res.clips.provenance[static_cast<size_t>(c)].push_back(static_cast<int>(f));
        res.frame_sets[static_cast<size_t>(c)].push_back(static_cast<int>(f));
    }
    res.frame_to_clip = std::move(frame_to_clip);
    res.depth = 1;
    return res;
}

}  // namespace

TEST_CASE("pair distance: single-pair batch has mu equal to that distance") {
    Tensor x = Tensor::vec({0, 0});
    Tensor y = Tensor::vec({3, 4});
    // mu over the two ordered pairs of this two-point batch is 5.
    CHECK(pair_dist_e(x, y, Tensor::scalar(5.0)).item() == doctest::Approx(1.0));
    // Degenerate mu: defined 0, not NaN.
    CHECK(pair_dist_e(x, y, Tensor::scalar(0.0)).item() == 0.0);
}

TEST_CASE("triplet angle: orthogonal and aligned cases") {
    Tensor x = Tensor::vec({1, 0});
    Tensor y = Tensor::vec({0, 0});
    Tensor z = Tensor::vec({0, 1});
    CHECK(triplet_angle_a(x, y, z).item() == doctest::Approx(0.0));
    CHECK(triplet_angle_a(x, y, x).item() == doctest::Approx(1.0));
    CHECK_THROWS_AS(triplet_angle_a(x, x, z), std::invalid_argument);
}

TEST_CASE("tcpl is zero when the student replicates the teacher") {
    Rng rng(3);
    Tensor teacher = randn_mat(rng, 6, 5);
    LossWeights w;
    Rng trng(1);
    TcplResult res = tcpl_loss(teacher, teacher, w, trng);
    CHECK(std::abs(res.loss_e.item()) < 1e-10);
    CHECK(std::abs(res.loss_a.item()) < 1e-10);
}

TEST_CASE("tcpl distance term is invariant to uniform scaling of either space") {
    Rng rng(5);
    Tensor teacher = randn_mat(rng, 6, 5);
    Tensor student = randn_mat(rng, 6, 4);
    LossWeights w;
    Rng trng(1);
    double base = tcpl_loss(teacher, student, w, trng).loss_e.item();
    for (double c : {0.1, 3.0, 100.0}) {
        std::vector<double> scaled(teacher.data());
        for (auto& v : scaled) v *= c;
        Rng trng2(1);
        double got =
            tcpl_loss(Tensor::matrix(6, 5, scaled), student, w, trng2).loss_e.item();
        CHECK(std::abs(got - base) < 1e-6);
    }
}

TEST_CASE("tcpl angle term is invariant to similarity transforms of the teacher") {
    Rng rng(7);
    Tensor teacher = randn_mat(rng, 6, 5);
    Tensor student = randn_mat(rng, 6, 4);
    LossWeights w;
    Rng trng(1);
    double base = tcpl_loss(teacher, student, w, trng).loss_a.item();
    for (int rep = 0; rep < 20; ++rep) {
        double c = 0.2 + 5.0 * rng.next_double();
        Tensor moved = similarity_transform(teacher, rng, c);
        Rng trng2(1);
        double got = tcpl_loss(moved, student, w, trng2).loss_a.item();
        CHECK(std::abs(got - base) < 1e-6);
    }
}

TEST_CASE("tcpl handles a fully collapsed batch with a warning, not NaN") {
    Tensor teacher = Tensor::matrix(3, 2, {1, 2, 1, 2, 1, 2});
    Rng rng(9);
    Tensor student = randn_mat(rng, 3, 2);
    LossWeights w;
    Rng trng(1);
    TcplResult res = tcpl_loss(teacher, student, w, trng);
    CHECK(std::isfinite(res.loss_e.item()));
    REQUIRE(!res.warnings.empty());
    CHECK(res.warnings[0].find("mu = 0") != std::string::npos);
    CHECK_THROWS_AS(tcpl_loss(Tensor::matrix(1, 2, {1, 2}), Tensor::matrix(1, 2, {1, 2}), w,
                              trng),
                    std::invalid_argument);
}

TEST_CASE("tcpl subsampling keeps the loss finite and deterministic per seed") {
    Rng rng(11);
    Tensor teacher = randn_mat(rng, 12, 5);
    Tensor student = randn_mat(rng, 12, 4);
    LossWeights w;
    w.angle_triple_budget = 100;  // 12^3 = 1728 > 100 -> sampled
    Rng ta(77), tb(77), tc(78);
    double a = tcpl_loss(teacher, student, w, ta).loss_a.item();
    double b = tcpl_loss(teacher, student, w, tb).loss_a.item();
    double c = tcpl_loss(teacher, student, w, tc).loss_a.item();
    CHECK(a == b);
    CHECK(a != c);  // different sample, different estimate
}

// ---------------------------------------------------------------------------
// Base retrieval loss
// ---------------------------------------------------------------------------

TEST_CASE("base loss: single query and video batch is all zeros with a warning") {
    Rng rng(13);
    EncodedBatch eb;
    eb.t_pooled = randn_mat(rng, 1, 4);
    eb.v_frame = {randn_mat(rng, 3, 4)};
    eb.v_clip = {randn_mat(rng, 2, 4)};
    eb.pairing = {0};
    BaseLossTerms terms = base_loss(eb, LossWeights{});
    CHECK(terms.clip_nce.item() == 0.0);
    CHECK(terms.clip_trip.item() == 0.0);
    CHECK(terms.frame_nce.item() == 0.0);
    CHECK(terms.frame_trip.item() == 0.0);
    CHECK(!terms.warnings.empty());
}

TEST_CASE("base loss: equal scores give log 2 per NCE direction and margin triplet") {
    Rng rng(17);
    Tensor shared = randn_mat(rng, 2, 4);  // both videos carry identical tokens
    // Identical queries too, so the whole 2x2 score matrix is constant.
    Tensor q = randn_mat(rng, 1, 4);
    std::vector<double> qq(q.data());
    qq.insert(qq.end(), q.data().begin(), q.data().end());
    EncodedBatch eb;
    eb.t_pooled = Tensor::matrix(2, 4, qq);
    eb.v_frame = {shared, shared};
    eb.v_clip = {shared, shared};
    eb.pairing = {0, 1};
    LossWeights w;
    BaseLossTerms terms = base_loss(eb, w);
    CHECK(terms.clip_nce.item() == doctest::Approx(std::log(2.0)).epsilon(1e-10));
    CHECK(terms.frame_nce.item() == doctest::Approx(std::log(2.0)).epsilon(1e-10));
    CHECK(terms.clip_trip.item() == doctest::Approx(w.triplet_margin).epsilon(1e-10));
    CHECK(terms.frame_trip.item() == doctest::Approx(w.triplet_margin).epsilon(1e-10));
}

TEST_CASE("base loss: satisfied margins zero the triplet term") {
    Tensor q = Tensor::matrix(2, 3, {1, 0, 0, -1, 0, 0});
    EncodedBatch eb;
    eb.t_pooled = q;
    // video 0 tokens = +e1 (cos 1 with query 0, -1 with query 1), video 1 = -e1.
    eb.v_frame = {Tensor::matrix(1, 3, {2, 0, 0}), Tensor::matrix(1, 3, {-2, 0, 0})};
    eb.v_clip = eb.v_frame;
    eb.pairing = {0, 1};
    LossWeights w;
    w.triplet_margin = 0.2;
    BaseLossTerms terms = base_loss(eb, w);
    CHECK(terms.clip_trip.item() == 0.0);
    CHECK(terms.frame_trip.item() == 0.0);
}

TEST_CASE("base loss NCE is permutation-equivariant in batch order") {
    Rng rng(19);
    Tensor t = randn_mat(rng, 3, 4);
    std::vector<Tensor> vids = {randn_mat(rng, 2, 4), randn_mat(rng, 3, 4)};
    EncodedBatch eb;
    eb.t_pooled = t;
    eb.v_frame = vids;
    eb.v_clip = vids;
    eb.pairing = {0, 1, 0};
    double a = base_loss(eb, LossWeights{}).total().item();

    // Reverse the query order (and keep pairings aligned).
    std::vector<double> rev;
    for (int i = 2; i >= 0; --i) {
        for (size_t j = 0; j < 4; ++j) rev.push_back(t.at(static_cast<size_t>(i), j));
    }
    eb.t_pooled = Tensor::matrix(3, 4, rev);
    eb.pairing = {0, 1, 0};
    std::swap(eb.pairing[0], eb.pairing[2]);
    double b = base_loss(eb, LossWeights{}).total().item();
    CHECK(a == doctest::Approx(b).epsilon(1e-12));
}

// ---------------------------------------------------------------------------
// Cross-branch alignment
// ---------------------------------------------------------------------------

TEST_CASE("cbva: a single merged clip gives exactly zero") {
    Rng rng(23);
    Tensor frames = randn_mat(rng, 5, 4);
    AdaptiveClipResult clips = manual_clips(randn_mat(rng, 1, 4), {0, 0, 0, 0, 0});
    CHECK(cbva_loss(frames, clips).item() == 0.0);
}

TEST_CASE("cbva: two identical frames and clips, one frame per clip -> 2 log 2") {
    Tensor v = Tensor::matrix(2, 3, {0.4, -0.2, 0.9, 0.4, -0.2, 0.9});
    AdaptiveClipResult clips = manual_clips(v, {0, 1});
    CHECK(cbva_loss(v, clips).item() == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("cbva: correct assignment scores below a shuffled assignment") {
    // Frames equal their own clip token; the two clips point in opposite
    // directions, so swapping the assignment is maximally wrong.
    Tensor frames = Tensor::matrix(2, 2, {1, 0, -1, 0});
    Tensor clip_tokens = Tensor::matrix(2, 2, {1, 0, -1, 0});
    double right = cbva_loss(frames, manual_clips(clip_tokens, {0, 1})).item();
    double wrong = cbva_loss(frames, manual_clips(clip_tokens, {1, 0})).item();
    CHECK(right < wrong);
    CHECK(right >= 0.0);
}

TEST_CASE("cbva terms are nonnegative on random inputs") {
    Rng rng(29);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor frames = randn_mat(rng, 8, 4);
        std::vector<int> assign(8);
        for (auto& a : assign) a = static_cast<int>(rng.next_below(3));
        // Ensure every clip owns at least one frame.
        assign[0] = 0;
        assign[1] = 1;
        assign[2] = 2;
        CHECK(cbva_loss(frames, manual_clips(randn_mat(rng, 3, 4), assign)).item() >= 0.0);
    }
}

// ---------------------------------------------------------------------------
// Total objective and gradient checks
// ---------------------------------------------------------------------------

namespace {

// A miniature end-to-end world: 2 videos, 4 queries, tiny dims, with every
// encoder parameter packed into one flat vector so the finite-difference
// checker can drive the whole pipeline.
struct TinyWorld {
    EncoderConfig cfg;
    std::vector<Tensor> words;
    std::vector<Tensor> frames;
    std::vector<int> pairing{0, 0, 1, 1};
    Tensor teacher;
    std::vector<SizedTokenSeq> raw_clips;
    ClipSchedule schedule;
    LossWeights weights;
    double tau = -1.0;  // forces omega = 1, so the bipartite path is exercised

    std::vector<std::pair<std::string, std::vector<size_t>>> layout;
    std::vector<double> theta0;

    explicit TinyWorld(uint64_t seed) {
        cfg.d_q = 4;
        cfg.d_v = 4;
        cfg.d = 6;
        cfg.blocks = 1;
        cfg.mlp_ratio = 2;
        cfg.max_text_len = 3;
        cfg.max_frames = 8;
        cfg.max_clips = 4;
        weights.angle_triple_budget = 100;  // 4^3 = 64 fits, fully enumerated

        Rng rng(seed);
        for (int q = 0; q < 4; ++q) words.push_back(randn_mat(rng, 3, 4));
        for (int v = 0; v < 2; ++v) frames.push_back(randn_mat(rng, 8, 4));
        teacher = randn_mat(rng, 4, 4);
        for (const auto& f : frames) raw_clips.push_back(op_tome(f, 75, 4));
        schedule = clip_schedule(4, 75, 2);

        EncoderParams proto = EncoderParams::init(cfg, rng);
        proto.for_each([&](const std::string& name, Tensor& t) {
            layout.emplace_back(name, t.shape());
            theta0.insert(theta0.end(), t.data().begin(), t.data().end());
        });
    }

    EncoderParams unflatten(const Tensor& flat) const {
        Rng scratch(0);
        EncoderConfig c = cfg;
        EncoderParams p = EncoderParams::init(c, scratch);
        size_t offset = 0, idx = 0;
        p.for_each([&](const std::string& name, Tensor& t) {
            REQUIRE(layout[idx].first == name);
            size_t n = t.numel();
            t = reshape(slice_rows(flat, offset, offset + n), layout[idx].second);
            offset += n;
            ++idx;
        });
        return p;
    }

    LossBreakdown run(const EncoderParams& p) const {
        EncodedBatch eb;
        std::vector<Tensor> pooled;
        for (const auto& w : words) {
            EncodedText enc = encode_text(w, p);
            eb.t_seq.push_back(enc.seq);
            pooled.push_back(reshape(enc.pooled, {1, enc.pooled.numel()}));
        }
        eb.t_pooled = concat_rows(pooled);
        eb.pairing = pairing;
        std::vector<AdaptiveClipResult> adaptive;
        for (size_t v = 0; v < frames.size(); ++v) {
            Tensor vf = encode_frames(frames[v], p);
            Tensor vc = encode_clips(raw_clips[v], p);
            eb.v_frame.push_back(vf);
            eb.v_clip.push_back(vc);
            eb.clip_sizes.push_back(raw_clips[v].sizes);
            adaptive.push_back(
                adaptive_clips(vc, raw_clips[v], schedule, tau, DepthMode::literal));
        }
        Rng trng(4242);
        return total_loss(eb, teacher, adaptive, weights, trng);
    }

};

}  // namespace

TEST_CASE("total loss reduces to the base loss when every weight is zero") {
    TinyWorld world(101);
    LossWeights w = world.weights;
    w.lambda_e = 0;
    w.lambda_a = 0;
    w.lambda_cbva = 0;
    TinyWorld zeroed = world;
    zeroed.weights = w;
    Rng scratch(0);
    EncoderParams params = EncoderParams::init(zeroed.cfg, scratch);
    LossBreakdown bd = zeroed.run(params);
    CHECK(bd.total == bd.base);
    CHECK(bd.total == bd.clip_nce + bd.clip_trip + bd.frame_nce + bd.frame_trip);
}

TEST_CASE("total loss honors the weighted decomposition exactly") {
    TinyWorld world(103);
    Rng scratch(7);
    EncoderParams params = EncoderParams::init(world.cfg, scratch);
    LossBreakdown bd = world.run(params);
    double expected = bd.base + world.weights.lambda_e * bd.tcpl_e +
                      world.weights.lambda_a * bd.tcpl_a + world.weights.lambda_cbva * bd.cbva;
    CHECK(bd.total == doctest::Approx(expected).epsilon(1e-12));
    CHECK(bd.tcpl_e >= 0.0);
    CHECK(bd.tcpl_a >= 0.0);
    CHECK(bd.cbva >= 0.0);
}

TEST_CASE("gradient check: total loss on the tiny world") {
    TinyWorld world(7);
    LossFn f = [&world](Graph*, const Tensor& flat) {
        return world.run(world.unflatten(flat)).total_node;
    };
    auto rep = grad_check(f, world.theta0, 1e-5, 1e-4);
    INFO(rep.summary());
    CHECK(rep.pass);
}

TEST_CASE("gradient check: each sub-loss on the tiny world") {
    TinyWorld world(8);
    auto check_fn = [&](const char* name, const LossFn& f) {
        auto rep = grad_check(f, world.theta0, 1e-5, 1e-4);
        INFO(name, ": ", rep.summary());
        CHECK(rep.pass);
    };
    check_fn("base", [&world](Graph*, const Tensor& flat) {
        TinyWorld w2 = world;
        w2.weights.lambda_e = 0;
        w2.weights.lambda_a = 0;
        w2.weights.lambda_cbva = 0;
        return w2.run(w2.unflatten(flat)).total_node;
    });
    check_fn("tcpl", [&world](Graph*, const Tensor& flat) {
        TinyWorld w2 = world;
        w2.weights.lambda_e = 1;
        w2.weights.lambda_a = 1;
        w2.weights.lambda_cbva = 0;
        EncoderParams p = w2.unflatten(flat);
        EncodedBatch eb;
        std::vector<Tensor> pooled;
        for (const auto& w : w2.words) {
            pooled.push_back(reshape(encode_text(w, p).pooled, {1, 6}));
        }
        Tensor t_pooled = concat_rows(pooled);
        Rng trng(4242);
        TcplResult res = tcpl_loss(w2.teacher, t_pooled, w2.weights, trng);
        return add(res.loss_e, res.loss_a);
    });
    check_fn("cbva", [&world](Graph*, const Tensor& flat) {
        EncoderParams p = world.unflatten(flat);
        std::vector<Tensor> struct_terms;
        for (size_t v = 0; v < world.frames.size(); ++v) {
            Tensor vf = encode_frames(world.frames[v], p);
            Tensor vc = encode_clips(world.raw_clips[v], p);
            AdaptiveClipResult res = adaptive_clips(vc, world.raw_clips[v], world.schedule,
                                                    world.tau, DepthMode::literal);
            struct_terms.push_back(cbva_loss(vf, res));
        }
        return scale(add_n(struct_terms), 0.5);
    });
}
