#include "prvr/objectives.hpp"

#include <array>
#include <cmath>
#include <map>

namespace prvr {

namespace {

Tensor row_of(const Tensor& m, size_t i) {
    return reshape(slice_rows(m, i, i + 1), {m.cols()});
}

double row_sq_dist(const Tensor& m, size_t i, size_t j) {
    size_t d = m.cols();
    const double* a = m.data().data() + i * d;
    const double* b = m.data().data() + j * d;
    double s = 0.0;
    for (size_t k = 0; k < d; ++k) {
        double diff = a[k] - b[k];
        s += diff * diff;
    }
    return s;
}

}  // namespace

void LossWeights::validate() const {
    if (lambda_e < 0 || lambda_a < 0 || lambda_cbva < 0) {
        throw std::invalid_argument("loss weights must be >= 0");
    }
    if (nce_temperature <= 0) throw std::invalid_argument("nce_temperature must be > 0");
    if (huber_delta <= 0) throw std::invalid_argument("huber_delta must be > 0");
    if (triplet_margin < 0) throw std::invalid_argument("triplet_margin must be >= 0");
    if (angle_triple_budget < 1) throw std::invalid_argument("angle_triple_budget must be >= 1");
}

Tensor pair_dist_e(const Tensor& x, const Tensor& y, const Tensor& mu) {
    if (mu.item() == 0.0) return Tensor::scalar(0.0);
    return div_by_scalar(norm2(sub(x, y)), mu);
}

Tensor triplet_angle_a(const Tensor& x, const Tensor& y, const Tensor& z) {
    Tensor xy = sub(x, y);
    Tensor zy = sub(z, y);
    auto sq = [](const Tensor& t) {
        double s = 0.0;
        for (double v : t.data()) s += v * v;
        return s;
    };
    if (sq(xy) == 0.0 || sq(zy) == 0.0) {
        throw std::invalid_argument("triplet_angle_a: coincident points");
    }
    return dot(div_by_scalar(xy, norm2(xy)), div_by_scalar(zy, norm2(zy)));
}

// ---------------------------------------------------------------------------
// Relational text distillation
// ---------------------------------------------------------------------------

namespace {

// Teacher-side relational statistics on plain doubles (the teacher is frozen).
struct TeacherRelations {
    std::vector<double> dist;  // flat [B x B]
    double mu = 0.0;
    size_t B = 0;

    double f_e(size_t i, size_t j) const {
        return mu == 0.0 ? 0.0 : dist[i * B + j] / mu;
    }
};

TeacherRelations teacher_relations(const Tensor& teacher) {
    TeacherRelations tr;
    tr.B = teacher.rows();
    tr.dist.assign(tr.B * tr.B, 0.0);
    double acc = 0.0;
    for (size_t i = 0; i < tr.B; ++i) {
        for (size_t j = i + 1; j < tr.B; ++j) {
            double d = std::sqrt(row_sq_dist(teacher, i, j));
            tr.dist[i * tr.B + j] = d;
            tr.dist[j * tr.B + i] = d;
            acc += 2.0 * d;
        }
    }
    tr.mu = acc / static_cast<double>(tr.B * (tr.B - 1));
    return tr;
}

double teacher_angle(const Tensor& teacher, size_t i, size_t j, size_t k, bool& defined) {
    size_t d = teacher.cols();
    const double* ti = teacher.data().data() + i * d;
    const double* tj = teacher.data().data() + j * d;
    const double* tk = teacher.data().data() + k * d;
    double nij = 0.0, nkj = 0.0, dp = 0.0;
    for (size_t p = 0; p < d; ++p) {
        double a = ti[p] - tj[p];
        double b = tk[p] - tj[p];
        nij += a * a;
        nkj += b * b;
        dp += a * b;
    }
    if (nij == 0.0 || nkj == 0.0) {
        defined = false;
        return 0.0;
    }
    defined = true;
    return dp / std::sqrt(nij * nkj);
}

}  // namespace

TcplResult tcpl_loss(const Tensor& teacher, const Tensor& student, const LossWeights& weights,
                     Rng& rng) {
    if (teacher.rank() != 2 || student.rank() != 2) {
        throw std::invalid_argument("tcpl_loss: expected [B x d] matrices");
    }
    const size_t B = teacher.rows();
    if (student.rows() != B) {
        throw std::invalid_argument("tcpl_loss: teacher has " + std::to_string(B) +
                                    " rows, student " + std::to_string(student.rows()));
    }
    if (B < 2) throw std::invalid_argument("tcpl_loss: batch must have at least 2 queries");

    TcplResult res;
    TeacherRelations tr = teacher_relations(teacher);
    if (tr.mu == 0.0) {
        res.warnings.push_back("tcpl: teacher batch embeddings are all identical (mu = 0)");
    }

    // Student rows and pair distances as graph nodes. Coincident student rows
    // get a constant-0 distance (no gradient through that pair).
    std::vector<Tensor> rows(B);
    for (size_t i = 0; i < B; ++i) rows[i] = row_of(student, i);
    std::vector<Tensor> dist(B * B);
    bool all_zero = true;
    for (size_t i = 0; i < B; ++i) {
        for (size_t j = i + 1; j < B; ++j) {
            Tensor d;
            if (row_sq_dist(student, i, j) == 0.0) {
                d = Tensor::scalar(0.0);
            } else {
                d = norm2(sub(rows[i], rows[j]));
                all_zero = false;
            }
            dist[i * B + j] = d;
            dist[j * B + i] = d;
        }
    }

    Tensor mu_s;
    if (all_zero) {
        mu_s = Tensor::scalar(0.0);
        res.warnings.push_back("tcpl: student batch embeddings are all identical (mu = 0)");
    } else {
        std::vector<Tensor> terms;
        terms.reserve(B * (B - 1) / 2);
        for (size_t i = 0; i < B; ++i)
            for (size_t j = i + 1; j < B; ++j) terms.push_back(dist[i * B + j]);
        mu_s = scale(add_n(terms), 1.0 / static_cast<double>(terms.size()));
    }

    // Distance term over unordered pairs (the ordered mean is identical by
    // symmetry of both distance functions).
    {
        std::vector<Tensor> terms;
        terms.reserve(B * (B - 1) / 2);
        for (size_t i = 0; i < B; ++i) {
            for (size_t j = i + 1; j < B; ++j) {
                Tensor fe_s = all_zero ? Tensor::scalar(0.0)
                                       : div_by_scalar(dist[i * B + j], mu_s);
                terms.push_back(
                    huber(Tensor::scalar(tr.f_e(i, j)), fe_s, weights.huber_delta));
            }
        }
        res.loss_e = scale(add_n(terms), 1.0 / static_cast<double>(terms.size()));
    }

    // Angle term over index triples (i, j, k), j the center. Exhaustive up to
    // the budget, uniformly subsampled beyond it.
    {
        const size_t total = B * B * B;
        std::vector<std::array<size_t, 3>> triples;
        if (total <= weights.angle_triple_budget) {
            triples.reserve(total);
            for (size_t i = 0; i < B; ++i)
                for (size_t j = 0; j < B; ++j)
                    for (size_t k = 0; k < B; ++k) triples.push_back({i, j, k});
        } else {
            triples.reserve(weights.angle_triple_budget);
            for (size_t t = 0; t < weights.angle_triple_budget; ++t) {
                triples.push_back({static_cast<size_t>(rng.next_below(B)),
                                   static_cast<size_t>(rng.next_below(B)),
                                   static_cast<size_t>(rng.next_below(B))});
            }
        }
        res.triples_enumerated = triples.size();

        std::map<std::pair<size_t, size_t>, Tensor> unit_diff;  // (i, j) -> (r_i - r_j)/||.||
        auto unit = [&](size_t i, size_t j) -> const Tensor& {
            auto key = std::make_pair(i, j);
            auto it = unit_diff.find(key);
            if (it == unit_diff.end()) {
                Tensor d = sub(rows[i], rows[j]);
                it = unit_diff.emplace(key, div_by_scalar(d, norm2(d))).first;
            }
            return it->second;
        };

        std::vector<Tensor> terms;
        terms.reserve(triples.size());
        for (const auto& [i, j, k] : triples) {
            bool t_ok = false;
            double fa_t = teacher_angle(teacher, i, j, k, t_ok);
            bool s_ok = row_sq_dist(student, i, j) != 0.0 && row_sq_dist(student, k, j) != 0.0;
            if (!t_ok || !s_ok) {
                ++res.triples_skipped;
                continue;
            }
            Tensor fa_s = dot(unit(i, j), unit(k, j));
            terms.push_back(huber(Tensor::scalar(fa_t), fa_s, weights.huber_delta));
        }
        if (terms.empty()) {
            res.loss_a = Tensor::scalar(0.0);
        } else {
            // Skipped triples contribute 0 but stay in the normalizer.
            res.loss_a = scale(add_n(terms), 1.0 / static_cast<double>(triples.size()));
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// Base retrieval loss
// ---------------------------------------------------------------------------

namespace {

struct BranchTerms {
    Tensor nce, trip;
};

BranchTerms branch_loss(const Tensor& t_pooled, const std::vector<Tensor>& video_tokens,
                        const std::vector<int>& pairing, const LossWeights& w) {
    const size_t B_q = t_pooled.rows();
    const size_t B_v = video_tokens.size();

    Tensor qn = normalize_rows(t_pooled);
    // s[q][v] = max over the video's tokens of cos(query, token)
    std::vector<Tensor> scores(B_q * B_v);
    for (size_t v = 0; v < B_v; ++v) {
        Tensor c = matmul(qn, transpose(normalize_rows(video_tokens[v])));  // [B_q x L_v]
        for (size_t q = 0; q < B_q; ++q) {
            scores[q * B_v + v] = max_all(slice_rows(c, q, q + 1));
        }
    }

    BranchTerms out;
    if (B_v < 2) {
        out.nce = Tensor::scalar(0.0);
        out.trip = Tensor::scalar(0.0);
        return out;
    }

    // InfoNCE, symmetric, positives summed in the numerator.
    Tensor s_mat = scale(stack_scalars(B_q, B_v, scores), 1.0 / w.nce_temperature);
    Tensor ones_qv = Tensor::full({B_q, B_v}, 1.0);
    std::vector<double> pos(B_q * B_v, 0.0);
    for (size_t q = 0; q < B_q; ++q) pos[q * B_v + static_cast<size_t>(pairing[q])] = 1.0;
    Tensor pos_qv = Tensor::matrix(B_q, B_v, pos);

    Tensor q2v = mean(sub(masked_logsumexp_rows(s_mat, ones_qv),
                          masked_logsumexp_rows(s_mat, pos_qv)));
    Tensor s_t = transpose(s_mat);
    Tensor v2q = mean(sub(masked_logsumexp_rows(s_t, Tensor::full({B_v, B_q}, 1.0)),
                          masked_logsumexp_rows(s_t, transpose(pos_qv))));
    out.nce = scale(add(q2v, v2q), 0.5);

    // Triplet with hardest in-batch negatives, query- and video-anchor hinges
    // averaged per positive pair.
    std::vector<Tensor> pair_terms;
    pair_terms.reserve(B_q);
    Tensor margin = Tensor::scalar(w.triplet_margin);
    for (size_t q = 0; q < B_q; ++q) {
        size_t p = static_cast<size_t>(pairing[q]);
        const Tensor& s_pos = scores[q * B_v + p];

        size_t neg_v = B_v;  // hardest negative video for this query
        for (size_t v = 0; v < B_v; ++v) {
            if (v == p) continue;
            if (neg_v == B_v || scores[q * B_v + v].item() > scores[q * B_v + neg_v].item())
                neg_v = v;
        }
        size_t neg_q = B_q;  // hardest negative query for the paired video
        for (size_t q2 = 0; q2 < B_q; ++q2) {
            if (static_cast<size_t>(pairing[q2]) == p) continue;
            if (neg_q == B_q || scores[q2 * B_v + p].item() > scores[neg_q * B_v + p].item())
                neg_q = q2;
        }
        Tensor t_query = hinge(add(margin, sub(scores[q * B_v + neg_v], s_pos)));
        Tensor t_video = hinge(add(margin, sub(scores[neg_q * B_v + p], s_pos)));
        pair_terms.push_back(scale(add(t_query, t_video), 0.5));
    }
    out.trip = scale(add_n(pair_terms), 1.0 / static_cast<double>(B_q));
    return out;
}

}  // namespace

Tensor BaseLossTerms::total() const {
    std::vector<Tensor> t{clip_nce, clip_trip, frame_nce, frame_trip};
    return add_n(t);
}

BaseLossTerms base_loss(const EncodedBatch& batch, const LossWeights& weights) {
    const size_t B_q = batch.t_pooled.rows();
    if (batch.pairing.size() != B_q) {
        throw std::invalid_argument("base_loss: pairing size does not match query count");
    }
    for (int p : batch.pairing) {
        if (p < 0 || static_cast<size_t>(p) >= batch.v_frame.size()) {
            throw std::invalid_argument("base_loss: pairing index out of range");
        }
    }
    BaseLossTerms out;
    BranchTerms clip = branch_loss(batch.t_pooled, batch.v_clip, batch.pairing, weights);
    BranchTerms frame = branch_loss(batch.t_pooled, batch.v_frame, batch.pairing, weights);
    out.clip_nce = clip.nce;
    out.clip_trip = clip.trip;
    out.frame_nce = frame.nce;
    out.frame_trip = frame.trip;
    if (batch.v_frame.size() < 2) {
        out.warnings.push_back("base_loss: batch has a single video, no negatives (loss 0)");
    }
    return out;
}

// ---------------------------------------------------------------------------
// Cross-branch alignment
// ---------------------------------------------------------------------------

Tensor cbva_loss(const Tensor& v_frame, const AdaptiveClipResult& clips) {
    const size_t L_f = v_frame.rows();
    const size_t L_c = clips.clips.length();
    if (clips.frame_to_clip.size() != L_f) {
        throw std::invalid_argument("cbva_loss: frame map covers " +
                                    std::to_string(clips.frame_to_clip.size()) + " frames, video has " +
                                    std::to_string(L_f));
    }
    for (size_t c = 0; c < L_c; ++c) {
        if (clips.frame_sets[c].empty()) {
            throw std::logic_error("cbva_loss: merged clip " + std::to_string(c) +
                                   " has no frames");
        }
    }

    Tensor sim = matmul(normalize_rows(v_frame), transpose(normalize_rows(clips.clips.tokens)));

    std::vector<double> assign(L_f * L_c, 0.0);
    for (size_t f = 0; f < L_f; ++f) {
        assign[f * L_c + static_cast<size_t>(clips.frame_to_clip[f])] = 1.0;
    }
    Tensor mask_fc = Tensor::matrix(L_f, L_c, assign);

    Tensor frame_to_clip = mean(sub(masked_logsumexp_rows(sim, Tensor::full({L_f, L_c}, 1.0)),
                                    masked_logsumexp_rows(sim, mask_fc)));
    Tensor sim_t = transpose(sim);
    Tensor clip_to_frame = mean(sub(masked_logsumexp_rows(sim_t, Tensor::full({L_c, L_f}, 1.0)),
                                    masked_logsumexp_rows(sim_t, transpose(mask_fc))));
    if (frame_to_clip.item() < -1e-9 || clip_to_frame.item() < -1e-9) {
        throw NumericError("cbva_loss: alignment term went negative");
    }
    return add(frame_to_clip, clip_to_frame);
}

// ---------------------------------------------------------------------------
// Total objective
// ---------------------------------------------------------------------------

LossBreakdown total_loss(const EncodedBatch& batch, const Tensor& teacher_eos,
                         const std::vector<AdaptiveClipResult>& adaptive,
                         const LossWeights& weights, Rng& rng) {
    weights.validate();
    if (adaptive.size() != batch.v_frame.size()) {
        throw std::invalid_argument("total_loss: adaptive results do not match video count");
    }

    LossBreakdown bd;
    BaseLossTerms base = base_loss(batch, weights);
    TcplResult tcpl = tcpl_loss(teacher_eos, batch.t_pooled, weights, rng);

    std::vector<Tensor> per_video;
    per_video.reserve(batch.v_frame.size());
    for (size_t v = 0; v < batch.v_frame.size(); ++v) {
        per_video.push_back(cbva_loss(batch.v_frame[v], adaptive[v]));
    }
    Tensor cbva = scale(add_n(per_video), 1.0 / static_cast<double>(per_video.size()));

    Tensor base_total = base.total();
    std::vector<Tensor> terms{base_total, scale(tcpl.loss_e, weights.lambda_e),
                              scale(tcpl.loss_a, weights.lambda_a),
                              scale(cbva, weights.lambda_cbva)};
    bd.total_node = add_n(terms);

    bd.clip_nce = base.clip_nce.item();
    bd.clip_trip = base.clip_trip.item();
    bd.frame_nce = base.frame_nce.item();
    bd.frame_trip = base.frame_trip.item();
    bd.base = base_total.item();
    bd.tcpl_e = tcpl.loss_e.item();
    bd.tcpl_a = tcpl.loss_a.item();
    bd.cbva = cbva.item();
    bd.total = bd.total_node.item();
    bd.warnings = base.warnings;
    bd.warnings.insert(bd.warnings.end(), tcpl.warnings.begin(), tcpl.warnings.end());
    return bd;
}

}  // namespace prvr
