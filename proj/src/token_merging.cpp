#include "prvr/token_merging.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace prvr {

namespace {

double row_cosine(const Tensor& m, size_t r0, size_t r1) {
    size_t d = m.cols();
    const double* a = m.data().data() + r0 * d;
    const double* b = m.data().data() + r1 * d;
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (size_t i = 0; i < d; ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if (aa == 0.0 || bb == 0.0) {
        throw std::invalid_argument("token merging: zero-norm token at row " +
                                    std::to_string(aa == 0.0 ? r0 : r1));
    }
    return ab / std::sqrt(aa * bb);
}

std::vector<int> merged_union(const std::vector<int>& a, const std::vector<int>& b) {
    std::vector<int> out;
    out.reserve(a.size() + b.size());
    std::merge(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
    return out;
}

}  // namespace

int SizedTokenSeq::total_size() const {
    return std::accumulate(sizes.begin(), sizes.end(), 0);
}

void SizedTokenSeq::check_partition(int total) const {
    if (sizes.size() != provenance.size() || tokens.rows() != sizes.size()) {
        throw std::logic_error("token seq: inconsistent lengths");
    }
    std::vector<char> seen(static_cast<size_t>(total), 0);
    for (size_t i = 0; i < provenance.size(); ++i) {
        if (provenance[i].empty() ||
            static_cast<int>(provenance[i].size()) != sizes[i]) {
            throw std::logic_error("token seq: size/provenance mismatch at token " +
                                   std::to_string(i));
        }
        for (int f : provenance[i]) {
            if (f < 0 || f >= total || seen[static_cast<size_t>(f)]) {
                throw std::logic_error("token seq: provenance is not a partition (index " +
                                       std::to_string(f) + ")");
            }
            seen[static_cast<size_t>(f)] = 1;
        }
    }
    for (char c : seen) {
        if (!c) throw std::logic_error("token seq: provenance does not cover all indices");
    }
}

ClipSchedule clip_schedule(int initial, int rate_percent, int c_min) {
    if (c_min < 1) throw std::invalid_argument("clip_schedule: c_min must be >= 1");
    if (initial < c_min) {
        throw std::invalid_argument("clip_schedule: initial count " + std::to_string(initial) +
                                    " below minimum " + std::to_string(c_min));
    }
    if (rate_percent <= 0 || rate_percent > 100) {
        throw std::invalid_argument("clip_schedule: rate must be in (0, 100]");
    }
    ClipSchedule s;
    s.merge_rate = rate_percent;
    s.c_min = c_min;
    s.levels.push_back(initial);
    double rate = static_cast<double>(rate_percent) / 100.0;
    while (s.levels.back() > c_min) {
        double cur = static_cast<double>(s.levels.back());
        int next = static_cast<int>(
            std::max(2.0 * std::floor((cur - (cur / 2.0) * rate + 1.0) / 2.0),
                     static_cast<double>(c_min)));
        if (next == s.levels.back()) break;  // recurrence stalled above c_min
        s.levels.push_back(next);
    }
    return s;
}

SizedTokenSeq op_tome(const Tensor& frames, int rate_percent, int target) {
    if (frames.rank() != 2) {
        throw std::invalid_argument("op_tome: expected [frames x dim] matrix, got shape " +
                                    shape_str(frames.shape()));
    }
    if (frames.requires_grad()) {
        throw std::invalid_argument("op_tome: expects a detached (constant) input");
    }
    const int L_f = static_cast<int>(frames.rows());
    if (target > L_f) {
        throw std::invalid_argument("op_tome: target " + std::to_string(target) +
                                    " exceeds frame count " + std::to_string(L_f));
    }
    const size_t d = frames.cols();

    SizedTokenSeq seq;
    seq.tokens = frames;
    seq.sizes.assign(static_cast<size_t>(L_f), 1);
    seq.provenance.resize(static_cast<size_t>(L_f));
    for (int i = 0; i < L_f; ++i) seq.provenance[static_cast<size_t>(i)] = {i};

    // The merge count of each iteration is pinned to the schedule step, so
    // observed lengths match it level for level.
    ClipSchedule schedule = clip_schedule(L_f, rate_percent, target);
    for (size_t lvl = 0; lvl + 1 < schedule.levels.size(); ++lvl) {
        const int cur_len = schedule.levels[lvl];
        const int merge_count = cur_len - schedule.levels[lvl + 1];
        // Disjoint adjacent pairs (0,1), (2,3), ...; a trailing odd token is
        // carried over unmerged.
        const int n_pairs = cur_len / 2;
        std::vector<int> order(static_cast<size_t>(n_pairs));
        std::iota(order.begin(), order.end(), 0);
        std::vector<double> score(static_cast<size_t>(n_pairs));
        for (int p = 0; p < n_pairs; ++p) {
            score[static_cast<size_t>(p)] =
                row_cosine(seq.tokens, static_cast<size_t>(2 * p), static_cast<size_t>(2 * p + 1));
        }
        // Highest similarity first; ties resolved by lower pair index.
        std::sort(order.begin(), order.end(), [&](int a, int b) {
            double sa = score[static_cast<size_t>(a)], sb = score[static_cast<size_t>(b)];
            return sa != sb ? sa > sb : a < b;
        });
        std::vector<char> do_merge(static_cast<size_t>(n_pairs), 0);
        for (int k = 0; k < merge_count; ++k) do_merge[static_cast<size_t>(order[static_cast<size_t>(k)])] = 1;

        SizedTokenSeq next;
        next.sizes.reserve(static_cast<size_t>(schedule.levels[lvl + 1]));
        std::vector<double> data;
        data.reserve(static_cast<size_t>(schedule.levels[lvl + 1]) * d);
        const auto& src = seq.tokens.data();
        auto push_row = [&](size_t row, double w0, size_t row2, double w1) {
            for (size_t j = 0; j < d; ++j)
                data.push_back(w0 * src[row * d + j] + w1 * src[row2 * d + j]);
        };
        for (int i = 0; i < cur_len;) {
            if (i + 1 < cur_len && do_merge[static_cast<size_t>(i / 2)]) {
                size_t a = static_cast<size_t>(i), b = static_cast<size_t>(i + 1);
                double sa = seq.sizes[a], sb = seq.sizes[b];
                push_row(a, sa / (sa + sb), b, sb / (sa + sb));
                next.sizes.push_back(seq.sizes[a] + seq.sizes[b]);
                next.provenance.push_back(merged_union(seq.provenance[a], seq.provenance[b]));
                i += 2;
            } else {
                push_row(static_cast<size_t>(i), 1.0, static_cast<size_t>(i), 0.0);
                next.sizes.push_back(seq.sizes[static_cast<size_t>(i)]);
                next.provenance.push_back(seq.provenance[static_cast<size_t>(i)]);
                i += 1;
            }
        }
        next.tokens = Tensor::matrix(next.sizes.size(), d, std::move(data));
        seq = std::move(next);
    }
    seq.check_partition(L_f);
    return seq;
}

double high_sim_ratio(const Tensor& clips, double tau) {
    if (clips.rank() != 2 || clips.rows() < 2) {
        throw std::invalid_argument("high_sim_ratio: need at least 2 clips, got shape " +
                                    shape_str(clips.shape()));
    }
    size_t L = clips.rows();
    size_t hits = 0, pairs = 0;
    for (size_t i = 0; i < L; ++i) {
        for (size_t j = i + 1; j < L; ++j) {
            ++pairs;
            if (row_cosine(clips, i, j) > tau) ++hits;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(pairs);
}

DepthMode depth_mode_from_string(const std::string& s) {
    if (s == "literal") return DepthMode::literal;
    if (s == "monotone") return DepthMode::monotone;
    throw std::invalid_argument("unknown merge-depth mode '" + s +
                                "' (expected literal|monotone)");
}

int select_merge_depth(double omega, int k_levels, DepthMode mode) {
    if (k_levels < 1) throw std::invalid_argument("select_merge_depth: K must be >= 1");
    if (omega < 0.0 || omega > 1.0) {
        throw std::invalid_argument("select_merge_depth: omega out of [0, 1]");
    }
    double K = static_cast<double>(k_levels);
    if (mode == DepthMode::monotone) {
        return std::min(k_levels, static_cast<int>(std::floor(omega * K)) + 1);
    }
    // Two-branch rule: diverse videos keep all clips, otherwise the smallest
    // k in {2..K} with omega > (K-k)/K (which the scan meets at k = 2).
    if (omega <= 1.0 - 1.0 / K) return 1;
    for (int k = 2; k <= k_levels; ++k) {
        if (omega > (K - static_cast<double>(k)) / K) return k;
    }
    return k_levels;
}

SizedTokenSeq bipartite_merge(const SizedTokenSeq& seq, int merge_count) {
    const int L = static_cast<int>(seq.length());
    if (merge_count < 0 || merge_count >= L) {
        throw std::invalid_argument("bipartite_merge: merge count " +
                                    std::to_string(merge_count) + " out of range for length " +
                                    std::to_string(L));
    }
    if (merge_count == 0) return seq;

    // A = odd 1-based positions (0, 2, ... 0-based), B = even.
    std::vector<int> set_a, set_b;
    for (int i = 0; i < L; ++i) ((i % 2 == 0) ? set_a : set_b).push_back(i);

    struct Proposal {
        int a;       // index into set_a
        int b;       // index into set_b
        double sim;
    };
    std::vector<Proposal> props;
    props.reserve(set_a.size());
    Tensor detached = seq.tokens.detached();
    for (size_t ai = 0; ai < set_a.size(); ++ai) {
        if (set_b.empty()) break;
        int best = 0;
        double best_sim = -2.0;
        for (size_t bi = 0; bi < set_b.size(); ++bi) {
            double s = row_cosine(detached, static_cast<size_t>(set_a[ai]),
                                  static_cast<size_t>(set_b[bi]));
            if (s > best_sim) {
                best_sim = s;
                best = static_cast<int>(bi);
            }
        }
        props.push_back({static_cast<int>(ai), best, best_sim});
    }
    if (static_cast<int>(props.size()) < merge_count) {
        throw std::invalid_argument("bipartite_merge: only " + std::to_string(props.size()) +
                                    " proposals for " + std::to_string(merge_count) + " merges");
    }
    std::sort(props.begin(), props.end(), [](const Proposal& x, const Proposal& y) {
        return x.sim != y.sim ? x.sim > y.sim : x.a < y.a;
    });

    // Destination of each original token: B tokens absorb their merged A
    // sources; the combination weights are the (constant) relative sizes.
    std::vector<char> a_merged(set_a.size(), 0);
    std::vector<std::vector<int>> absorbed(set_b.size());
    for (int k = 0; k < merge_count; ++k) {
        a_merged[static_cast<size_t>(props[static_cast<size_t>(k)].a)] = 1;
        absorbed[static_cast<size_t>(props[static_cast<size_t>(k)].b)].push_back(
            set_a[static_cast<size_t>(props[static_cast<size_t>(k)].a)]);
    }

    SizedTokenSeq out;
    std::vector<double> weights;  // row-combination matrix [L' x L]
    auto emit = [&](const std::vector<int>& members) {
        int total = 0;
        for (int m : members) total += seq.sizes[static_cast<size_t>(m)];
        std::vector<double> w(static_cast<size_t>(L), 0.0);
        std::vector<int> prov;
        for (int m : members) {
            w[static_cast<size_t>(m)] =
                static_cast<double>(seq.sizes[static_cast<size_t>(m)]) / total;
            prov = prov.empty() ? seq.provenance[static_cast<size_t>(m)]
                                : merged_union(prov, seq.provenance[static_cast<size_t>(m)]);
        }
        weights.insert(weights.end(), w.begin(), w.end());
        out.sizes.push_back(total);
        out.provenance.push_back(std::move(prov));
    };

    // Survivors ordered by original position: every B token (possibly grown)
    // and every unmerged A token.
    std::vector<std::pair<int, std::pair<bool, int>>> survivors;  // (orig pos, (is_b, set idx))
    for (size_t bi = 0; bi < set_b.size(); ++bi) survivors.push_back({set_b[bi], {true, static_cast<int>(bi)}});
    for (size_t ai = 0; ai < set_a.size(); ++ai) {
        if (!a_merged[ai]) survivors.push_back({set_a[ai], {false, static_cast<int>(ai)}});
    }
    std::sort(survivors.begin(), survivors.end());
    for (const auto& [pos, ref] : survivors) {
        if (ref.first) {
            std::vector<int> members = absorbed[static_cast<size_t>(ref.second)];
            members.push_back(pos);
            std::sort(members.begin(), members.end());
            emit(members);
        } else {
            emit({pos});
        }
    }

    Tensor w = Tensor::matrix(out.sizes.size(), static_cast<size_t>(L), std::move(weights));
    out.tokens = matmul(w, seq.tokens);
    return out;
}

AdaptiveClipResult adaptive_clips(const Tensor& encoded_clips, const SizedTokenSeq& raw_clips,
                                  const ClipSchedule& schedule, double tau, DepthMode mode) {
    if (encoded_clips.rank() != 2 ||
        encoded_clips.rows() != static_cast<size_t>(schedule.levels.at(0))) {
        throw std::invalid_argument("adaptive_clips: encoded clip count " +
                                    shape_str(encoded_clips.shape()) +
                                    " does not match schedule level " +
                                    std::to_string(schedule.levels.at(0)));
    }
    if (raw_clips.length() != encoded_clips.rows()) {
        throw std::invalid_argument("adaptive_clips: raw/encoded clip counts differ");
    }

    AdaptiveClipResult res;
    res.omega = high_sim_ratio(raw_clips.tokens, tau);
    res.depth = select_merge_depth(res.omega, schedule.depth(), mode);

    SizedTokenSeq cur;
    cur.tokens = encoded_clips;
    cur.sizes = raw_clips.sizes;
    cur.provenance = raw_clips.provenance;
    for (int lvl = 0; lvl + 1 < res.depth; ++lvl) {
        int r = schedule.levels[static_cast<size_t>(lvl)] -
                schedule.levels[static_cast<size_t>(lvl) + 1];
        cur = bipartite_merge(cur, r);
    }

    const int L_f = raw_clips.total_size();
    cur.check_partition(L_f);
    res.frame_to_clip.assign(static_cast<size_t>(L_f), -1);
    res.frame_sets.resize(cur.length());
    for (size_t c = 0; c < cur.length(); ++c) {
        for (int f : cur.provenance[c]) {
            res.frame_to_clip[static_cast<size_t>(f)] = static_cast<int>(c);
            res.frame_sets[c].push_back(f);
        }
    }
    res.clips = std::move(cur);
    return res;
}

}  // namespace prvr
