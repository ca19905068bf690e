#include "prvr/retrieval.hpp"

#include <algorithm>
#include <cmath>

#include "prvr/features_io.hpp"

namespace prvr {

void RetrievalIndex::validate() const {
    if (w_frame < 0 || w_clip < 0 || std::abs(w_frame + w_clip - 1.0) > 1e-9) {
        throw std::invalid_argument("index: fusion weights must be >= 0 and sum to 1");
    }
    for (const auto& e : entries) {
        for (const Tensor* m : {&e.frames_unit, &e.clips_unit}) {
            for (size_t i = 0; i < m->rows(); ++i) {
                double s = 0.0;
                for (size_t j = 0; j < m->cols(); ++j) s += m->at(i, j) * m->at(i, j);
                if (std::abs(std::sqrt(s) - 1.0) > 1e-6) {
                    throw std::invalid_argument("index: '" + e.video_id +
                                                "' holds a non-unit token row");
                }
            }
        }
    }
}

RetrievalIndex build_index(const std::vector<VideoRecord>& videos, const EncoderParams& params,
                           const MergeConfig& merge, double w_frame, double w_clip) {
    if (videos.empty()) throw std::invalid_argument("build_index: empty video set");
    RetrievalIndex index;
    index.w_frame = w_frame;
    index.w_clip = w_clip;
    ClipSchedule schedule = clip_schedule(merge.target_clips, merge.rate, merge.c_min);
    for (const auto& v : videos) {
        SizedTokenSeq clips = op_tome(v.frames, merge.rate, merge.target_clips);
        Tensor enc_frames = encode_frames(v.frames, params);
        Tensor enc_clips = encode_clips(clips, params);
        IndexEntry entry;
        entry.video_id = v.video_id;
        entry.frames_unit = normalize_rows(enc_frames);
        if (merge.adaptive_index) {
            AdaptiveClipResult res =
                adaptive_clips(enc_clips, clips, schedule, merge.tau, merge.mode);
            entry.clips_unit = normalize_rows(res.clips.tokens);
            entry.clip_sizes = res.clips.sizes;
        } else {
            entry.clips_unit = normalize_rows(enc_clips);
            entry.clip_sizes = clips.sizes;
        }
        index.entries.push_back(std::move(entry));
    }
    index.validate();
    return index;
}

void save_index(const RetrievalIndex& index, const std::string& path) {
    Sections sections;
    sections.emplace_back("__fusion__",
                          Tensor::matrix(1, 2, {index.w_frame, index.w_clip}));
    for (const auto& e : index.entries) {
        sections.emplace_back(e.video_id + "/frames", e.frames_unit);
        sections.emplace_back(e.video_id + "/clips", e.clips_unit);
        std::vector<double> sizes(e.clip_sizes.begin(), e.clip_sizes.end());
        size_t n_sizes = sizes.size();
        sections.emplace_back(e.video_id + "/sizes",
                              Tensor::matrix(1, n_sizes, std::move(sizes)));
    }
    write_sections(path, sections, Dtype::f64);
}

RetrievalIndex load_index(const std::string& path) {
    Sections sections = load_sections(path);
    RetrievalIndex index;
    IndexEntry cur;
    bool open = false;
    for (auto& [name, tensor] : sections) {
        if (name == "__fusion__") {
            index.w_frame = tensor.data().at(0);
            index.w_clip = tensor.data().at(1);
            continue;
        }
        auto slash = name.rfind('/');
        if (slash == std::string::npos) throw IoError(path + ": malformed section '" + name + "'");
        std::string id = name.substr(0, slash);
        std::string kind = name.substr(slash + 1);
        if (!open || cur.video_id != id) {
            if (open) index.entries.push_back(std::move(cur));
            cur = IndexEntry{};
            cur.video_id = id;
            open = true;
        }
        if (kind == "frames") {
            cur.frames_unit = std::move(tensor);
        } else if (kind == "clips") {
            cur.clips_unit = std::move(tensor);
        } else if (kind == "sizes") {
            cur.clip_sizes.assign(tensor.data().begin(), tensor.data().end());
        } else {
            throw IoError(path + ": unknown section kind '" + kind + "'");
        }
    }
    if (open) index.entries.push_back(std::move(cur));
    index.validate();
    return index;
}

double score(const std::vector<double>& query_unit, const IndexEntry& entry, double w_frame,
             double w_clip) {
    auto best_dot = [&](const Tensor& tokens) {
        size_t d = tokens.cols();
        if (d != query_unit.size()) {
            throw std::invalid_argument("score: query dim " + std::to_string(query_unit.size()) +
                                        " != token dim " + std::to_string(d));
        }
        double best = -2.0;
        for (size_t i = 0; i < tokens.rows(); ++i) {
            double acc = 0.0;
            const double* row = tokens.data().data() + i * d;
            for (size_t j = 0; j < d; ++j) acc += row[j] * query_unit[j];
            best = std::max(best, acc);
        }
        return best;
    };
    return w_frame * best_dot(entry.frames_unit) + w_clip * best_dot(entry.clips_unit);
}

int Ranking::rank_of(const std::string& video_id) const {
    for (size_t i = 0; i < video_ids.size(); ++i) {
        if (video_ids[i] == video_id) return static_cast<int>(i) + 1;
    }
    return 0;
}

Ranking rank(const std::string& query_id, const Tensor& query, const RetrievalIndex& index,
             size_t limit) {
    size_t n = limit == 0 ? index.entries.size() : std::min(limit, index.entries.size());
    if (n == 0) throw std::invalid_argument("rank: empty index");
    std::vector<double> q(query.data());
    double nrm = 0.0;
    for (double v : q) nrm += v * v;
    nrm = std::sqrt(nrm);
    if (nrm == 0.0) throw std::invalid_argument("rank: zero-norm query embedding");
    for (double& v : q) v /= nrm;

    std::vector<size_t> order(n);
    std::vector<double> s(n);
    for (size_t i = 0; i < n; ++i) {
        order[i] = i;
        s[i] = score(q, index.entries[i], index.w_frame, index.w_clip);
    }
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (s[a] != s[b]) return s[a] > s[b];
        return index.entries[a].video_id < index.entries[b].video_id;
    });
    Ranking r;
    r.query_id = query_id;
    r.video_ids.reserve(n);
    r.scores.reserve(n);
    for (size_t i : order) {
        r.video_ids.push_back(index.entries[i].video_id);
        r.scores.push_back(s[i]);
    }
    return r;
}

RecallReport recall_at(const std::vector<Ranking>& rankings,
                       const std::map<std::string, std::string>& gt_video,
                       const std::vector<int>& qs) {
    if (rankings.empty()) throw std::invalid_argument("recall_at: no rankings");
    size_t index_size = rankings.front().video_ids.size();
    std::vector<int> gt_ranks;
    gt_ranks.reserve(rankings.size());
    for (const auto& r : rankings) {
        auto it = gt_video.find(r.query_id);
        if (it == gt_video.end()) {
            throw std::invalid_argument("recall_at: no ground truth for query '" + r.query_id +
                                        "'");
        }
        int rk = r.rank_of(it->second);
        if (rk == 0) {
            throw std::invalid_argument("recall_at: ground-truth video '" + it->second +
                                        "' of query '" + r.query_id + "' is not in the index");
        }
        gt_ranks.push_back(rk);
    }
    RecallReport rep;
    rep.qs = qs;
    for (int q : qs) {
        size_t hits = 0;
        for (int rk : gt_ranks) {
            if (rk <= q) ++hits;
        }
        double r = 100.0 * static_cast<double>(hits) / static_cast<double>(gt_ranks.size());
        rep.r_at.push_back(r);
        rep.sum_r += r;
        if (static_cast<size_t>(q) > index_size) rep.saturated.push_back(q);
    }
    return rep;
}

}  // namespace prvr
