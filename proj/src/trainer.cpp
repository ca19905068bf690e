#include "prvr/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <unordered_map>

#include "prvr/features_io.hpp"
#include "prvr/objectives.hpp"

namespace prvr {

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------

void save_checkpoint(const EncoderParams& params, const std::string& path) {
    Sections sections;
    const auto& c = params.cfg;
    sections.emplace_back(
        "__config__",
        Tensor::matrix(1, 8,
                       {static_cast<double>(c.d_q), static_cast<double>(c.d_v),
                        static_cast<double>(c.d), static_cast<double>(c.blocks),
                        static_cast<double>(c.mlp_ratio), static_cast<double>(c.max_text_len),
                        static_cast<double>(c.max_frames), static_cast<double>(c.max_clips)}));
    params.for_each([&](const std::string& name, const Tensor& t) {
        sections.emplace_back(name, t);
    });
    write_sections(path, sections, Dtype::f64);
}

EncoderParams load_checkpoint(const std::string& path) {
    Sections sections = load_sections(path);
    if (sections.empty() || sections.front().first != "__config__") {
        throw IoError(path + ": checkpoint missing leading __config__ section");
    }
    const auto& cd = sections.front().second.data();
    if (cd.size() != 8) throw IoError(path + ": malformed __config__ section");
    EncoderConfig cfg;
    cfg.d_q = static_cast<int>(cd[0]);
    cfg.d_v = static_cast<int>(cd[1]);
    cfg.d = static_cast<int>(cd[2]);
    cfg.blocks = static_cast<int>(cd[3]);
    cfg.mlp_ratio = static_cast<int>(cd[4]);
    cfg.max_text_len = static_cast<int>(cd[5]);
    cfg.max_frames = static_cast<int>(cd[6]);
    cfg.max_clips = static_cast<int>(cd[7]);

    Rng scratch(0);
    EncoderParams params = EncoderParams::init(cfg, scratch);
    std::unordered_map<std::string, Tensor> by_name;
    for (size_t i = 1; i < sections.size(); ++i) by_name[sections[i].first] = sections[i].second;
    params.for_each([&](const std::string& name, Tensor& t) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw IoError(path + ": checkpoint missing tensor '" + name + "'");
        if (it->second.numel() != t.numel()) {
            throw IoError(path + ": tensor '" + name + "' has " +
                          std::to_string(it->second.numel()) + " values, expected " +
                          std::to_string(t.numel()));
        }
        t = Tensor(t.shape(), it->second.data());
    });
    return params;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

EvalOutput evaluate(const EncoderParams& params, const Dataset& ds, const MergeConfig& merge,
                    const RetrievalOptions& retrieval) {
    RetrievalIndex index =
        build_index(ds.videos, params, merge, retrieval.w_frame, retrieval.w_clip);
    std::vector<Ranking> rankings;
    std::map<std::string, std::string> gt;
    rankings.reserve(ds.queries.size());
    for (const auto& q : ds.queries) {
        EncodedText enc = encode_text(q.words, params);
        rankings.push_back(rank(q.query_id, enc.pooled, index));
        gt[q.query_id] = q.video_id;
    }
    EvalOutput out;
    out.recall = recall_at(rankings, gt, retrieval.recall_qs);
    for (const auto& r : rankings) out.gt_ranks[r.query_id] = r.rank_of(gt[r.query_id]);
    return out;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

namespace {

class Adam {
public:
    explicit Adam(double lr) : lr_(lr) {}

    void step(EncoderParams& params, const EncoderParams& bound, Graph::Gradients& grads) {
        ++t_;
        double bc1 = 1.0 - std::pow(beta1_, t_);
        double bc2 = 1.0 - std::pow(beta2_, t_);
        std::vector<std::pair<std::string, const Tensor*>> bound_list;
        bound.for_each([&](const std::string& name, const Tensor& t) {
            bound_list.emplace_back(name, &t);
        });
        size_t idx = 0;
        params.for_each([&](const std::string& name, Tensor& p) {
            const Tensor& leaf = *bound_list[idx].second;
            if (bound_list[idx].first != name) {
                throw std::logic_error("adam: parameter order mismatch at '" + name + "'");
            }
            ++idx;
            const auto& g = grads.wrt(leaf);
            auto& m = m_[name];
            auto& v = v_[name];
            if (m.empty()) {
                m.assign(g.size(), 0.0);
                v.assign(g.size(), 0.0);
            }
            std::vector<double> next(p.data());
            for (size_t i = 0; i < g.size(); ++i) {
                m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
                v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
                double mhat = m[i] / bc1;
                double vhat = v[i] / bc2;
                next[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
            p = Tensor(p.shape(), std::move(next));
        });
    }

private:
    double lr_;
    double beta1_ = 0.9;
    double beta2_ = 0.999;
    double eps_ = 1e-8;
    long t_ = 0;
    std::unordered_map<std::string, std::vector<double>> m_, v_;
};

struct VideoCache {
    SizedTokenSeq raw_clips;  // order-preserving merge of the raw frames
};

std::string csv_row(int step, const LossBreakdown& bd) {
    std::ostringstream os;
    os << std::setprecision(12) << step << "," << bd.base << "," << bd.tcpl_e << ","
       << bd.tcpl_a << "," << bd.cbva << "," << bd.total;
    return os.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

TrainResult train(const RunConfig& cfg, const Dataset& train_ds, const Dataset& eval_ds,
                  std::ostream* progress) {
    cfg.validate();
    train_ds.validate();
    eval_ds.validate();

    EncoderConfig enc_cfg = cfg.encoder;
    enc_cfg.d_q = static_cast<int>(train_ds.d_q);
    enc_cfg.d_v = static_cast<int>(train_ds.d_v);
    enc_cfg.max_clips = cfg.merge.target_clips;
    size_t max_frames = 0, max_words = 0;
    for (const auto& v : train_ds.videos) max_frames = std::max(max_frames, v.frames.rows());
    for (const auto& v : eval_ds.videos) max_frames = std::max(max_frames, v.frames.rows());
    for (const auto& q : train_ds.queries) max_words = std::max(max_words, q.words.rows());
    for (const auto& q : eval_ds.queries) max_words = std::max(max_words, q.words.rows());
    enc_cfg.max_frames = std::max(enc_cfg.max_frames, static_cast<int>(max_frames));
    enc_cfg.max_text_len = std::max(enc_cfg.max_text_len, static_cast<int>(max_words));

    Rng init_rng(Rng::mix(cfg.seed, 0x1717));
    EncoderParams params = EncoderParams::init(enc_cfg, init_rng);
    Adam adam(cfg.train.lr);

    // Raw-feature merging is independent of the parameters: do it once.
    ClipSchedule schedule =
        clip_schedule(cfg.merge.target_clips, cfg.merge.rate, cfg.merge.c_min);
    std::vector<VideoCache> cache(train_ds.videos.size());
    for (size_t v = 0; v < train_ds.videos.size(); ++v) {
        cache[v].raw_clips =
            op_tome(train_ds.videos[v].frames, cfg.merge.rate, cfg.merge.target_clips);
    }

    TrainResult res;
    res.loss_csv.push_back("step,base,tcpl_e,tcpl_a,cbva,total");

    std::vector<size_t> query_order(train_ds.queries.size());
    for (size_t i = 0; i < query_order.size(); ++i) query_order[i] = i;

    int step = 0;
    for (int epoch = 1; epoch <= cfg.train.epochs && !res.diverged; ++epoch) {
        Rng shuffle_rng(Rng::mix(cfg.seed, 0xE90C + static_cast<uint64_t>(epoch)));
        shuffle_rng.shuffle(query_order);

        size_t cursor = 0;
        while (cursor < query_order.size() && !res.diverged) {
            size_t take = std::min(static_cast<size_t>(cfg.train.batch_size),
                                   query_order.size() - cursor);
            // A trailing single query cannot form relational pairs; fold it in.
            if (query_order.size() - (cursor + take) == 1) ++take;
            std::vector<size_t> batch_q(query_order.begin() + static_cast<long>(cursor),
                                        query_order.begin() + static_cast<long>(cursor + take));
            cursor += take;
            if (batch_q.size() < 2) break;
            ++step;

            try {
                Graph g;
                EncoderParams bound = params.bind(g);

                // Unique videos in first-appearance order.
                std::vector<size_t> video_ids;
                std::unordered_map<std::string, int> local;
                EncodedBatch eb;
                for (size_t qi : batch_q) {
                    const auto& q = train_ds.queries[qi];
                    auto it = local.find(q.video_id);
                    if (it == local.end()) {
                        int vid = train_ds.video_index(q.video_id);
                        local[q.video_id] = static_cast<int>(video_ids.size());
                        video_ids.push_back(static_cast<size_t>(vid));
                    }
                    eb.pairing.push_back(local[q.video_id]);
                }

                std::vector<Tensor> pooled_rows;
                std::vector<double> teacher_data;
                for (size_t qi : batch_q) {
                    const auto& q = train_ds.queries[qi];
                    EncodedText enc = encode_text(q.words, bound);
                    eb.t_seq.push_back(enc.seq);
                    pooled_rows.push_back(reshape(enc.pooled, {1, enc.pooled.numel()}));
                    teacher_data.insert(teacher_data.end(), q.teacher_eos.data().begin(),
                                        q.teacher_eos.data().end());
                }
                eb.t_pooled = concat_rows(pooled_rows);
                // Teacher dim comes from the records (equal to d_q only in
                // synthetic mode).
                size_t d_clip = teacher_data.size() / batch_q.size();
                Tensor teacher =
                    Tensor::matrix(batch_q.size(), d_clip, std::move(teacher_data));

                std::vector<AdaptiveClipResult> adaptive;
                for (size_t vid : video_ids) {
                    const auto& raw = cache[vid].raw_clips;
                    Tensor vf = encode_frames(train_ds.videos[vid].frames, bound);
                    Tensor vc = encode_clips(raw, bound);
                    eb.v_frame.push_back(vf);
                    eb.v_clip.push_back(vc);
                    eb.clip_sizes.push_back(raw.sizes);
                    adaptive.push_back(
                        adaptive_clips(vc, raw, schedule, cfg.merge.tau, cfg.merge.mode));
                }

                Rng step_rng(Rng::mix(cfg.seed, 0xA1B2 + static_cast<uint64_t>(step)));
                LossBreakdown bd = total_loss(eb, teacher, adaptive, cfg.loss, step_rng);
                for (const auto& w : bd.warnings) res.warnings.push_back(w);

                auto grads = g.backward(bd.total_node);
                adam.step(params, bound, grads);
                res.loss_csv.push_back(csv_row(step, bd));
                res.last_finite_step = step;
                res.steps_run = step;
            } catch (const NumericError& e) {
                res.diverged = true;
                res.warnings.push_back(std::string("diverged at step ") + std::to_string(step) +
                                       ": " + e.what());
                if (progress) {
                    *progress << "training diverged at step " << step << ": " << e.what()
                              << "\n";
                }
                res.last_finite_step = step - 1;
            }
        }

        if (!res.diverged && (epoch % cfg.train.eval_every == 0 || epoch == cfg.train.epochs)) {
            EvalOutput ev = evaluate(params, eval_ds, cfg.merge, cfg.retrieval);
            res.eval_history.emplace_back(epoch, ev.recall.sum_r);
            if (ev.recall.sum_r > res.best_sum_r) {
                res.best_sum_r = ev.recall.sum_r;
                res.best_epoch = epoch;
                res.best_params = params;
            }
            if (progress) {
                *progress << "epoch " << epoch << ": SumR " << std::fixed
                          << std::setprecision(2) << ev.recall.sum_r << "\n";
            }
        }
    }
    if (res.best_epoch < 0) res.best_params = params;  // diverged before any eval
    return res;
}

}  // namespace prvr
