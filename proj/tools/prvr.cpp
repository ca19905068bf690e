/**
 * prvr — desk-scale lab for partially relevant video retrieval.
 *
 * Subcommands: gen-synth, train, eval, merge, analyze, bench, sweep-tau.
 * Exit codes: 0 success, 1 validation error, 2 missing input, 3 runtime failure.
 */

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "prvr/analysis.hpp"
#include "prvr/config.hpp"
#include "prvr/features_io.hpp"
#include "prvr/trainer.hpp"

namespace fs = std::filesystem;
using namespace prvr;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitMissingInput = 2;
constexpr int kExitRuntime = 3;

struct MissingInput : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void require_file(const std::string& path, const char* what) {
    if (!fs::exists(path)) {
        throw MissingInput(std::string(what) + " not found: " + path);
    }
}

RunConfig resolve_config(const std::string& config_path, const std::vector<std::string>& sets,
                         std::optional<uint64_t> seed, std::optional<double> tau,
                         const std::string& mode) {
    std::string text = "{}";
    if (!config_path.empty()) {
        require_file(config_path, "config");
        std::ifstream is(config_path);
        std::ostringstream buf;
        buf << is.rdbuf();
        text = buf.str();
    }
    for (const auto& s : sets) text = apply_override(text, s);
    if (seed) text = apply_override(text, "seed=" + std::to_string(*seed));
    if (tau) text = apply_override(text, "merge.tau=" + std::to_string(*tau));
    if (!mode.empty()) text = apply_override(text, "merge.mode=" + mode);
    return parse_config(text);
}

void write_text(const std::string& path, const std::string& text) {
    fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os << text;
}

std::string recall_csv(const RecallReport& rep) {
    std::ostringstream os;
    os << "metric,value,saturated\n" << std::fixed << std::setprecision(4);
    for (size_t i = 0; i < rep.qs.size(); ++i) {
        bool sat = std::find(rep.saturated.begin(), rep.saturated.end(), rep.qs[i]) !=
                   rep.saturated.end();
        os << "R@" << rep.qs[i] << "," << rep.r_at[i] << "," << (sat ? "yes" : "no") << "\n";
    }
    os << "SumR," << rep.sum_r << ",no\n";
    return os.str();
}

std::string ranks_csv(const std::map<std::string, int>& gt_ranks) {
    std::ostringstream os;
    os << "query_id,gt_rank\n";
    for (const auto& [q, r] : gt_ranks) os << q << "," << r << "\n";
    return os.str();
}

std::map<std::string, int> load_ranks_csv(const std::string& path) {
    require_file(path, "ranks csv");
    std::ifstream is(path);
    std::string line;
    std::map<std::string, int> out;
    bool header = true;
    while (std::getline(is, line)) {
        if (header) {
            header = false;
            continue;
        }
        if (line.empty()) continue;
        auto comma = line.rfind(',');
        if (comma == std::string::npos) throw std::runtime_error(path + ": malformed row: " + line);
        out[line.substr(0, comma)] = std::stoi(line.substr(comma + 1));
    }
    return out;
}

// ---------------------------------------------------------------------------

int cmd_gen_synth(const RunConfig& cfg, const std::string& out_dir) {
    SynthConfig synth = cfg.synth;
    synth.seed = cfg.seed;
    synth.split = "train";
    Dataset train_ds = gen_synthetic(synth);
    synth.split = "eval";
    Dataset eval_ds = gen_synthetic(synth);
    std::string train_manifest = save_dataset(train_ds, out_dir, "manifest_train.json");
    std::string eval_manifest = save_dataset(eval_ds, out_dir, "manifest_eval.json");
    std::cout << "wrote " << train_manifest << " (" << train_ds.videos.size() << " videos, "
              << train_ds.queries.size() << " queries)\n";
    std::cout << "wrote " << eval_manifest << " (" << eval_ds.queries.size() << " queries)\n";
    return kExitOk;
}

int cmd_train(const RunConfig& cfg, const std::string& train_manifest,
              const std::string& eval_manifest, const std::string& out_dir) {
    require_file(train_manifest, "train manifest");
    require_file(eval_manifest, "eval manifest");
    Dataset train_ds = load_manifest(train_manifest);
    Dataset eval_ds = load_manifest(eval_manifest);
    fs::create_directories(out_dir);

    TrainResult res = train(cfg, train_ds, eval_ds, &std::cout);

    std::ostringstream loss_csv;
    for (const auto& line : res.loss_csv) loss_csv << line << "\n";
    write_text((fs::path(out_dir) / "loss.csv").string(), loss_csv.str());

    std::ostringstream eval_csv;
    eval_csv << "epoch,sum_r\n" << std::fixed << std::setprecision(4);
    for (const auto& [epoch, sumr] : res.eval_history) eval_csv << epoch << "," << sumr << "\n";
    write_text((fs::path(out_dir) / "eval_history.csv").string(), eval_csv.str());

    write_text((fs::path(out_dir) / "run_manifest.json").string(), config_to_json(cfg) + "\n");
    save_checkpoint(res.best_params, (fs::path(out_dir) / "checkpoint.prvs").string());

    if (res.diverged) {
        std::cerr << "training diverged; last finite step " << res.last_finite_step << "\n";
        return kExitRuntime;
    }
    std::cout << "best SumR " << std::fixed << std::setprecision(2) << res.best_sum_r
              << " at epoch " << res.best_epoch << "\n";
    return kExitOk;
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint, const std::string& manifest,
             const std::string& out_dir) {
    require_file(checkpoint, "checkpoint");
    require_file(manifest, "manifest");
    EncoderParams params = load_checkpoint(checkpoint);
    Dataset ds = load_manifest(manifest);
    EvalOutput ev = evaluate(params, ds, cfg.merge, cfg.retrieval);
    fs::create_directories(out_dir);
    write_text((fs::path(out_dir) / "recall.csv").string(), recall_csv(ev.recall));
    write_text((fs::path(out_dir) / "gt_ranks.csv").string(), ranks_csv(ev.gt_ranks));
    std::cout << recall_csv(ev.recall);
    return kExitOk;
}

int cmd_merge(const std::string& input, int rate, int target) {
    require_file(input, "feature file");
    Tensor frames = load_features(input);
    ClipSchedule schedule = clip_schedule(static_cast<int>(frames.rows()), rate, target);
    std::cout << "lengths:";
    for (size_t i = 0; i < schedule.levels.size(); ++i) {
        std::cout << (i ? " -> " : " ") << schedule.levels[i];
    }
    std::cout << "\n";
    SizedTokenSeq clips = op_tome(frames, rate, target);
    std::cout << "clips: " << clips.length() << "\n";
    for (size_t i = 0; i < clips.length(); ++i) {
        std::cout << "clip " << i << ": frames [" << clips.provenance[i].front() << ", "
                  << clips.provenance[i].back() << "], size " << clips.sizes[i] << "\n";
    }
    return kExitOk;
}

int cmd_analyze(const RunConfig& cfg, const std::string& checkpoint, const std::string& manifest,
                const std::string& out_dir, const std::string& confusion_a,
                const std::string& confusion_b, int confusion_q) {
    fs::create_directories(out_dir);

    if (!confusion_a.empty() || !confusion_b.empty()) {
        auto ra = load_ranks_csv(confusion_a);
        auto rb = load_ranks_csv(confusion_b);
        ConfusionCounts c = ranker_confusion(ra, rb, confusion_q);
        std::ostringstream os;
        os << "outcome,count,percent\n" << std::fixed << std::setprecision(2);
        double n = static_cast<double>(c.total());
        os << "both," << c.both << "," << 100.0 * c.both / n << "\n";
        os << "a_only," << c.a_only << "," << 100.0 * c.a_only / n << "\n";
        os << "b_only," << c.b_only << "," << 100.0 * c.b_only / n << "\n";
        os << "neither," << c.neither << "," << 100.0 * c.neither / n << "\n";
        write_text((fs::path(out_dir) / "confusion.csv").string(), os.str());
        std::cout << os.str();
        return kExitOk;
    }

    require_file(checkpoint, "checkpoint");
    require_file(manifest, "manifest");
    EncoderParams params = load_checkpoint(checkpoint);
    Dataset ds = load_manifest(manifest);

    // Text instances: pooled query embeddings. Video instances: encoded clip
    // tokens, grouped by owning video.
    std::vector<Tensor> pooled_rows;
    std::vector<std::string> text_owner;
    std::vector<double> teacher_data;
    for (const auto& q : ds.queries) {
        EncodedText enc = encode_text(q.words, params);
        pooled_rows.push_back(reshape(enc.pooled, {1, enc.pooled.numel()}));
        text_owner.push_back(q.video_id);
        teacher_data.insert(teacher_data.end(), q.teacher_eos.data().begin(),
                            q.teacher_eos.data().end());
    }
    Tensor t_pooled = concat_rows(pooled_rows);
    size_t d_clip = teacher_data.size() / ds.queries.size();
    Tensor teacher = Tensor::matrix(ds.queries.size(), d_clip, std::move(teacher_data));

    std::vector<Tensor> clip_rows;
    std::vector<std::string> video_owner;
    for (const auto& v : ds.videos) {
        SizedTokenSeq clips = op_tome(v.frames, cfg.merge.rate, cfg.merge.target_clips);
        Tensor enc = encode_clips(clips, params);
        clip_rows.push_back(enc);
        for (size_t i = 0; i < enc.rows(); ++i) video_owner.push_back(v.video_id);
    }
    Tensor v_clips = concat_rows(clip_rows);

    CollapseReport text_rep = collapse_metrics(t_pooled, text_owner);
    CollapseReport video_rep = collapse_metrics(v_clips, video_owner);
    SpearmanReport sp = spearman_vs_teacher(t_pooled, teacher);

    std::ostringstream os;
    os << "modality,intra_sim,total_sim,diff_norm\n" << std::fixed << std::setprecision(6);
    os << "text," << text_rep.intra_sim << "," << text_rep.total_sim << ","
       << text_rep.diff_norm << "\n";
    os << "video," << video_rep.intra_sim << "," << video_rep.total_sim << ","
       << video_rep.diff_norm << "\n";
    write_text((fs::path(out_dir) / "collapse.csv").string(), os.str());

    std::ostringstream sps;
    sps << "spearman_x100,anchors_used,anchors_skipped\n"
        << std::fixed << std::setprecision(4) << sp.rho_times_100 << "," << sp.anchors_used
        << "," << sp.anchors_skipped << "\n";
    write_text((fs::path(out_dir) / "spearman.csv").string(), sps.str());
    std::cout << os.str() << sps.str();

    // Desk-scale zero-shot comparison: when teacher and video features share a
    // dimension, the teacher embedding ranks videos by max-over-frames cosine.
    if (ds.d_q == ds.d_v && !ds.videos.empty()) {
        RetrievalIndex raw_index;
        raw_index.w_frame = 1.0;
        raw_index.w_clip = 0.0;
        for (const auto& v : ds.videos) {
            IndexEntry e;
            e.video_id = v.video_id;
            e.frames_unit = normalize_rows(v.frames);
            e.clips_unit = e.frames_unit;
            raw_index.entries.push_back(std::move(e));
        }
        EvalOutput model_ev = evaluate(params, ds, cfg.merge, cfg.retrieval);
        std::map<std::string, int> teacher_ranks;
        for (const auto& q : ds.queries) {
            Ranking r = rank(q.query_id, q.teacher_eos, raw_index);
            teacher_ranks[q.query_id] = r.rank_of(q.video_id);
        }
        ConfusionCounts c = ranker_confusion(model_ev.gt_ranks, teacher_ranks, confusion_q);
        std::ostringstream cs;
        cs << "outcome,count,percent\n" << std::fixed << std::setprecision(2);
        double n = static_cast<double>(c.total());
        cs << "both," << c.both << "," << 100.0 * c.both / n << "\n";
        cs << "model_only," << c.a_only << "," << 100.0 * c.a_only / n << "\n";
        cs << "teacher_only," << c.b_only << "," << 100.0 * c.b_only / n << "\n";
        cs << "neither," << c.neither << "," << 100.0 * c.neither / n << "\n";
        write_text((fs::path(out_dir) / "confusion_vs_teacher.csv").string(), cs.str());
        std::cout << cs.str();
    }
    return kExitOk;
}

int cmd_bench(const RunConfig& cfg, const std::string& checkpoint, const std::string& manifest,
              const std::vector<size_t>& sizes, int runs, const std::string& out_csv) {
    require_file(checkpoint, "checkpoint");
    require_file(manifest, "manifest");
    EncoderParams params = load_checkpoint(checkpoint);
    Dataset ds = load_manifest(manifest);
    RetrievalIndex index = build_index(ds.videos, params, cfg.merge, cfg.retrieval.w_frame,
                                       cfg.retrieval.w_clip);
    std::vector<Tensor> queries;
    for (const auto& q : ds.queries) queries.push_back(encode_text(q.words, params).pooled);
    std::vector<BenchRow> rows = bench(index, queries, sizes, runs);
    std::ostringstream os;
    os << "size,time_ms,memory_mb\n" << std::fixed << std::setprecision(4);
    for (const auto& r : rows) {
        os << r.db_size << "," << r.mean_latency_ms << "," << r.peak_memory_mb << "\n";
    }
    write_text(out_csv, os.str());
    std::cout << os.str();
    return kExitOk;
}

int cmd_sweep_tau(const RunConfig& cfg, const std::string& checkpoint,
                  const std::string& manifest, const std::vector<double>& taus,
                  const std::string& out_csv) {
    require_file(checkpoint, "checkpoint");
    require_file(manifest, "manifest");
    EncoderParams params = load_checkpoint(checkpoint);
    Dataset ds = load_manifest(manifest);
    std::ostringstream os;
    os << "tau";
    for (int q : cfg.retrieval.recall_qs) os << ",R@" << q;
    os << ",SumR\n" << std::fixed << std::setprecision(4);
    for (double tau : taus) {
        MergeConfig merge = cfg.merge;
        merge.tau = tau;
        merge.adaptive_index = true;  // tau matters through adaptive clip selection
        EvalOutput ev = evaluate(params, ds, merge, cfg.retrieval);
        os << tau;
        for (double r : ev.recall.r_at) os << "," << r;
        os << "," << ev.recall.sum_r << "\n";
    }
    write_text(out_csv, os.str());
    std::cout << os.str();
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale lab for partially relevant video retrieval"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "out";
    std::vector<std::string> sets;
    std::optional<uint64_t> seed;
    std::optional<double> tau;
    std::string mode;
    app.add_option("--config", config_path, "config JSON path");
    app.add_option("--seed", seed, "override the run seed");
    app.add_option("--out", out_dir, "output directory");
    app.add_option("--tau", tau, "override merge.tau");
    app.add_option("--mode", mode, "adaptive depth mode (literal|monotone)")
        ->check(CLI::IsMember({"literal", "monotone", ""}));
    app.add_option("--set", sets, "dotted-key config override, e.g. loss.lambda_e=10");

    auto* gen = app.add_subcommand("gen-synth", "generate a synthetic dataset");

    auto* tr = app.add_subcommand("train", "train on a dataset");
    std::string train_manifest, eval_manifest;
    tr->add_option("--train", train_manifest, "train manifest")->required();
    tr->add_option("--eval", eval_manifest, "eval manifest")->required();

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string checkpoint, manifest;
    ev->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
    ev->add_option("--manifest", manifest, "manifest path")->required();

    auto* mg = app.add_subcommand("merge", "inspect order-preserving merging of a feature file");
    std::string merge_input;
    int merge_rate = 75, merge_target = 32;
    mg->add_option("--input", merge_input, "feature file (.prvf)")->required();
    mg->add_option("--rate", merge_rate, "merge rate percent");
    mg->add_option("--target", merge_target, "target clip count");

    auto* an = app.add_subcommand("analyze", "collapse/rank diagnostics for a checkpoint");
    std::string an_checkpoint, an_manifest, confusion_a, confusion_b;
    int confusion_q = 10;
    an->add_option("--checkpoint", an_checkpoint, "checkpoint path");
    an->add_option("--manifest", an_manifest, "manifest path");
    an->add_option("--confusion-a", confusion_a, "gt_ranks.csv of ranker A");
    an->add_option("--confusion-b", confusion_b, "gt_ranks.csv of ranker B");
    an->add_option("--q", confusion_q, "success threshold Q for the outcome matrix");

    auto* be = app.add_subcommand("bench", "query latency/memory across database sizes");
    std::string be_checkpoint, be_manifest, be_out;
    std::vector<size_t> be_sizes;
    int be_runs = 5;
    be->add_option("--checkpoint", be_checkpoint, "checkpoint path")->required();
    be->add_option("--manifest", be_manifest, "manifest path")->required();
    be->add_option("--sizes", be_sizes, "database sizes")->required();
    be->add_option("--runs", be_runs, "averaging runs (>= 5 recommended)");
    be->add_option("--out-csv", be_out, "output CSV path (default <out>/bench.csv)");

    auto* sw = app.add_subcommand("sweep-tau", "re-run adaptive selection + eval over tau values");
    std::string sw_checkpoint, sw_manifest, sw_out;
    std::vector<double> sw_taus;
    sw->add_option("--checkpoint", sw_checkpoint, "checkpoint path")->required();
    sw->add_option("--manifest", sw_manifest, "manifest path")->required();
    sw->add_option("taus", sw_taus, "tau values")->required();
    sw->add_option("--out-csv", sw_out, "output CSV path (default <out>/sweep_tau.csv)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? kExitOk : kExitValidation;
    }

    try {
        RunConfig cfg = resolve_config(config_path, sets, seed, tau, mode);
        if (gen->parsed()) return cmd_gen_synth(cfg, out_dir);
        if (tr->parsed()) return cmd_train(cfg, train_manifest, eval_manifest, out_dir);
        if (ev->parsed()) return cmd_eval(cfg, checkpoint, manifest, out_dir);
        if (mg->parsed()) return cmd_merge(merge_input, merge_rate, merge_target);
        if (an->parsed())
            return cmd_analyze(cfg, an_checkpoint, an_manifest, out_dir, confusion_a,
                               confusion_b, confusion_q);
        if (be->parsed()) {
            if (be_out.empty()) be_out = (fs::path(out_dir) / "bench.csv").string();
            return cmd_bench(cfg, be_checkpoint, be_manifest, be_sizes, be_runs, be_out);
        }
        if (sw->parsed()) {
            if (sw_out.empty()) sw_out = (fs::path(out_dir) / "sweep_tau.csv").string();
            return cmd_sweep_tau(cfg, sw_checkpoint, sw_manifest, sw_taus, sw_out);
        }
        std::cerr << "no subcommand given\n";
        return kExitValidation;
    } catch (const MissingInput& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitMissingInput;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitMissingInput;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}
