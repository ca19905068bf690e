#include <doctest.h>

#include <filesystem>
#include <unistd.h>

#include "prvr/trainer.hpp"

using namespace prvr;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_run_config() {
    RunConfig cfg;
    cfg.seed = 11;
    cfg.synth.n_videos = 6;
    cfg.synth.frames_per_video = 24;
    cfg.synth.events_min = cfg.synth.events_max = 2;
    cfg.synth.queries_per_video = 2;
    cfg.synth.d_v = cfg.synth.d_q = 12;
    cfg.synth.noise_std = 0.3;
    cfg.synth.seed = cfg.seed;
    cfg.encoder.d = 16;
    cfg.encoder.blocks = 1;
    cfg.merge.target_clips = 8;
    cfg.merge.c_min = 3;
    cfg.loss.angle_triple_budget = 500;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 6;
    cfg.train.lr = 1e-3;
    return cfg;
}

std::pair<Dataset, Dataset> tiny_datasets(const RunConfig& cfg) {
    SynthConfig s = cfg.synth;
    s.split = "train";
    Dataset train = gen_synthetic(s);
    s.split = "eval";
    Dataset eval = gen_synthetic(s);
    return {train, eval};
}

}  // namespace

TEST_CASE("training is deterministic: same seed, same loss CSV") {
    RunConfig cfg = tiny_run_config();
    auto [train_ds, eval_ds] = tiny_datasets(cfg);
    TrainResult a = train(cfg, train_ds, eval_ds, nullptr);
    TrainResult b = train(cfg, train_ds, eval_ds, nullptr);
    CHECK(a.loss_csv == b.loss_csv);
    CHECK(a.best_sum_r == b.best_sum_r);
    CHECK_FALSE(a.diverged);
    CHECK(a.steps_run > 0);
}

TEST_CASE("a short synthetic run lowers the training loss") {
    RunConfig cfg = tiny_run_config();
    cfg.train.epochs = 12;
    auto [train_ds, eval_ds] = tiny_datasets(cfg);
    TrainResult res = train(cfg, train_ds, eval_ds, nullptr);
    REQUIRE(res.loss_csv.size() > 2);
    auto total_of = [](const std::string& row) {
        auto pos = row.rfind(',');
        return std::stod(row.substr(pos + 1));
    };
    double first = total_of(res.loss_csv[1]);
    double last = total_of(res.loss_csv.back());
    INFO("first ", first, " last ", last);
    CHECK(last < first);
    // Eval history exists and the best checkpoint tracks its maximum.
    REQUIRE(!res.eval_history.empty());
    double best = -1;
    for (const auto& [_, sumr] : res.eval_history) best = std::max(best, sumr);
    CHECK(res.best_sum_r == doctest::Approx(best));
}

TEST_CASE("checkpoints round trip bit-exactly") {
    RunConfig cfg = tiny_run_config();
    auto [train_ds, eval_ds] = tiny_datasets(cfg);
    TrainResult res = train(cfg, train_ds, eval_ds, nullptr);

    fs::path tmp = fs::temp_directory_path() /
                   ("prvr_ckpt_" + std::to_string(::getpid()) + ".prvs");
    save_checkpoint(res.best_params, tmp.string());
    EncoderParams back = load_checkpoint(tmp.string());
    fs::remove(tmp);

    bool equal = true;
    std::vector<std::pair<std::string, const Tensor*>> orig;
    res.best_params.for_each(
        [&](const std::string& name, const Tensor& t) { orig.emplace_back(name, &t); });
    size_t idx = 0;
    back.for_each([&](const std::string& name, Tensor& t) {
        REQUIRE(orig[idx].first == name);
        if (t.data() != orig[idx].second->data()) equal = false;
        ++idx;
    });
    CHECK(equal);

    // Rebuilding the evaluation from the reloaded params is bit-identical.
    EvalOutput e1 = evaluate(res.best_params, eval_ds, cfg.merge, cfg.retrieval);
    EvalOutput e2 = evaluate(back, eval_ds, cfg.merge, cfg.retrieval);
    CHECK(e1.recall.sum_r == e2.recall.sum_r);
    CHECK(e1.gt_ranks == e2.gt_ranks);
}

TEST_CASE("training separates single-event videos in the frame encoder") {
    // Low-noise single-event videos: after a short run, frame encodings of
    // one video should be mutually closer than encodings across videos.
    RunConfig cfg = tiny_run_config();
    cfg.synth.events_min = cfg.synth.events_max = 1;
    cfg.synth.noise_std = 0.05;
    cfg.synth.n_videos = 4;
    cfg.synth.queries_per_video = 3;
    cfg.train.epochs = 8;
    auto [train_ds, eval_ds] = tiny_datasets(cfg);
    TrainResult res = train(cfg, train_ds, eval_ds, nullptr);

    auto rows_unit = [](const Tensor& m) { return normalize_rows(m); };
    Tensor a = rows_unit(encode_frames(train_ds.videos[0].frames, res.best_params));
    Tensor b = rows_unit(encode_frames(train_ds.videos[1].frames, res.best_params));
    auto pair_cos = [](const Tensor& x, const Tensor& y, size_t i, size_t j) {
        double acc = 0;
        for (size_t k = 0; k < x.cols(); ++k) acc += x.at(i, k) * y.at(j, k);
        return acc;
    };
    double min_within = 2.0, max_cross = -2.0;
    for (size_t i = 0; i < a.rows(); ++i) {
        for (size_t j = 0; j < a.rows(); ++j) {
            if (i != j) min_within = std::min(min_within, pair_cos(a, a, i, j));
            max_cross = std::max(max_cross, pair_cos(a, b, i, j));
        }
    }
    INFO("min within ", min_within, " max cross ", max_cross);
    CHECK(min_within > max_cross);
}

TEST_CASE("loss CSV has the documented column layout") {
    RunConfig cfg = tiny_run_config();
    cfg.train.epochs = 1;
    auto [train_ds, eval_ds] = tiny_datasets(cfg);
    TrainResult res = train(cfg, train_ds, eval_ds, nullptr);
    REQUIRE(!res.loss_csv.empty());
    CHECK(res.loss_csv[0] == "step,base,tcpl_e,tcpl_a,cbva,total");
    // Every row has six comma-separated fields.
    for (size_t i = 1; i < res.loss_csv.size(); ++i) {
        CHECK(std::count(res.loss_csv[i].begin(), res.loss_csv[i].end(), ',') == 5);
    }
}
