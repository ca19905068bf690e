#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <unistd.h>

#include "prvr/dataset.hpp"
#include "prvr/retrieval.hpp"
#include "prvr/rng.hpp"

using namespace prvr;
namespace fs = std::filesystem;

namespace {

RetrievalIndex toy_index(size_t n_videos, size_t d, uint64_t seed) {
    Rng rng(seed);
    RetrievalIndex index;
    for (size_t v = 0; v < n_videos; ++v) {
        IndexEntry e;
        char buf[16];
        std::snprintf(buf, sizeof(buf), "v%03zu", v);
        e.video_id = buf;
        auto mat = [&](size_t rows) {
            std::vector<double> data(rows * d);
            for (auto& x : data) x = rng.next_gaussian();
            return normalize_rows(Tensor::matrix(rows, d, std::move(data)));
        };
        e.frames_unit = mat(6);
        e.clips_unit = mat(3);
        e.clip_sizes = {2, 2, 2};
        index.entries.push_back(std::move(e));
    }
    return index;
}

}  // namespace

TEST_CASE("score fuses the branch maxima with the configured weights") {
    // Unit query at 60 degrees: cos with (0,1) is 0.5, cos with itself is 1.
    std::vector<double> q{std::sqrt(3.0) / 2.0, 0.5};
    IndexEntry e;
    e.video_id = "v";
    e.frames_unit = Tensor::matrix(1, 2, {0, 1});  // best frame sim 0.5
    e.clips_unit = Tensor::matrix(1, 2, q);        // best clip sim 1.0
    CHECK(score(q, e, 0.6, 0.4) == doctest::Approx(0.7));
    CHECK(score(q, e, 1.0, 0.0) == doctest::Approx(0.5));  // clips ignored entirely

    // A query matching both a frame and a clip token exactly scores 1.
    e.frames_unit = Tensor::matrix(1, 2, q);
    CHECK(score(q, e, 0.6, 0.4) == doctest::Approx(1.0));
}

TEST_CASE("rank breaks ties by video id and is insensitive to monotone rescaling") {
    RetrievalIndex index = toy_index(8, 4, 3);
    Rng rng(5);
    std::vector<double> q(4);
    for (auto& v : q) v = rng.next_gaussian();
    Tensor query = Tensor::vec(q);

    Ranking r1 = rank("q", query, index);
    CHECK(r1.video_ids.size() == 8);
    for (size_t i = 1; i < r1.scores.size(); ++i) {
        CHECK(r1.scores[i - 1] >= r1.scores[i]);
        if (r1.scores[i - 1] == r1.scores[i]) {
            CHECK(r1.video_ids[i - 1] < r1.video_ids[i]);
        }
    }
    // Scaling the query leaves cosine order unchanged.
    Ranking r2 = rank("q", scale(query, 17.0), index);
    CHECK(r1.video_ids == r2.video_ids);
}

TEST_CASE("recall hand case: ranks 1, 3, 12") {
    RetrievalIndex index = toy_index(12, 4, 7);
    // Build rankings directly with ground truth planted at known positions.
    auto make_ranking = [&](const std::string& qid, int gt_pos, const std::string& gt) {
        Ranking r;
        r.query_id = qid;
        for (size_t i = 0; i < index.entries.size(); ++i) {
            r.video_ids.push_back(index.entries[i].video_id);
        }
        // move gt video to position gt_pos (1-based)
        auto it = std::find(r.video_ids.begin(), r.video_ids.end(), gt);
        std::string v = *it;
        r.video_ids.erase(it);
        r.video_ids.insert(r.video_ids.begin() + (gt_pos - 1), v);
        r.scores.assign(12, 0.0);
        return r;
    };
    std::vector<Ranking> rankings{make_ranking("q1", 1, "v000"), make_ranking("q2", 3, "v001"),
                                  make_ranking("q3", 12, "v002")};
    std::map<std::string, std::string> gt{{"q1", "v000"}, {"q2", "v001"}, {"q3", "v002"}};
    RecallReport rep = recall_at(rankings, gt, {1, 5, 10, 100});
    CHECK(rep.r_at[0] == doctest::Approx(33.3333).epsilon(1e-4));
    CHECK(rep.r_at[1] == doctest::Approx(66.6667).epsilon(1e-4));
    CHECK(rep.r_at[2] == doctest::Approx(66.6667).epsilon(1e-4));
    CHECK(rep.r_at[3] == doctest::Approx(100.0));
    CHECK(rep.sum_r == doctest::Approx(266.6667).epsilon(1e-4));
    // Q=100 exceeds the 12-entry index: flagged as saturated.
    CHECK(rep.saturated == std::vector<int>{100});
}

TEST_CASE("recall extremes") {
    RetrievalIndex index = toy_index(5, 4, 9);
    Ranking top;
    top.query_id = "q";
    for (const auto& e : index.entries) top.video_ids.push_back(e.video_id);
    top.scores.assign(5, 0.0);
    std::map<std::string, std::string> gt{{"q", top.video_ids[0]}};
    RecallReport all_first = recall_at({top}, gt, {1, 5, 10, 100});
    CHECK(all_first.sum_r == doctest::Approx(400.0));

    std::map<std::string, std::string> gt_last{{"q", top.video_ids[4]}};
    RecallReport r = recall_at({top}, gt_last, {1});
    CHECK(r.sum_r == doctest::Approx(0.0));

    CHECK_THROWS_AS(recall_at({top}, {{"q", "unknown"}}, {1}), std::invalid_argument);
}

TEST_CASE("R@Q is nondecreasing in Q and bounded") {
    Rng rng(11);
    RetrievalIndex index = toy_index(20, 4, 13);
    std::vector<Ranking> rankings;
    std::map<std::string, std::string> gt;
    for (int qi = 0; qi < 15; ++qi) {
        std::vector<double> q(4);
        for (auto& v : q) v = rng.next_gaussian();
        std::string qid = "q" + std::to_string(qi);
        rankings.push_back(rank(qid, Tensor::vec(q), index));
        gt[qid] = index.entries[rng.next_below(20)].video_id;
    }
    RecallReport rep = recall_at(rankings, gt, {1, 2, 5, 10, 20});
    for (size_t i = 0; i < rep.r_at.size(); ++i) {
        CHECK(rep.r_at[i] >= 0.0);
        CHECK(rep.r_at[i] <= 100.0);
        if (i) CHECK(rep.r_at[i] >= rep.r_at[i - 1]);
    }
    CHECK(rep.sum_r <= 100.0 * static_cast<double>(rep.qs.size()));
}

TEST_CASE("index round trip through the section container is bit-exact") {
    RetrievalIndex index = toy_index(4, 6, 17);
    fs::path tmp = fs::temp_directory_path() /
                   ("prvr_idx_" + std::to_string(::getpid()) + ".prvs");
    save_index(index, tmp.string());
    RetrievalIndex back = load_index(tmp.string());
    fs::remove(tmp);
    REQUIRE(back.entries.size() == index.entries.size());
    CHECK(back.w_frame == index.w_frame);
    for (size_t v = 0; v < index.entries.size(); ++v) {
        CHECK(back.entries[v].video_id == index.entries[v].video_id);
        CHECK(back.entries[v].frames_unit.data() == index.entries[v].frames_unit.data());
        CHECK(back.entries[v].clips_unit.data() == index.entries[v].clips_unit.data());
        CHECK(back.entries[v].clip_sizes == index.entries[v].clip_sizes);
    }
}

TEST_CASE("build_index over synthetic videos has the contracted shapes") {
    SynthConfig cfg;
    cfg.n_videos = 3;
    cfg.frames_per_video = 40;
    cfg.events_min = cfg.events_max = 2;
    cfg.d_v = cfg.d_q = 8;
    Dataset ds = gen_synthetic(cfg);
    Rng rng(19);
    EncoderConfig ecfg;
    ecfg.d_q = 8;
    ecfg.d_v = 8;
    ecfg.d = 12;
    ecfg.max_frames = 40;
    ecfg.max_clips = 16;
    EncoderParams params = EncoderParams::init(ecfg, rng);
    MergeConfig merge;
    merge.target_clips = 16;
    merge.c_min = 5;
    RetrievalIndex index = build_index(ds.videos, params, merge, 0.6, 0.4);
    REQUIRE(index.entries.size() == 3);
    CHECK(index.entries[0].frames_unit.shape() == std::vector<size_t>{40, 12});
    CHECK(index.entries[0].clips_unit.shape() == std::vector<size_t>{16, 12});
    CHECK_THROWS_AS(build_index({}, params, merge, 0.6, 0.4), std::invalid_argument);
}
