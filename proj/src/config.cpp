#include "prvr/config.hpp"

#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>

using nlohmann::json;

namespace prvr {

namespace {

void reject_unknown(const json& obj, const std::set<std::string>& known,
                    const std::string& where) {
    for (const auto& [key, _] : obj.items()) {
        if (!known.count(key)) {
            throw std::invalid_argument("config: unknown key '" + where + key + "'");
        }
    }
}

template <typename T>
void maybe(const json& obj, const char* key, T& out) {
    if (obj.contains(key)) out = obj.at(key).get<T>();
}

}  // namespace

void RunConfig::validate() const {
    loss.validate();
    if (train.epochs < 1 || train.batch_size < 2) {
        throw std::invalid_argument("config: epochs must be >= 1 and batch_size >= 2");
    }
    if (train.lr <= 0) throw std::invalid_argument("config: lr must be > 0");
    if (train.eval_every < 1) throw std::invalid_argument("config: eval_every must be >= 1");
    if (retrieval.w_frame < 0 || retrieval.w_clip < 0 ||
        std::abs(retrieval.w_frame + retrieval.w_clip - 1.0) > 1e-9) {
        throw std::invalid_argument("config: fusion weights must be >= 0 and sum to 1");
    }
    if (retrieval.recall_qs.empty()) {
        throw std::invalid_argument("config: recall_qs must not be empty");
    }
    for (int q : retrieval.recall_qs) {
        if (q < 1) throw std::invalid_argument("config: recall Q values must be >= 1");
    }
    if (merge.rate <= 0 || merge.rate > 100) {
        throw std::invalid_argument("config: merge.rate must be in (0, 100]");
    }
    if (merge.c_min < 1 || merge.target_clips < merge.c_min) {
        throw std::invalid_argument("config: need target_clips >= c_min >= 1");
    }
    if (merge.tau < -1.0 || merge.tau > 1.0) {
        throw std::invalid_argument("config: tau must be in [-1, 1]");
    }
    if (encoder.d < 1 || encoder.blocks < 1 || encoder.mlp_ratio < 1) {
        throw std::invalid_argument("config: encoder dims/blocks must be >= 1");
    }
}

RunConfig parse_config(const std::string& json_text) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("config: invalid JSON: ") + e.what());
    }
    reject_unknown(doc, {"seed", "synth", "encoder", "merge", "loss", "train", "retrieval"}, "");

    RunConfig cfg;
    maybe(doc, "seed", cfg.seed);
    if (doc.contains("synth")) {
        const auto& s = doc["synth"];
        reject_unknown(s,
                       {"n_videos", "frames_per_video", "events_min", "events_max",
                        "queries_per_video", "words_per_query", "d_v", "d_q", "noise_std"},
                       "synth.");
        maybe(s, "n_videos", cfg.synth.n_videos);
        maybe(s, "frames_per_video", cfg.synth.frames_per_video);
        maybe(s, "events_min", cfg.synth.events_min);
        maybe(s, "events_max", cfg.synth.events_max);
        maybe(s, "queries_per_video", cfg.synth.queries_per_video);
        maybe(s, "words_per_query", cfg.synth.words_per_query);
        maybe(s, "d_v", cfg.synth.d_v);
        maybe(s, "d_q", cfg.synth.d_q);
        maybe(s, "noise_std", cfg.synth.noise_std);
    }
    cfg.synth.seed = cfg.seed;
    if (doc.contains("encoder")) {
        const auto& e = doc["encoder"];
        reject_unknown(e, {"d", "blocks", "mlp_ratio", "max_text_len", "max_frames"}, "encoder.");
        maybe(e, "d", cfg.encoder.d);
        maybe(e, "blocks", cfg.encoder.blocks);
        maybe(e, "mlp_ratio", cfg.encoder.mlp_ratio);
        maybe(e, "max_text_len", cfg.encoder.max_text_len);
        maybe(e, "max_frames", cfg.encoder.max_frames);
    }
    if (doc.contains("merge")) {
        const auto& m = doc["merge"];
        reject_unknown(m, {"rate", "target_clips", "c_min", "tau", "mode"}, "merge.");
        maybe(m, "rate", cfg.merge.rate);
        maybe(m, "target_clips", cfg.merge.target_clips);
        maybe(m, "c_min", cfg.merge.c_min);
        maybe(m, "tau", cfg.merge.tau);
        if (m.contains("mode")) {
            cfg.merge.mode = depth_mode_from_string(m["mode"].get<std::string>());
        }
    }
    cfg.encoder.max_clips = cfg.merge.target_clips;
    if (doc.contains("loss")) {
        const auto& l = doc["loss"];
        reject_unknown(l,
                       {"lambda_e", "lambda_a", "lambda_cbva", "nce_temperature",
                        "triplet_margin", "huber_delta", "angle_triple_budget"},
                       "loss.");
        maybe(l, "lambda_e", cfg.loss.lambda_e);
        maybe(l, "lambda_a", cfg.loss.lambda_a);
        maybe(l, "lambda_cbva", cfg.loss.lambda_cbva);
        maybe(l, "nce_temperature", cfg.loss.nce_temperature);
        maybe(l, "triplet_margin", cfg.loss.triplet_margin);
        maybe(l, "huber_delta", cfg.loss.huber_delta);
        maybe(l, "angle_triple_budget", cfg.loss.angle_triple_budget);
    }
    if (doc.contains("train")) {
        const auto& t = doc["train"];
        reject_unknown(t, {"epochs", "batch_size", "lr", "eval_every"}, "train.");
        maybe(t, "epochs", cfg.train.epochs);
        maybe(t, "batch_size", cfg.train.batch_size);
        maybe(t, "lr", cfg.train.lr);
        maybe(t, "eval_every", cfg.train.eval_every);
    }
    if (doc.contains("retrieval")) {
        const auto& r = doc["retrieval"];
        reject_unknown(r, {"w_frame", "w_clip", "recall_qs"}, "retrieval.");
        maybe(r, "w_frame", cfg.retrieval.w_frame);
        maybe(r, "w_clip", cfg.retrieval.w_clip);
        maybe(r, "recall_qs", cfg.retrieval.recall_qs);
    }
    cfg.validate();
    return cfg;
}

RunConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::invalid_argument("config: cannot open '" + path + "'");
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse_config(buf.str());
}

std::string apply_override(const std::string& json_text, const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos) {
        throw std::invalid_argument("override '" + assignment + "' is not of the form key=value");
    }
    std::string path = assignment.substr(0, eq);
    std::string value = assignment.substr(eq + 1);
    json doc = json::parse(json_text);
    json* cursor = &doc;
    size_t start = 0;
    while (true) {
        auto dotpos = path.find('.', start);
        std::string key = path.substr(start, dotpos == std::string::npos ? std::string::npos
                                                                         : dotpos - start);
        if (key.empty()) throw std::invalid_argument("override: empty key in '" + path + "'");
        if (dotpos == std::string::npos) {
            json parsed;
            try {
                parsed = json::parse(value);
            } catch (const json::exception&) {
                parsed = value;  // raw string value
            }
            (*cursor)[key] = parsed;
            break;
        }
        cursor = &(*cursor)[key];
        start = dotpos + 1;
    }
    return doc.dump();
}

std::string config_to_json(const RunConfig& cfg) {
    json doc;
    doc["seed"] = cfg.seed;
    doc["synth"] = {{"n_videos", cfg.synth.n_videos},
                    {"frames_per_video", cfg.synth.frames_per_video},
                    {"events_min", cfg.synth.events_min},
                    {"events_max", cfg.synth.events_max},
                    {"queries_per_video", cfg.synth.queries_per_video},
                    {"words_per_query", cfg.synth.words_per_query},
                    {"d_v", cfg.synth.d_v},
                    {"d_q", cfg.synth.d_q},
                    {"noise_std", cfg.synth.noise_std}};
    doc["encoder"] = {{"d", cfg.encoder.d},
                      {"blocks", cfg.encoder.blocks},
                      {"mlp_ratio", cfg.encoder.mlp_ratio},
                      {"max_text_len", cfg.encoder.max_text_len},
                      {"max_frames", cfg.encoder.max_frames}};
    doc["merge"] = {{"rate", cfg.merge.rate},
                    {"target_clips", cfg.merge.target_clips},
                    {"c_min", cfg.merge.c_min},
                    {"tau", cfg.merge.tau},
                    {"mode", cfg.merge.mode == DepthMode::literal ? "literal" : "monotone"}};
    doc["loss"] = {{"lambda_e", cfg.loss.lambda_e},
                   {"lambda_a", cfg.loss.lambda_a},
                   {"lambda_cbva", cfg.loss.lambda_cbva},
                   {"nce_temperature", cfg.loss.nce_temperature},
                   {"triplet_margin", cfg.loss.triplet_margin},
                   {"huber_delta", cfg.loss.huber_delta},
                   {"angle_triple_budget", cfg.loss.angle_triple_budget}};
    doc["train"] = {{"epochs", cfg.train.epochs},
                    {"batch_size", cfg.train.batch_size},
                    {"lr", cfg.train.lr},
                    {"eval_every", cfg.train.eval_every}};
    doc["retrieval"] = {{"w_frame", cfg.retrieval.w_frame},
                        {"w_clip", cfg.retrieval.w_clip},
                        {"recall_qs", cfg.retrieval.recall_qs}};
    return doc.dump(2);
}

}  // namespace prvr
