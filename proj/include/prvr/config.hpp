#pragma once

/**
 * @file config.hpp
 * @brief Run configuration: one JSON document, validated on load (unknown
 *        keys rejected), every field overridable via dotted keys.
 */

#include <string>
#include <vector>

#include "prvr/dataset.hpp"
#include "prvr/encoders.hpp"
#include "prvr/objectives.hpp"
#include "prvr/retrieval.hpp"

namespace prvr {

struct TrainOptions {
    int epochs = 20;
    int batch_size = 32;
    double lr = 2.5e-4;
    int eval_every = 1;
};

struct RetrievalOptions {
    double w_frame = 0.6;
    double w_clip = 0.4;
    std::vector<int> recall_qs{1, 5, 10, 100};
};

struct RunConfig {
    uint64_t seed = 7;
    SynthConfig synth;
    EncoderConfig encoder;  // d_q/d_v are taken from the dataset at run time
    MergeConfig merge;
    LossWeights loss;
    TrainOptions train;
    RetrievalOptions retrieval;

    void validate() const;
};

/// Parses a config JSON document; any unknown key is an error.
RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::string& path);

/// Applies a `dotted.key=value` override onto the serialized form.
std::string apply_override(const std::string& json_text, const std::string& assignment);

/// Canonical serialization (also the run-manifest echo).
std::string config_to_json(const RunConfig& cfg);

}  // namespace prvr
