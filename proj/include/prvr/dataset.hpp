#pragma once

/**
 * @file dataset.hpp
 * @brief Video/query records, manifest loading, and the synthetic generator.
 */

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "prvr/tensor.hpp"

namespace prvr {

struct VideoRecord {
    std::string video_id;
    Tensor frames;  // [L_f x d_v]
};

struct QueryRecord {
    std::string query_id;
    std::string video_id;
    Tensor words;        // [L_q x d_q], first row is the start token, last the end token
    Tensor teacher_eos;  // [d_clip] frozen teacher embedding
    std::optional<std::pair<int, int>> gt_span;  // half-open frame range of the target event
};

struct Dataset {
    std::vector<VideoRecord> videos;
    std::vector<QueryRecord> queries;
    std::string split;  // "train" or "eval"
    size_t d_v = 0;
    size_t d_q = 0;

    const VideoRecord& video_by_id(const std::string& id) const;
    int video_index(const std::string& id) const;  // -1 when absent
    void validate() const;

private:
    mutable std::unordered_map<std::string, int> index_;
    void build_index() const;
};

/// Reads a JSON manifest and all feature files it references.
Dataset load_manifest(const std::string& path);

/// Writes feature files plus the manifest under `dir`; returns manifest path.
std::string save_dataset(const Dataset& ds, const std::string& dir,
                         const std::string& manifest_name);

struct SynthConfig {
    int n_videos = 8;
    int frames_per_video = 64;
    int events_min = 2;       // events per video, sampled in [events_min, events_max]
    int events_max = 2;
    int queries_per_video = 3;
    int words_per_query = 6;  // includes the start/end rows
    int d_v = 32;
    int d_q = 32;
    double noise_std = 0.1;
    uint64_t seed = 7;
    std::string split = "train";  // keys the query noise stream; videos depend only on seed
};

/**
 * Plants `events` near-orthogonal prototypes per video: frames are contiguous
 * noisy segments around each prototype, and every query (word rows and its
 * teacher embedding) is a noisy copy of one prototype of its paired video.
 * Pure function of the config. Datasets generated with the same seed but a
 * different split share videos and differ only in query noise draws.
 */
Dataset gen_synthetic(const SynthConfig& cfg);

}  // namespace prvr
