#pragma once

/**
 * @file trainer.hpp
 * @brief Adam training loop over the full objective, per-epoch retrieval
 *        evaluation, and checkpointing of the best parameters.
 */

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "prvr/config.hpp"
#include "prvr/dataset.hpp"
#include "prvr/encoders.hpp"
#include "prvr/retrieval.hpp"

namespace prvr {

void save_checkpoint(const EncoderParams& params, const std::string& path);
EncoderParams load_checkpoint(const std::string& path);

struct EvalOutput {
    RecallReport recall;
    std::map<std::string, int> gt_ranks;  // query_id -> rank of its paired video
};

/// Builds an index over the dataset's videos and ranks every query.
EvalOutput evaluate(const EncoderParams& params, const Dataset& ds, const MergeConfig& merge,
                    const RetrievalOptions& retrieval);

struct TrainResult {
    EncoderParams best_params;
    double best_sum_r = -1.0;
    int best_epoch = -1;
    std::vector<std::pair<int, double>> eval_history;  // (epoch, SumR)
    std::vector<std::string> loss_csv;                 // header + one row per step
    int steps_run = 0;
    bool diverged = false;
    int last_finite_step = -1;
    std::vector<std::string> warnings;
};

/// Deterministic given cfg.seed. Aborts (diverged = true) if any step
/// produces a non-finite loss; the CSV then ends at the last finite step.
TrainResult train(const RunConfig& cfg, const Dataset& train_ds, const Dataset& eval_ds,
                  std::ostream* progress = nullptr);

}  // namespace prvr
