#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedcondi/config.hpp"
#include "fedcondi/data.hpp"
#include "fedcondi/evaluation.hpp"
#include "fedcondi/param_map.hpp"

namespace fedcondi {

// Dataset with missingness applied plus the derived split and partition,
// all reproducible from the config alone.
struct PreparedData {
    Dataset ds;
    std::vector<std::int64_t> train;
    std::vector<std::int64_t> test;
    FederatedPartition part;
};

PreparedData prepare_data(const ExperimentConfig& cfg);

struct RunResult {
    Metrics imputed;    // the full inference path (zero-fill when disabled)
    Metrics zero_fill;  // baseline without imputation
    FeatureAnalysis analysis;
    int rounds = 0;
    std::string variant;
    std::string out_dir;
};

std::string variant_name(bool no_imputation, bool no_cond);

// Full pipeline: data, federated training (rounds.jsonl, checkpoints), test
// evaluation, and the feature-reconstruction analysis. Writes config.toml,
// rounds.jsonl, ckpt/final.bin, metrics.json, and feature_distances.csv under
// cfg.run.out_dir. On NumericError the latest global state is dumped to
// ckpt/nan_dump.bin before rethrowing.
RunResult run_experiment(const ExperimentConfig& cfg);

// Re-evaluates a saved checkpoint against the dataset the config describes;
// writes metrics.json and feature_distances.csv under out_dir.
RunResult analyze_checkpoint(const ExperimentConfig& cfg, const std::string& ckpt_path,
                             const std::string& out_dir);

// The four ablation variants of one config, each in its own subdirectory of
// cfg.run.out_dir, plus a summary.csv.
std::vector<RunResult> run_ablations(const ExperimentConfig& cfg);

// Missingness sweep: every (p_s, p_w) cell runs the full variant (plus the
// three ablated variants with `ablate`) under out_root, with a summary.csv.
std::vector<RunResult> run_grid(const ExperimentConfig& base, const std::vector<double>& ps,
                                const std::vector<double>& pw, bool ablate,
                                const std::string& out_root);

}  // namespace fedcondi
