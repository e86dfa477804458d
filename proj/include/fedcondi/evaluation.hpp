#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedcondi/data.hpp"
#include "fedcondi/model.hpp"
#include "fedcondi/param_map.hpp"
#include "fedcondi/tensor.hpp"

namespace fedcondi {

struct Metrics {
    int n = 0;
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    double positive_f1 = 0.0;  // class-1 F1, binary tasks only
    double auroc = 0.0;
    bool auroc_defined = false;  // binary with both classes present
};

// Argmax predictions (ties to the lower class index), macro-F1 over all
// classes, and rank-based AUROC with average ranks for tied scores.
Metrics compute_metrics(const Tensor& logits, const std::vector<int>& labels, int classes);

struct AnalysisConfig {
    double ratio = 0.2;  // fraction of time steps hidden per sample
    std::uint64_t mask_seed = 0;
    std::uint64_t impute_seed = 0;
    bool no_imputation = false;  // inference falls back to the zero-fill path
    bool no_cond = false;
};

struct FeatureAnalysis {
    int n = 0;
    std::vector<double> l2_zero, l2_imp;    // distance to the clean features
    std::vector<double> cos_zero, cos_imp;  // cosine distances, guarded
    double mean_l2_zero = 0.0, mean_l2_imp = 0.0;
    double mean_cos_zero = 0.0, mean_cos_imp = 0.0;
    double frac_l2 = 0.0;   // fraction with strictly smaller imputed L2
    double frac_cos = 0.0;  // fraction with strictly smaller imputed cosine
    int flagged = 0;        // zero-vector cosine fallbacks (distance set to 1)
};

// Rebuilds fully clean copies of the given samples, hides `ratio` of the time
// steps of one modality in every sample, then compares classifier features
// from the zero-filled and the imputed views against the clean view.
FeatureAnalysis feature_reconstruction_analysis(
    const std::vector<const MultimodalSample*>& test, ParamMap& params, const ModelConfig& cfg,
    const AnalysisConfig& acfg);

// One row per sample: index, the four distances, and the two strict wins.
void write_feature_distances_csv(const FeatureAnalysis& fa, const std::string& path);

}  // namespace fedcondi
