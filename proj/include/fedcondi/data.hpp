#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedcondi/tensor.hpp"

namespace fedcondi {

// One multimodal time-series sample. All M modality matrices are [L_ts, L_f].
// Missing cells are stored as 0 in x with mask = 0 flagging them; clean keeps
// the pre-masking ground truth and is visible to evaluation only.
struct MultimodalSample {
    std::int64_t id = 0;
    int label = 0;
    std::vector<Tensor> x;
    std::vector<Tensor> clean;
    std::vector<Tensor> mask;   // R, per-modality observation masks
    std::vector<int> r;         // modality indicator, r[m]=0 iff mask[m] all-zero

    std::int64_t modalities() const { return static_cast<std::int64_t>(x.size()); }
    bool fully_observed() const;
};

struct Dataset {
    std::vector<MultimodalSample> samples;
    std::int64_t M = 0;
    std::int64_t L_ts = 0;
    std::int64_t L_f = 0;
    int classes = 0;

    std::int64_t feature_width() const { return M * L_f; }  // concatenated feature axis
};

struct SyntheticConfig {
    std::int64_t n = 2000;
    std::int64_t M = 3;
    std::int64_t L_ts = 32;
    std::int64_t L_f = 2;
    int classes = 2;
    double class_offset = 1.0;
    double noise_sigma = 0.1;
    std::uint64_t seed = 0;
};

struct MissingnessConfig {
    double p_s = 0.2;           // fraction of samples with a missing modality
    double p_w = 0.2;           // within-modality missing severity
    bool per_timestep = false;  // mask whole time steps instead of cells
    std::uint64_t seed = 0;
};

struct FederatedPartition {
    std::vector<std::vector<std::int64_t>> assignments;  // client -> sample indices
    std::vector<std::int64_t> n_k;
};

// Modality 0 carries a class offset plus integer-frequency sinusoids (whose
// time means are exactly zero) plus Gaussian noise; every modality m > 0 is a
// fixed lag/scale/nonlinearity transform of modality 0 plus its own noise, so
// missing values are recoverable from the co-observed modalities.
Dataset generate_synthetic(const SyntheticConfig& cfg);

// Marks round(p_s * n) samples as affected (chosen by seeded shuffle), picks
// one modality uniformly per affected sample, and zeroes its cells i.i.d.
// with probability p_w (or round(p_w * L_ts) whole time steps in per-timestep
// mode). Other modalities stay fully observed. Requires M >= 2 whenever the
// affected count is positive.
void apply_missingness(Dataset& ds, const MissingnessConfig& cfg);

// Same protocol applied to an explicit list of samples (used by the
// feature-reconstruction analysis, where every sample is affected).
void apply_missingness(std::vector<MultimodalSample>& samples, std::int64_t L_ts,
                       const MissingnessConfig& cfg);

// Dirichlet(alpha) label-skew partition over sample indices `ids`; an
// overlap_ratio fraction is additionally assigned to a second client.
// Empty clients trigger a redraw, at most 100 times.
FederatedPartition partition(const Dataset& ds, const std::vector<std::int64_t>& ids, int K,
                             double alpha, double overlap_ratio, std::uint64_t seed);

// Stratified split of sample indices into (train, test) by label.
void stratified_split(const Dataset& ds, double test_fraction, std::uint64_t seed,
                      std::vector<std::int64_t>& train, std::vector<std::int64_t>& test);

// Header `sample_id,time,<mod0_f0>,...,<modM_fF>,label`, one row per
// (sample, time step), empty field = missing cell.
Dataset load_csv(const std::string& path, std::int64_t M, std::int64_t L_f);
void write_csv(const Dataset& ds, const std::string& path);

// Per-feature z-score using statistics over observed cells of the given
// training samples; sigma below 1e-8 maps the feature to zeros.
void normalize_dataset(Dataset& ds, const std::vector<std::int64_t>& train_ids);

// Linear interpolation along the time axis onto L_ts uniform points.
Tensor resample_to_length(const Tensor& x, std::int64_t L_ts);
void resample_dataset(Dataset& ds, std::int64_t L_ts);

// Feature-axis concatenation of per-modality [L, L_f] matrices into [L, M*L_f].
Tensor concat_features(const std::vector<Tensor>& mats);

}  // namespace fedcondi
