#pragma once

#include <cstdint>

#include "fedcondi/param_map.hpp"

namespace fedcondi {

// Architecture and diffusion hyperparameters shared by both training phases.
struct ModelConfig {
    std::int64_t M = 3;
    std::int64_t L_ts = 32;
    std::int64_t L_f = 2;
    int classes = 2;
    std::int64_t D = 16;  // embedding dimension

    int T_diff = 50;
    double beta_min = 1e-4;
    double beta_max = 0.1;

    int experts = 4;
    int top_k = 2;
    double mask_ratio_lo = 0.1;
    double mask_ratio_hi = 0.9;
    int n_realizations = 1;

    std::int64_t hidden = 64;       // denoiser width
    std::int64_t ctx_dim = 64;      // MoE context features
    std::int64_t enc_hidden = 64;   // instance encoder / classifier width

    std::int64_t F() const { return M * L_f; }

    void validate() const;
};

inline constexpr int kDenoiserBlocks = 4;

// Builds the full trainable state: MoE gate and experts, denoiser, instance
// encoder, classifier, and the prompt embeddings w_mod [M,D] / w_cond [M,M,D].
// Weights are Glorot-uniform, biases zero, layer-norm gain 1 / shift 0,
// embeddings Gaussian with sigma 0.02.
ParamMap init_global_params(const ModelConfig& cfg, std::uint64_t seed);

}  // namespace fedcondi
