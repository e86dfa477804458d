#pragma once

#include <cstdint>
#include <vector>

#include "fedcondi/data.hpp"
#include "fedcondi/graph.hpp"
#include "fedcondi/model.hpp"
#include "fedcondi/param_map.hpp"
#include "fedcondi/rng.hpp"
#include "fedcondi/tensor.hpp"

namespace fedcondi {

// Linear beta schedule. Index i holds step t = i+1; alpha_bar(0) = 1.
struct DiffusionSchedule {
    int T = 0;
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;

    double beta_t(int t) const { return beta[static_cast<std::size_t>(t - 1)]; }
    double alpha_t(int t) const { return alpha[static_cast<std::size_t>(t - 1)]; }
    double alpha_bar_t(int t) const {
        return t == 0 ? 1.0 : alpha_bar[static_cast<std::size_t>(t - 1)];
    }
};

DiffusionSchedule build_schedule(int T, double beta_min, double beta_max);

// z_t = sqrt(abar_t) z_0 + sqrt(1-abar_t) eps, applied only where
// target_mask != 0 when a mask is given (other cells keep z_0). t may be 0,
// which is the identity boundary.
Tensor q_sample(const Tensor& z0, int t, const Tensor& eps, const DiffusionSchedule& sched,
                const Tensor* target_mask = nullptr);

// CSDI-style self-supervised masking: a Uniform(ratio range) fraction of the
// observed cells becomes the pseudo-imputation target, the rest conditions.
struct SelfMaskPlan {
    Tensor target;
    Tensor cond;
    bool valid = false;  // false when fewer than 2 observed cells
};

SelfMaskPlan make_self_mask(const Tensor& observed, double ratio_lo, double ratio_hi, Rng& rng);

// One Phase A training batch, assembled outside the graph.
struct PhaseABatch {
    Tensor z_in;        // [B,L,F] conditioning values + noised targets
    Tensor moe_in;      // [B,L,2F] conditioning values and the mask channel
    Tensor eps;         // [B,L,F] drawn noise
    Tensor target;      // [B,L,F] 0/1 target masks
    std::vector<std::vector<int>> rpat;
    std::vector<int> t_steps;
    std::int64_t B = 0;
};

// Draws self-masks, timesteps, and noise for every usable sample; samples
// without a valid self-mask are skipped with a warning. Returns false when
// the whole batch was skipped.
bool build_phase_a_batch(const std::vector<const MultimodalSample*>& samples,
                         const DiffusionSchedule& sched, const ModelConfig& cfg, Rng& rng,
                         PhaseABatch& out);

// MoE observed-context encoder: [B,L,2F] -> [B,L,ctx_dim]. Every time step is
// routed to the top-k experts by a masked softmax gate; unselected experts
// contribute exactly zero (and receive exactly zero gradient).
Graph::ValueId moe_context(Graph& g, Graph::ValueId moe_in, const ModelConfig& cfg);

// Conditional denoiser eps_theta: residual 1-D conv network over time with a
// sinusoidal timestep embedding added to the hidden states. z [B,L,F] and the
// assembled condition c [B,L,ctx_dim + M*D] are concatenated on the feature
// axis. Returns [B,L,F].
Graph::ValueId denoiser(Graph& g, Graph::ValueId z, Graph::ValueId c,
                        const std::vector<int>& t_steps, const ModelConfig& cfg);

// Full conditional diffusion loss for a prepared batch (scalar node).
// no_cond replaces the routed condition with zeros.
Graph::ValueId diffusion_loss(Graph& g, const PhaseABatch& batch, const ModelConfig& cfg,
                              bool no_cond);

// Ancestral sampling over unobserved cells with observed cells clamped at
// every step; returns per-sample imputed matrices [L_ts, F] (feature-axis
// concatenation over modalities). Per-sample noise streams are derived from
// (seed, sample id, realization), so results do not depend on batch
// composition. Fully observed samples are returned bit-exactly.
std::vector<Tensor> impute(const std::vector<const MultimodalSample*>& samples, ParamMap& params,
                           const DiffusionSchedule& sched, const ModelConfig& cfg,
                           std::uint64_t seed, bool no_cond);

}  // namespace fedcondi
