#pragma once

#include <cstdint>
#include <vector>

#include "fedcondi/data.hpp"
#include "fedcondi/graph.hpp"
#include "fedcondi/model.hpp"
#include "fedcondi/param_map.hpp"

namespace fedcondi {

// Value source for the downstream classifier input.
//   kZeroFill: raw x (missing cells are 0) with the true observation mask.
//   kImputed:  externally imputed matrices with an all-ones mask channel;
//              condition routing still uses the sample's original indicator.
//   kClean:    ground-truth values, all-ones mask, every modality observed.
enum class InputMode { kZeroFill, kImputed, kClean };

struct TaskBatch {
    Tensor x_in;                         // [B, L, 2F] values and mask channel
    std::vector<std::vector<int>> rpat;  // routing indicators per sample
    std::vector<int> labels;
    std::int64_t B = 0;
};

// `imputed` must hold one [L, F] matrix per sample when mode is kImputed.
TaskBatch build_task_batch(const std::vector<const MultimodalSample*>& samples,
                           const ModelConfig& cfg, InputMode mode,
                           const std::vector<Tensor>* imputed = nullptr);

// Instance encoder: two k=5 convolutions over time, SiLU, temporal mean
// pooling, then one projection head per modality. [B,L,2F] -> [B, M*D].
Graph::ValueId instance_embeddings(Graph& g, Graph::ValueId x_in, const ModelConfig& cfg);

// Three-way fusion [h_ins,m | w_mod,m | c_cond,m] grouped per modality:
// [B, 3*M*D]. no_cond replaces the routed condition with zeros.
Graph::ValueId fused_features(Graph& g, const TaskBatch& batch, const ModelConfig& cfg,
                              bool no_cond);

// Two-layer ReLU MLP over the fused vector: [B, 3*M*D] -> [B, classes].
Graph::ValueId classifier_logits(Graph& g, Graph::ValueId fused, const ModelConfig& cfg);

// Scalar cross-entropy over the batch.
Graph::ValueId phase_b_loss(Graph& g, const TaskBatch& batch, const ModelConfig& cfg,
                            bool no_cond);

struct TaskOutput {
    Tensor fused;   // [B, 3*M*D]
    Tensor logits;  // [B, classes]
};

// Forward-only pass used by evaluation; processes samples in bounded chunks.
TaskOutput task_forward(const std::vector<const MultimodalSample*>& samples, ParamMap& params,
                        const ModelConfig& cfg, InputMode mode,
                        const std::vector<Tensor>* imputed = nullptr, bool no_cond = false);

}  // namespace fedcondi
