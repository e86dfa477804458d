#include "fedcondi/task_head.hpp"

#include <algorithm>
#include <string>

#include "fedcondi/embeddings.hpp"
#include "fedcondi/errors.hpp"

namespace fedcondi {

namespace {
constexpr std::int64_t kForwardChunk = 256;
}

TaskBatch build_task_batch(const std::vector<const MultimodalSample*>& samples,
                           const ModelConfig& cfg, InputMode mode,
                           const std::vector<Tensor>* imputed) {
    if (mode == InputMode::kImputed &&
        (!imputed || imputed->size() != samples.size())) {
        throw StateError("build_task_batch: imputed mode needs one matrix per sample");
    }
    const std::int64_t L = cfg.L_ts, F = cfg.F();
    TaskBatch batch;
    batch.B = static_cast<std::int64_t>(samples.size());
    batch.x_in = Tensor::zeros({batch.B, L, 2 * F});
    for (std::int64_t b = 0; b < batch.B; ++b) {
        const MultimodalSample& s = *samples[static_cast<std::size_t>(b)];
        Tensor values;
        Tensor obs;
        switch (mode) {
            case InputMode::kZeroFill:
                values = concat_features(s.x);
                obs = concat_features(s.mask);
                break;
            case InputMode::kImputed:
                values = (*imputed)[static_cast<std::size_t>(b)];
                obs = Tensor::full({L, F}, 1.0);
                break;
            case InputMode::kClean:
                values = concat_features(s.clean);
                obs = Tensor::full({L, F}, 1.0);
                break;
        }
        if (values.rank() != 2 || values.dim(0) != L || values.dim(1) != F) {
            throw ShapeError("build_task_batch: sample matrix " + values.shape_str());
        }
        for (std::int64_t t = 0; t < L; ++t) {
            for (std::int64_t f = 0; f < F; ++f) {
                batch.x_in[(b * L + t) * 2 * F + f] = values[t * F + f];
                batch.x_in[(b * L + t) * 2 * F + F + f] = obs[t * F + f];
            }
        }
        if (mode == InputMode::kClean) {
            batch.rpat.emplace_back(static_cast<std::size_t>(cfg.M), 1);
        } else {
            batch.rpat.push_back(s.r);
        }
        batch.labels.push_back(s.label);
    }
    return batch;
}

Graph::ValueId instance_embeddings(Graph& g, Graph::ValueId x_in, const ModelConfig& cfg) {
    auto h = g.silu(g.conv1d(x_in, g.param("enc.c1.w"), g.param("enc.c1.b"), 5));
    h = g.silu(g.conv1d(h, g.param("enc.c2.w"), g.param("enc.c2.b"), 5));
    const auto pooled = g.mean_axis1(h);
    std::vector<Graph::ValueId> heads;
    for (std::int64_t m = 0; m < cfg.M; ++m) {
        const std::string p = "enc.head" + std::to_string(m);
        heads.push_back(g.add_bias(g.matmul(pooled, g.param(p + ".w")), g.param(p + ".b")));
    }
    return g.concat_last(heads);
}

Graph::ValueId fused_features(Graph& g, const TaskBatch& batch, const ModelConfig& cfg,
                              bool no_cond) {
    const auto x_in = g.input(batch.x_in, "task_x");
    const auto ins = instance_embeddings(g, x_in, cfg);
    const auto mod =
        g.broadcast_rows(g.reshape(g.param("w_mod"), {cfg.M * cfg.D}), batch.B);
    Graph::ValueId cond;
    if (no_cond) {
        cond = g.input(Tensor::zeros({batch.B, cfg.M * cfg.D}), "c_cond_zero");
    } else {
        cond = g.route_condition_batch(g.param("w_cond"), batch.rpat, cfg.M, cfg.D);
    }
    const auto cat = g.concat_last({ins, mod, cond});
    return g.permute_last(cat, fusion_permutation(cfg.M, cfg.D));
}

Graph::ValueId classifier_logits(Graph& g, Graph::ValueId fused, const ModelConfig& cfg) {
    (void)cfg;
    const auto h =
        g.relu(g.add_bias(g.matmul(fused, g.param("clf.l1.w")), g.param("clf.l1.b")));
    return g.add_bias(g.matmul(h, g.param("clf.l2.w")), g.param("clf.l2.b"));
}

Graph::ValueId phase_b_loss(Graph& g, const TaskBatch& batch, const ModelConfig& cfg,
                            bool no_cond) {
    const auto fused = fused_features(g, batch, cfg, no_cond);
    const auto logits = classifier_logits(g, fused, cfg);
    return g.cross_entropy(logits, batch.labels);
}

TaskOutput task_forward(const std::vector<const MultimodalSample*>& samples, ParamMap& params,
                        const ModelConfig& cfg, InputMode mode,
                        const std::vector<Tensor>* imputed, bool no_cond) {
    const auto n = static_cast<std::int64_t>(samples.size());
    TaskOutput out;
    out.fused = Tensor::zeros({n, 3 * cfg.M * cfg.D});
    out.logits = Tensor::zeros({n, static_cast<std::int64_t>(cfg.classes)});
    for (std::int64_t start = 0; start < n; start += kForwardChunk) {
        const std::int64_t count = std::min(kForwardChunk, n - start);
        std::vector<const MultimodalSample*> chunk(
            samples.begin() + start, samples.begin() + start + count);
        std::vector<Tensor> imp_chunk;
        const std::vector<Tensor>* imp = nullptr;
        if (mode == InputMode::kImputed) {
            if (!imputed || imputed->size() != samples.size()) {
                throw StateError("task_forward: imputed mode needs one matrix per sample");
            }
            imp_chunk.assign(imputed->begin() + start, imputed->begin() + start + count);
            imp = &imp_chunk;
        }
        const TaskBatch batch = build_task_batch(chunk, cfg, mode, imp);
        Graph g(&params);
        const auto fused = fused_features(g, batch, cfg, no_cond);
        const auto logits = classifier_logits(g, fused, cfg);
        std::copy(g.value(fused).data(), g.value(fused).data() + count * 3 * cfg.M * cfg.D,
                  out.fused.data() + start * 3 * cfg.M * cfg.D);
        std::copy(g.value(logits).data(), g.value(logits).data() + count * cfg.classes,
                  out.logits.data() + start * cfg.classes);
    }
    return out;
}

}  // namespace fedcondi
