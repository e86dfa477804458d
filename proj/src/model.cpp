#include "fedcondi/model.hpp"

#include <cmath>
#include <string>

#include "fedcondi/errors.hpp"
#include "fedcondi/rng.hpp"

namespace fedcondi {

namespace {

void add_weight(ParamMap& pm, const std::string& name, std::int64_t in, std::int64_t out,
                Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    Tensor w = Tensor::zeros({in, out});
    for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = rng.uniform(-limit, limit);
    pm.add(name, std::move(w));
}

void add_linear(ParamMap& pm, const std::string& prefix, std::int64_t in, std::int64_t out,
                Rng& rng) {
    add_weight(pm, prefix + ".w", in, out, rng);
    pm.add(prefix + ".b", Tensor::zeros({out}));
}

void add_layer_norm(ParamMap& pm, const std::string& prefix, std::int64_t c) {
    pm.add(prefix + ".g", Tensor::full({c}, 1.0));
    pm.add(prefix + ".s", Tensor::zeros({c}));
}

void add_embedding(ParamMap& pm, const std::string& name, std::vector<std::int64_t> shape,
                   Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, 0.02);
    pm.add(name, std::move(t));
}

}  // namespace

void ModelConfig::validate() const {
    if (M < 1 || L_ts < 1 || L_f < 1 || classes < 2 || D < 1) {
        throw ConfigError("ModelConfig: M, L_ts, L_f, D must be positive and classes >= 2");
    }
    if (T_diff < 1) throw ConfigError("ModelConfig: T_diff must be >= 1");
    if (!(beta_min > 0.0 && beta_min < beta_max && beta_max < 1.0)) {
        throw ConfigError("ModelConfig: need 0 < beta_min < beta_max < 1");
    }
    if (experts < 1 || top_k < 1 || top_k > experts) {
        throw ConfigError("ModelConfig: need 1 <= top_k <= experts");
    }
    if (!(mask_ratio_lo > 0.0 && mask_ratio_lo <= mask_ratio_hi && mask_ratio_hi < 1.0)) {
        throw ConfigError("ModelConfig: mask ratio range must lie inside (0,1)");
    }
    if (n_realizations < 1) throw ConfigError("ModelConfig: n_realizations must be >= 1");
    if (hidden < 1 || ctx_dim < 1 || enc_hidden < 1) {
        throw ConfigError("ModelConfig: layer widths must be positive");
    }
}

ParamMap init_global_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    ParamMap pm;
    const std::int64_t F = cfg.F();
    const std::int64_t den_in = F + cfg.ctx_dim + cfg.M * cfg.D;

    add_linear(pm, "gate", 2 * F, cfg.experts, rng);
    for (int e = 0; e < cfg.experts; ++e) {
        const std::string p = "moe.e" + std::to_string(e);
        add_linear(pm, p + ".l1", 2 * F, cfg.ctx_dim, rng);
        add_linear(pm, p + ".l2", cfg.ctx_dim, cfg.ctx_dim, rng);
    }

    add_linear(pm, "den.in", den_in, cfg.hidden, rng);
    add_linear(pm, "den.temb", cfg.hidden, cfg.hidden, rng);
    for (int i = 0; i < kDenoiserBlocks; ++i) {
        const std::string p = "den.b" + std::to_string(i);
        add_layer_norm(pm, p + ".ln", cfg.hidden);
        add_linear(pm, p + ".c1", 3 * cfg.hidden, cfg.hidden, rng);
        add_linear(pm, p + ".c2", 3 * cfg.hidden, cfg.hidden, rng);
    }
    add_layer_norm(pm, "den.out.ln", cfg.hidden);
    add_linear(pm, "den.out", cfg.hidden, F, rng);

    add_linear(pm, "enc.c1", 5 * 2 * F, cfg.enc_hidden, rng);
    add_linear(pm, "enc.c2", 5 * cfg.enc_hidden, cfg.enc_hidden, rng);
    for (std::int64_t m = 0; m < cfg.M; ++m) {
        add_linear(pm, "enc.head" + std::to_string(m), cfg.enc_hidden, cfg.D, rng);
    }

    add_linear(pm, "clf.l1", 3 * cfg.M * cfg.D, cfg.enc_hidden, rng);
    add_linear(pm, "clf.l2", cfg.enc_hidden, cfg.classes, rng);

    add_embedding(pm, "w_mod", {cfg.M, cfg.D}, rng);
    add_embedding(pm, "w_cond", {cfg.M, cfg.M, cfg.D}, rng);
    return pm;
}

}  // namespace fedcondi
