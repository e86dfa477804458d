#include "fedcondi/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

#include "fedcondi/errors.hpp"

namespace fedcondi {

namespace {

constexpr std::int64_t kImputeChunk = 64;

// Top-k selection per row by gate logit, ties resolved toward lower index.
Tensor topk_keep_mask(const Tensor& logits, int k) {
    const std::int64_t rows = logits.dim(0), E = logits.dim(1);
    Tensor keep = Tensor::zeros(logits.shape());
    for (std::int64_t r = 0; r < rows; ++r) {
        for (int pick = 0; pick < k; ++pick) {
            std::int64_t best = -1;
            double best_v = 0.0;
            for (std::int64_t e = 0; e < E; ++e) {
                if (keep[r * E + e] != 0.0) continue;
                const double v = logits[r * E + e];
                if (best < 0 || v > best_v) {
                    best = e;
                    best_v = v;
                }
            }
            keep[r * E + best] = 1.0;
        }
    }
    return keep;
}

Tensor sinusoidal_embedding(const std::vector<int>& t_steps, std::int64_t H) {
    const auto B = static_cast<std::int64_t>(t_steps.size());
    const std::int64_t half = H / 2;
    Tensor emb = Tensor::zeros({B, H});
    for (std::int64_t b = 0; b < B; ++b) {
        const auto t = static_cast<double>(t_steps[static_cast<std::size_t>(b)]);
        for (std::int64_t i = 0; i < half; ++i) {
            const double f = std::exp(-std::log(10000.0) * static_cast<double>(i) /
                                      static_cast<double>(half));
            emb[b * H + 2 * i] = std::sin(t * f);
            if (2 * i + 1 < H) emb[b * H + 2 * i + 1] = std::cos(t * f);
        }
    }
    return emb;
}

}  // namespace

DiffusionSchedule build_schedule(int T, double beta_min, double beta_max) {
    if (T < 1) throw ConfigError("build_schedule: T_diff must be >= 1");
    if (!(beta_min > 0.0 && beta_min < beta_max && beta_max < 1.0)) {
        throw ConfigError("build_schedule: need 0 < beta_min < beta_max < 1");
    }
    DiffusionSchedule s;
    s.T = T;
    s.beta.resize(static_cast<std::size_t>(T));
    s.alpha.resize(static_cast<std::size_t>(T));
    s.alpha_bar.resize(static_cast<std::size_t>(T));
    double prod = 1.0;
    for (int i = 0; i < T; ++i) {
        const double frac = T == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(T - 1);
        s.beta[static_cast<std::size_t>(i)] = beta_min + (beta_max - beta_min) * frac;
        s.alpha[static_cast<std::size_t>(i)] = 1.0 - s.beta[static_cast<std::size_t>(i)];
        prod *= s.alpha[static_cast<std::size_t>(i)];
        s.alpha_bar[static_cast<std::size_t>(i)] = prod;
    }
    return s;
}

Tensor q_sample(const Tensor& z0, int t, const Tensor& eps, const DiffusionSchedule& sched,
                const Tensor* target_mask) {
    if (!z0.same_shape(eps)) {
        throw ShapeError("q_sample: z0 " + z0.shape_str() + " vs eps " + eps.shape_str());
    }
    if (t < 0 || t > sched.T) throw ConfigError("q_sample: t out of range");
    if (target_mask && !target_mask->same_shape(z0)) {
        throw ShapeError("q_sample: mask shape " + target_mask->shape_str());
    }
    const double ab = sched.alpha_bar_t(t);
    const double sa = std::sqrt(ab);
    const double sb = std::sqrt(1.0 - ab);
    Tensor out = z0;
    for (std::int64_t i = 0; i < out.numel(); ++i) {
        if (target_mask && (*target_mask)[i] == 0.0) continue;
        out[i] = sa * z0[i] + sb * eps[i];
    }
    return out;
}

SelfMaskPlan make_self_mask(const Tensor& observed, double ratio_lo, double ratio_hi, Rng& rng) {
    SelfMaskPlan plan;
    plan.target = Tensor::zeros(observed.shape());
    plan.cond = Tensor::zeros(observed.shape());
    std::vector<std::int64_t> idx;
    for (std::int64_t i = 0; i < observed.numel(); ++i) {
        if (observed[i] != 0.0) idx.push_back(i);
    }
    if (idx.size() < 2) return plan;
    const double u = rng.uniform(ratio_lo, ratio_hi);
    auto n_t = static_cast<std::int64_t>(std::llround(u * static_cast<double>(idx.size())));
    n_t = std::clamp<std::int64_t>(n_t, 1, static_cast<std::int64_t>(idx.size()) - 1);
    rng.shuffle(idx);
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(idx.size()); ++i) {
        (i < n_t ? plan.target : plan.cond)[idx[static_cast<std::size_t>(i)]] = 1.0;
    }
    plan.valid = true;
    return plan;
}

bool build_phase_a_batch(const std::vector<const MultimodalSample*>& samples,
                         const DiffusionSchedule& sched, const ModelConfig& cfg, Rng& rng,
                         PhaseABatch& out) {
    const std::int64_t L = cfg.L_ts, F = cfg.F();
    std::vector<Tensor> z_rows, moe_rows, eps_rows, tgt_rows;
    out.rpat.clear();
    out.t_steps.clear();
    for (const MultimodalSample* s : samples) {
        const Tensor observed = concat_features(s->mask);
        SelfMaskPlan plan = make_self_mask(observed, cfg.mask_ratio_lo, cfg.mask_ratio_hi, rng);
        if (!plan.valid) {
            std::cerr << "warning: sample " << s->id
                      << " skipped in Phase A (fewer than 2 observed cells)\n";
            continue;
        }
        const int t = 1 + static_cast<int>(rng.below(sched.T));
        const Tensor x_full = concat_features(s->x);
        Tensor eps = Tensor::zeros({L, F});
        for (std::int64_t i = 0; i < eps.numel(); ++i) eps[i] = rng.normal();
        const Tensor noised = q_sample(x_full, t, eps, sched);
        Tensor z = Tensor::zeros({L, F});
        Tensor moe_row = Tensor::zeros({L, 2 * F});
        for (std::int64_t i = 0; i < L * F; ++i) {
            z[i] = plan.cond[i] * x_full[i] + plan.target[i] * noised[i];
            const std::int64_t t_i = i / F, f_i = i % F;
            moe_row[t_i * 2 * F + f_i] = plan.cond[i] * x_full[i];
            moe_row[t_i * 2 * F + F + f_i] = plan.cond[i];
        }
        z_rows.push_back(std::move(z));
        moe_rows.push_back(std::move(moe_row));
        eps_rows.push_back(std::move(eps));
        tgt_rows.push_back(std::move(plan.target));
        out.rpat.push_back(s->r);
        out.t_steps.push_back(t);
    }
    out.B = static_cast<std::int64_t>(z_rows.size());
    if (out.B == 0) return false;

    auto pack = [&](const std::vector<Tensor>& rows, std::int64_t width) {
        Tensor t = Tensor::zeros({out.B, L, width});
        for (std::int64_t b = 0; b < out.B; ++b) {
            std::copy(rows[static_cast<std::size_t>(b)].data(),
                      rows[static_cast<std::size_t>(b)].data() + L * width,
                      t.data() + b * L * width);
        }
        return t;
    };
    out.z_in = pack(z_rows, F);
    out.moe_in = pack(moe_rows, 2 * F);
    out.eps = pack(eps_rows, F);
    out.target = pack(tgt_rows, F);
    return true;
}

Graph::ValueId moe_context(Graph& g, Graph::ValueId moe_in, const ModelConfig& cfg) {
    const Tensor& xin = g.value(moe_in);
    const std::int64_t B = xin.dim(0), L = xin.dim(1), F2 = xin.dim(2);
    const auto flat = g.reshape(moe_in, {B * L, F2});
    const auto logits = g.add_bias(g.matmul(flat, g.param("gate.w")), g.param("gate.b"));
    Tensor keep = topk_keep_mask(g.value(logits), cfg.top_k);
    const auto gates = g.masked_softmax_last(logits, keep);

    Graph::ValueId acc = -1;
    for (int e = 0; e < cfg.experts; ++e) {
        bool used = false;
        for (std::int64_t r = 0; r < B * L && !used; ++r) {
            used = keep[r * cfg.experts + e] != 0.0;
        }
        if (!used) continue;
        const std::string p = "moe.e" + std::to_string(e);
        auto h = g.relu(g.add_bias(g.matmul(flat, g.param(p + ".l1.w")), g.param(p + ".l1.b")));
        auto o = g.add_bias(g.matmul(h, g.param(p + ".l2.w")), g.param(p + ".l2.b"));
        auto contrib = g.scale_rows(o, g.select_col(gates, e));
        acc = acc < 0 ? contrib : g.add(acc, contrib);
    }
    return g.reshape(acc, {B, L, cfg.ctx_dim});
}

Graph::ValueId denoiser(Graph& g, Graph::ValueId z, Graph::ValueId c,
                        const std::vector<int>& t_steps, const ModelConfig& cfg) {
    const std::int64_t B = g.value(z).dim(0), L = g.value(z).dim(1);
    const std::int64_t H = cfg.hidden;
    const auto zc = g.concat_last({z, c});
    const std::int64_t in_dim = g.value(zc).dim(2);
    auto h = g.reshape(
        g.add_bias(g.matmul(g.reshape(zc, {B * L, in_dim}), g.param("den.in.w")),
                   g.param("den.in.b")),
        {B, L, H});

    const auto temb = g.input(sinusoidal_embedding(t_steps, H), "t_embedding");
    const auto tproj = g.add_bias(g.matmul(temb, g.param("den.temb.w")), g.param("den.temb.b"));
    h = g.add_row_broadcast(h, tproj);

    for (int i = 0; i < kDenoiserBlocks; ++i) {
        const std::string p = "den.b" + std::to_string(i);
        auto a = g.layer_norm(h, g.param(p + ".ln.g"), g.param(p + ".ln.s"));
        a = g.conv1d(a, g.param(p + ".c1.w"), g.param(p + ".c1.b"), 3);
        a = g.silu(a);
        a = g.conv1d(a, g.param(p + ".c2.w"), g.param(p + ".c2.b"), 3);
        h = g.add(h, a);
    }
    auto o = g.layer_norm(h, g.param("den.out.ln.g"), g.param("den.out.ln.s"));
    o = g.add_bias(g.matmul(g.reshape(o, {B * L, H}), g.param("den.out.w")),
                   g.param("den.out.b"));
    return g.reshape(o, {B, L, cfg.F()});
}

Graph::ValueId diffusion_loss(Graph& g, const PhaseABatch& batch, const ModelConfig& cfg,
                              bool no_cond) {
    const auto moe_in = g.input(batch.moe_in, "moe_in");
    const auto c_obs = moe_context(g, moe_in, cfg);
    Graph::ValueId c_cond;
    if (no_cond) {
        c_cond = g.input(Tensor::zeros({batch.B, cfg.M * cfg.D}), "c_cond_zero");
    } else {
        c_cond = g.route_condition_batch(g.param("w_cond"), batch.rpat, cfg.M, cfg.D);
    }
    const auto c = g.concat_last({c_obs, g.tile_rows(c_cond, cfg.L_ts)});
    const auto z = g.input(batch.z_in, "z_t");
    const auto eps_hat = denoiser(g, z, c, batch.t_steps, cfg);
    return g.masked_mse(eps_hat, batch.eps, batch.target);
}

std::vector<Tensor> impute(const std::vector<const MultimodalSample*>& samples, ParamMap& params,
                           const DiffusionSchedule& sched, const ModelConfig& cfg,
                           std::uint64_t seed, bool no_cond) {
    const std::int64_t L = cfg.L_ts, F = cfg.F();
    std::vector<Tensor> result(samples.size());
    std::vector<std::int64_t> pending;
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(samples.size()); ++i) {
        const Tensor x_full = concat_features(samples[static_cast<std::size_t>(i)]->x);
        if (samples[static_cast<std::size_t>(i)]->fully_observed()) {
            result[static_cast<std::size_t>(i)] = x_full;
        } else {
            pending.push_back(i);
        }
    }

    for (std::size_t start = 0; start < pending.size();
         start += static_cast<std::size_t>(kImputeChunk)) {
        const auto count = static_cast<std::int64_t>(
            std::min<std::size_t>(static_cast<std::size_t>(kImputeChunk), pending.size() - start));
        std::vector<const MultimodalSample*> chunk;
        std::vector<Tensor> x_full(static_cast<std::size_t>(count));
        std::vector<Tensor> r_full(static_cast<std::size_t>(count));
        for (std::int64_t b = 0; b < count; ++b) {
            const auto* s = samples[static_cast<std::size_t>(
                pending[start + static_cast<std::size_t>(b)])];
            chunk.push_back(s);
            x_full[static_cast<std::size_t>(b)] = concat_features(s->x);
            r_full[static_cast<std::size_t>(b)] = concat_features(s->mask);
        }

        // The condition c depends only on the observed context, so it is
        // assembled once per chunk and reused across the reverse chain.
        Tensor c_val;
        {
            Graph g(&params);
            Tensor moe_in = Tensor::zeros({count, L, 2 * F});
            std::vector<std::vector<int>> rpat;
            for (std::int64_t b = 0; b < count; ++b) {
                const Tensor& x = x_full[static_cast<std::size_t>(b)];
                const Tensor& R = r_full[static_cast<std::size_t>(b)];
                for (std::int64_t i = 0; i < L * F; ++i) {
                    const std::int64_t t_i = i / F, f_i = i % F;
                    moe_in[(b * L + t_i) * 2 * F + f_i] = R[i] * x[i];
                    moe_in[(b * L + t_i) * 2 * F + F + f_i] = R[i];
                }
                rpat.push_back(chunk[static_cast<std::size_t>(b)]->r);
            }
            const auto c_obs = moe_context(g, g.input(std::move(moe_in), "moe_in"), cfg);
            Graph::ValueId c_cond;
            if (no_cond) {
                c_cond = g.input(Tensor::zeros({count, cfg.M * cfg.D}), "c_cond_zero");
            } else {
                c_cond = g.route_condition_batch(g.param("w_cond"), std::move(rpat), cfg.M, cfg.D);
            }
            c_val = g.value(g.concat_last({c_obs, g.tile_rows(c_cond, L)}));
        }

        std::vector<Tensor> mean(static_cast<std::size_t>(count), Tensor::zeros({L, F}));
        for (int rep = 0; rep < cfg.n_realizations; ++rep) {
            std::vector<Rng> rngs;
            for (std::int64_t b = 0; b < count; ++b) {
                rngs.emplace_back(Rng::derive(
                    seed, static_cast<std::uint64_t>(chunk[static_cast<std::size_t>(b)]->id),
                    static_cast<std::uint64_t>(rep)));
            }
            Tensor z = Tensor::zeros({count, L, F});
            for (std::int64_t b = 0; b < count; ++b) {
                const Tensor& x = x_full[static_cast<std::size_t>(b)];
                const Tensor& R = r_full[static_cast<std::size_t>(b)];
                for (std::int64_t i = 0; i < L * F; ++i) {
                    const double n = rngs[static_cast<std::size_t>(b)].normal();
                    z[b * L * F + i] = R[i] != 0.0 ? x[i] : n;
                }
            }
            for (int t = sched.T; t >= 1; --t) {
                Tensor eps_hat;
                {
                    Graph g(&params);
                    const auto out = denoiser(g, g.input(z, "z"), g.input(c_val, "c"),
                                              std::vector<int>(static_cast<std::size_t>(count), t),
                                              cfg);
                    eps_hat = g.value(out);
                }
                const double inv_sa = 1.0 / std::sqrt(sched.alpha_t(t));
                const double coef = sched.beta_t(t) / std::sqrt(1.0 - sched.alpha_bar_t(t));
                const double var = t > 1 ? (1.0 - sched.alpha_bar_t(t - 1)) /
                                               (1.0 - sched.alpha_bar_t(t)) * sched.beta_t(t)
                                         : 0.0;
                const double sigma = std::sqrt(var);
                for (std::int64_t b = 0; b < count; ++b) {
                    const Tensor& x = x_full[static_cast<std::size_t>(b)];
                    const Tensor& R = r_full[static_cast<std::size_t>(b)];
                    for (std::int64_t i = 0; i < L * F; ++i) {
                        const double noise =
                            t > 1 ? rngs[static_cast<std::size_t>(b)].normal() : 0.0;
                        if (R[i] != 0.0) {
                            z[b * L * F + i] = x[i];
                            continue;
                        }
                        const double mu =
                            inv_sa * (z[b * L * F + i] - coef * eps_hat[b * L * F + i]);
                        z[b * L * F + i] = mu + sigma * noise;
                    }
                }
                if (!z.all_finite()) {
                    throw NumericError("impute: non-finite latent at step " + std::to_string(t));
                }
            }
            for (std::int64_t b = 0; b < count; ++b) {
                for (std::int64_t i = 0; i < L * F; ++i) {
                    mean[static_cast<std::size_t>(b)][i] += z[b * L * F + i];
                }
            }
        }
        for (std::int64_t b = 0; b < count; ++b) {
            const Tensor& x = x_full[static_cast<std::size_t>(b)];
            const Tensor& R = r_full[static_cast<std::size_t>(b)];
            Tensor out = Tensor::zeros({L, F});
            for (std::int64_t i = 0; i < L * F; ++i) {
                out[i] = R[i] != 0.0
                             ? x[i]
                             : mean[static_cast<std::size_t>(b)][i] /
                                   static_cast<double>(cfg.n_realizations);
            }
            result[static_cast<std::size_t>(pending[start + static_cast<std::size_t>(b)])] =
                std::move(out);
        }
    }
    return result;
}

}  // namespace fedcondi
