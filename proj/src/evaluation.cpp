#include "fedcondi/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "fedcondi/diffusion.hpp"
#include "fedcondi/errors.hpp"
#include "fedcondi/task_head.hpp"

namespace fedcondi {

namespace {

double f1_score(std::int64_t tp, std::int64_t fp, std::int64_t fn) {
    const double p = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    const double r = tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
}

// Mann-Whitney AUROC: mean rank of the positive scores, with tied scores
// sharing their average rank.
double rank_auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    const auto n = static_cast<std::int64_t>(scores.size());
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::int64_t a, std::int64_t b) {
        return scores[static_cast<std::size_t>(a)] < scores[static_cast<std::size_t>(b)];
    });
    std::vector<double> rank(static_cast<std::size_t>(n));
    std::int64_t i = 0;
    while (i < n) {
        std::int64_t j = i;
        while (j + 1 < n && scores[static_cast<std::size_t>(idx[static_cast<std::size_t>(j + 1)])] ==
                               scores[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])]) {
            ++j;
        }
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::int64_t k = i; k <= j; ++k) {
            rank[static_cast<std::size_t>(idx[static_cast<std::size_t>(k)])] = avg;
        }
        i = j + 1;
    }
    double sum_pos = 0.0;
    std::int64_t n_pos = 0;
    for (std::int64_t s = 0; s < n; ++s) {
        if (labels[static_cast<std::size_t>(s)] == 1) {
            sum_pos += rank[static_cast<std::size_t>(s)];
            ++n_pos;
        }
    }
    const std::int64_t n_neg = n - n_pos;
    const double u = sum_pos - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1);
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double l2_distance(const double* a, const double* b, std::int64_t n) {
    double s = 0.0;
    for (std::int64_t i = 0; i < n; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

double cosine_distance(const double* a, const double* b, std::int64_t n, bool& flagged) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na <= 0.0 || nb <= 0.0) {
        flagged = true;
        return 1.0;
    }
    return 1.0 - dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace

Metrics compute_metrics(const Tensor& logits, const std::vector<int>& labels, int classes) {
    if (logits.rank() != 2 || logits.dim(1) != classes ||
        logits.dim(0) != static_cast<std::int64_t>(labels.size())) {
        throw ShapeError("compute_metrics: logits " + logits.shape_str() + " vs " +
                         std::to_string(labels.size()) + " labels");
    }
    const std::int64_t n = logits.dim(0);
    if (n == 0) throw StateError("compute_metrics: empty evaluation set");

    Metrics m;
    m.n = static_cast<int>(n);
    std::vector<int> pred(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        int best = 0;
        for (int c = 1; c < classes; ++c) {
            if (logits[i * classes + c] > logits[i * classes + best]) best = c;
        }
        pred[static_cast<std::size_t>(i)] = best;
        if (best == labels[static_cast<std::size_t>(i)]) m.accuracy += 1.0;
    }
    m.accuracy /= static_cast<double>(n);

    double f1_sum = 0.0;
    for (int c = 0; c < classes; ++c) {
        std::int64_t tp = 0, fp = 0, fn = 0;
        for (std::int64_t i = 0; i < n; ++i) {
            const bool is_c = labels[static_cast<std::size_t>(i)] == c;
            const bool pred_c = pred[static_cast<std::size_t>(i)] == c;
            tp += is_c && pred_c;
            fp += !is_c && pred_c;
            fn += is_c && !pred_c;
        }
        const double f1 = f1_score(tp, fp, fn);
        f1_sum += f1;
        if (classes == 2 && c == 1) m.positive_f1 = f1;
    }
    m.macro_f1 = f1_sum / static_cast<double>(classes);

    if (classes == 2) {
        std::int64_t n_pos = 0;
        for (int l : labels) n_pos += l == 1;
        if (n_pos > 0 && n_pos < n) {
            std::vector<double> scores(static_cast<std::size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) {
                scores[static_cast<std::size_t>(i)] = logits[i * 2 + 1] - logits[i * 2];
            }
            m.auroc = rank_auroc(scores, labels);
            m.auroc_defined = true;
        }
    }
    return m;
}

FeatureAnalysis feature_reconstruction_analysis(
    const std::vector<const MultimodalSample*>& test, ParamMap& params, const ModelConfig& cfg,
    const AnalysisConfig& acfg) {
    if (test.empty()) throw StateError("feature analysis: empty test set");

    // Fresh fully observed copies so the hidden cells are chosen here, with
    // ground truth available for every hidden cell.
    std::vector<MultimodalSample> copies;
    copies.reserve(test.size());
    for (const MultimodalSample* s : test) {
        MultimodalSample c = *s;
        for (std::int64_t m = 0; m < c.modalities(); ++m) {
            c.x[static_cast<std::size_t>(m)] = c.clean[static_cast<std::size_t>(m)];
            c.mask[static_cast<std::size_t>(m)] =
                Tensor::full(c.clean[static_cast<std::size_t>(m)].shape(), 1.0);
        }
        c.r.assign(static_cast<std::size_t>(c.modalities()), 1);
        copies.push_back(std::move(c));
    }
    MissingnessConfig mcfg;
    mcfg.p_s = 1.0;
    mcfg.p_w = acfg.ratio;
    mcfg.per_timestep = true;
    mcfg.seed = acfg.mask_seed;
    apply_missingness(copies, cfg.L_ts, mcfg);

    std::vector<const MultimodalSample*> ptrs;
    for (const auto& c : copies) ptrs.push_back(&c);

    const TaskOutput clean = task_forward(ptrs, params, cfg, InputMode::kClean, nullptr,
                                          acfg.no_cond);
    const TaskOutput zero = task_forward(ptrs, params, cfg, InputMode::kZeroFill, nullptr,
                                         acfg.no_cond);
    TaskOutput imp;
    if (acfg.no_imputation) {
        imp = zero;
    } else {
        const DiffusionSchedule sched = build_schedule(cfg.T_diff, cfg.beta_min, cfg.beta_max);
        const std::vector<Tensor> imputed =
            impute(ptrs, params, sched, cfg, acfg.impute_seed, acfg.no_cond);
        imp = task_forward(ptrs, params, cfg, InputMode::kImputed, &imputed, acfg.no_cond);
    }

    FeatureAnalysis fa;
    fa.n = static_cast<int>(copies.size());
    const std::int64_t width = clean.fused.dim(1);
    std::int64_t wins_l2 = 0, wins_cos = 0;
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(copies.size()); ++i) {
        const double* c = clean.fused.data() + i * width;
        const double* z = zero.fused.data() + i * width;
        const double* p = imp.fused.data() + i * width;
        const double lz = l2_distance(z, c, width);
        const double lp = l2_distance(p, c, width);
        bool flag = false;
        const double cz = cosine_distance(z, c, width, flag);
        const double cp = cosine_distance(p, c, width, flag);
        if (flag) ++fa.flagged;
        fa.l2_zero.push_back(lz);
        fa.l2_imp.push_back(lp);
        fa.cos_zero.push_back(cz);
        fa.cos_imp.push_back(cp);
        fa.mean_l2_zero += lz;
        fa.mean_l2_imp += lp;
        fa.mean_cos_zero += cz;
        fa.mean_cos_imp += cp;
        wins_l2 += lp < lz;
        wins_cos += cp < cz;
    }
    const auto dn = static_cast<double>(fa.n);
    fa.mean_l2_zero /= dn;
    fa.mean_l2_imp /= dn;
    fa.mean_cos_zero /= dn;
    fa.mean_cos_imp /= dn;
    fa.frac_l2 = static_cast<double>(wins_l2) / dn;
    fa.frac_cos = static_cast<double>(wins_cos) / dn;
    return fa;
}

void write_feature_distances_csv(const FeatureAnalysis& fa, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw StateError("cannot open " + path + " for writing");
    out << "sample,l2_zero_fill,l2_imputed,cos_zero_fill,cos_imputed,win_l2,win_cos\n";
    char buf[512];
    for (int i = 0; i < fa.n; ++i) {
        const auto u = static_cast<std::size_t>(i);
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g,%d,%d\n", i, fa.l2_zero[u],
                      fa.l2_imp[u], fa.cos_zero[u], fa.cos_imp[u],
                      fa.l2_imp[u] < fa.l2_zero[u] ? 1 : 0,
                      fa.cos_imp[u] < fa.cos_zero[u] ? 1 : 0);
        out << buf;
    }
}

}  // namespace fedcondi
