#include "fedcondi/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"

#include "fedcondi/diffusion.hpp"
#include "fedcondi/errors.hpp"
#include "fedcondi/federation.hpp"
#include "fedcondi/model.hpp"
#include "fedcondi/rng.hpp"
#include "fedcondi/task_head.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace fedcondi {

namespace {

// Fixed tags for deriving every stochastic stream from the run seed.
enum SeedTag : std::uint64_t {
    kSeedSynthetic = 1,
    kSeedMissingness = 2,
    kSeedSplit = 3,
    kSeedPartition = 4,
    kSeedInit = 5,
    kSeedSampling = 6,
    kSeedRound = 7,
    kSeedImputeEval = 8,
    kSeedAnalysis = 9,
};

std::string fmt_g(double v, const char* spec = "%.10g") {
    char buf[64];
    std::snprintf(buf, sizeof(buf), spec, v);
    return buf;
}

json metrics_json(const Metrics& m) {
    json j;
    j["n"] = m.n;
    j["accuracy"] = m.accuracy;
    j["macro_f1"] = m.macro_f1;
    j["positive_f1"] = m.positive_f1;
    if (m.auroc_defined) {
        j["auroc"] = m.auroc;
    } else {
        j["auroc"] = nullptr;
    }
    return j;
}

void write_metrics_file(const RunResult& r, const ExperimentConfig& cfg,
                        const std::string& path) {
    json j;
    j["variant"] = r.variant;
    j["seed"] = cfg.run.seed;
    j["rounds"] = r.rounds;
    j["p_s"] = cfg.missing.p_s;
    j["p_w"] = cfg.missing.p_w;
    j["imputed"] = metrics_json(r.imputed);
    j["zero_fill"] = metrics_json(r.zero_fill);
    json a;
    a["n"] = r.analysis.n;
    a["mean_l2_zero_fill"] = r.analysis.mean_l2_zero;
    a["mean_l2_imputed"] = r.analysis.mean_l2_imp;
    a["mean_cos_zero_fill"] = r.analysis.mean_cos_zero;
    a["mean_cos_imputed"] = r.analysis.mean_cos_imp;
    a["frac_l2"] = r.analysis.frac_l2;
    a["frac_cos"] = r.analysis.frac_cos;
    a["flagged"] = r.analysis.flagged;
    j["analysis"] = a;
    std::ofstream out(path);
    if (!out) throw StateError("cannot open " + path + " for writing");
    out << j.dump(2) << "\n";
}

void write_summary_csv(const std::vector<RunResult>& rows,
                       const std::vector<const ExperimentConfig*>& cfgs,
                       const std::string& path) {
    std::ofstream out(path);
    if (!out) throw StateError("cannot open " + path + " for writing");
    out << "p_s,p_w,variant,accuracy,macro_f1,positive_f1,auroc,frac_l2,frac_cos,out_dir\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const RunResult& r = rows[i];
        const ExperimentConfig& c = *cfgs[i];
        out << fmt_g(c.missing.p_s) << "," << fmt_g(c.missing.p_w) << "," << r.variant << ","
            << fmt_g(r.imputed.accuracy) << "," << fmt_g(r.imputed.macro_f1) << ","
            << fmt_g(r.imputed.positive_f1) << ","
            << (r.imputed.auroc_defined ? fmt_g(r.imputed.auroc) : std::string()) << ","
            << fmt_g(r.analysis.frac_l2) << "," << fmt_g(r.analysis.frac_cos) << ","
            << r.out_dir << "\n";
    }
}

RunResult evaluate_global(const PreparedData& pd, ParamMap& params,
                          const ExperimentConfig& cfg) {
    const ModelConfig mc = cfg.model_config();
    std::vector<const MultimodalSample*> test_ptrs;
    std::vector<int> labels;
    for (std::int64_t id : pd.test) {
        test_ptrs.push_back(&pd.ds.samples[static_cast<std::size_t>(id)]);
        labels.push_back(pd.ds.samples[static_cast<std::size_t>(id)].label);
    }

    RunResult r;
    r.variant = variant_name(cfg.run.no_imputation, cfg.run.no_cond);
    const TaskOutput zero =
        task_forward(test_ptrs, params, mc, InputMode::kZeroFill, nullptr, cfg.run.no_cond);
    r.zero_fill = compute_metrics(zero.logits, labels, mc.classes);
    if (cfg.run.no_imputation) {
        r.imputed = r.zero_fill;
    } else {
        const DiffusionSchedule sched = build_schedule(mc.T_diff, mc.beta_min, mc.beta_max);
        const std::vector<Tensor> imputed =
            impute(test_ptrs, params, sched, mc, Rng::derive(cfg.run.seed, kSeedImputeEval),
                   cfg.run.no_cond);
        const TaskOutput imp =
            task_forward(test_ptrs, params, mc, InputMode::kImputed, &imputed, cfg.run.no_cond);
        r.imputed = compute_metrics(imp.logits, labels, mc.classes);
    }

    AnalysisConfig ac;
    ac.ratio = cfg.run.analysis_ratio;
    ac.mask_seed = Rng::derive(cfg.run.seed, kSeedAnalysis, 1);
    ac.impute_seed = Rng::derive(cfg.run.seed, kSeedAnalysis, 2);
    ac.no_imputation = cfg.run.no_imputation;
    ac.no_cond = cfg.run.no_cond;
    r.analysis = feature_reconstruction_analysis(test_ptrs, params, mc, ac);
    return r;
}

}  // namespace

std::string variant_name(bool no_imputation, bool no_cond) {
    if (no_imputation && no_cond) return "no_imputation_no_cond";
    if (no_imputation) return "no_imputation";
    if (no_cond) return "no_cond";
    return "full";
}

PreparedData prepare_data(const ExperimentConfig& cfg) {
    cfg.validate();
    PreparedData pd;
    if (cfg.data.source == "synthetic") {
        SyntheticConfig sc;
        sc.n = cfg.data.n;
        sc.M = cfg.data.M;
        sc.L_ts = cfg.data.L_ts;
        sc.L_f = cfg.data.L_f;
        sc.classes = cfg.data.classes;
        sc.class_offset = cfg.data.class_offset;
        sc.noise_sigma = cfg.data.noise_sigma;
        sc.seed = Rng::derive(cfg.run.seed, kSeedSynthetic);
        pd.ds = generate_synthetic(sc);
    } else {
        pd.ds = load_csv(cfg.data.csv_path, cfg.data.M, cfg.data.L_f);
        if (pd.ds.classes > cfg.data.classes) {
            throw ConfigError("csv labels exceed data.classes");
        }
        pd.ds.classes = cfg.data.classes;
        resample_dataset(pd.ds, cfg.data.L_ts);
    }
    MissingnessConfig mc = cfg.missing;
    mc.seed = Rng::derive(cfg.run.seed, kSeedMissingness);
    apply_missingness(pd.ds, mc);
    stratified_split(pd.ds, cfg.data.test_fraction, Rng::derive(cfg.run.seed, kSeedSplit),
                     pd.train, pd.test);
    normalize_dataset(pd.ds, pd.train);
    pd.part = partition(pd.ds, pd.train, cfg.fed.clients, cfg.fed.alpha, cfg.fed.overlap,
                        Rng::derive(cfg.run.seed, kSeedPartition));
    return pd;
}

RunResult run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    const fs::path out(cfg.run.out_dir);
    fs::create_directories(out / "ckpt");
    fs::create_directories(out / "reports");
    {
        std::ofstream c(out / "config.toml");
        c << serialize_config(cfg);
    }

    PreparedData pd = prepare_data(cfg);
    const ModelConfig mc = cfg.model_config();
    ParamMap global = init_global_params(mc, Rng::derive(cfg.run.seed, kSeedInit));

    Rng sel(Rng::derive(cfg.run.seed, kSeedSampling));
    const int K = cfg.fed.clients;
    const int per_round = std::clamp(
        static_cast<int>(std::llround(cfg.fed.participation * static_cast<double>(K))), 1, K);

    std::ofstream rounds_out(out / "reports" / "rounds.jsonl");
    if (!rounds_out) throw StateError("cannot open reports/rounds.jsonl for writing");

    RunResult result;
    try {
        for (int t = 1; t <= cfg.fed.rounds; ++t) {
            RoundPlan plan;
            plan.round = t;
            plan.clients = sample_clients(K, per_round, sel);
            plan.seed = Rng::derive(cfg.run.seed, kSeedRound, static_cast<std::uint64_t>(t));
            plan.no_cond = cfg.run.no_cond;
            plan.parallel = cfg.fed.parallel;
            const RoundReport rep = run_round(global, pd.ds, pd.part, plan, mc, cfg.train);

            double la = 0.0, lb = 0.0, w = 0.0;
            json jc = json::array();
            for (const ClientReport& c : rep.clients) {
                jc.push_back(c.id);
                if (c.excluded) continue;
                la += c.loss_a * static_cast<double>(c.n);
                lb += c.loss_b * static_cast<double>(c.n);
                w += static_cast<double>(c.n);
            }
            json line;
            line["round"] = t;
            line["clients"] = jc;
            line["aggregated"] = rep.aggregated;
            line["excluded"] = rep.excluded;
            line["loss_a"] = w > 0.0 ? la / w : 0.0;
            line["loss_b"] = w > 0.0 ? lb / w : 0.0;
            rounds_out << line.dump() << "\n" << std::flush;

            if (cfg.run.checkpoint_every > 0 && t % cfg.run.checkpoint_every == 0) {
                global.save((out / "ckpt" / ("round_" + std::to_string(t) + ".bin")).string());
            }
        }
        global.save((out / "ckpt" / "final.bin").string());
        result = evaluate_global(pd, global, cfg);
    } catch (const NumericError&) {
        global.save((out / "ckpt" / "nan_dump.bin").string());
        throw;
    }

    result.rounds = cfg.fed.rounds;
    result.out_dir = out.string();
    write_metrics_file(result, cfg, (out / "metrics.json").string());
    write_feature_distances_csv(result.analysis, (out / "feature_distances.csv").string());
    return result;
}

RunResult analyze_checkpoint(const ExperimentConfig& cfg, const std::string& ckpt_path,
                             const std::string& out_dir) {
    cfg.validate();
    ParamMap params = ParamMap::load(ckpt_path);
    const ParamMap reference = init_global_params(cfg.model_config(), 0);
    if (!params.same_schema(reference)) {
        throw ConfigError("checkpoint " + ckpt_path + " does not match the configured model");
    }
    PreparedData pd = prepare_data(cfg);
    RunResult r = evaluate_global(pd, params, cfg);
    r.rounds = 0;
    r.out_dir = out_dir;
    fs::create_directories(out_dir);
    write_metrics_file(r, cfg, (fs::path(out_dir) / "metrics.json").string());
    write_feature_distances_csv(r.analysis,
                                (fs::path(out_dir) / "feature_distances.csv").string());
    return r;
}

std::vector<RunResult> run_ablations(const ExperimentConfig& cfg) {
    const fs::path out(cfg.run.out_dir);
    fs::create_directories(out);
    std::vector<RunResult> results;
    std::vector<ExperimentConfig> cfgs;
    const bool flags[4][2] = {{false, false}, {true, false}, {false, true}, {true, true}};
    for (const auto& f : flags) {
        ExperimentConfig c = cfg;
        c.run.no_imputation = f[0];
        c.run.no_cond = f[1];
        c.run.out_dir = (out / variant_name(f[0], f[1])).string();
        cfgs.push_back(c);
    }
    std::vector<const ExperimentConfig*> refs;
    for (std::size_t i = 0; i < cfgs.size(); ++i) {
        results.push_back(run_experiment(cfgs[i]));
        refs.push_back(&cfgs[i]);
    }
    write_summary_csv(results, refs, (out / "summary.csv").string());
    return results;
}

std::vector<RunResult> run_grid(const ExperimentConfig& base, const std::vector<double>& ps,
                                const std::vector<double>& pw, bool ablate,
                                const std::string& out_root) {
    if (ps.empty() || pw.empty()) throw ConfigError("grid: empty p_s or p_w list");
    fs::create_directories(out_root);
    std::vector<RunResult> results;
    std::vector<ExperimentConfig> cfgs;
    for (double a : ps) {
        for (double b : pw) {
            const std::string cell = "ps" + fmt_g(a, "%g") + "_pw" + fmt_g(b, "%g");
            ExperimentConfig c = base;
            c.missing.p_s = a;
            c.missing.p_w = b;
            c.run.out_dir = (fs::path(out_root) / cell).string();
            if (ablate) {
                for (RunResult& r : run_ablations(c)) {
                    results.push_back(std::move(r));
                    cfgs.push_back(c);
                }
            } else {
                c.run.no_imputation = false;
                c.run.no_cond = false;
                c.run.out_dir = (fs::path(out_root) / cell / "full").string();
                results.push_back(run_experiment(c));
                cfgs.push_back(c);
            }
        }
    }
    std::vector<const ExperimentConfig*> refs;
    for (const auto& c : cfgs) refs.push_back(&c);
    write_summary_csv(results, refs, (fs::path(out_root) / "summary.csv").string());
    return results;
}

}  // namespace fedcondi
