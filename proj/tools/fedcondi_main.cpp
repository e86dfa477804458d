#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "fedcondi/config.hpp"
#include "fedcondi/errors.hpp"
#include "fedcondi/experiment.hpp"

namespace {

// Precedence: --out flag, then FEDCONDI_OUT, then the config file value.
void resolve_out_dir(fedcondi::ExperimentConfig& cfg, const std::string& flag_value) {
    if (!flag_value.empty()) {
        cfg.run.out_dir = flag_value;
        return;
    }
    if (const char* env = std::getenv("FEDCONDI_OUT"); env && *env) {
        cfg.run.out_dir = env;
    }
}

void print_result(const fedcondi::RunResult& r) {
    std::cout << r.variant << ": accuracy=" << r.imputed.accuracy
              << " macro_f1=" << r.imputed.macro_f1;
    if (r.imputed.auroc_defined) std::cout << " auroc=" << r.imputed.auroc;
    std::cout << " frac_l2=" << r.analysis.frac_l2 << " frac_cos=" << r.analysis.frac_cos
              << " -> " << r.out_dir << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"fedcondi: federated conditional-diffusion imputation for multimodal "
                 "time series"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_flag;
    std::uint64_t seed = 0;
    bool ablate = false;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "TOML config file (defaults when omitted)");
        cmd->add_option("--out", out_flag, "output directory (overrides FEDCONDI_OUT)");
        return cmd->add_option("--seed", seed, "override the run seed");
    };

    CLI::App* run = app.add_subcommand("run", "one federated training run");
    CLI::Option* run_seed = add_common(run);
    run->add_flag("--ablate", ablate, "also run the three ablated variants");

    CLI::App* grid = app.add_subcommand("grid", "sweep missingness settings");
    CLI::Option* grid_seed = add_common(grid);
    std::vector<double> ps{0.2, 0.8};
    std::vector<double> pw{0.2, 0.8};
    grid->add_option("--ps", ps, "sample-level missing ratios")->expected(1, -1);
    grid->add_option("--pw", pw, "within-modality missing rates")->expected(1, -1);
    grid->add_flag("--ablate", ablate, "run every ablation variant per cell");

    CLI::App* analyze = app.add_subcommand("analyze", "re-evaluate a saved checkpoint");
    CLI::Option* analyze_seed = add_common(analyze);
    std::string ckpt_path;
    analyze->add_option("--ckpt", ckpt_path, "checkpoint file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        fedcondi::ExperimentConfig cfg;
        if (!config_path.empty()) cfg = fedcondi::load_config(config_path);
        resolve_out_dir(cfg, out_flag);

        if (run->parsed()) {
            if (run_seed->count() > 0) cfg.run.seed = seed;
            if (ablate) {
                for (const auto& r : fedcondi::run_ablations(cfg)) print_result(r);
            } else {
                print_result(fedcondi::run_experiment(cfg));
            }
        } else if (grid->parsed()) {
            if (grid_seed->count() > 0) cfg.run.seed = seed;
            for (const auto& r :
                 fedcondi::run_grid(cfg, ps, pw, ablate, cfg.run.out_dir)) {
                print_result(r);
            }
        } else if (analyze->parsed()) {
            if (analyze_seed->count() > 0) cfg.run.seed = seed;
            print_result(fedcondi::analyze_checkpoint(cfg, ckpt_path, cfg.run.out_dir));
        }
    } catch (const fedcondi::NumericError& e) {
        std::cerr << "numeric error: " << e.what()
                  << "\n(last global state dumped to ckpt/nan_dump.bin when training)\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
