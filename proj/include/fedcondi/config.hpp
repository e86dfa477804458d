#pragma once

#include <cstdint>
#include <string>

#include "fedcondi/data.hpp"
#include "fedcondi/federation.hpp"
#include "fedcondi/model.hpp"

namespace fedcondi {

struct DataConfig {
    std::string source = "synthetic";  // "synthetic" or "csv"
    std::string csv_path;
    std::int64_t n = 2000;
    std::int64_t M = 3;
    std::int64_t L_ts = 32;
    std::int64_t L_f = 2;
    int classes = 2;
    double class_offset = 1.0;
    double noise_sigma = 0.1;
    double test_fraction = 0.3;
};

struct FederationConfig {
    int clients = 6;
    double participation = 0.5;
    int rounds = 70;
    double alpha = 0.5;    // Dirichlet label-skew concentration
    double overlap = 0.0;  // fraction of samples shared with a second client
    bool parallel = false;
};

struct RunConfig {
    std::uint64_t seed = 42;
    std::string out_dir = "runs/default";
    bool no_imputation = false;
    bool no_cond = false;
    double analysis_ratio = 0.2;
    int checkpoint_every = 0;  // rounds between checkpoints; 0 = final only
};

// Everything a run needs, grouped the way the TOML file is.
struct ExperimentConfig {
    DataConfig data;
    MissingnessConfig missing;  // seed field is derived at run time, not parsed
    FederationConfig fed;
    ModelConfig model;  // M, L_ts, L_f, classes are overwritten from data
    TrainConfig train;
    RunConfig run;

    ModelConfig model_config() const;
    void validate() const;
};

// TOML subset: [section] headers, key = value lines, # comments, values are
// quoted strings (no escapes), booleans, integers, or floats. Unknown
// sections or keys, duplicate keys, and malformed values raise ParseError.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);

// Canonical rendering; parse_config(serialize_config(c)) reproduces c.
std::string serialize_config(const ExperimentConfig& cfg);

}  // namespace fedcondi
