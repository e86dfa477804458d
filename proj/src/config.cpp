#include "fedcondi/config.hpp"

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "fedcondi/errors.hpp"

namespace fedcondi {

namespace {

[[noreturn]] void fail(int line, const std::string& msg) {
    throw ParseError("config line " + std::to_string(line) + ": " + msg);
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::string strip_comment(const std::string& s) {
    bool quoted = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '"') quoted = !quoted;
        if (s[i] == '#' && !quoted) return s.substr(0, i);
    }
    return s;
}

std::string parse_string(const std::string& v, int line) {
    if (v.size() < 2 || v.front() != '"' || v.back() != '"') {
        fail(line, "expected a quoted string, got '" + v + "'");
    }
    const std::string inner = v.substr(1, v.size() - 2);
    if (inner.find('"') != std::string::npos || inner.find('\\') != std::string::npos) {
        fail(line, "string escapes are not supported");
    }
    return inner;
}

bool parse_bool(const std::string& v, int line) {
    if (v == "true") return true;
    if (v == "false") return false;
    fail(line, "expected true or false, got '" + v + "'");
}

std::int64_t parse_int(const std::string& v, int line) {
    errno = 0;
    char* end = nullptr;
    const long long x = std::strtoll(v.c_str(), &end, 10);
    if (errno != 0 || end != v.c_str() + v.size() || v.empty()) {
        fail(line, "expected an integer, got '" + v + "'");
    }
    return x;
}

std::uint64_t parse_u64(const std::string& v, int line) {
    errno = 0;
    char* end = nullptr;
    if (!v.empty() && v[0] == '-') fail(line, "expected a non-negative integer");
    const unsigned long long x = std::strtoull(v.c_str(), &end, 10);
    if (errno != 0 || end != v.c_str() + v.size() || v.empty()) {
        fail(line, "expected an integer, got '" + v + "'");
    }
    return x;
}

double parse_float(const std::string& v, int line) {
    errno = 0;
    char* end = nullptr;
    const double x = std::strtod(v.c_str(), &end);
    if (errno != 0 || end != v.c_str() + v.size() || v.empty()) {
        fail(line, "expected a number, got '" + v + "'");
    }
    return x;
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

ModelConfig ExperimentConfig::model_config() const {
    ModelConfig m = model;
    m.M = data.M;
    m.L_ts = data.L_ts;
    m.L_f = data.L_f;
    m.classes = data.classes;
    return m;
}

void ExperimentConfig::validate() const {
    if (data.source != "synthetic" && data.source != "csv") {
        throw ConfigError("data.source must be \"synthetic\" or \"csv\"");
    }
    if (data.source == "csv" && data.csv_path.empty()) {
        throw ConfigError("data.csv_path is required when data.source = \"csv\"");
    }
    if (data.n < 4) throw ConfigError("data.n must be at least 4");
    if (!(data.test_fraction > 0.0 && data.test_fraction < 1.0)) {
        throw ConfigError("data.test_fraction must lie in (0,1)");
    }
    if (data.noise_sigma < 0.0) throw ConfigError("data.noise_sigma must be >= 0");
    if (missing.p_s < 0.0 || missing.p_s > 1.0 || missing.p_w < 0.0 || missing.p_w > 1.0) {
        throw ConfigError("missingness rates must lie in [0,1]");
    }
    if (fed.clients < 1) throw ConfigError("federation.clients must be >= 1");
    if (!(fed.participation > 0.0 && fed.participation <= 1.0)) {
        throw ConfigError("federation.participation must lie in (0,1]");
    }
    if (fed.rounds < 0) throw ConfigError("federation.rounds must be >= 0");
    if (fed.alpha <= 0.0) throw ConfigError("federation.alpha must be positive");
    if (fed.overlap < 0.0 || fed.overlap >= 1.0) {
        throw ConfigError("federation.overlap must lie in [0,1)");
    }
    if (!(run.analysis_ratio > 0.0 && run.analysis_ratio < 1.0)) {
        throw ConfigError("run.analysis_ratio must lie in (0,1)");
    }
    if (run.checkpoint_every < 0) throw ConfigError("run.checkpoint_every must be >= 0");
    model_config().validate();
    train.validate();
}

ExperimentConfig parse_config(const std::string& text) {
    ExperimentConfig cfg;
    std::istringstream in(text);
    std::string raw;
    std::string section;
    std::set<std::string> seen;
    int line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        const std::string line = trim(strip_comment(raw));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') fail(line_no, "unterminated section header");
            section = trim(line.substr(1, line.size() - 2));
            if (section != "data" && section != "missingness" && section != "federation" &&
                section != "model" && section != "train" && section != "run") {
                fail(line_no, "unknown section [" + section + "]");
            }
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) fail(line_no, "expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) fail(line_no, "empty key");
        if (section.empty()) fail(line_no, "key '" + key + "' outside any section");
        if (!seen.insert(section + "." + key).second) {
            fail(line_no, "duplicate key '" + section + "." + key + "'");
        }

        if (section == "data") {
            if (key == "source") cfg.data.source = parse_string(value, line_no);
            else if (key == "csv_path") cfg.data.csv_path = parse_string(value, line_no);
            else if (key == "n") cfg.data.n = parse_int(value, line_no);
            else if (key == "modalities") cfg.data.M = parse_int(value, line_no);
            else if (key == "timesteps") cfg.data.L_ts = parse_int(value, line_no);
            else if (key == "features") cfg.data.L_f = parse_int(value, line_no);
            else if (key == "classes") cfg.data.classes = static_cast<int>(parse_int(value, line_no));
            else if (key == "class_offset") cfg.data.class_offset = parse_float(value, line_no);
            else if (key == "noise_sigma") cfg.data.noise_sigma = parse_float(value, line_no);
            else if (key == "test_fraction") cfg.data.test_fraction = parse_float(value, line_no);
            else fail(line_no, "unknown key 'data." + key + "'");
        } else if (section == "missingness") {
            if (key == "p_s") cfg.missing.p_s = parse_float(value, line_no);
            else if (key == "p_w") cfg.missing.p_w = parse_float(value, line_no);
            else if (key == "per_timestep") cfg.missing.per_timestep = parse_bool(value, line_no);
            else fail(line_no, "unknown key 'missingness." + key + "'");
        } else if (section == "federation") {
            if (key == "clients") cfg.fed.clients = static_cast<int>(parse_int(value, line_no));
            else if (key == "participation") cfg.fed.participation = parse_float(value, line_no);
            else if (key == "rounds") cfg.fed.rounds = static_cast<int>(parse_int(value, line_no));
            else if (key == "alpha") cfg.fed.alpha = parse_float(value, line_no);
            else if (key == "overlap") cfg.fed.overlap = parse_float(value, line_no);
            else if (key == "parallel") cfg.fed.parallel = parse_bool(value, line_no);
            else fail(line_no, "unknown key 'federation." + key + "'");
        } else if (section == "model") {
            if (key == "embedding_dim") cfg.model.D = parse_int(value, line_no);
            else if (key == "t_diff") cfg.model.T_diff = static_cast<int>(parse_int(value, line_no));
            else if (key == "beta_min") cfg.model.beta_min = parse_float(value, line_no);
            else if (key == "beta_max") cfg.model.beta_max = parse_float(value, line_no);
            else if (key == "experts") cfg.model.experts = static_cast<int>(parse_int(value, line_no));
            else if (key == "top_k") cfg.model.top_k = static_cast<int>(parse_int(value, line_no));
            else if (key == "mask_ratio_lo") cfg.model.mask_ratio_lo = parse_float(value, line_no);
            else if (key == "mask_ratio_hi") cfg.model.mask_ratio_hi = parse_float(value, line_no);
            else if (key == "n_realizations") {
                cfg.model.n_realizations = static_cast<int>(parse_int(value, line_no));
            } else if (key == "hidden") cfg.model.hidden = parse_int(value, line_no);
            else if (key == "ctx_dim") cfg.model.ctx_dim = parse_int(value, line_no);
            else if (key == "enc_hidden") cfg.model.enc_hidden = parse_int(value, line_no);
            else fail(line_no, "unknown key 'model." + key + "'");
        } else if (section == "train") {
            if (key == "epochs_a") cfg.train.epochs_a = static_cast<int>(parse_int(value, line_no));
            else if (key == "epochs_b") cfg.train.epochs_b = static_cast<int>(parse_int(value, line_no));
            else if (key == "batch_size") cfg.train.batch_size = static_cast<int>(parse_int(value, line_no));
            else if (key == "lr") cfg.train.lr = parse_float(value, line_no);
            else fail(line_no, "unknown key 'train." + key + "'");
        } else {  // run
            if (key == "seed") cfg.run.seed = parse_u64(value, line_no);
            else if (key == "out_dir") cfg.run.out_dir = parse_string(value, line_no);
            else if (key == "no_imputation") cfg.run.no_imputation = parse_bool(value, line_no);
            else if (key == "no_cond") cfg.run.no_cond = parse_bool(value, line_no);
            else if (key == "analysis_ratio") cfg.run.analysis_ratio = parse_float(value, line_no);
            else if (key == "checkpoint_every") {
                cfg.run.checkpoint_every = static_cast<int>(parse_int(value, line_no));
            } else fail(line_no, "unknown key 'run." + key + "'");
        }
    }
    return cfg;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open config file " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

std::string serialize_config(const ExperimentConfig& cfg) {
    std::ostringstream o;
    o << "[data]\n";
    o << "source = \"" << cfg.data.source << "\"\n";
    if (!cfg.data.csv_path.empty()) o << "csv_path = \"" << cfg.data.csv_path << "\"\n";
    o << "n = " << cfg.data.n << "\n";
    o << "modalities = " << cfg.data.M << "\n";
    o << "timesteps = " << cfg.data.L_ts << "\n";
    o << "features = " << cfg.data.L_f << "\n";
    o << "classes = " << cfg.data.classes << "\n";
    o << "class_offset = " << fmt(cfg.data.class_offset) << "\n";
    o << "noise_sigma = " << fmt(cfg.data.noise_sigma) << "\n";
    o << "test_fraction = " << fmt(cfg.data.test_fraction) << "\n";
    o << "\n[missingness]\n";
    o << "p_s = " << fmt(cfg.missing.p_s) << "\n";
    o << "p_w = " << fmt(cfg.missing.p_w) << "\n";
    o << "per_timestep = " << (cfg.missing.per_timestep ? "true" : "false") << "\n";
    o << "\n[federation]\n";
    o << "clients = " << cfg.fed.clients << "\n";
    o << "participation = " << fmt(cfg.fed.participation) << "\n";
    o << "rounds = " << cfg.fed.rounds << "\n";
    o << "alpha = " << fmt(cfg.fed.alpha) << "\n";
    o << "overlap = " << fmt(cfg.fed.overlap) << "\n";
    o << "parallel = " << (cfg.fed.parallel ? "true" : "false") << "\n";
    o << "\n[model]\n";
    o << "embedding_dim = " << cfg.model.D << "\n";
    o << "t_diff = " << cfg.model.T_diff << "\n";
    o << "beta_min = " << fmt(cfg.model.beta_min) << "\n";
    o << "beta_max = " << fmt(cfg.model.beta_max) << "\n";
    o << "experts = " << cfg.model.experts << "\n";
    o << "top_k = " << cfg.model.top_k << "\n";
    o << "mask_ratio_lo = " << fmt(cfg.model.mask_ratio_lo) << "\n";
    o << "mask_ratio_hi = " << fmt(cfg.model.mask_ratio_hi) << "\n";
    o << "n_realizations = " << cfg.model.n_realizations << "\n";
    o << "hidden = " << cfg.model.hidden << "\n";
    o << "ctx_dim = " << cfg.model.ctx_dim << "\n";
    o << "enc_hidden = " << cfg.model.enc_hidden << "\n";
    o << "\n[train]\n";
    o << "epochs_a = " << cfg.train.epochs_a << "\n";
    o << "epochs_b = " << cfg.train.epochs_b << "\n";
    o << "batch_size = " << cfg.train.batch_size << "\n";
    o << "lr = " << fmt(cfg.train.lr) << "\n";
    o << "\n[run]\n";
    o << "seed = " << cfg.run.seed << "\n";
    o << "out_dir = \"" << cfg.run.out_dir << "\"\n";
    o << "no_imputation = " << (cfg.run.no_imputation ? "true" : "false") << "\n";
    o << "no_cond = " << (cfg.run.no_cond ? "true" : "false") << "\n";
    o << "analysis_ratio = " << fmt(cfg.run.analysis_ratio) << "\n";
    o << "checkpoint_every = " << cfg.run.checkpoint_every << "\n";
    return o.str();
}

}  // namespace fedcondi
