#include "fedcondi/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "fedcondi/errors.hpp"
#include "fedcondi/rng.hpp"

namespace fedcondi {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

double nonlinearity(int kind, double v) {
    switch (kind % 3) {
        case 0: return std::tanh(v);
        case 1: return v + 0.25 * v * v;
        default: return std::sin(v);
    }
}

bool all_ones(const Tensor& t) {
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        if (t[i] != 1.0) return false;
    }
    return true;
}

std::string format_value(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

bool MultimodalSample::fully_observed() const {
    for (const auto& m : mask) {
        if (!all_ones(m)) return false;
    }
    return true;
}

Dataset generate_synthetic(const SyntheticConfig& cfg) {
    if (cfg.M < 2) throw ConfigError("generate_synthetic: M must be >= 2");
    if (cfg.classes < 2) throw ConfigError("generate_synthetic: classes must be >= 2");
    if (cfg.n < 1 || cfg.L_ts < 2 || cfg.L_f < 1) {
        throw ConfigError("generate_synthetic: sizes must be positive (L_ts >= 2)");
    }
    if (cfg.noise_sigma < 0.0) throw ConfigError("generate_synthetic: negative noise sigma");

    // Integer frequencies not divisible by L_ts, so each sinusoid sums to
    // exactly zero over the time axis and class offsets survive averaging.
    const std::int64_t f1 = 1;
    const std::int64_t f2 = cfg.L_ts > 5 ? 5 : cfg.L_ts - 1;

    Dataset ds;
    ds.M = cfg.M;
    ds.L_ts = cfg.L_ts;
    ds.L_f = cfg.L_f;
    ds.classes = cfg.classes;
    ds.samples.resize(static_cast<std::size_t>(cfg.n));

    for (std::int64_t i = 0; i < cfg.n; ++i) {
        MultimodalSample& s = ds.samples[static_cast<std::size_t>(i)];
        s.id = i;
        s.label = static_cast<int>(i % cfg.classes);
        Rng rng(Rng::derive(cfg.seed, static_cast<std::uint64_t>(i)));

        Tensor base = Tensor::zeros({cfg.L_ts, cfg.L_f});
        for (std::int64_t f = 0; f < cfg.L_f; ++f) {
            const double a1 = rng.uniform(0.5, 1.5);
            const double p1 = rng.uniform(0.0, kTwoPi);
            const double a2 = rng.uniform(0.5, 1.5);
            const double p2 = rng.uniform(0.0, kTwoPi);
            for (std::int64_t t = 0; t < cfg.L_ts; ++t) {
                const double phase = kTwoPi * static_cast<double>(t) / static_cast<double>(cfg.L_ts);
                double v = s.label * cfg.class_offset;
                v += a1 * std::sin(static_cast<double>(f1) * phase + p1);
                v += a2 * std::sin(static_cast<double>(f2) * phase + p2);
                if (cfg.noise_sigma > 0.0) v += rng.normal(0.0, cfg.noise_sigma);
                base.at(t, f) = v;
            }
        }

        s.clean.push_back(base);
        for (std::int64_t m = 1; m < cfg.M; ++m) {
            const std::int64_t lag = m % cfg.L_ts;
            const double scale = 1.0 + 0.5 * static_cast<double>(m);
            Tensor mod = Tensor::zeros({cfg.L_ts, cfg.L_f});
            for (std::int64_t t = 0; t < cfg.L_ts; ++t) {
                for (std::int64_t f = 0; f < cfg.L_f; ++f) {
                    double v = scale * nonlinearity(static_cast<int>(m - 1),
                                                    base.at((t + lag) % cfg.L_ts, f));
                    if (cfg.noise_sigma > 0.0) v += rng.normal(0.0, cfg.noise_sigma);
                    mod.at(t, f) = v;
                }
            }
            s.clean.push_back(std::move(mod));
        }

        s.x = s.clean;
        for (std::int64_t m = 0; m < cfg.M; ++m) {
            s.mask.push_back(Tensor::full({cfg.L_ts, cfg.L_f}, 1.0));
        }
        s.r.assign(static_cast<std::size_t>(cfg.M), 1);
    }
    return ds;
}

void apply_missingness(std::vector<MultimodalSample>& samples, std::int64_t L_ts,
                       const MissingnessConfig& cfg) {
    if (cfg.p_s < 0.0 || cfg.p_s > 1.0 || cfg.p_w < 0.0 || cfg.p_w > 1.0) {
        throw ConfigError("apply_missingness: p_s and p_w must lie in [0,1]");
    }
    const auto n = static_cast<std::int64_t>(samples.size());
    const auto n_aff = static_cast<std::int64_t>(std::llround(cfg.p_s * static_cast<double>(n)));
    if (n_aff == 0) return;

    Rng rng(cfg.seed);
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);

    for (std::int64_t a = 0; a < n_aff; ++a) {
        MultimodalSample& s = samples[static_cast<std::size_t>(order[static_cast<std::size_t>(a)])];
        const std::int64_t M = s.modalities();
        if (M < 2) {
            throw ConfigError(
                "apply_missingness: cannot keep a fully observed modality with M < 2");
        }
        const std::int64_t m = rng.below(M);
        Tensor& R = s.mask[static_cast<std::size_t>(m)];
        if (cfg.per_timestep) {
            auto k = static_cast<std::int64_t>(
                std::llround(cfg.p_w * static_cast<double>(L_ts)));
            if (k == 0 && cfg.p_w > 0.0) k = 1;
            std::vector<std::int64_t> ts(static_cast<std::size_t>(L_ts));
            std::iota(ts.begin(), ts.end(), 0);
            rng.shuffle(ts);
            const std::int64_t L_f = R.dim(1);
            for (std::int64_t j = 0; j < k; ++j) {
                for (std::int64_t f = 0; f < L_f; ++f) {
                    R.at(ts[static_cast<std::size_t>(j)], f) = 0.0;
                }
            }
        } else {
            std::int64_t flipped = 0;
            for (std::int64_t i = 0; i < R.numel(); ++i) {
                if (rng.bernoulli(cfg.p_w)) {
                    R[i] = 0.0;
                    ++flipped;
                }
            }
            // An affected sample must actually lose data, so the rare
            // zero-flip draw hides one uniformly chosen cell instead.
            if (flipped == 0 && cfg.p_w > 0.0) R[rng.below(R.numel())] = 0.0;
        }
        Tensor& x = s.x[static_cast<std::size_t>(m)];
        bool any = false;
        for (std::int64_t i = 0; i < R.numel(); ++i) {
            x[i] *= R[i];
            any = any || R[i] != 0.0;
        }
        s.r[static_cast<std::size_t>(m)] = any ? 1 : 0;
    }
}

void apply_missingness(Dataset& ds, const MissingnessConfig& cfg) {
    apply_missingness(ds.samples, ds.L_ts, cfg);
}

FederatedPartition partition(const Dataset& ds, const std::vector<std::int64_t>& ids, int K,
                             double alpha, double overlap_ratio, std::uint64_t seed) {
    if (K < 1) throw ConfigError("partition: K must be >= 1");
    if (alpha <= 0.0) throw ConfigError("partition: dirichlet alpha must be positive");
    if (overlap_ratio < 0.0 || overlap_ratio > 1.0) {
        throw ConfigError("partition: overlap_ratio must lie in [0,1]");
    }
    if (ids.empty()) throw ConfigError("partition: no samples");

    std::vector<std::vector<std::int64_t>> by_class(static_cast<std::size_t>(ds.classes));
    for (auto id : ids) {
        by_class[static_cast<std::size_t>(ds.samples[static_cast<std::size_t>(id)].label)]
            .push_back(id);
    }

    Rng rng(seed);
    FederatedPartition part;
    std::vector<int> primary(ds.samples.size(), 0);
    for (int attempt = 0; attempt < 100; ++attempt) {
        part.assignments.assign(static_cast<std::size_t>(K), {});
        for (const auto& cls : by_class) {
            if (cls.empty()) continue;
            const std::vector<double> q = rng.dirichlet(alpha, K);
            for (auto id : cls) {
                const double u = rng.uniform();
                double cum = 0.0;
                int k = K - 1;
                for (int c = 0; c < K; ++c) {
                    cum += q[static_cast<std::size_t>(c)];
                    if (u < cum) {
                        k = c;
                        break;
                    }
                }
                part.assignments[static_cast<std::size_t>(k)].push_back(id);
                primary[static_cast<std::size_t>(id)] = k;
            }
        }
        const bool ok = std::none_of(part.assignments.begin(), part.assignments.end(),
                                     [](const auto& a) { return a.empty(); });
        if (ok) {
            if (K > 1 && overlap_ratio > 0.0) {
                const auto n_over = static_cast<std::int64_t>(
                    std::llround(overlap_ratio * static_cast<double>(ids.size())));
                std::vector<std::int64_t> pool = ids;
                rng.shuffle(pool);
                for (std::int64_t i = 0; i < n_over; ++i) {
                    const std::int64_t id = pool[static_cast<std::size_t>(i)];
                    const int home = primary[static_cast<std::size_t>(id)];
                    std::int64_t second = rng.below(K - 1);
                    if (second >= home) ++second;
                    part.assignments[static_cast<std::size_t>(second)].push_back(id);
                }
            }
            for (auto& a : part.assignments) std::sort(a.begin(), a.end());
            part.n_k.clear();
            for (const auto& a : part.assignments) {
                part.n_k.push_back(static_cast<std::int64_t>(a.size()));
            }
            return part;
        }
    }
    throw StateError("partition: a client stayed empty after 100 redraws");
}

void stratified_split(const Dataset& ds, double test_fraction, std::uint64_t seed,
                      std::vector<std::int64_t>& train, std::vector<std::int64_t>& test) {
    if (test_fraction < 0.0 || test_fraction >= 1.0) {
        throw ConfigError("stratified_split: test_fraction must lie in [0,1)");
    }
    train.clear();
    test.clear();
    std::vector<std::vector<std::int64_t>> by_class(static_cast<std::size_t>(ds.classes));
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(ds.samples.size()); ++i) {
        by_class[static_cast<std::size_t>(ds.samples[static_cast<std::size_t>(i)].label)]
            .push_back(i);
    }
    Rng rng(seed);
    for (auto& cls : by_class) {
        rng.shuffle(cls);
        auto n_test = static_cast<std::int64_t>(
            std::llround(test_fraction * static_cast<double>(cls.size())));
        n_test = std::min<std::int64_t>(n_test, static_cast<std::int64_t>(cls.size()) - 1);
        if (n_test < 0) n_test = 0;
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(cls.size()); ++i) {
            (i < n_test ? test : train).push_back(cls[static_cast<std::size_t>(i)]);
        }
    }
    std::sort(train.begin(), train.end());
    std::sort(test.begin(), test.end());
}

Dataset load_csv(const std::string& path, std::int64_t M, std::int64_t L_f) {
    std::ifstream in(path);
    if (!in) throw ParseError("load_csv: cannot open " + path);

    auto split = [](const std::string& line) {
        std::vector<std::string> out;
        std::string cur;
        for (char c : line) {
            if (c == ',') {
                out.push_back(cur);
                cur.clear();
            } else if (c != '\r') {
                cur.push_back(c);
            }
        }
        out.push_back(cur);
        return out;
    };

    const std::size_t want = static_cast<std::size_t>(3 + M * L_f);
    std::string line;
    if (!std::getline(in, line)) throw ParseError("load_csv: empty file " + path);
    const auto header = split(line);
    if (header.size() != want || header[0] != "sample_id" || header[1] != "time" ||
        header.back() != "label") {
        throw ParseError("load_csv: line 1: header does not match the " + std::to_string(M) + "x" +
                         std::to_string(L_f) + " schema");
    }

    Dataset ds;
    ds.M = M;
    ds.L_f = L_f;

    auto parse_num = [](const std::string& tok, std::int64_t lineno) {
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(tok, &used);
        } catch (const std::exception&) {
            throw ParseError("load_csv: line " + std::to_string(lineno) + ": non-numeric cell '" +
                             tok + "'");
        }
        if (used != tok.size()) {
            throw ParseError("load_csv: line " + std::to_string(lineno) + ": non-numeric cell '" +
                             tok + "'");
        }
        return v;
    };

    struct Row {
        double time;
        std::vector<double> vals;
        std::vector<bool> present;
        int label;
    };
    std::vector<std::pair<std::int64_t, std::vector<Row>>> groups;
    std::int64_t lineno = 1;
    std::vector<std::int64_t> seen;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto toks = split(line);
        if (toks.size() != want) {
            throw ParseError("load_csv: line " + std::to_string(lineno) + ": expected " +
                             std::to_string(want) + " fields, got " + std::to_string(toks.size()));
        }
        const auto sid = static_cast<std::int64_t>(parse_num(toks[0], lineno));
        Row row;
        row.time = parse_num(toks[1], lineno);
        for (std::size_t i = 2; i + 1 < toks.size(); ++i) {
            row.present.push_back(!toks[i].empty());
            row.vals.push_back(toks[i].empty() ? 0.0 : parse_num(toks[i], lineno));
        }
        row.label = static_cast<int>(parse_num(toks.back(), lineno));
        if (groups.empty() || groups.back().first != sid) {
            if (std::find(seen.begin(), seen.end(), sid) != seen.end()) {
                throw ParseError("load_csv: line " + std::to_string(lineno) + ": sample id " +
                                 std::to_string(sid) + " reappears after other samples");
            }
            seen.push_back(sid);
            groups.emplace_back(sid, std::vector<Row>{});
        }
        if (!groups.back().second.empty() && row.time <= groups.back().second.back().time) {
            throw ParseError("load_csv: line " + std::to_string(lineno) +
                             ": time is not strictly increasing within sample " +
                             std::to_string(sid));
        }
        if (!groups.back().second.empty() && row.label != groups.back().second.front().label) {
            throw ParseError("load_csv: line " + std::to_string(lineno) +
                             ": label changes within sample " + std::to_string(sid));
        }
        groups.back().second.push_back(std::move(row));
    }
    if (groups.empty()) throw ParseError("load_csv: no data rows in " + path);

    int max_label = 0;
    std::int64_t common_L = static_cast<std::int64_t>(groups.front().second.size());
    for (const auto& [sid, rows] : groups) {
        MultimodalSample s;
        s.id = sid;
        s.label = rows.front().label;
        max_label = std::max(max_label, s.label);
        const auto L = static_cast<std::int64_t>(rows.size());
        if (L != common_L) common_L = 0;
        for (std::int64_t m = 0; m < M; ++m) {
            Tensor x = Tensor::zeros({L, L_f});
            Tensor R = Tensor::full({L, L_f}, 1.0);
            for (std::int64_t t = 0; t < L; ++t) {
                for (std::int64_t f = 0; f < L_f; ++f) {
                    const auto col = static_cast<std::size_t>(m * L_f + f);
                    x.at(t, f) = rows[static_cast<std::size_t>(t)].vals[col];
                    if (!rows[static_cast<std::size_t>(t)].present[col]) R.at(t, f) = 0.0;
                }
            }
            bool any = false;
            for (std::int64_t i = 0; i < R.numel(); ++i) any = any || R[i] != 0.0;
            s.r.push_back(any ? 1 : 0);
            s.clean.push_back(x);
            s.x.push_back(std::move(x));
            s.mask.push_back(std::move(R));
        }
        ds.samples.push_back(std::move(s));
    }
    ds.L_ts = common_L;
    ds.classes = max_label + 1;
    return ds;
}

void write_csv(const Dataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ParseError("write_csv: cannot open " + path);
    out << "sample_id,time";
    for (std::int64_t m = 0; m < ds.M; ++m) {
        for (std::int64_t f = 0; f < ds.L_f; ++f) out << ",mod" << m << "_f" << f;
    }
    out << ",label\n";
    for (const auto& s : ds.samples) {
        const std::int64_t L = s.x.front().dim(0);
        for (std::int64_t t = 0; t < L; ++t) {
            out << s.id << ',' << t;
            for (std::int64_t m = 0; m < ds.M; ++m) {
                for (std::int64_t f = 0; f < ds.L_f; ++f) {
                    out << ',';
                    if (s.mask[static_cast<std::size_t>(m)].at(t, f) != 0.0) {
                        out << format_value(s.x[static_cast<std::size_t>(m)].at(t, f));
                    }
                }
            }
            out << ',' << s.label << '\n';
        }
    }
    if (!out) throw ParseError("write_csv: write failed for " + path);
}

void normalize_dataset(Dataset& ds, const std::vector<std::int64_t>& train_ids) {
    for (std::int64_t m = 0; m < ds.M; ++m) {
        for (std::int64_t f = 0; f < ds.L_f; ++f) {
            double sum = 0.0, sq = 0.0, count = 0.0;
            for (auto id : train_ids) {
                const auto& s = ds.samples[static_cast<std::size_t>(id)];
                const Tensor& x = s.x[static_cast<std::size_t>(m)];
                const Tensor& R = s.mask[static_cast<std::size_t>(m)];
                for (std::int64_t t = 0; t < x.dim(0); ++t) {
                    if (R.at(t, f) == 0.0) continue;
                    sum += x.at(t, f);
                    sq += x.at(t, f) * x.at(t, f);
                    count += 1.0;
                }
            }
            const double mu = count > 0.0 ? sum / count : 0.0;
            const double var = count > 0.0 ? std::max(0.0, sq / count - mu * mu) : 0.0;
            const double sigma = std::sqrt(var);
            const double inv = sigma < 1e-8 ? 0.0 : 1.0 / sigma;
            for (auto& s : ds.samples) {
                Tensor& clean = s.clean[static_cast<std::size_t>(m)];
                Tensor& x = s.x[static_cast<std::size_t>(m)];
                const Tensor& R = s.mask[static_cast<std::size_t>(m)];
                for (std::int64_t t = 0; t < clean.dim(0); ++t) {
                    clean.at(t, f) = (clean.at(t, f) - mu) * inv;
                    x.at(t, f) = R.at(t, f) * clean.at(t, f);
                }
            }
        }
    }
}

Tensor resample_to_length(const Tensor& x, std::int64_t L_ts) {
    if (x.rank() != 2) throw ShapeError("resample_to_length: expected [L,F], got " + x.shape_str());
    const std::int64_t L_in = x.dim(0), F = x.dim(1);
    if (L_in < 2) throw ShapeError("resample_to_length: need at least 2 time steps");
    if (L_ts < 1) throw ShapeError("resample_to_length: target length must be positive");
    if (L_in == L_ts) return x;
    Tensor out = Tensor::zeros({L_ts, F});
    for (std::int64_t t = 0; t < L_ts; ++t) {
        const double p = L_ts == 1 ? 0.0
                                   : static_cast<double>(t) * static_cast<double>(L_in - 1) /
                                         static_cast<double>(L_ts - 1);
        const auto i0 = static_cast<std::int64_t>(std::floor(p));
        const std::int64_t i1 = std::min(i0 + 1, L_in - 1);
        const double w = p - static_cast<double>(i0);
        for (std::int64_t f = 0; f < F; ++f) {
            out.at(t, f) = (1.0 - w) * x.at(i0, f) + w * x.at(i1, f);
        }
    }
    return out;
}

Tensor concat_features(const std::vector<Tensor>& mats) {
    if (mats.empty()) throw ShapeError("concat_features: no modalities");
    const std::int64_t L = mats.front().dim(0);
    std::int64_t total = 0;
    for (const auto& m : mats) {
        if (m.rank() != 2 || m.dim(0) != L) {
            throw ShapeError("concat_features: inconsistent shape " + m.shape_str());
        }
        total += m.dim(1);
    }
    Tensor out = Tensor::zeros({L, total});
    for (std::int64_t t = 0; t < L; ++t) {
        std::int64_t off = 0;
        for (const auto& m : mats) {
            const std::int64_t w = m.dim(1);
            std::copy(m.data() + t * w, m.data() + (t + 1) * w, out.data() + t * total + off);
            off += w;
        }
    }
    return out;
}

void resample_dataset(Dataset& ds, std::int64_t L_ts) {
    for (auto& s : ds.samples) {
        for (std::int64_t m = 0; m < s.modalities(); ++m) {
            auto& x = s.x[static_cast<std::size_t>(m)];
            auto& clean = s.clean[static_cast<std::size_t>(m)];
            auto& R = s.mask[static_cast<std::size_t>(m)];
            if (x.dim(0) == L_ts) continue;
            x = resample_to_length(x, L_ts);
            clean = resample_to_length(clean, L_ts);
            // A resampled cell counts as observed only when every source cell
            // it interpolates from was observed.
            Tensor Rn = resample_to_length(R, L_ts);
            for (std::int64_t i = 0; i < Rn.numel(); ++i) Rn[i] = Rn[i] >= 1.0 ? 1.0 : 0.0;
            for (std::int64_t i = 0; i < Rn.numel(); ++i) x[i] *= Rn[i];
            R = std::move(Rn);
        }
    }
    ds.L_ts = L_ts;
}

}  // namespace fedcondi
