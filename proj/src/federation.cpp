#include "fedcondi/federation.hpp"

#include <algorithm>
#include <exception>
#include <thread>
#include <utility>

#include "fedcondi/diffusion.hpp"
#include "fedcondi/errors.hpp"
#include "fedcondi/optimizer.hpp"
#include "fedcondi/task_head.hpp"

namespace fedcondi {

void TrainConfig::validate() const {
    if (epochs_a < 0 || epochs_b < 0) throw ConfigError("TrainConfig: epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
    if (lr <= 0.0) throw ConfigError("TrainConfig: lr must be positive");
}

std::vector<int> sample_clients(int total, int count, Rng& rng) {
    if (count < 1 || count > total) {
        throw ConfigError("sample_clients: need 1 <= count <= total");
    }
    std::vector<int> ids(static_cast<std::size_t>(total));
    for (int i = 0; i < total; ++i) ids[static_cast<std::size_t>(i)] = i;
    rng.shuffle(ids);
    ids.resize(static_cast<std::size_t>(count));
    std::sort(ids.begin(), ids.end());
    return ids;
}

void fedavg(ParamMap& global, std::vector<Upload> uploads) {
    if (uploads.empty()) throw ProtocolError("fedavg: no uploads");
    std::sort(uploads.begin(), uploads.end(),
              [](const Upload& a, const Upload& b) { return a.client_id < b.client_id; });
    for (std::size_t i = 0; i < uploads.size(); ++i) {
        if (i > 0 && uploads[i].client_id == uploads[i - 1].client_id) {
            throw ProtocolError("fedavg: duplicate client id " +
                                std::to_string(uploads[i].client_id));
        }
        if (uploads[i].n <= 0) {
            throw ProtocolError("fedavg: client " + std::to_string(uploads[i].client_id) +
                                " has non-positive sample count");
        }
        if (!uploads[i].params.same_schema(global)) {
            throw ProtocolError("fedavg: client " + std::to_string(uploads[i].client_id) +
                                " upload does not match the global schema");
        }
    }

    // Incremental weighted mean: numerically stable and exact for one upload.
    ParamMap mean = std::move(uploads[0].params);
    auto weight = static_cast<double>(uploads[0].n);
    for (std::size_t i = 1; i < uploads.size(); ++i) {
        const auto nk = static_cast<double>(uploads[i].n);
        weight += nk;
        const double f = nk / weight;
        auto it = mean.begin();
        for (auto& [name, e] : uploads[i].params) {
            Tensor& acc = it->second.value;
            for (std::int64_t j = 0; j < acc.numel(); ++j) {
                acc[j] += (e.value[j] - acc[j]) * f;
            }
            ++it;
        }
    }
    for (auto& [name, e] : global) {
        e.value = std::move(mean.entry(name).value);
    }
    global.zero_grads();
}

ClientResult train_client(const ParamMap& global, const Dataset& ds,
                          const std::vector<std::int64_t>& ids, int client_id,
                          std::uint64_t round_seed, const ModelConfig& cfg,
                          const TrainConfig& tcfg, bool no_cond) {
    tcfg.validate();
    if (ids.empty()) throw StateError("train_client: client has no samples");
    ClientResult res;
    ParamMap local = global;
    Rng rng(Rng::derive(round_seed, static_cast<std::uint64_t>(client_id)));
    Adam opt(tcfg.lr);
    const DiffusionSchedule sched = build_schedule(cfg.T_diff, cfg.beta_min, cfg.beta_max);
    std::vector<std::int64_t> order(ids);
    const auto bs = static_cast<std::size_t>(tcfg.batch_size);

    double wa = 0.0;
    for (int ep = 0; ep < tcfg.epochs_a; ++ep) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += bs) {
            const std::size_t end = std::min(order.size(), start + bs);
            std::vector<const MultimodalSample*> ptrs;
            for (std::size_t i = start; i < end; ++i) {
                ptrs.push_back(&ds.samples[static_cast<std::size_t>(order[i])]);
            }
            PhaseABatch batch;
            if (!build_phase_a_batch(ptrs, sched, cfg, rng, batch)) continue;
            Graph g(&local);
            const auto loss = diffusion_loss(g, batch, cfg, no_cond);
            g.backward(loss);
            opt.step(local);
            res.loss_a += g.value(loss)[0] * static_cast<double>(batch.B);
            wa += static_cast<double>(batch.B);
            ++res.batches_a;
        }
    }
    if (wa > 0.0) res.loss_a /= wa;

    double wb = 0.0;
    for (int ep = 0; ep < tcfg.epochs_b; ++ep) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += bs) {
            const std::size_t end = std::min(order.size(), start + bs);
            std::vector<const MultimodalSample*> ptrs;
            for (std::size_t i = start; i < end; ++i) {
                ptrs.push_back(&ds.samples[static_cast<std::size_t>(order[i])]);
            }
            const TaskBatch batch = build_task_batch(ptrs, cfg, InputMode::kZeroFill);
            Graph g(&local);
            const auto loss = phase_b_loss(g, batch, cfg, no_cond);
            g.backward(loss);
            opt.step(local);
            res.loss_b += g.value(loss)[0] * static_cast<double>(batch.B);
            wb += static_cast<double>(batch.B);
            ++res.batches_b;
        }
    }
    if (wb > 0.0) res.loss_b /= wb;

    res.upload.client_id = client_id;
    res.upload.params = std::move(local);
    res.upload.n = static_cast<std::int64_t>(ids.size());
    return res;
}

RoundReport run_round(ParamMap& global, const Dataset& ds, const FederatedPartition& part,
                      const RoundPlan& plan, const ModelConfig& cfg, const TrainConfig& tcfg) {
    std::vector<int> clients(plan.clients);
    std::sort(clients.begin(), clients.end());
    if (std::adjacent_find(clients.begin(), clients.end()) != clients.end()) {
        throw ProtocolError("run_round: duplicate client in plan");
    }
    const auto K = static_cast<int>(part.assignments.size());
    for (int c : clients) {
        if (c < 0 || c >= K) throw ProtocolError("run_round: client id out of range");
    }

    const auto n = clients.size();
    std::vector<ClientResult> results(n);
    std::vector<bool> ok(n, false);
    std::vector<std::string> errors(n);

    auto worker = [&](std::size_t i) {
        const int c = clients[i];
        try {
            results[i] = train_client(global, ds,
                                      part.assignments[static_cast<std::size_t>(c)], c,
                                      plan.seed, cfg, tcfg, plan.no_cond);
            if (!results[i].upload.params.values_finite()) {
                errors[i] = "non-finite upload";
            } else {
                ok[i] = true;
            }
        } catch (const NumericError& e) {
            errors[i] = e.what();
        }
    };

    if (plan.parallel && n > 1) {
        std::vector<std::exception_ptr> eptrs(n);
        std::vector<std::thread> threads;
        for (std::size_t i = 0; i < n; ++i) {
            threads.emplace_back([&, i] {
                try {
                    worker(i);
                } catch (...) {
                    eptrs[i] = std::current_exception();
                }
            });
        }
        for (auto& t : threads) t.join();
        for (const auto& e : eptrs) {
            if (e) std::rethrow_exception(e);
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) worker(i);
    }

    RoundReport report;
    report.round = plan.round;
    std::vector<Upload> uploads;
    for (std::size_t i = 0; i < n; ++i) {
        ClientReport cr;
        cr.id = clients[i];
        cr.n = results[i].upload.n;
        cr.loss_a = results[i].loss_a;
        cr.loss_b = results[i].loss_b;
        cr.excluded = !ok[i];
        cr.error = errors[i];
        if (ok[i]) {
            uploads.push_back(std::move(results[i].upload));
            ++report.aggregated;
        } else {
            ++report.excluded;
        }
        report.clients.push_back(std::move(cr));
    }
    if (uploads.empty()) {
        throw ProtocolError("run_round: every client was excluded in round " +
                            std::to_string(plan.round));
    }
    fedavg(global, std::move(uploads));
    return report;
}

}  // namespace fedcondi
