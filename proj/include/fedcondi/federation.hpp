#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedcondi/data.hpp"
#include "fedcondi/model.hpp"
#include "fedcondi/param_map.hpp"
#include "fedcondi/rng.hpp"

namespace fedcondi {

struct TrainConfig {
    int epochs_a = 1;
    int epochs_b = 1;
    int batch_size = 32;
    double lr = 1e-3;

    void validate() const;
};

// One client's round result: the full local state (weights and prompt
// embeddings travel together) plus its sample count.
struct Upload {
    int client_id = 0;
    ParamMap params;
    std::int64_t n = 0;
};

// Draws `count` distinct client ids from [0, total) and returns them in
// ascending order.
std::vector<int> sample_clients(int total, int count, Rng& rng);

// Sample-count-weighted average of the uploads, written into `global`.
// Uploads are processed in ascending client-id order regardless of input
// order, so the result is invariant under permutation of the list. A single
// upload is adopted bit-exactly. Empty input, duplicate ids, n <= 0, or a
// schema mismatch raise ProtocolError.
void fedavg(ParamMap& global, std::vector<Upload> uploads);

struct ClientResult {
    Upload upload;
    double loss_a = 0.0;  // batch-size-weighted mean diffusion loss
    double loss_b = 0.0;  // batch-size-weighted mean task loss
    int batches_a = 0;
    int batches_b = 0;
};

// Local training for one round: copies the global state, then runs Phase A
// (diffusion) followed by Phase B (task) with one shared Adam instance.
// The client's data order and noise come from a stream derived as
// (round_seed, client_id), so clients are independent of each other.
ClientResult train_client(const ParamMap& global, const Dataset& ds,
                          const std::vector<std::int64_t>& ids, int client_id,
                          std::uint64_t round_seed, const ModelConfig& cfg,
                          const TrainConfig& tcfg, bool no_cond);

struct RoundPlan {
    int round = 0;
    std::vector<int> clients;
    std::uint64_t seed = 0;
    bool no_cond = false;
    bool parallel = false;
};

struct ClientReport {
    int id = 0;
    std::int64_t n = 0;
    double loss_a = 0.0;
    double loss_b = 0.0;
    bool excluded = false;
    std::string error;
};

struct RoundReport {
    int round = 0;
    std::vector<ClientReport> clients;
    int aggregated = 0;
    int excluded = 0;
};

// Executes one federated round over the selected clients and aggregates the
// surviving uploads into `global`. A client that raises NumericError or
// returns non-finite values is excluded (the remaining weights renormalize
// automatically); every client excluded raises ProtocolError. With
// plan.parallel the clients run on separate threads with bit-identical
// results to the sequential path.
RoundReport run_round(ParamMap& global, const Dataset& ds, const FederatedPartition& part,
                      const RoundPlan& plan, const ModelConfig& cfg, const TrainConfig& tcfg);

}  // namespace fedcondi
