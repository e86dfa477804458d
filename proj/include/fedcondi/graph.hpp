#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedcondi/param_map.hpp"
#include "fedcondi/tensor.hpp"

namespace fedcondi {

// Reverse-mode autodiff over a tape of dense-tensor operations.
//
// Nodes are appended in topological order and evaluated eagerly; backward()
// sweeps the tape once in reverse and accumulates parameter gradients into
// the bound ParamMap. One Graph instance is single-threaded; independent
// instances share nothing and may run on different threads.
class Graph {
public:
    using ValueId = std::int32_t;

    explicit Graph(ParamMap* params = nullptr) : params_(params) {}

    // Leaf holding a constant (no gradient tracked beyond the node itself).
    ValueId input(Tensor t, std::string name = "");

    // Leaf bound to a ParamMap entry; backward accumulates into its grad.
    ValueId param(const std::string& name);

    // --- arithmetic ---
    ValueId matmul(ValueId a, ValueId b);          // [N,K] x [K,M] -> [N,M]
    ValueId add(ValueId a, ValueId b);             // same shape
    ValueId sub(ValueId a, ValueId b);             // same shape
    ValueId hadamard(ValueId a, ValueId b);        // elementwise product
    ValueId scale(ValueId a, double c);            // constant scale
    ValueId add_bias(ValueId x, ValueId b);        // [N,C] + [C] per row

    // --- neural ops ---
    // x [B,L,C], w [k*C, Co], b [Co]; zero "same" padding, stride 1.
    ValueId conv1d(ValueId x, ValueId w, ValueId b, int kernel);
    // Normalization over the last axis with learnable gain/shift [C].
    ValueId layer_norm(ValueId x, ValueId gain, ValueId shift, double eps = 1e-5);
    ValueId relu(ValueId x);
    ValueId silu(ValueId x);
    ValueId softmax_last(ValueId x);
    // Softmax over the last axis restricted to positions where keep != 0;
    // excluded positions get exactly zero weight. keep has x's shape.
    ValueId masked_softmax_last(ValueId x, Tensor keep);

    // --- structure ---
    ValueId concat_last(const std::vector<ValueId>& xs);
    ValueId slice_last(ValueId x, std::int64_t begin, std::int64_t end);
    // y[..., j] = x[..., perm[j]]; perm must be a permutation of the last axis.
    ValueId permute_last(ValueId x, std::vector<std::int64_t> perm);
    ValueId reshape(ValueId x, std::vector<std::int64_t> shape);
    ValueId select_col(ValueId x, std::int64_t col);     // [N,E] -> [N]
    ValueId scale_rows(ValueId x, ValueId s);            // [N,C] * s[N] per row
    ValueId tile_rows(ValueId x, std::int64_t reps);     // [B,F] -> [B,reps,F]
    ValueId broadcast_rows(ValueId v, std::int64_t n);   // [F] -> [n,F]
    ValueId add_row_broadcast(ValueId x, ValueId v);     // [B,L,H] + v[B,H]

    // --- reductions / losses ---
    ValueId mean_axis1(ValueId x);   // [B,L,C] -> [B,C]
    ValueId mean_all(ValueId x);     // -> [1]
    ValueId sum_all(ValueId x);      // -> [1]
    ValueId sum_squares(ValueId x);  // -> [1]
    // Mean over samples of per-sample masked MSE: for each batch row b,
    // sum over cells of mask*(pred-target)^2 divided by that row's mask count.
    // pred/target/mask share shape [B,...]; every row needs mask count > 0.
    ValueId masked_mse(ValueId pred, Tensor target, Tensor mask);
    // Softmax cross-entropy, batch mean. logits [B,C], labels in [0,C).
    ValueId cross_entropy(ValueId logits, std::vector<int> labels);

    // Condition routing over a [M*M, D] table (row i*M+m holds the
    // contribution of source modality i to target modality m). For each
    // sample row of r (shape [B][M], entries 0/1) emits the M routed
    // D-vectors concatenated in modality order: output [B, M*D].
    ValueId route_condition_batch(ValueId table, std::vector<std::vector<int>> r, std::int64_t M,
                                  std::int64_t D);

    const Tensor& value(ValueId id) const;
    std::size_t num_nodes() const { return nodes_.size(); }

    // Reverse sweep from a scalar loss node. Parameter gradients are added
    // into the bound ParamMap. Gradient of any node is retrievable afterwards.
    void backward(ValueId loss);

    const Tensor& grad(ValueId id) const;

private:
    enum class Op : std::uint8_t {
        Input, Param,
        MatMul, Add, Sub, Hadamard, ScaleConst, AddBias,
        Conv1d, LayerNorm, Relu, Silu, SoftmaxLast, MaskedSoftmaxLast,
        ConcatLast, SliceLast, PermuteLast, Reshape, SelectCol, ScaleRows,
        TileRows, BroadcastRows, AddRowBroadcast,
        MeanAxis1, MeanAll, SumAll, SumSquares, MaskedMse, CrossEntropy,
        CondRoute,
    };

    struct Node {
        Op op;
        std::vector<ValueId> in;
        Tensor out;
        Tensor grad;              // allocated during backward
        bool grad_alloc = false;
        // op-specific payloads
        Tensor aux0, aux1;        // cached forward state (im2col, probs, ...)
        std::vector<std::int64_t> attr_i;
        std::vector<double> attr_d;
        std::vector<int> labels;
        std::vector<std::vector<int>> rpat;
        std::string name;
    };

    ValueId push(Node n);
    Node& node(ValueId id);
    const Node& node(ValueId id) const;
    Tensor& grad_buf(ValueId id);
    void check_finite(const Node& n) const;
    static const char* op_name(Op op);
    [[noreturn]] void shape_fail(Op op, const std::string& detail) const;

    void backward_node(ValueId id);

    std::vector<Node> nodes_;
    ParamMap* params_ = nullptr;
};

}  // namespace fedcondi
