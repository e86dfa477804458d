#include "fedcondi/graph.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "fedcondi/embeddings.hpp"
#include "fedcondi/errors.hpp"

namespace fedcondi {

namespace {

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using CMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

MatMap as_matrix(Tensor& t, std::int64_t rows, std::int64_t cols) {
    return MatMap(t.data(), rows, cols);
}

CMatMap as_matrix(const Tensor& t, std::int64_t rows, std::int64_t cols) {
    return CMatMap(t.data(), rows, cols);
}

std::int64_t last_dim(const Tensor& t) {
    if (t.rank() == 0) throw ShapeError("expected rank >= 1");
    return t.shape().back();
}

std::int64_t rows_of(const Tensor& t) {
    return last_dim(t) == 0 ? 0 : t.numel() / last_dim(t);
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

const char* Graph::op_name(Op op) {
    switch (op) {
        case Op::Input: return "input";
        case Op::Param: return "param";
        case Op::MatMul: return "matmul";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Hadamard: return "hadamard";
        case Op::ScaleConst: return "scale";
        case Op::AddBias: return "add_bias";
        case Op::Conv1d: return "conv1d";
        case Op::LayerNorm: return "layer_norm";
        case Op::Relu: return "relu";
        case Op::Silu: return "silu";
        case Op::SoftmaxLast: return "softmax";
        case Op::MaskedSoftmaxLast: return "masked_softmax";
        case Op::ConcatLast: return "concat";
        case Op::SliceLast: return "slice";
        case Op::PermuteLast: return "permute";
        case Op::Reshape: return "reshape";
        case Op::SelectCol: return "select_col";
        case Op::ScaleRows: return "scale_rows";
        case Op::TileRows: return "tile_rows";
        case Op::BroadcastRows: return "broadcast_rows";
        case Op::AddRowBroadcast: return "add_row_broadcast";
        case Op::MeanAxis1: return "mean_axis1";
        case Op::MeanAll: return "mean_all";
        case Op::SumAll: return "sum_all";
        case Op::SumSquares: return "sum_squares";
        case Op::MaskedMse: return "masked_mse";
        case Op::CrossEntropy: return "cross_entropy";
        case Op::CondRoute: return "route_condition";
    }
    return "?";
}

void Graph::shape_fail(Op op, const std::string& detail) const {
    throw ShapeError(std::string(op_name(op)) + ": " + detail);
}

Graph::Node& Graph::node(ValueId id) { return nodes_.at(static_cast<std::size_t>(id)); }
const Graph::Node& Graph::node(ValueId id) const { return nodes_.at(static_cast<std::size_t>(id)); }

const Tensor& Graph::value(ValueId id) const { return node(id).out; }

const Tensor& Graph::grad(ValueId id) const {
    const Node& n = node(id);
    if (!n.grad_alloc) throw StateError("Graph::grad: backward has not reached this node");
    return n.grad;
}

void Graph::check_finite(const Node& n) const {
    if (!n.out.all_finite()) {
        throw NumericError(std::string("non-finite value produced by op '") + op_name(n.op) +
                           (n.name.empty() ? "'" : "' (" + n.name + ")"));
    }
}

Graph::ValueId Graph::push(Node n) {
    check_finite(n);
    nodes_.push_back(std::move(n));
    return static_cast<ValueId>(nodes_.size() - 1);
}

Tensor& Graph::grad_buf(ValueId id) {
    Node& n = node(id);
    if (!n.grad_alloc) {
        n.grad = Tensor::zeros(n.out.shape());
        n.grad_alloc = true;
    }
    return n.grad;
}

Graph::ValueId Graph::input(Tensor t, std::string name) {
    Node n;
    n.op = Op::Input;
    n.out = std::move(t);
    n.name = std::move(name);
    return push(std::move(n));
}

Graph::ValueId Graph::param(const std::string& name) {
    if (!params_) throw StateError("Graph::param: no ParamMap bound");
    Node n;
    n.op = Op::Param;
    n.out = params_->value(name);
    n.name = name;
    return push(std::move(n));
}

Graph::ValueId Graph::matmul(ValueId a, ValueId b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) {
        shape_fail(Op::MatMul, A.shape_str() + " x " + B.shape_str());
    }
    Node n;
    n.op = Op::MatMul;
    n.in = {a, b};
    n.out = Tensor::zeros({A.dim(0), B.dim(1)});
    as_matrix(n.out, A.dim(0), B.dim(1)).noalias() =
        as_matrix(A, A.dim(0), A.dim(1)) * as_matrix(B, B.dim(0), B.dim(1));
    return push(std::move(n));
}

Graph::ValueId Graph::add(ValueId a, ValueId b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (!A.same_shape(B)) shape_fail(Op::Add, A.shape_str() + " vs " + B.shape_str());
    Node n;
    n.op = Op::Add;
    n.in = {a, b};
    n.out = Tensor::zeros(A.shape());
    for (std::int64_t i = 0; i < A.numel(); ++i) n.out[i] = A[i] + B[i];
    return push(std::move(n));
}

Graph::ValueId Graph::sub(ValueId a, ValueId b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (!A.same_shape(B)) shape_fail(Op::Sub, A.shape_str() + " vs " + B.shape_str());
    Node n;
    n.op = Op::Sub;
    n.in = {a, b};
    n.out = Tensor::zeros(A.shape());
    for (std::int64_t i = 0; i < A.numel(); ++i) n.out[i] = A[i] - B[i];
    return push(std::move(n));
}

Graph::ValueId Graph::hadamard(ValueId a, ValueId b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (!A.same_shape(B)) shape_fail(Op::Hadamard, A.shape_str() + " vs " + B.shape_str());
    Node n;
    n.op = Op::Hadamard;
    n.in = {a, b};
    n.out = Tensor::zeros(A.shape());
    for (std::int64_t i = 0; i < A.numel(); ++i) n.out[i] = A[i] * B[i];
    return push(std::move(n));
}

Graph::ValueId Graph::scale(ValueId a, double c) {
    const Tensor& A = value(a);
    Node n;
    n.op = Op::ScaleConst;
    n.in = {a};
    n.attr_d = {c};
    n.out = Tensor::zeros(A.shape());
    for (std::int64_t i = 0; i < A.numel(); ++i) n.out[i] = A[i] * c;
    return push(std::move(n));
}

Graph::ValueId Graph::add_bias(ValueId x, ValueId b) {
    const Tensor& X = value(x);
    const Tensor& B = value(b);
    const std::int64_t c = last_dim(X);
    if (B.rank() != 1 || B.dim(0) != c) {
        shape_fail(Op::AddBias, X.shape_str() + " + " + B.shape_str());
    }
    Node n;
    n.op = Op::AddBias;
    n.in = {x, b};
    n.out = Tensor::zeros(X.shape());
    const std::int64_t rows = rows_of(X);
    for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t j = 0; j < c; ++j) n.out[r * c + j] = X[r * c + j] + B[j];
    }
    return push(std::move(n));
}

Graph::ValueId Graph::conv1d(ValueId x, ValueId w, ValueId b, int kernel) {
    const Tensor& X = value(x);
    const Tensor& W = value(w);
    const Tensor& B = value(b);
    if (X.rank() != 3) shape_fail(Op::Conv1d, "input must be [B,L,C], got " + X.shape_str());
    if (kernel < 1 || kernel % 2 == 0) shape_fail(Op::Conv1d, "kernel must be odd and positive");
    const std::int64_t batch = X.dim(0), len = X.dim(1), cin = X.dim(2);
    if (W.rank() != 2 || W.dim(0) != kernel * cin) {
        shape_fail(Op::Conv1d, "weight " + W.shape_str() + " vs kernel*C=" +
                                   std::to_string(kernel * cin));
    }
    const std::int64_t cout = W.dim(1);
    if (B.rank() != 1 || B.dim(0) != cout) shape_fail(Op::Conv1d, "bias " + B.shape_str());
    const std::int64_t pad = kernel / 2;

    Node n;
    n.op = Op::Conv1d;
    n.in = {x, w, b};
    n.attr_i = {kernel, pad};
    // im2col patches, cached for the weight gradient.
    n.aux0 = Tensor::zeros({batch * len, kernel * cin});
    for (std::int64_t bi = 0; bi < batch; ++bi) {
        for (std::int64_t l = 0; l < len; ++l) {
            double* row = n.aux0.data() + (bi * len + l) * kernel * cin;
            for (std::int64_t t = 0; t < kernel; ++t) {
                const std::int64_t src = l + t - pad;
                if (src < 0 || src >= len) continue;
                const double* sp = X.data() + (bi * len + src) * cin;
                std::copy(sp, sp + cin, row + t * cin);
            }
        }
    }
    n.out = Tensor::zeros({batch, len, cout});
    as_matrix(n.out, batch * len, cout).noalias() =
        as_matrix(n.aux0, batch * len, kernel * cin) * as_matrix(W, kernel * cin, cout);
    for (std::int64_t r = 0; r < batch * len; ++r) {
        for (std::int64_t j = 0; j < cout; ++j) n.out[r * cout + j] += B[j];
    }
    return push(std::move(n));
}

Graph::ValueId Graph::layer_norm(ValueId x, ValueId gain, ValueId shift, double eps) {
    const Tensor& X = value(x);
    const Tensor& G = value(gain);
    const Tensor& S = value(shift);
    const std::int64_t c = last_dim(X);
    if (G.rank() != 1 || G.dim(0) != c || S.rank() != 1 || S.dim(0) != c) {
        shape_fail(Op::LayerNorm, X.shape_str() + " with gain " + G.shape_str());
    }
    const std::int64_t rows = rows_of(X);
    Node n;
    n.op = Op::LayerNorm;
    n.in = {x, gain, shift};
    n.attr_d = {eps};
    n.aux0 = Tensor::zeros(X.shape());  // normalized values
    n.aux1 = Tensor::zeros({rows});     // 1/std per row
    n.out = Tensor::zeros(X.shape());
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = X.data() + r * c;
        double mu = 0.0;
        for (std::int64_t j = 0; j < c; ++j) mu += xr[j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::int64_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(c);
        const double inv = 1.0 / std::sqrt(var + eps);
        n.aux1[r] = inv;
        for (std::int64_t j = 0; j < c; ++j) {
            const double xh = (xr[j] - mu) * inv;
            n.aux0[r * c + j] = xh;
            n.out[r * c + j] = xh * G[j] + S[j];
        }
    }
    return push(std::move(n));
}

Graph::ValueId Graph::relu(ValueId x) {
    const Tensor& X = value(x);
    Node n;
    n.op = Op::Relu;
    n.in = {x};
    n.out = Tensor::zeros(X.shape());
    for (std::int64_t i = 0; i < X.numel(); ++i) n.out[i] = X[i] > 0.0 ? X[i] : 0.0;
    return push(std::move(n));
}

Graph::ValueId Graph::silu(ValueId x) {
    const Tensor& X = value(x);
    Node n;
    n.op = Op::Silu;
    n.in = {x};
    n.aux0 = Tensor::zeros(X.shape());  // sigmoid(x)
    n.out = Tensor::zeros(X.shape());
    for (std::int64_t i = 0; i < X.numel(); ++i) {
        const double s = sigmoid(X[i]);
        n.aux0[i] = s;
        n.out[i] = X[i] * s;
    }
    return push(std::move(n));
}

Graph::ValueId Graph::softmax_last(ValueId x) {
    const Tensor& X = value(x);
    const std::int64_t c = last_dim(X);
    const std::int64_t rows = rows_of(X);
    Node n;
    n.op = Op::SoftmaxLast;
    n.in = {x};
    n.out = Tensor::zeros(X.shape());
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = X.data() + r * c;
        double mx = xr[0];
        for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
        double z = 0.0;
        for (std::int64_t j = 0; j < c; ++j) {
            const double e = std::exp(xr[j] - mx);
            n.out[r * c + j] = e;
            z += e;
        }
        for (std::int64_t j = 0; j < c; ++j) n.out[r * c + j] /= z;
    }
    return push(std::move(n));
}

Graph::ValueId Graph::masked_softmax_last(ValueId x, Tensor keep) {
    const Tensor& X = value(x);
    if (!X.same_shape(keep)) {
        shape_fail(Op::MaskedSoftmaxLast, X.shape_str() + " vs keep " + keep.shape_str());
    }
    const std::int64_t c = last_dim(X);
    const std::int64_t rows = rows_of(X);
    Node n;
    n.op = Op::MaskedSoftmaxLast;
    n.in = {x};
    n.aux1 = std::move(keep);
    n.out = Tensor::zeros(X.shape());
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = X.data() + r * c;
        const double* kr = n.aux1.data() + r * c;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::int64_t j = 0; j < c; ++j) {
            if (kr[j] != 0.0) mx = std::max(mx, xr[j]);
        }
        if (!std::isfinite(mx)) continue;  // no kept entries: row stays zero
        double z = 0.0;
        for (std::int64_t j = 0; j < c; ++j) {
            if (kr[j] == 0.0) continue;
            const double e = std::exp(xr[j] - mx);
            n.out[r * c + j] = e;
            z += e;
        }
        for (std::int64_t j = 0; j < c; ++j) n.out[r * c + j] /= z;
    }
    return push(std::move(n));
}

Graph::ValueId Graph::concat_last(const std::vector<ValueId>& xs) {
    if (xs.empty()) shape_fail(Op::ConcatLast, "no inputs");
    const Tensor& first = value(xs[0]);
    std::vector<std::int64_t> lead(first.shape().begin(), first.shape().end() - 1);
    std::int64_t total = 0;
    for (ValueId id : xs) {
        const Tensor& t = value(id);
        std::vector<std::int64_t> l(t.shape().begin(), t.shape().end() - 1);
        if (l != lead) shape_fail(Op::ConcatLast, first.shape_str() + " vs " + t.shape_str());
        total += last_dim(t);
    }
    std::vector<std::int64_t> shape = lead;
    shape.push_back(total);
    Node n;
    n.op = Op::ConcatLast;
    n.in = xs;
    n.out = Tensor::zeros(shape);
    const std::int64_t rows = rows_of(n.out);
    std::int64_t off = 0;
    for (ValueId id : xs) {
        const Tensor& t = value(id);
        const std::int64_t c = last_dim(t);
        for (std::int64_t r = 0; r < rows; ++r) {
            std::copy(t.data() + r * c, t.data() + (r + 1) * c, n.out.data() + r * total + off);
        }
        off += c;
    }
    return push(std::move(n));
}

Graph::ValueId Graph::slice_last(ValueId x, std::int64_t begin, std::int64_t end) {
    const Tensor& X = value(x);
    const std::int64_t c = last_dim(X);
    if (begin < 0 || end > c || begin >= end) {
        shape_fail(Op::SliceLast, "range [" + std::to_string(begin) + "," + std::to_string(end) +
                                      ") of " + X.shape_str());
    }
    std::vector<std::int64_t> shape(X.shape().begin(), X.shape().end() - 1);
    shape.push_back(end - begin);
    Node n;
    n.op = Op::SliceLast;
    n.in = {x};
    n.attr_i = {begin, end};
    n.out = Tensor::zeros(shape);
    const std::int64_t rows = rows_of(X);
    const std::int64_t w = end - begin;
    for (std::int64_t r = 0; r < rows; ++r) {
        std::copy(X.data() + r * c + begin, X.data() + r * c + end, n.out.data() + r * w);
    }
    return push(std::move(n));
}

Graph::ValueId Graph::permute_last(ValueId x, std::vector<std::int64_t> perm) {
    const Tensor& X = value(x);
    const std::int64_t c = last_dim(X);
    if (static_cast<std::int64_t>(perm.size()) != c) {
        shape_fail(Op::PermuteLast, "perm size " + std::to_string(perm.size()) + " vs " +
                                        X.shape_str());
    }
    std::vector<bool> seen(static_cast<std::size_t>(c), false);
    for (auto p : perm) {
        if (p < 0 || p >= c || seen[static_cast<std::size_t>(p)]) {
            shape_fail(Op::PermuteLast, "not a permutation");
        }
        seen[static_cast<std::size_t>(p)] = true;
    }
    Node n;
    n.op = Op::PermuteLast;
    n.in = {x};
    n.attr_i = std::move(perm);
    n.out = Tensor::zeros(X.shape());
    const std::int64_t rows = rows_of(X);
    for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t j = 0; j < c; ++j) n.out[r * c + j] = X[r * c + n.attr_i[j]];
    }
    return push(std::move(n));
}

Graph::ValueId Graph::reshape(ValueId x, std::vector<std::int64_t> shape) {
    const Tensor& X = value(x);
    Node n;
    n.op = Op::Reshape;
    n.in = {x};
    n.out = X.reshaped(std::move(shape));
    return push(std::move(n));
}

Graph::ValueId Graph::select_col(ValueId x, std::int64_t col) {
    const Tensor& X = value(x);
    if (X.rank() != 2 || col < 0 || col >= X.dim(1)) {
        shape_fail(Op::SelectCol, "col " + std::to_string(col) + " of " + X.shape_str());
    }
    Node n;
    n.op = Op::SelectCol;
    n.in = {x};
    n.attr_i = {col};
    n.out = Tensor::zeros({X.dim(0)});
    for (std::int64_t r = 0; r < X.dim(0); ++r) n.out[r] = X.at(r, col);
    return push(std::move(n));
}

Graph::ValueId Graph::scale_rows(ValueId x, ValueId s) {
    const Tensor& X = value(x);
    const Tensor& S = value(s);
    if (X.rank() != 2 || S.rank() != 1 || S.dim(0) != X.dim(0)) {
        shape_fail(Op::ScaleRows, X.shape_str() + " with scales " + S.shape_str());
    }
    Node n;
    n.op = Op::ScaleRows;
    n.in = {x, s};
    n.out = Tensor::zeros(X.shape());
    const std::int64_t c = X.dim(1);
    for (std::int64_t r = 0; r < X.dim(0); ++r) {
        for (std::int64_t j = 0; j < c; ++j) n.out[r * c + j] = X[r * c + j] * S[r];
    }
    return push(std::move(n));
}

Graph::ValueId Graph::tile_rows(ValueId x, std::int64_t reps) {
    const Tensor& X = value(x);
    if (X.rank() != 2 || reps < 1) shape_fail(Op::TileRows, X.shape_str());
    Node n;
    n.op = Op::TileRows;
    n.in = {x};
    n.attr_i = {reps};
    n.out = Tensor::zeros({X.dim(0), reps, X.dim(1)});
    const std::int64_t c = X.dim(1);
    for (std::int64_t b = 0; b < X.dim(0); ++b) {
        for (std::int64_t l = 0; l < reps; ++l) {
            std::copy(X.data() + b * c, X.data() + (b + 1) * c,
                      n.out.data() + (b * reps + l) * c);
        }
    }
    return push(std::move(n));
}

Graph::ValueId Graph::broadcast_rows(ValueId v, std::int64_t nrows) {
    const Tensor& V = value(v);
    if (V.rank() != 1 || nrows < 1) shape_fail(Op::BroadcastRows, V.shape_str());
    Node n;
    n.op = Op::BroadcastRows;
    n.in = {v};
    n.out = Tensor::zeros({nrows, V.dim(0)});
    for (std::int64_t r = 0; r < nrows; ++r) {
        std::copy(V.data(), V.data() + V.dim(0), n.out.data() + r * V.dim(0));
    }
    return push(std::move(n));
}

Graph::ValueId Graph::add_row_broadcast(ValueId x, ValueId v) {
    const Tensor& X = value(x);
    const Tensor& V = value(v);
    if (X.rank() != 3 || V.rank() != 2 || V.dim(0) != X.dim(0) || V.dim(1) != X.dim(2)) {
        shape_fail(Op::AddRowBroadcast, X.shape_str() + " + " + V.shape_str());
    }
    Node n;
    n.op = Op::AddRowBroadcast;
    n.in = {x, v};
    n.out = Tensor::zeros(X.shape());
    const std::int64_t len = X.dim(1), c = X.dim(2);
    for (std::int64_t b = 0; b < X.dim(0); ++b) {
        for (std::int64_t l = 0; l < len; ++l) {
            for (std::int64_t j = 0; j < c; ++j) {
                n.out[(b * len + l) * c + j] = X[(b * len + l) * c + j] + V[b * c + j];
            }
        }
    }
    return push(std::move(n));
}

Graph::ValueId Graph::mean_axis1(ValueId x) {
    const Tensor& X = value(x);
    if (X.rank() != 3) shape_fail(Op::MeanAxis1, X.shape_str());
    const std::int64_t batch = X.dim(0), len = X.dim(1), c = X.dim(2);
    Node n;
    n.op = Op::MeanAxis1;
    n.in = {x};
    n.out = Tensor::zeros({batch, c});
    for (std::int64_t b = 0; b < batch; ++b) {
        for (std::int64_t l = 0; l < len; ++l) {
            for (std::int64_t j = 0; j < c; ++j) n.out[b * c + j] += X[(b * len + l) * c + j];
        }
        for (std::int64_t j = 0; j < c; ++j) n.out[b * c + j] /= static_cast<double>(len);
    }
    return push(std::move(n));
}

Graph::ValueId Graph::mean_all(ValueId x) {
    const Tensor& X = value(x);
    Node n;
    n.op = Op::MeanAll;
    n.in = {x};
    double acc = 0.0;
    for (std::int64_t i = 0; i < X.numel(); ++i) acc += X[i];
    n.out = Tensor::scalar(acc / static_cast<double>(X.numel()));
    return push(std::move(n));
}

Graph::ValueId Graph::sum_all(ValueId x) {
    const Tensor& X = value(x);
    Node n;
    n.op = Op::SumAll;
    n.in = {x};
    double acc = 0.0;
    for (std::int64_t i = 0; i < X.numel(); ++i) acc += X[i];
    n.out = Tensor::scalar(acc);
    return push(std::move(n));
}

Graph::ValueId Graph::sum_squares(ValueId x) {
    const Tensor& X = value(x);
    Node n;
    n.op = Op::SumSquares;
    n.in = {x};
    double acc = 0.0;
    for (std::int64_t i = 0; i < X.numel(); ++i) acc += X[i] * X[i];
    n.out = Tensor::scalar(acc);
    return push(std::move(n));
}

Graph::ValueId Graph::masked_mse(ValueId pred, Tensor target, Tensor mask) {
    const Tensor& P = value(pred);
    if (!P.same_shape(target) || !P.same_shape(mask)) {
        shape_fail(Op::MaskedMse, P.shape_str() + " vs " + target.shape_str() + " / " +
                                      mask.shape_str());
    }
    if (P.rank() < 2) shape_fail(Op::MaskedMse, "need a batch axis, got " + P.shape_str());
    const std::int64_t batch = P.dim(0);
    const std::int64_t per = P.numel() / batch;
    Node n;
    n.op = Op::MaskedMse;
    n.in = {pred};
    n.aux0 = std::move(target);
    n.aux1 = std::move(mask);
    n.attr_d.resize(static_cast<std::size_t>(batch));
    double loss = 0.0;
    for (std::int64_t b = 0; b < batch; ++b) {
        double sse = 0.0, cnt = 0.0;
        for (std::int64_t i = b * per; i < (b + 1) * per; ++i) {
            const double m = n.aux1[i];
            const double d = P[i] - n.aux0[i];
            sse += m * d * d;
            cnt += m;
        }
        if (cnt <= 0.0) {
            throw StateError("masked_mse: batch row " + std::to_string(b) + " has empty mask");
        }
        n.attr_d[static_cast<std::size_t>(b)] = cnt;
        loss += sse / cnt;
    }
    n.out = Tensor::scalar(loss / static_cast<double>(batch));
    return push(std::move(n));
}

Graph::ValueId Graph::cross_entropy(ValueId logits, std::vector<int> labels) {
    const Tensor& X = value(logits);
    if (X.rank() != 2 || X.dim(0) != static_cast<std::int64_t>(labels.size())) {
        shape_fail(Op::CrossEntropy, X.shape_str() + " with " + std::to_string(labels.size()) +
                                         " labels");
    }
    const std::int64_t batch = X.dim(0), c = X.dim(1);
    for (int lb : labels) {
        if (lb < 0 || lb >= c) shape_fail(Op::CrossEntropy, "label out of range");
    }
    Node n;
    n.op = Op::CrossEntropy;
    n.in = {logits};
    n.labels = std::move(labels);
    n.aux0 = Tensor::zeros(X.shape());  // softmax probabilities
    double loss = 0.0;
    for (std::int64_t b = 0; b < batch; ++b) {
        const double* xr = X.data() + b * c;
        double mx = xr[0];
        for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
        double z = 0.0;
        for (std::int64_t j = 0; j < c; ++j) z += std::exp(xr[j] - mx);
        const double logz = std::log(z) + mx;
        for (std::int64_t j = 0; j < c; ++j) n.aux0[b * c + j] = std::exp(xr[j] - logz);
        loss -= xr[n.labels[static_cast<std::size_t>(b)]] - logz;
    }
    n.out = Tensor::scalar(loss / static_cast<double>(batch));
    return push(std::move(n));
}

Graph::ValueId Graph::route_condition_batch(ValueId table, std::vector<std::vector<int>> r,
                                            std::int64_t M, std::int64_t D) {
    const Tensor& W = value(table);
    const bool flat = W.rank() == 2 && W.dim(0) == M * M && W.dim(1) == D;
    const bool cube = W.rank() == 3 && W.dim(0) == M && W.dim(1) == M && W.dim(2) == D;
    if (!flat && !cube) {
        shape_fail(Op::CondRoute, "table " + W.shape_str() + " vs M=" + std::to_string(M) +
                                      " D=" + std::to_string(D));
    }
    const auto batch = static_cast<std::int64_t>(r.size());
    Node n;
    n.op = Op::CondRoute;
    n.in = {table};
    n.attr_i = {M, D};
    n.out = Tensor::zeros({batch, M * D});
    for (std::int64_t b = 0; b < batch; ++b) {
        if (static_cast<std::int64_t>(r[static_cast<std::size_t>(b)].size()) != M) {
            shape_fail(Op::CondRoute, "r row length != M");
        }
        for (std::int64_t m = 0; m < M; ++m) {
            route_condition_into(W, r[static_cast<std::size_t>(b)], static_cast<int>(m),
                                 n.out.data() + b * M * D + m * D);
        }
    }
    n.rpat = std::move(r);
    return push(std::move(n));
}

void Graph::backward(ValueId loss) {
    if (nodes_.empty()) throw StateError("Graph::backward: no forward pass has been recorded");
    if (loss < 0 || static_cast<std::size_t>(loss) >= nodes_.size()) {
        throw StateError("Graph::backward: invalid loss node");
    }
    if (node(loss).out.numel() != 1) {
        throw StateError("Graph::backward: loss must be scalar, got " +
                         node(loss).out.shape_str());
    }
    for (auto& n : nodes_) n.grad_alloc = false;
    grad_buf(loss)[0] = 1.0;
    for (ValueId id = loss; id >= 0; --id) {
        if (!node(id).grad_alloc) continue;
        backward_node(id);
    }
}

void Graph::backward_node(ValueId id) {
    Node& n = node(id);
    const Tensor& g = n.grad;
    switch (n.op) {
        case Op::Input:
            break;
        case Op::Param: {
            Tensor& pg = params_->grad(n.name);
            for (std::int64_t i = 0; i < pg.numel(); ++i) pg[i] += g[i];
            break;
        }
        case Op::MatMul: {
            const Tensor& A = value(n.in[0]);
            const Tensor& B = value(n.in[1]);
            Tensor& ga = grad_buf(n.in[0]);
            Tensor& gb = grad_buf(n.in[1]);
            const std::int64_t N = A.dim(0), K = A.dim(1), M = B.dim(1);
            as_matrix(ga, N, K).noalias() += as_matrix(g, N, M) * as_matrix(B, K, M).transpose();
            as_matrix(gb, K, M).noalias() += as_matrix(A, N, K).transpose() * as_matrix(g, N, M);
            break;
        }
        case Op::Add: {
            Tensor& ga = grad_buf(n.in[0]);
            Tensor& gb = grad_buf(n.in[1]);
            for (std::int64_t i = 0; i < g.numel(); ++i) {
                ga[i] += g[i];
                gb[i] += g[i];
            }
            break;
        }
        case Op::Sub: {
            Tensor& ga = grad_buf(n.in[0]);
            Tensor& gb = grad_buf(n.in[1]);
            for (std::int64_t i = 0; i < g.numel(); ++i) {
                ga[i] += g[i];
                gb[i] -= g[i];
            }
            break;
        }
        case Op::Hadamard: {
            const Tensor& A = value(n.in[0]);
            const Tensor& B = value(n.in[1]);
            Tensor& ga = grad_buf(n.in[0]);
            Tensor& gb = grad_buf(n.in[1]);
            for (std::int64_t i = 0; i < g.numel(); ++i) {
                ga[i] += g[i] * B[i];
                gb[i] += g[i] * A[i];
            }
            break;
        }
        case Op::ScaleConst: {
            Tensor& ga = grad_buf(n.in[0]);
            const double c = n.attr_d[0];
            for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * c;
            break;
        }
        case Op::AddBias: {
            Tensor& gx = grad_buf(n.in[0]);
            Tensor& gb = grad_buf(n.in[1]);
            const std::int64_t c = last_dim(n.out);
            const std::int64_t rows = rows_of(n.out);
            for (std::int64_t r = 0; r < rows; ++r) {
                for (std::int64_t j = 0; j < c; ++j) {
                    gx[r * c + j] += g[r * c + j];
                    gb[j] += g[r * c + j];
                }
            }
            break;
        }
        case Op::Conv1d: {
            const Tensor& W = value(n.in[1]);
            Tensor& gx = grad_buf(n.in[0]);
            Tensor& gw = grad_buf(n.in[1]);
            Tensor& gb = grad_buf(n.in[2]);
            const std::int64_t kernel = n.attr_i[0], pad = n.attr_i[1];
            const std::int64_t batch = n.out.dim(0), len = n.out.dim(1), cout = n.out.dim(2);
            const std::int64_t cin = value(n.in[0]).dim(2);
            const std::int64_t kc = kernel * cin;
            // dW = patches^T * dY ; dB = column sums of dY
            as_matrix(gw, kc, cout).noalias() +=
                as_matrix(n.aux0, batch * len, kc).transpose() * as_matrix(g, batch * len, cout);
            for (std::int64_t r = 0; r < batch * len; ++r) {
                for (std::int64_t j = 0; j < cout; ++j) gb[j] += g[r * cout + j];
            }
            // dPatches = dY * W^T, scatter-added back onto the input timeline.
            Tensor dpatch = Tensor::zeros({batch * len, kc});
            as_matrix(dpatch, batch * len, kc).noalias() =
                as_matrix(g, batch * len, cout) * as_matrix(W, kc, cout).transpose();
            for (std::int64_t bi = 0; bi < batch; ++bi) {
                for (std::int64_t l = 0; l < len; ++l) {
                    const double* row = dpatch.data() + (bi * len + l) * kc;
                    for (std::int64_t t = 0; t < kernel; ++t) {
                        const std::int64_t src = l + t - pad;
                        if (src < 0 || src >= len) continue;
                        double* dst = gx.data() + (bi * len + src) * cin;
                        const double* sp = row + t * cin;
                        for (std::int64_t j = 0; j < cin; ++j) dst[j] += sp[j];
                    }
                }
            }
            break;
        }
        case Op::LayerNorm: {
            const Tensor& G = value(n.in[1]);
            Tensor& gx = grad_buf(n.in[0]);
            Tensor& gg = grad_buf(n.in[1]);
            Tensor& gs = grad_buf(n.in[2]);
            const std::int64_t c = last_dim(n.out);
            const std::int64_t rows = rows_of(n.out);
            for (std::int64_t r = 0; r < rows; ++r) {
                const double inv = n.aux1[r];
                double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                for (std::int64_t j = 0; j < c; ++j) {
                    const double dxh = g[r * c + j] * G[j];
                    const double xh = n.aux0[r * c + j];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh;
                    gg[j] += g[r * c + j] * xh;
                    gs[j] += g[r * c + j];
                }
                const double cinv = 1.0 / static_cast<double>(c);
                for (std::int64_t j = 0; j < c; ++j) {
                    const double dxh = g[r * c + j] * G[j];
                    const double xh = n.aux0[r * c + j];
                    gx[r * c + j] += inv * (dxh - cinv * sum_dxh - cinv * xh * sum_dxh_xh);
                }
            }
            break;
        }
        case Op::Relu: {
            const Tensor& X = value(n.in[0]);
            Tensor& gx = grad_buf(n.in[0]);
            for (std::int64_t i = 0; i < g.numel(); ++i) {
                if (X[i] > 0.0) gx[i] += g[i];
            }
            break;
        }
        case Op::Silu: {
            const Tensor& X = value(n.in[0]);
            Tensor& gx = grad_buf(n.in[0]);
            for (std::int64_t i = 0; i < g.numel(); ++i) {
                const double s = n.aux0[i];
                gx[i] += g[i] * (s + X[i] * s * (1.0 - s));
            }
            break;
        }
        case Op::SoftmaxLast:
        case Op::MaskedSoftmaxLast: {
            Tensor& gx = grad_buf(n.in[0]);
            const std::int64_t c = last_dim(n.out);
            const std::int64_t rows = rows_of(n.out);
            for (std::int64_t r = 0; r < rows; ++r) {
                double dot = 0.0;
                for (std::int64_t j = 0; j < c; ++j) dot += g[r * c + j] * n.out[r * c + j];
                for (std::int64_t j = 0; j < c; ++j) {
                    gx[r * c + j] += n.out[r * c + j] * (g[r * c + j] - dot);
                }
            }
            break;
        }
        case Op::ConcatLast: {
            const std::int64_t total = last_dim(n.out);
            const std::int64_t rows = rows_of(n.out);
            std::int64_t off = 0;
            for (ValueId src : n.in) {
                Tensor& gs = grad_buf(src);
                const std::int64_t c = last_dim(gs);
                for (std::int64_t r = 0; r < rows; ++r) {
                    for (std::int64_t j = 0; j < c; ++j) gs[r * c + j] += g[r * total + off + j];
                }
                off += c;
            }
            break;
        }
        case Op::SliceLast: {
            Tensor& gx = grad_buf(n.in[0]);
            const std::int64_t c = last_dim(value(n.in[0]));
            const std::int64_t w = last_dim(n.out);
            const std::int64_t rows = rows_of(n.out);
            const std::int64_t begin = n.attr_i[0];
            for (std::int64_t r = 0; r < rows; ++r) {
                for (std::int64_t j = 0; j < w; ++j) gx[r * c + begin + j] += g[r * w + j];
            }
            break;
        }
        case Op::PermuteLast: {
            Tensor& gx = grad_buf(n.in[0]);
            const std::int64_t c = last_dim(n.out);
            const std::int64_t rows = rows_of(n.out);
            for (std::int64_t r = 0; r < rows; ++r) {
                for (std::int64_t j = 0; j < c; ++j) gx[r * c + n.attr_i[j]] += g[r * c + j];
            }
            break;
        }
        case Op::Reshape: {
            Tensor& gx = grad_buf(n.in[0]);
            for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
            break;
        }
        case Op::SelectCol: {
            Tensor& gx = grad_buf(n.in[0]);
            const std::int64_t e = value(n.in[0]).dim(1);
            const std::int64_t col = n.attr_i[0];
            for (std::int64_t r = 0; r < n.out.dim(0); ++r) gx[r * e + col] += g[r];
            break;
        }
        case Op::ScaleRows: {
            const Tensor& X = value(n.in[0]);
            const Tensor& S = value(n.in[1]);
            Tensor& gx = grad_buf(n.in[0]);
            Tensor& gs = grad_buf(n.in[1]);
            const std::int64_t c = X.dim(1);
            for (std::int64_t r = 0; r < X.dim(0); ++r) {
                double acc = 0.0;
                for (std::int64_t j = 0; j < c; ++j) {
                    gx[r * c + j] += g[r * c + j] * S[r];
                    acc += g[r * c + j] * X[r * c + j];
                }
                gs[r] += acc;
            }
            break;
        }
        case Op::TileRows: {
            Tensor& gx = grad_buf(n.in[0]);
            const std::int64_t reps = n.attr_i[0];
            const std::int64_t c = n.out.dim(2);
            for (std::int64_t b = 0; b < n.out.dim(0); ++b) {
                for (std::int64_t l = 0; l < reps; ++l) {
                    for (std::int64_t j = 0; j < c; ++j) {
                        gx[b * c + j] += g[(b * reps + l) * c + j];
                    }
                }
            }
            break;
        }
        case Op::BroadcastRows: {
            Tensor& gv = grad_buf(n.in[0]);
            const std::int64_t c = n.out.dim(1);
            for (std::int64_t r = 0; r < n.out.dim(0); ++r) {
                for (std::int64_t j = 0; j < c; ++j) gv[j] += g[r * c + j];
            }
            break;
        }
        case Op::AddRowBroadcast: {
            Tensor& gx = grad_buf(n.in[0]);
            Tensor& gv = grad_buf(n.in[1]);
            const std::int64_t len = n.out.dim(1), c = n.out.dim(2);
            for (std::int64_t b = 0; b < n.out.dim(0); ++b) {
                for (std::int64_t l = 0; l < len; ++l) {
                    for (std::int64_t j = 0; j < c; ++j) {
                        gx[(b * len + l) * c + j] += g[(b * len + l) * c + j];
                        gv[b * c + j] += g[(b * len + l) * c + j];
                    }
                }
            }
            break;
        }
        case Op::MeanAxis1: {
            Tensor& gx = grad_buf(n.in[0]);
            const Tensor& X = value(n.in[0]);
            const std::int64_t len = X.dim(1), c = X.dim(2);
            const double inv = 1.0 / static_cast<double>(len);
            for (std::int64_t b = 0; b < X.dim(0); ++b) {
                for (std::int64_t l = 0; l < len; ++l) {
                    for (std::int64_t j = 0; j < c; ++j) {
                        gx[(b * len + l) * c + j] += g[b * c + j] * inv;
                    }
                }
            }
            break;
        }
        case Op::MeanAll: {
            Tensor& gx = grad_buf(n.in[0]);
            const double gv = g[0] / static_cast<double>(gx.numel());
            for (std::int64_t i = 0; i < gx.numel(); ++i) gx[i] += gv;
            break;
        }
        case Op::SumAll: {
            Tensor& gx = grad_buf(n.in[0]);
            for (std::int64_t i = 0; i < gx.numel(); ++i) gx[i] += g[0];
            break;
        }
        case Op::SumSquares: {
            const Tensor& X = value(n.in[0]);
            Tensor& gx = grad_buf(n.in[0]);
            for (std::int64_t i = 0; i < gx.numel(); ++i) gx[i] += 2.0 * X[i] * g[0];
            break;
        }
        case Op::MaskedMse: {
            const Tensor& P = value(n.in[0]);
            Tensor& gp = grad_buf(n.in[0]);
            const std::int64_t batch = P.dim(0);
            const std::int64_t per = P.numel() / batch;
            for (std::int64_t b = 0; b < batch; ++b) {
                const double w = 2.0 * g[0] /
                                 (static_cast<double>(batch) * n.attr_d[static_cast<std::size_t>(b)]);
                for (std::int64_t i = b * per; i < (b + 1) * per; ++i) {
                    gp[i] += w * n.aux1[i] * (P[i] - n.aux0[i]);
                }
            }
            break;
        }
        case Op::CrossEntropy: {
            Tensor& gx = grad_buf(n.in[0]);
            const std::int64_t batch = n.aux0.dim(0), c = n.aux0.dim(1);
            const double inv = g[0] / static_cast<double>(batch);
            for (std::int64_t b = 0; b < batch; ++b) {
                for (std::int64_t j = 0; j < c; ++j) {
                    double d = n.aux0[b * c + j];
                    if (j == n.labels[static_cast<std::size_t>(b)]) d -= 1.0;
                    gx[b * c + j] += inv * d;
                }
            }
            break;
        }
        case Op::CondRoute: {
            Tensor& gw = grad_buf(n.in[0]);
            const std::int64_t M = n.attr_i[0], D = n.attr_i[1];
            for (std::size_t b = 0; b < n.rpat.size(); ++b) {
                const auto& r = n.rpat[b];
                int obs = 0;
                for (int f : r) obs += (f != 0);
                for (std::int64_t m = 0; m < M; ++m) {
                    const double* gr = g.data() + (static_cast<std::int64_t>(b) * M + m) * D;
                    if (r[static_cast<std::size_t>(m)] != 0) {
                        double* dst = gw.data() + (m * M + m) * D;
                        for (std::int64_t d = 0; d < D; ++d) dst[d] += gr[d];
                    } else {
                        const double inv = 1.0 / static_cast<double>(obs);
                        for (std::int64_t i = 0; i < M; ++i) {
                            if (r[static_cast<std::size_t>(i)] == 0) continue;
                            double* dst = gw.data() + (i * M + m) * D;
                            for (std::int64_t d = 0; d < D; ++d) dst[d] += gr[d] * inv;
                        }
                    }
                }
            }
            break;
        }
    }
}

}  // namespace fedcondi
