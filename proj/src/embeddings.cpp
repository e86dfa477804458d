#include "fedcondi/embeddings.hpp"

#include <string>

#include "fedcondi/errors.hpp"

namespace fedcondi {

void route_condition_into(const Tensor& w_cond, const std::vector<int>& r, int m, double* dst) {
    const auto M = static_cast<std::int64_t>(r.size());
    const std::int64_t D = w_cond.shape().back();
    if (w_cond.numel() != M * M * D) {
        throw ShapeError("route_condition: table " + w_cond.shape_str() + " does not hold " +
                         std::to_string(M) + "^2 vectors");
    }
    if (m < 0 || m >= M) throw ShapeError("route_condition: target modality out of range");
    if (r[static_cast<std::size_t>(m)] != 0) {
        const double* src = w_cond.data() + (static_cast<std::int64_t>(m) * M + m) * D;
        for (std::int64_t d = 0; d < D; ++d) dst[d] = src[d];
        return;
    }
    std::int64_t obs = 0;
    for (int f : r) obs += (f != 0);
    if (obs == 0) throw StateError("route_condition: no observed modalities");
    for (std::int64_t d = 0; d < D; ++d) dst[d] = 0.0;
    for (std::int64_t i = 0; i < M; ++i) {
        if (r[static_cast<std::size_t>(i)] == 0) continue;
        const double* src = w_cond.data() + (i * M + m) * D;
        for (std::int64_t d = 0; d < D; ++d) dst[d] += src[d];
    }
    const double inv = 1.0 / static_cast<double>(obs);
    for (std::int64_t d = 0; d < D; ++d) dst[d] *= inv;
}

Tensor route_condition(const Tensor& w_cond, const std::vector<int>& r, int m) {
    Tensor out = Tensor::zeros({w_cond.shape().back()});
    route_condition_into(w_cond, r, m, out.data());
    return out;
}

Tensor sample_condition_vector(const Tensor& w_cond, const std::vector<int>& r) {
    const auto M = static_cast<std::int64_t>(r.size());
    const std::int64_t D = w_cond.shape().back();
    Tensor out = Tensor::zeros({M * D});
    for (std::int64_t m = 0; m < M; ++m) {
        route_condition_into(w_cond, r, static_cast<int>(m), out.data() + m * D);
    }
    return out;
}

std::vector<std::int64_t> fusion_permutation(std::int64_t M, std::int64_t D) {
    std::vector<std::int64_t> perm(static_cast<std::size_t>(3 * M * D));
    for (std::int64_t m = 0; m < M; ++m) {
        for (std::int64_t s = 0; s < 3; ++s) {
            for (std::int64_t d = 0; d < D; ++d) {
                perm[static_cast<std::size_t>(m * 3 * D + s * D + d)] =
                    s * M * D + m * D + d;
            }
        }
    }
    return perm;
}

Tensor fuse(const Tensor& ins, const Tensor& mod, const Tensor& cond) {
    if (ins.rank() != 2 || !ins.same_shape(mod)) {
        throw ShapeError("fuse: ins " + ins.shape_str() + " vs mod " + mod.shape_str());
    }
    const std::int64_t M = ins.dim(0), D = ins.dim(1);
    if (cond.numel() != M * D) {
        throw ShapeError("fuse: cond " + cond.shape_str() + " vs M*D=" + std::to_string(M * D));
    }
    Tensor out = Tensor::zeros({3 * M * D});
    for (std::int64_t m = 0; m < M; ++m) {
        double* seg = out.data() + m * 3 * D;
        for (std::int64_t d = 0; d < D; ++d) {
            seg[d] = ins[m * D + d];
            seg[D + d] = mod[m * D + d];
            seg[2 * D + d] = cond[m * D + d];
        }
    }
    return out;
}

}  // namespace fedcondi
