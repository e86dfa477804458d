#pragma once

#include <cstdint>
#include <vector>

#include "fedcondi/tensor.hpp"

namespace fedcondi {

// Condition routing over a learnable table W_cond of shape [M, M, D]:
// entry [i, m] is the contribution vector from source modality i to target m.
// For target m: the diagonal W_cond[m, m] if r[m] = 1, otherwise the
// arithmetic mean of W_cond[i, m] over observed sources i (sum in ascending
// index order, then one division). Writes D values to dst.
void route_condition_into(const Tensor& w_cond, const std::vector<int>& r, int m, double* dst);

// Same routing returning a fresh [D] tensor.
Tensor route_condition(const Tensor& w_cond, const std::vector<int>& r, int m);

// Concatenation of route_condition over all targets m = 0..M-1, shape [M*D].
Tensor sample_condition_vector(const Tensor& w_cond, const std::vector<int>& r);

// Permutation p of length 3*M*D such that applying out[j] = in[p[j]] to the
// flat concatenation [ins(M*D) | mod(M*D) | cond(M*D)] yields the per-modality
// layout [ins_0 | mod_0 | cond_0 | ins_1 | ...].
std::vector<std::int64_t> fusion_permutation(std::int64_t M, std::int64_t D);

// Three-way fusion for one sample: ins and mod are [M, D], cond is [M*D].
// Returns the [3*M*D] fused vector in per-modality segment order.
Tensor fuse(const Tensor& ins, const Tensor& mod, const Tensor& cond);

}  // namespace fedcondi
