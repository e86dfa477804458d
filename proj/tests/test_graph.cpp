#include <cmath>
#include <limits>
#include <vector>

#include "doctest.h"
#include "test_util.hpp"

#include "fedcondi/embeddings.hpp"
#include "fedcondi/errors.hpp"
#include "fedcondi/graph.hpp"

using namespace fedcondi;
using fedcondi::test::fd_max_rel_err;

namespace {

Tensor random_tensor(std::vector<std::int64_t> shape, Rng& rng, double scale = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = scale * rng.normal();
    return t;
}

ParamMap make_params(std::initializer_list<std::pair<const char*, std::vector<std::int64_t>>> specs,
                     std::uint64_t seed) {
    Rng rng(seed);
    ParamMap pm;
    for (const auto& [name, shape] : specs) {
        pm.add(name, random_tensor(shape, rng, 0.5));
    }
    return pm;
}

}  // namespace

TEST_CASE("two-layer mlp forward matches a straight-line oracle") {
    Rng rng(42);
    const Tensor x = random_tensor({2, 3}, rng);
    ParamMap pm = make_params({{"w1", {3, 4}}, {"b1", {4}}, {"w2", {4, 2}}, {"b2", {2}}}, 7);

    Graph g(&pm);
    const auto h = g.relu(g.add_bias(g.matmul(g.input(x), g.param("w1")), g.param("b1")));
    const auto out = g.add_bias(g.matmul(h, g.param("w2")), g.param("b2"));
    const Tensor& y = g.value(out);

    // Independent elementwise recomputation.
    const Tensor& w1 = pm.value("w1");
    const Tensor& b1 = pm.value("b1");
    const Tensor& w2 = pm.value("w2");
    const Tensor& b2 = pm.value("b2");
    for (int r = 0; r < 2; ++r) {
        double hid[4];
        for (int j = 0; j < 4; ++j) {
            double s = b1[j];
            for (int k = 0; k < 3; ++k) s += x[r * 3 + k] * w1[k * 4 + j];
            hid[j] = s > 0.0 ? s : 0.0;
        }
        for (int c = 0; c < 2; ++c) {
            double s = b2[c];
            for (int j = 0; j < 4; ++j) s += hid[j] * w2[j * 2 + c];
            CHECK(y[r * 2 + c] == doctest::Approx(s).epsilon(1e-12));
        }
    }
}

TEST_CASE("conv1d forward matches a naive sliding window") {
    Rng rng(11);
    const int B = 2, L = 5, Ci = 3, Co = 2, k = 3;
    const Tensor x = random_tensor({B, L, Ci}, rng);
    ParamMap pm = make_params({{"w", {k * Ci, Co}}, {"b", {Co}}}, 3);

    Graph g(&pm);
    const Tensor& y = g.value(g.conv1d(g.input(x), g.param("w"), g.param("b"), k));

    const Tensor& w = pm.value("w");
    const Tensor& b = pm.value("b");
    for (int bb = 0; bb < B; ++bb) {
        for (int t = 0; t < L; ++t) {
            for (int c = 0; c < Co; ++c) {
                double s = b[c];
                for (int dt = -k / 2; dt <= k / 2; ++dt) {
                    const int src = t + dt;
                    if (src < 0 || src >= L) continue;
                    for (int ci = 0; ci < Ci; ++ci) {
                        s += x[(bb * L + src) * Ci + ci] * w[((dt + k / 2) * Ci + ci) * Co + c];
                    }
                }
                CHECK(y[(bb * L + t) * Co + c] == doctest::Approx(s).epsilon(1e-12));
            }
        }
    }

    CHECK_THROWS_AS((void)g.conv1d(g.input(x), g.param("w"), g.param("b"), 2), ShapeError);
}

TEST_CASE("layer_norm forward matches manual normalization") {
    Rng rng(5);
    const Tensor x = random_tensor({3, 4}, rng, 2.0);
    ParamMap pm = make_params({{"g", {4}}, {"s", {4}}}, 9);
    Graph g(&pm);
    const Tensor& y = g.value(g.layer_norm(g.input(x), g.param("g"), g.param("s")));
    for (int r = 0; r < 3; ++r) {
        double mean = 0.0;
        for (int c = 0; c < 4; ++c) mean += x[r * 4 + c];
        mean /= 4.0;
        double var = 0.0;
        for (int c = 0; c < 4; ++c) var += (x[r * 4 + c] - mean) * (x[r * 4 + c] - mean);
        var /= 4.0;
        const double inv = 1.0 / std::sqrt(var + 1e-5);
        for (int c = 0; c < 4; ++c) {
            const double want = (x[r * 4 + c] - mean) * inv * pm.value("g")[c] + pm.value("s")[c];
            CHECK(y[r * 4 + c] == doctest::Approx(want).epsilon(1e-12));
        }
    }
}

TEST_CASE("softmax rows sum to one; masked softmax zeroes excluded entries") {
    Rng rng(8);
    const Tensor x = random_tensor({4, 5}, rng, 3.0);
    Graph g;
    const Tensor& p = g.value(g.softmax_last(g.input(x)));
    for (int r = 0; r < 4; ++r) {
        double s = 0.0;
        for (int c = 0; c < 5; ++c) {
            CHECK(p[r * 5 + c] > 0.0);
            s += p[r * 5 + c];
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }

    Tensor keep = Tensor::zeros({4, 5});
    keep.at(0, 1) = 1.0;
    keep.at(0, 3) = 1.0;
    keep.at(1, 0) = 1.0;
    keep.at(2, 2) = 1.0;
    keep.at(2, 3) = 1.0;
    keep.at(2, 4) = 1.0;
    // row 3 keeps nothing
    const Tensor& q = g.value(g.masked_softmax_last(g.input(x), keep));
    for (int r = 0; r < 4; ++r) {
        double s = 0.0;
        for (int c = 0; c < 5; ++c) {
            if (keep.at(r, c) == 0.0) CHECK(q[r * 5 + c] == 0.0);
            s += q[r * 5 + c];
        }
        if (r == 3) {
            CHECK(s == 0.0);
        } else {
            CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
    CHECK(q.at(1, 0) == 1.0);
}

TEST_CASE("cross entropy equals ln C for uniform logits and ~0 for confident ones") {
    Graph g;
    const auto flat = g.input(Tensor::zeros({3, 4}));
    const double loss = g.value(g.cross_entropy(flat, {0, 1, 3}))[0];
    CHECK(loss == doctest::Approx(std::log(4.0)).epsilon(1e-12));

    Tensor confident = Tensor::zeros({2, 3});
    confident.at(0, 1) = 30.0;
    confident.at(1, 2) = 30.0;
    const double tiny = g.value(g.cross_entropy(g.input(confident), {1, 2}))[0];
    CHECK(tiny < 1e-4);

    CHECK_THROWS_AS((void)g.cross_entropy(flat, {0, 1}), ShapeError);
    CHECK_THROWS_AS((void)g.cross_entropy(flat, {0, 1, 4}), ShapeError);
}

TEST_CASE("masked_mse matches a hand-computed example") {
    Graph g;
    Tensor pred = Tensor::zeros({2, 3});
    pred.at(0, 0) = 1.0;
    pred.at(0, 2) = 2.0;
    pred.at(1, 1) = -1.0;
    Tensor target = Tensor::zeros({2, 3});
    target.at(0, 0) = 2.0;
    Tensor mask = Tensor::zeros({2, 3});
    mask.at(0, 0) = 1.0;
    mask.at(0, 2) = 1.0;
    mask.at(1, 1) = 1.0;
    // row 0: ((1-2)^2 + 2^2)/2 = 2.5 ; row 1: 1/1 = 1 ; mean = 1.75
    const double loss = g.value(g.masked_mse(g.input(pred), target, mask))[0];
    CHECK(loss == doctest::Approx(1.75).epsilon(1e-12));

    Tensor empty_row = mask;
    empty_row.at(1, 1) = 0.0;
    CHECK_THROWS_AS((void)g.masked_mse(g.input(pred), target, empty_row), StateError);
}

TEST_CASE("finite-difference gradients across the op set") {
    Rng data_rng(77);
    const Tensor x = random_tensor({3, 4, 2}, data_rng, 0.7);
    Tensor keep = Tensor::zeros({12, 3});
    for (int r = 0; r < 12; ++r) {
        keep[r * 3 + r % 3] = 1.0;
        keep[r * 3 + (r + 1) % 3] = 1.0;
    }
    Tensor mse_target = random_tensor({3, 8}, data_rng);
    Tensor mse_mask = Tensor::zeros({3, 8});
    for (int i = 0; i < 24; ++i) mse_mask[i] = i % 3 != 1 ? 1.0 : 0.0;

    ParamMap pm = make_params({{"cw", {6, 3}},   {"cb", {3}},     {"lg", {3}},
                               {"ls", {3}},      {"gw", {3, 3}},  {"gb", {3}},
                               {"pw", {12, 8}},  {"vb", {8}},     {"tb", {3, 8}}},
                              123);

    const Tensor had_const = random_tensor({3, 8}, data_rng);

    // One composite loss through conv, layer norm, gates, structural ops,
    // and all the reductions; fixed inputs so every call sees the same graph.
    auto loss_fn = [&](Graph& g) {
        const auto xin = g.input(x);
        auto h = g.conv1d(xin, g.param("cw"), g.param("cb"), 3);  // [3,4,3]
        h = g.layer_norm(h, g.param("lg"), g.param("ls"));
        h = g.silu(h);
        auto flat = g.reshape(h, {12, 3});
        auto logits = g.add_bias(g.matmul(flat, g.param("gw")), g.param("gb"));
        auto gates = g.masked_softmax_last(logits, keep);
        auto mixed = g.scale_rows(flat, g.select_col(gates, 1));
        auto both = g.concat_last({flat, mixed});                          // [12,6]
        auto part = g.slice_last(both, 1, 5);                              // [12,4]
        auto swapped = g.permute_last(both, {5, 4, 3, 2, 1, 0});
        auto merged = g.concat_last({part, g.slice_last(swapped, 0, 2)});  // [12,6]
        auto relu_h = g.relu(merged);
        auto cube = g.reshape(relu_h, {3, 4, 6});
        auto pooled = g.mean_axis1(cube);    // [3,6]
        auto tiled = g.tile_rows(pooled, 2); // [3,2,6]
        auto back = g.reshape(tiled, {3, 12});
        auto wide = g.matmul(back, g.param("pw"));  // [3,8]
        auto biased = g.add_bias(wide, g.param("vb"));
        auto brows = g.broadcast_rows(g.param("vb"), 3);
        auto summed = g.add(biased, brows);
        auto scaled = g.scale(g.sub(summed, brows), 0.5);
        auto had = g.hadamard(scaled, g.input(had_const));
        auto cube2 = g.reshape(had, {3, 2, 4});
        auto arb =
            g.add_row_broadcast(cube2, g.reshape(g.slice_last(g.param("tb"), 0, 4), {3, 4}));
        auto flat2 = g.reshape(arb, {3, 8});
        auto mse = g.masked_mse(flat2, mse_target, mse_mask);
        auto extra = g.scale(g.sum_squares(g.param("tb")), 1e-2);
        auto mall = g.mean_all(g.param("pw"));
        auto sall = g.scale(g.sum_all(g.param("gb")), 0.1);
        return g.add(g.add(mse, extra), g.add(mall, sall));
    };

    Rng probe(31337);
    const double worst = fd_max_rel_err(pm, loss_fn, test::all_param_names(pm), 6, probe);
    CHECK(worst < 1e-4);
}

TEST_CASE("finite-difference gradients for cross entropy and softmax") {
    Rng rng(21);
    ParamMap pm = make_params({{"w", {5, 3}}, {"b", {3}}}, 55);
    const Tensor x = random_tensor({4, 5}, rng);
    const std::vector<int> labels{0, 2, 1, 2};
    auto loss_fn = [&](Graph& g) {
        auto logits = g.add_bias(g.matmul(g.input(x), g.param("w")), g.param("b"));
        auto probs = g.softmax_last(logits);
        auto ce = g.cross_entropy(logits, labels);
        return g.add(ce, g.scale(g.sum_squares(probs), 0.05));
    };
    Rng probe(99);
    CHECK(fd_max_rel_err(pm, loss_fn, {"w", "b"}, 12, probe) < 1e-4);
}

TEST_CASE("finite-difference gradients for condition routing") {
    ParamMap pm = make_params({{"w_cond", {3, 3, 4}}}, 17);
    const std::vector<std::vector<int>> rpat{{1, 0, 1}, {0, 1, 1}, {1, 1, 1}, {1, 0, 0}};
    const Tensor target = random_tensor({4, 12}, *[] {
        static Rng r(4);
        return &r;
    }());
    auto loss_fn = [&](Graph& g) {
        auto routed = g.route_condition_batch(g.param("w_cond"), rpat, 3, 4);
        auto diff = g.sub(routed, g.input(target));
        return g.sum_squares(diff);
    };
    Rng probe(2);
    CHECK(fd_max_rel_err(pm, loss_fn, {"w_cond"}, 24, probe) < 1e-4);
}

TEST_CASE("cond_route forward bit-matches the plain routing helper") {
    Rng rng(66);
    ParamMap pm;
    pm.add("w_cond", random_tensor({3, 3, 5}, rng));
    const std::vector<std::vector<int>> rpat{{1, 1, 0}, {0, 0, 1}, {1, 0, 1}};
    Graph g(&pm);
    const Tensor& out = g.value(g.route_condition_batch(g.param("w_cond"), rpat, 3, 5));
    for (std::size_t b = 0; b < rpat.size(); ++b) {
        const Tensor want = sample_condition_vector(pm.value("w_cond"), rpat[b]);
        for (int j = 0; j < 15; ++j) {
            CHECK(out[static_cast<std::int64_t>(b) * 15 + j] == want[j]);
        }
    }
}

TEST_CASE("graph raises NumericError on non-finite values, naming the op") {
    Graph g;
    Tensor bad = Tensor::zeros({2, 2});
    bad[3] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS((void)g.input(bad), NumericError);

    ParamMap pm;
    pm.add("w", Tensor::full({2, 2}, 1e200));
    Graph g2(&pm);
    const auto w = g2.param("w");
    try {
        (void)g2.matmul(w, w);  // 2e400 overflows
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("matmul") != std::string::npos);
    }
}

TEST_CASE("backward validation and gradient access rules") {
    Graph g;
    const auto x = g.input(Tensor::full({2, 2}, 1.0));
    CHECK_THROWS_AS(g.backward(x), StateError);  // non-scalar loss
    CHECK_THROWS_AS((void)g.grad(x), StateError);  // no backward yet

    const auto s = g.sum_all(x);
    g.backward(s);
    const Tensor& gx = g.grad(x);
    for (int i = 0; i < 4; ++i) CHECK(gx[i] == 1.0);
}

TEST_CASE("matmul shape mismatch raises ShapeError") {
    Graph g;
    const auto a = g.input(Tensor::zeros({2, 3}));
    const auto b = g.input(Tensor::zeros({4, 2}));
    CHECK_THROWS_AS((void)g.matmul(a, b), ShapeError);
    CHECK_THROWS_AS((void)g.add(a, b), ShapeError);
}
