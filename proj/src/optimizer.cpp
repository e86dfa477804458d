#include "fedcondi/optimizer.hpp"

#include <cmath>

#include "fedcondi/errors.hpp"

namespace fedcondi {

Adam::Adam(double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (lr <= 0.0) throw ConfigError("Adam: learning rate must be positive");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
        throw ConfigError("Adam: betas must lie in [0,1)");
    }
}

void Adam::reset() {
    t_ = 0;
    m_.clear();
    v_.clear();
}

void Adam::step(ParamMap& params) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& [name, e] : params) {
        Tensor& w = e.value;
        Tensor& g = e.grad;
        bool live = false;
        for (std::int64_t i = 0; i < g.numel() && !live; ++i) live = g[i] != 0.0;
        if (!live) continue;  // untouched by this step: no value or moment drift
        auto mit = m_.find(name);
        if (mit == m_.end()) {
            mit = m_.emplace(name, Tensor::zeros(w.shape())).first;
            v_.emplace(name, Tensor::zeros(w.shape()));
        }
        Tensor& m = mit->second;
        Tensor& v = v_.at(name);
        for (std::int64_t i = 0; i < w.numel(); ++i) {
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            w[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
    params.zero_grads();
}

}  // namespace fedcondi
