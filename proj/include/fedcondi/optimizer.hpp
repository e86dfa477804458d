#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "fedcondi/param_map.hpp"
#include "fedcondi/tensor.hpp"

namespace fedcondi {

// Adam with bias correction. step() consumes and zeroes the accumulated
// gradients. Moment buffers are keyed by parameter name and created lazily,
// so one instance can drive a ParamMap whose schema never changes.
class Adam {
  public:
    explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    void step(ParamMap& params);
    void reset();

    double lr() const { return lr_; }

  private:
    double lr_, beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
    std::map<std::string, Tensor> m_, v_;
};

}  // namespace fedcondi
