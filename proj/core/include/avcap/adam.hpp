#pragma once

#include <cstdint>
#include <vector>

#include "avcap/tensor.hpp"

namespace avcap {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam with bias correction over a fixed set of parameter tensors.
// Moment buffers are keyed by position and sized to match each parameter.
class Adam {
  public:
    explicit Adam(std::vector<Tensor> params, AdamConfig cfg = {});

    // Applies one update from the grads currently attached to the params.
    // A parameter whose grad buffer was never allocated is a contract error.
    void step();
    void zero_grad();

    int64_t step_count() const { return t_; }
    AdamConfig& config() { return cfg_; }
    const std::vector<Tensor>& params() const { return params_; }

  private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    AdamConfig cfg_;
    int64_t t_ = 0;
};

}  // namespace avcap
