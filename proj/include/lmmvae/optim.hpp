#pragma once

#include <cstddef>
#include <vector>

#include "lmmvae/tensor.hpp"

namespace lmmvae {

struct AdamConfig {
    double lr = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias-corrected moments. Moment buffers are keyed by parameter
/// position, so the caller must pass the same parameter list every step.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {});

    void set_lr(double lr) { cfg_.lr = lr; }
    double lr() const { return cfg_.lr; }
    std::size_t step_count() const { return step_count_; }

    /// Updates params in place. Throws on non-finite gradients.
    void step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads);

private:
    AdamConfig cfg_;
    std::size_t step_count_ = 0;
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
};

/// lr0 * gamma^floor(t / step_size)
double exp_lr(double lr0, double gamma, std::size_t step_size, std::size_t t);

}  // namespace lmmvae
