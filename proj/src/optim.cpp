#include "lmmvae/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace lmmvae {

Adam::Adam(AdamConfig cfg) : cfg_(cfg) {
    if (cfg_.lr <= 0.0 || cfg_.eps <= 0.0 || cfg_.beta1 <= 0.0 || cfg_.beta1 >= 1.0 ||
        cfg_.beta2 <= 0.0 || cfg_.beta2 >= 1.0) {
        throw std::invalid_argument("adam: invalid hyperparameters");
    }
}

void Adam::step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads) {
    if (params.size() != grads.size()) {
        throw std::invalid_argument("adam: params/grads length mismatch");
    }
    if (m_.empty()) {
        for (const Tensor* p : params) {
            m_.push_back(Tensor::zeros(p->shape()));
            v_.push_back(Tensor::zeros(p->shape()));
        }
    }
    if (m_.size() != params.size()) {
        throw std::invalid_argument("adam: parameter list changed size between steps");
    }
    ++step_count_;
    double t = static_cast<double>(step_count_);
    double bc1 = 1.0 - std::pow(cfg_.beta1, t);
    double bc2 = 1.0 - std::pow(cfg_.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        const Tensor& g = *grads[i];
        if (!p.same_shape(g) || !p.same_shape(m_[i])) {
            throw std::invalid_argument("adam: shape mismatch for parameter " + std::to_string(i));
        }
        if (!g.all_finite()) {
            throw std::runtime_error("adam: non-finite gradient for parameter " +
                                     std::to_string(i));
        }
        for (std::size_t j = 0; j < p.size(); ++j) {
            m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * g[j];
            v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * g[j] * g[j];
            double m_hat = m_[i][j] / bc1;
            double v_hat = v_[i][j] / bc2;
            p[j] -= cfg_.lr * m_hat / (std::sqrt(v_hat) + cfg_.eps);
        }
    }
}

double exp_lr(double lr0, double gamma, std::size_t step_size, std::size_t t) {
    if (lr0 <= 0.0 || gamma <= 0.0 || gamma > 1.0 || step_size == 0) {
        throw std::invalid_argument("exp_lr: invalid schedule parameters");
    }
    return lr0 * std::pow(gamma, static_cast<double>(t / step_size));
}

}  // namespace lmmvae
