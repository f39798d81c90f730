#include "lmmvae/gpbridge.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <cmath>
#include <stdexcept>

namespace lmmvae {

double KernelSpec::operator()(double r) const {
    double u = r / lengthscale;
    return variance * std::exp(-0.5 * u * u);
}

void KernelSpec::validate() const {
    if (!(variance > 0.0) || !(lengthscale > 0.0)) {
        throw std::invalid_argument("kernel: variance and lengthscale must be > 0");
    }
}

double approx_kernel(double r, const std::vector<double>& frequencies, double variance) {
    if (frequencies.empty()) throw std::invalid_argument("approx_kernel: needs frequencies");
    double s = 0.0;
    for (double w : frequencies) s += std::cos(w * r);
    return variance * s / static_cast<double>(frequencies.size());
}

namespace {

Eigen::LLT<Eigen::MatrixXd> cholesky_with_jitter(Eigen::MatrixXd k, const char* what) {
    double jitter = 1e-10;
    for (;;) {
        Eigen::MatrixXd attempt = k + jitter * Eigen::MatrixXd::Identity(k.rows(), k.cols());
        Eigen::LLT<Eigen::MatrixXd> llt(attempt);
        if (llt.info() == Eigen::Success) return llt;
        jitter *= 10.0;
        if (jitter > 1e-6) {
            throw std::runtime_error(std::string(what) +
                                     ": matrix not positive definite after max jitter");
        }
    }
}

}  // namespace

GpPosterior::GpPosterior(std::vector<double> train_x, std::vector<double> train_y,
                         KernelSpec kernel, double noise_var)
    : x_(std::move(train_x)), kernel_(kernel), noise_var_(noise_var) {
    kernel_.validate();
    if (!(noise_var > 0.0)) throw std::invalid_argument("gp: noise variance must be > 0");
    if (x_.size() != train_y.size()) throw std::invalid_argument("gp: x/y length mismatch");
    std::size_t n = x_.size();
    if (n > 2000) throw std::invalid_argument("gp: dense solver capped at 2000 points");
    if (n == 0) return;
    Eigen::MatrixXd k(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) k(i, j) = kernel_(x_[i] - x_[j]);
        k(i, i) += noise_var_;
    }
    Eigen::LLT<Eigen::MatrixXd> llt = cholesky_with_jitter(std::move(k), "gp");
    Eigen::Map<const Eigen::VectorXd> y(train_y.data(), static_cast<Eigen::Index>(n));
    Eigen::VectorXd alpha = llt.solve(y);
    alpha_.assign(alpha.data(), alpha.data() + n);
    Eigen::MatrixXd l = llt.matrixL();
    chol_.assign(l.size(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) chol_[i * n + j] = l(static_cast<Eigen::Index>(i),
                                                                  static_cast<Eigen::Index>(j));
    }
}

std::vector<double> GpPosterior::solve_k(const std::vector<double>& k) const {
    // Forward substitution: returns L^{-1} k.
    std::size_t n = x_.size();
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = k[i];
        for (std::size_t j = 0; j < i; ++j) s -= chol_[i * n + j] * v[j];
        v[i] = s / chol_[i * n + i];
    }
    return v;
}

double GpPosterior::mean(double x) const {
    double m = 0.0;
    for (std::size_t i = 0; i < x_.size(); ++i) m += kernel_(x - x_[i]) * alpha_[i];
    return m;
}

double GpPosterior::var(double x) const { return covar(x, x); }

double GpPosterior::covar(double x1, double x2) const {
    double prior = kernel_(x1 - x2);
    if (x_.empty()) return prior;
    std::size_t n = x_.size();
    std::vector<double> k1(n), k2(n);
    for (std::size_t i = 0; i < n; ++i) {
        k1[i] = kernel_(x1 - x_[i]);
        k2[i] = kernel_(x2 - x_[i]);
    }
    std::vector<double> v1 = solve_k(k1);
    std::vector<double> v2 = solve_k(k2);
    double explained = 0.0;
    for (std::size_t i = 0; i < n; ++i) explained += v1[i] * v2[i];
    return prior - explained;
}

RffPosterior::RffPosterior(const std::vector<double>& train_x, const std::vector<double>& train_y,
                           std::vector<double> frequencies, std::vector<double> weight_variances,
                           double noise_var)
    : frequencies_(std::move(frequencies)), noise_var_(noise_var) {
    if (frequencies_.empty()) throw std::invalid_argument("rff: needs frequencies");
    if (!(noise_var > 0.0)) throw std::invalid_argument("rff: noise variance must be > 0");
    std::size_t p = 2 * frequencies_.size();
    if (weight_variances.size() != p) {
        throw std::invalid_argument("rff: expected " + std::to_string(p) + " weight variances");
    }
    for (double v : weight_variances) {
        if (!(v > 0.0)) throw std::invalid_argument("rff: weight variances must be > 0");
    }
    std::size_t n = train_x.size();
    if (n != train_y.size()) throw std::invalid_argument("rff: x/y length mismatch");

    // Posterior precision = Sigma_p^{-1} + Phi Phi^T / noise.
    Eigen::MatrixXd precision = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(p),
                                                      static_cast<Eigen::Index>(p));
    for (std::size_t j = 0; j < p; ++j) {
        precision(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(j)) =
            1.0 / weight_variances[j];
    }
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p));
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> phi = features(train_x[i]);
        Eigen::Map<const Eigen::VectorXd> f(phi.data(), static_cast<Eigen::Index>(p));
        precision.noalias() += f * f.transpose() / noise_var_;
        rhs.noalias() += f * (train_y[i] / noise_var_);
    }
    Eigen::LLT<Eigen::MatrixXd> llt(precision);
    if (llt.info() != Eigen::Success) {
        throw std::runtime_error("rff: singular posterior precision");
    }
    Eigen::VectorXd mean_w = llt.solve(rhs);
    Eigen::MatrixXd cov = llt.solve(Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(p),
                                                              static_cast<Eigen::Index>(p)));
    post_mean_.assign(mean_w.data(), mean_w.data() + p);
    post_cov_.assign(cov.data(), cov.data() + p * p);  // symmetric, layout moot
}

std::vector<double> RffPosterior::features(double x) const {
    return fourier_feature_map(x, frequencies_);
}

double RffPosterior::mean(double x) const {
    std::vector<double> phi = features(x);
    double m = 0.0;
    for (std::size_t j = 0; j < phi.size(); ++j) m += phi[j] * post_mean_[j];
    return m;
}

double RffPosterior::covar(double x1, double x2) const {
    std::vector<double> p1 = features(x1);
    std::vector<double> p2 = features(x2);
    std::size_t p = p1.size();
    double s = 0.0;
    for (std::size_t a = 0; a < p; ++a) {
        double row = 0.0;
        for (std::size_t b = 0; b < p; ++b) row += post_cov_[a * p + b] * p2[b];
        s += p1[a] * row;
    }
    return s;
}

double RffPosterior::var(double x) const { return covar(x, x) + noise_var_; }

Tensor compose_additive(const std::vector<AdditiveComponent>& components,
                        const std::vector<double>& x_raw) {
    if (components.empty()) throw std::invalid_argument("compose_additive: no components");
    std::size_t l_dim = components.front().effect.rows();
    Tensor z = Tensor::zeros({l_dim});
    for (const auto& comp : components) {
        if (comp.covariate_index >= x_raw.size()) {
            throw std::invalid_argument("compose_additive: covariate index out of range");
        }
        if (comp.effect.rows() != l_dim) {
            throw std::invalid_argument("compose_additive: latent dims differ across components");
        }
        std::vector<double> phi = expand_basis(x_raw[comp.covariate_index], comp.basis);
        if (phi.size() != comp.effect.cols()) {
            throw std::invalid_argument("compose_additive: feature width " +
                                        std::to_string(phi.size()) + " does not match effect " +
                                        shape_str(comp.effect.shape()));
        }
        for (std::size_t l = 0; l < l_dim; ++l) {
            double s = 0.0;
            for (std::size_t j = 0; j < phi.size(); ++j) s += comp.effect.at(l, j) * phi[j];
            z[l] += s;
        }
    }
    return z;
}

}  // namespace lmmvae
