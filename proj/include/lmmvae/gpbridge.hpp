#pragma once

#include <cstddef>
#include <vector>

#include "lmmvae/covariates.hpp"
#include "lmmvae/tensor.hpp"

namespace lmmvae {

/// Stationary RBF kernel k(r) = variance * exp(-r^2 / (2 lengthscale^2)).
struct KernelSpec {
    double variance = 1.0;
    double lengthscale = 1.0;

    double operator()(double r) const;
    void validate() const;
};

/// Truncated spectral approximation k~(r) = (variance / M) sum_m cos(w_m r).
double approx_kernel(double r, const std::vector<double>& frequencies, double variance);

/// Dense GP regression posterior on 1-d inputs via Cholesky with a jitter
/// ladder (1e-10 to 1e-6, x10 per retry). Zero training points degrade to
/// the prior.
class GpPosterior {
public:
    GpPosterior(std::vector<double> train_x, std::vector<double> train_y, KernelSpec kernel,
                double noise_var);

    double mean(double x) const;
    double var(double x) const;  // latent-function variance (no noise)

    /// Posterior covariance between two test points.
    double covar(double x1, double x2) const;

private:
    std::vector<double> x_;
    KernelSpec kernel_;
    double noise_var_;
    std::vector<double> alpha_;        // K_noisy^{-1} y
    std::vector<double> chol_;         // lower Cholesky factor, row-major
    std::vector<double> solve_k(const std::vector<double>& k) const;
};

/// Bayesian linear regression over Fourier features phi(x) with prior
/// N(0, diag(weight_variances)); weight_variances has 2M entries (cos block
/// then sin block): spectral weights for regular features, variance/M
/// everywhere for random features.
class RffPosterior {
public:
    RffPosterior(const std::vector<double>& train_x, const std::vector<double>& train_y,
                 std::vector<double> frequencies, std::vector<double> weight_variances,
                 double noise_var);

    double mean(double x) const;
    double var(double x) const;  // predictive variance including noise

    /// phi(x1)^T Sigma_post phi(x2), the weight-space posterior covariance.
    double covar(double x1, double x2) const;

private:
    std::vector<double> frequencies_;
    double noise_var_;
    std::vector<double> post_mean_;   // 2M
    std::vector<double> post_cov_;    // 2M x 2M row-major
    std::vector<double> features(double x) const;
};

/// One additive latent component: an effect matrix applied to a basis
/// expansion of a single raw covariate.
struct AdditiveComponent {
    std::size_t covariate_index = 0;  // into the raw covariate vector
    BasisSpec basis;
    Tensor effect;  // L x basis.width()
};

/// z = sum_j A^(j) phi_j(x^(j)).
Tensor compose_additive(const std::vector<AdditiveComponent>& components,
                        const std::vector<double>& x_raw);

}  // namespace lmmvae
