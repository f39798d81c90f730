#pragma once

#include <cstddef>

#include "lmmvae/rng.hpp"
#include "lmmvae/tensor.hpp"

namespace lmmvae {

enum class AMode { deterministic, bayes };
enum class PriorOnAKind { isotropic, spectral };

/// Gaussian prior over the entries of the effect matrix A: either N(0, 1/beta)
/// for every entry, or per-column variances (spectral weights for Fourier
/// bases).
struct PriorOnA {
    PriorOnAKind kind = PriorOnAKind::isotropic;
    double beta = 1.0;
    Tensor column_variances;  // spectral: Q entries, all > 0

    double variance_for_column(std::size_t q) const;
    void validate(std::size_t n_cols) const;
};

/// Latent prior z | A, x ~ N(Ax, sigma_z^2 I). In bayes mode A carries a
/// mean-field Gaussian posterior q(A) with elementwise variances.
struct LmmPrior {
    AMode mode = AMode::deterministic;
    Tensor A_mean;     // L x Q (the point estimate in deterministic mode)
    Tensor A_var;      // L x Q, bayes mode only, entries > 0
    PriorOnA prior_on_a;
    double sigma_z = 1.0;

    std::size_t latent_dim() const { return A_mean.rows(); }
    std::size_t covariate_dim() const { return A_mean.cols(); }
    void validate() const;
};

struct GaussianPosterior {
    Tensor mu;   // L
    Tensor var;  // L, entries > 0
};

/// E[A] x.
Tensor prior_mean(const LmmPrior& prior, const Tensor& x);

/// E_{a ~ N(a_mean, diag(a_var))}[(mu_l - a^T x)^2]
///   = (mu_l - a_mean^T x)^2 + a_var^T (x o x).
double expected_sq_residual(double mu_l, const Tensor& a_mean, const Tensor& a_var,
                            const Tensor& x);

/// E_{q(A)}[KL(q(z|y) || p(z|A,x))], closed form:
/// sum_l [ esr_l / (2 sigma_z^2) + (var_l/sigma_z^2 - 1 - log(var_l/sigma_z^2)) / 2 ].
double kl_z_given_A(const GaussianPosterior& q, const LmmPrior& prior, const Tensor& x);

/// Sum of entrywise Gaussian KLs between q(A) = N(mean, var) and the prior.
double kl_A(const Tensor& q_mean, const Tensor& q_var, const PriorOnA& prior);

/// Draws n samples z = Ax + eps, eps ~ N(0, sigma_z^2 I); bayes mode draws a
/// fresh A ~ q(A) per sample. Returns L x n.
Tensor sample_z(const LmmPrior& prior, const Tensor& x, Rng& rng, std::size_t n);

/// Per-dimension variance of the marginal prior p(z_i | x) after integrating
/// A out under the isotropic prior: sigma_z^2 + x^T x / beta.
double marginal_prior_variance(const Tensor& x, double beta, double sigma_z);

}  // namespace lmmvae
