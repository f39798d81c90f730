#include "lmmvae/prior.hpp"

#include <cmath>
#include <stdexcept>

namespace lmmvae {

double PriorOnA::variance_for_column(std::size_t q) const {
    if (kind == PriorOnAKind::isotropic) return 1.0 / beta;
    return column_variances[q];
}

void PriorOnA::validate(std::size_t n_cols) const {
    if (kind == PriorOnAKind::isotropic) {
        if (!(beta > 0.0)) throw std::invalid_argument("prior on A: beta must be > 0");
        return;
    }
    if (column_variances.size() != n_cols) {
        throw std::invalid_argument("prior on A: expected " + std::to_string(n_cols) +
                                    " column variances, got " +
                                    std::to_string(column_variances.size()));
    }
    for (double v : column_variances.data()) {
        if (!(v > 0.0)) throw std::invalid_argument("prior on A: column variances must be > 0");
    }
}

void LmmPrior::validate() const {
    if (A_mean.ndim() != 2) throw std::invalid_argument("lmm prior: A must be 2-d");
    if (!(sigma_z > 0.0)) throw std::invalid_argument("lmm prior: sigma_z must be > 0");
    if (mode == AMode::bayes) {
        if (!A_var.same_shape(A_mean)) {
            throw std::invalid_argument("lmm prior: A variance shape " + shape_str(A_var.shape()) +
                                        " does not match mean " + shape_str(A_mean.shape()));
        }
        for (double v : A_var.data()) {
            if (!(v > 0.0)) throw std::invalid_argument("lmm prior: A variances must be > 0");
        }
        prior_on_a.validate(covariate_dim());
    }
}

Tensor prior_mean(const LmmPrior& prior, const Tensor& x) {
    std::size_t l_dim = prior.latent_dim(), q_dim = prior.covariate_dim();
    if (x.size() != q_dim) {
        throw std::invalid_argument("prior_mean: x has " + std::to_string(x.size()) +
                                    " entries, A has " + std::to_string(q_dim) + " columns");
    }
    Tensor out({l_dim});
    for (std::size_t l = 0; l < l_dim; ++l) {
        double s = 0.0;
        for (std::size_t q = 0; q < q_dim; ++q) s += prior.A_mean.at(l, q) * x[q];
        out[l] = s;
    }
    return out;
}

double expected_sq_residual(double mu_l, const Tensor& a_mean, const Tensor& a_var,
                            const Tensor& x) {
    if (a_mean.size() != x.size() || a_var.size() != x.size()) {
        throw std::invalid_argument("expected_sq_residual: length mismatch");
    }
    double dot = 0.0, var_term = 0.0;
    for (std::size_t q = 0; q < x.size(); ++q) {
        if (a_var[q] < 0.0) {
            throw std::invalid_argument("expected_sq_residual: negative variance entry");
        }
        dot += a_mean[q] * x[q];
        var_term += a_var[q] * x[q] * x[q];
    }
    double gap = mu_l - dot;
    return gap * gap + var_term;
}

double kl_z_given_A(const GaussianPosterior& q, const LmmPrior& prior, const Tensor& x) {
    prior.validate();
    std::size_t l_dim = prior.latent_dim(), q_dim = prior.covariate_dim();
    if (q.mu.size() != l_dim || q.var.size() != l_dim || x.size() != q_dim) {
        throw std::invalid_argument("kl_z_given_A: dimension mismatch");
    }
    double sz2 = prior.sigma_z * prior.sigma_z;
    double kl = 0.0;
    Tensor a_row({q_dim});
    Tensor v_row({q_dim});
    for (std::size_t l = 0; l < l_dim; ++l) {
        if (!(q.var[l] > 0.0)) {
            throw std::invalid_argument("kl_z_given_A: posterior variance must be > 0");
        }
        for (std::size_t c = 0; c < q_dim; ++c) {
            a_row[c] = prior.A_mean.at(l, c);
            v_row[c] = prior.mode == AMode::bayes ? prior.A_var.at(l, c) : 0.0;
        }
        double esr = expected_sq_residual(q.mu[l], a_row, v_row, x);
        double ratio = q.var[l] / sz2;
        kl += esr / (2.0 * sz2) + 0.5 * (ratio - 1.0 - std::log(ratio));
    }
    return kl;
}

double kl_A(const Tensor& q_mean, const Tensor& q_var, const PriorOnA& prior) {
    if (!q_mean.same_shape(q_var)) throw std::invalid_argument("kl_A: mean/var shape mismatch");
    std::size_t q_dim = q_mean.cols();
    prior.validate(q_dim);
    double kl = 0.0;
    for (std::size_t l = 0; l < q_mean.rows(); ++l) {
        for (std::size_t q = 0; q < q_dim; ++q) {
            double v = q_var.at(l, q);
            if (!(v > 0.0)) throw std::invalid_argument("kl_A: variances must be > 0");
            double v0 = prior.variance_for_column(q);
            double m = q_mean.at(l, q);
            double ratio = v / v0;
            kl += 0.5 * (ratio + m * m / v0 - 1.0 - std::log(ratio));
        }
    }
    return kl;
}

Tensor sample_z(const LmmPrior& prior, const Tensor& x, Rng& rng, std::size_t n) {
    prior.validate();
    if (n == 0) throw std::invalid_argument("sample_z: need n >= 1");
    std::size_t l_dim = prior.latent_dim(), q_dim = prior.covariate_dim();
    if (x.size() != q_dim) throw std::invalid_argument("sample_z: x length mismatch");
    Tensor out({l_dim, n});
    for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t l = 0; l < l_dim; ++l) {
            double mean = 0.0;
            for (std::size_t q = 0; q < q_dim; ++q) {
                double a = prior.A_mean.at(l, q);
                if (prior.mode == AMode::bayes) {
                    a += std::sqrt(prior.A_var.at(l, q)) * rng.normal();
                }
                mean += a * x[q];
            }
            out.at(l, s) = mean + prior.sigma_z * rng.normal();
        }
    }
    return out;
}

double marginal_prior_variance(const Tensor& x, double beta, double sigma_z) {
    if (!(beta > 0.0)) throw std::invalid_argument("marginal_prior_variance: beta must be > 0");
    double xx = 0.0;
    for (double v : x.data()) xx += v * v;
    return sigma_z * sigma_z + xx / beta;
}

}  // namespace lmmvae
