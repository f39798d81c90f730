#include <doctest.h>

#include <cmath>

#include "lmmvae/prior.hpp"
#include "lmmvae/rng.hpp"
#include "test_util.hpp"

using namespace lmmvae;
using testutil::throws_with;

namespace {

LmmPrior random_prior(Rng& rng, std::size_t l_dim, std::size_t q_dim, AMode mode,
                      double sigma_z = 1.0) {
    LmmPrior p;
    p.mode = mode;
    p.A_mean = rng.draw_normal({l_dim, q_dim});
    if (mode == AMode::bayes) {
        p.A_var = Tensor({l_dim, q_dim});
        for (auto& v : p.A_var.data()) v = 0.05 + 0.5 * rng.uniform();
        p.prior_on_a.kind = PriorOnAKind::isotropic;
        p.prior_on_a.beta = 1.0;
    }
    p.sigma_z = sigma_z;
    return p;
}

}  // namespace

TEST_CASE("prior mean basics") {
    LmmPrior zero;
    zero.A_mean = Tensor::zeros({3, 2});
    Tensor x({2}, {1.0, -1.0});
    Tensor m = prior_mean(zero, x);
    for (double v : m.data()) CHECK(v == 0.0);

    LmmPrior eye;
    eye.A_mean = Tensor::zeros({2, 2});
    eye.A_mean.at(0, 0) = 1.0;
    eye.A_mean.at(1, 1) = 1.0;
    Tensor got = prior_mean(eye, x);
    CHECK(got[0] == 1.0);
    CHECK(got[1] == -1.0);

    // direct recomputation oracle
    Rng rng(5);
    LmmPrior p = random_prior(rng, 4, 3, AMode::deterministic);
    Tensor xv = rng.draw_normal({3});
    Tensor out = prior_mean(p, xv);
    for (std::size_t l = 0; l < 4; ++l) {
        double s = 0.0;
        for (std::size_t q = 0; q < 3; ++q) s += p.A_mean.at(l, q) * xv[q];
        CHECK(std::abs(out[l] - s) < 1e-12);
    }
    CHECK(throws_with([&] { prior_mean(p, Tensor({2}, {1, 2})); }, "entries"));
}

TEST_CASE("expected squared residual closed form") {
    Tensor a({2}, {0.5, -1.0});
    Tensor zero_var = Tensor::zeros({2});
    Tensor x({2}, {2.0, 1.0});
    double mu = 0.3;
    double gap = mu - (0.5 * 2.0 + (-1.0) * 1.0);
    CHECK(expected_sq_residual(mu, a, zero_var, x) == doctest::Approx(gap * gap));

    Tensor zero_mean = Tensor::zeros({2});
    Tensor unit_var = Tensor::ones({2});
    Tensor ones({2}, {1.0, 1.0});
    CHECK(expected_sq_residual(0.0, zero_mean, unit_var, ones) == doctest::Approx(2.0));
}

TEST_CASE("expected squared residual matches a monte carlo oracle") {
    Rng rng(77);
    const std::size_t q_dim = 4, n_draws = 1000000;
    Tensor a_mean = rng.draw_normal({q_dim});
    Tensor a_var({q_dim});
    for (auto& v : a_var.data()) v = 0.1 + rng.uniform();
    Tensor x = rng.draw_normal({q_dim});
    double mu = rng.normal();

    double analytic = expected_sq_residual(mu, a_mean, a_var, x);
    Rng mc(78);
    double sum = 0.0;
    for (std::size_t s = 0; s < n_draws; ++s) {
        double dot = 0.0;
        for (std::size_t q = 0; q < q_dim; ++q) {
            dot += (a_mean[q] + std::sqrt(a_var[q]) * mc.normal()) * x[q];
        }
        double gap = mu - dot;
        sum += gap * gap;
    }
    double estimate = sum / n_draws;
    CHECK(testutil::rel_err(estimate, analytic) < 0.01);
}

TEST_CASE("kl_z_given_A zero and unit cases") {
    Rng rng(9);
    LmmPrior p = random_prior(rng, 3, 2, AMode::deterministic, 0.7);
    Tensor x = rng.draw_normal({2});
    GaussianPosterior q;
    q.mu = prior_mean(p, x);
    q.var = Tensor::full({3}, p.sigma_z * p.sigma_z);
    CHECK(kl_z_given_A(q, p, x) == doctest::Approx(0.0).epsilon(1e-12));

    LmmPrior zero;
    zero.A_mean = Tensor::zeros({1, 2});
    zero.sigma_z = 1.0;
    GaussianPosterior q1{Tensor({1}, {1.0}), Tensor({1}, {1.0})};
    CHECK(kl_z_given_A(q1, zero, Tensor({2}, {3.0, -4.0})) == doctest::Approx(0.5));

    GaussianPosterior bad{Tensor({1}, {0.0}), Tensor({1}, {-1.0})};
    CHECK(throws_with([&] { kl_z_given_A(bad, zero, Tensor({2}, {0.0, 0.0})); }, "variance"));
}

TEST_CASE("kl_z_given_A matches a monte carlo oracle in bayes mode") {
    Rng rng(33);
    const std::size_t l_dim = 2, q_dim = 3, n_draws = 1000000;
    LmmPrior p = random_prior(rng, l_dim, q_dim, AMode::bayes, 0.8);
    Tensor x = rng.draw_normal({q_dim});
    GaussianPosterior q;
    q.mu = rng.draw_normal({l_dim});
    q.var = Tensor({l_dim});
    for (auto& v : q.var.data()) v = 0.3 + rng.uniform();

    double analytic = kl_z_given_A(q, p, x);

    // E_{A~q(A)} KL(N(mu, var) || N(Ax, sigma_z^2 I)), KL in closed form per
    // draw of A.
    Rng mc(34);
    double sz2 = p.sigma_z * p.sigma_z;
    double sum = 0.0;
    for (std::size_t s = 0; s < n_draws; ++s) {
        double kl = 0.0;
        for (std::size_t l = 0; l < l_dim; ++l) {
            double ax = 0.0;
            for (std::size_t c = 0; c < q_dim; ++c) {
                ax += (p.A_mean.at(l, c) + std::sqrt(p.A_var.at(l, c)) * mc.normal()) * x[c];
            }
            double gap = q.mu[l] - ax;
            double ratio = q.var[l] / sz2;
            kl += gap * gap / (2.0 * sz2) + 0.5 * (ratio - 1.0 - std::log(ratio));
        }
        sum += kl;
    }
    CHECK(testutil::rel_err(sum / n_draws, analytic) < 0.01);
}

TEST_CASE("kl_z_given_A is nonnegative and vanishing-variance consistent") {
    Rng rng(55);
    for (int trial = 0; trial < 50; ++trial) {
        LmmPrior p = random_prior(rng, 2, 3, AMode::bayes, 0.5 + rng.uniform());
        Tensor x = rng.draw_normal({3});
        GaussianPosterior q{rng.draw_normal({2}), Tensor({2})};
        for (auto& v : q.var.data()) v = 0.1 + rng.uniform();
        CHECK(kl_z_given_A(q, p, x) >= 0.0);

        LmmPrior tiny = p;
        tiny.A_var = Tensor::full({2, 3}, 1e-12);
        LmmPrior det = p;
        det.mode = AMode::deterministic;
        CHECK(std::abs(kl_z_given_A(q, tiny, x) - kl_z_given_A(q, det, x)) < 1e-6);
    }
}

TEST_CASE("kl_A closed form") {
    PriorOnA prior;
    prior.kind = PriorOnAKind::isotropic;
    prior.beta = 1.0;
    Tensor mean = Tensor::zeros({2, 2});
    Tensor var = Tensor::ones({2, 2});
    CHECK(kl_A(mean, var, prior) == doctest::Approx(0.0));

    Tensor m1({1, 1}, {1.0});
    Tensor v1({1, 1}, {1.0});
    CHECK(kl_A(m1, v1, prior) == doctest::Approx(0.5));
    CHECK(throws_with([&] { kl_A(m1, Tensor({1, 1}, {0.0}), prior); }, "variance"));
}

TEST_CASE("kl_A with spectral prior matches a monte carlo oracle") {
    Rng rng(66);
    const std::size_t l_dim = 2, q_dim = 3;
    PriorOnA prior;
    prior.kind = PriorOnAKind::spectral;
    prior.column_variances = Tensor({q_dim});
    for (auto& v : prior.column_variances.data()) v = 0.3 + rng.uniform();
    Tensor mean = rng.draw_normal({l_dim, q_dim});
    Tensor var({l_dim, q_dim});
    for (auto& v : var.data()) v = 0.2 + 0.5 * rng.uniform();

    double analytic = kl_A(mean, var, prior);

    // E_q[log q(A) - log p(A)] by sampling A from q.
    Rng mc(67);
    const std::size_t n_draws = 1000000;
    double sum = 0.0;
    for (std::size_t s = 0; s < n_draws; ++s) {
        double log_ratio = 0.0;
        for (std::size_t l = 0; l < l_dim; ++l) {
            for (std::size_t q = 0; q < q_dim; ++q) {
                double sd = std::sqrt(var.at(l, q));
                double a = mean.at(l, q) + sd * mc.normal();
                double v0 = prior.column_variances[q];
                double lq = -0.5 * std::log(var.at(l, q)) -
                            0.5 * (a - mean.at(l, q)) * (a - mean.at(l, q)) / var.at(l, q);
                double lp = -0.5 * std::log(v0) - 0.5 * a * a / v0;
                log_ratio += lq - lp;
            }
        }
        sum += log_ratio;
    }
    CHECK(testutil::rel_err(sum / n_draws, analytic) < 0.01);
}

TEST_CASE("sample_z behaviour") {
    Rng rng(10);
    LmmPrior p = random_prior(rng, 3, 2, AMode::deterministic, 1e-12);
    Tensor x = rng.draw_normal({2});
    Tensor mean = prior_mean(p, x);
    Rng draw_rng(11);
    Tensor z = sample_z(p, x, draw_rng, 5);
    for (std::size_t s = 0; s < 5; ++s) {
        for (std::size_t l = 0; l < 3; ++l) {
            CHECK(std::abs(z.at(l, s) - mean[l]) < 1e-9);
        }
    }

    // Monte Carlo mean within 3 standard errors.
    p.sigma_z = 0.7;
    Rng mc(12);
    const std::size_t n = 100000;
    Tensor draws = sample_z(p, x, mc, n);
    for (std::size_t l = 0; l < 3; ++l) {
        double sum = 0.0;
        for (std::size_t s = 0; s < n; ++s) sum += draws.at(l, s);
        double se = p.sigma_z / std::sqrt(static_cast<double>(n));
        CHECK(std::abs(sum / n - mean[l]) < 3.0 * se);
    }

    Rng a(20), b(20);
    CHECK(testutil::max_abs_diff(sample_z(p, x, a, 10), sample_z(p, x, b, 10)) == 0.0);
}

TEST_CASE("marginal prior variance formula and oracle") {
    CHECK(marginal_prior_variance(Tensor::zeros({3}), 2.0, 0.5) == doctest::Approx(0.25));
    CHECK(marginal_prior_variance(Tensor({2}, {1.0, 1.0}), 1.0, 1.0) == doctest::Approx(3.0));

    // Hierarchical draws: a ~ N(0, 1/beta I), z = a^T x + sigma_z eps.
    Rng rng(88);
    Tensor x = rng.draw_normal({4});
    double beta = 2.5, sigma_z = 0.8;
    double expected = marginal_prior_variance(x, beta, sigma_z);
    Rng mc(89);
    const std::size_t n = 1000000;
    double sum = 0.0, sum_sq = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
        double z = sigma_z * mc.normal();
        for (std::size_t q = 0; q < 4; ++q) z += mc.normal() / std::sqrt(beta) * x[q];
        sum += z;
        sum_sq += z * z;
    }
    double mean = sum / n;
    double var = sum_sq / n - mean * mean;
    CHECK(testutil::rel_err(var, expected) < 0.02);
}
