#include <doctest.h>

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "lmmvae/gpbridge.hpp"
#include "lmmvae/rng.hpp"
#include "test_util.hpp"

using namespace lmmvae;

TEST_CASE("approximate kernel at zero lag and evenness") {
    std::vector<double> freqs{0.3, 1.1, 2.2};
    CHECK(approx_kernel(0.0, freqs, 1.7) == doctest::Approx(1.7));
    for (double r : {0.1, 0.9, 2.5}) {
        CHECK(approx_kernel(r, freqs, 1.7) == doctest::Approx(approx_kernel(-r, freqs, 1.7)));
    }
}

namespace {

double random_feature_mae(std::size_t m, std::uint64_t seed, const KernelSpec& kernel) {
    Rng rng(seed);
    auto freqs = sample_random_frequencies(kernel.lengthscale, m, rng);
    double mae = 0.0;
    std::size_t count = 0;
    for (double r = -3.0; r <= 3.0 + 1e-9; r += 0.05) {
        mae += std::abs(approx_kernel(r, freqs, kernel.variance) - kernel(r));
        ++count;
    }
    return mae / count;
}

}  // namespace

TEST_CASE("random features approximate the RBF kernel, improving with M") {
    KernelSpec kernel{1.0, 1.0};
    double mae_16 = 0.0, mae_256 = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        mae_16 += random_feature_mae(16, 100 + seed, kernel);
        mae_256 += random_feature_mae(256, 100 + seed, kernel);
    }
    mae_16 /= 20.0;
    mae_256 /= 20.0;
    CHECK(mae_256 < 0.05 * kernel.variance);
    CHECK(mae_256 < mae_16);
}

TEST_CASE("gp posterior with no data is the prior") {
    KernelSpec kernel{2.0, 1.5};
    GpPosterior gp({}, {}, kernel, 0.1);
    CHECK(gp.mean(0.7) == 0.0);
    CHECK(gp.var(0.7) == doctest::Approx(2.0));
    CHECK(gp.covar(0.0, 1.0) == doctest::Approx(kernel(1.0)));
}

TEST_CASE("gp posterior interpolates as the noise vanishes") {
    Rng rng(17);
    std::vector<double> xs, ys;
    for (int i = 0; i < 12; ++i) {
        xs.push_back(-2.0 + 4.0 * i / 11.0);
        ys.push_back(std::sin(2.0 * xs.back()) + 0.05 * rng.normal());
    }
    GpPosterior gp(xs, ys, {1.0, 0.8}, 1e-10);
    for (std::size_t i = 0; i < xs.size(); ++i) {
        CHECK(std::abs(gp.mean(xs[i]) - ys[i]) < 1e-6);
    }
}

TEST_CASE("gp posterior matches a naive direct-inverse implementation") {
    Rng rng(23);
    const std::size_t n = 20;
    KernelSpec kernel{1.3, 0.9};
    double noise = 0.05;
    std::vector<double> xs, ys;
    for (std::size_t i = 0; i < n; ++i) {
        xs.push_back(4.0 * rng.uniform() - 2.0);
        ys.push_back(std::cos(3.0 * xs.back()) + 0.1 * rng.normal());
    }
    GpPosterior gp(xs, ys, kernel, noise);

    // Naive oracle: dense inverse via Eigen's LU, no Cholesky.
    Eigen::MatrixXd k(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) k(i, j) = kernel(xs[i] - xs[j]);
        k(i, i) += noise;
    }
    Eigen::MatrixXd kinv = k.fullPivLu().inverse();
    Eigen::Map<const Eigen::VectorXd> y(ys.data(), n);
    for (double x : {-1.7, -0.4, 0.2, 1.9}) {
        Eigen::VectorXd kx(n);
        for (std::size_t i = 0; i < n; ++i) kx(static_cast<Eigen::Index>(i)) = kernel(x - xs[i]);
        double mean = kx.dot(kinv * y);
        double var = kernel(0.0) - kx.dot(kinv * kx);
        CHECK(std::abs(gp.mean(x) - mean) < 1e-8);
        CHECK(std::abs(gp.var(x) - var) < 1e-8);
    }
}

TEST_CASE("rff regression with many random features matches the exact gp") {
    Rng rng(31);
    KernelSpec kernel{1.0, 1.0};
    double noise = 0.05;
    const std::size_t n = 30;
    std::vector<double> xs, ys;
    double data_sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        xs.push_back(6.0 * rng.uniform() - 3.0);
        ys.push_back(std::sin(2.0 * xs.back()) + 0.2 * rng.normal());
        data_sq += ys.back() * ys.back();
    }
    double data_std = std::sqrt(data_sq / n);
    GpPosterior gp(xs, ys, kernel, noise);

    const std::size_t m = 512;
    Rng freq_rng(77);
    auto freqs = sample_random_frequencies(kernel.lengthscale, m, freq_rng);
    std::vector<double> weights(2 * m, kernel.variance / static_cast<double>(m));
    RffPosterior rff(xs, ys, freqs, weights, noise);
    for (double x = -3.0; x <= 3.0; x += 0.5) {
        CHECK(std::abs(rff.mean(x) - gp.mean(x)) < 0.05 * data_std);
    }
}

TEST_CASE("rff prior predictive variance with no data") {
    std::vector<double> freqs{0.4, 1.0};
    std::vector<double> weights(4, 0.5);  // sigma^2 / M with sigma^2 = 1, M = 2
    RffPosterior rff({}, {}, freqs, weights, 0.1);
    // k~(0) = sum of weights over the cos/sin pair per frequency = 1.0
    CHECK(rff.var(0.3) == doctest::Approx(1.0 + 0.1));
    CHECK(rff.mean(0.3) == doctest::Approx(0.0));
}

TEST_CASE("weight-space and function-space posterior covariances agree") {
    Rng rng(41);
    const std::size_t m = 8, n = 12;
    Rng freq_rng(5);
    auto freqs = sample_random_frequencies(1.0, m, freq_rng);
    std::vector<double> weights(2 * m, 1.0 / static_cast<double>(m));
    double noise = 0.07;
    std::vector<double> xs, ys;
    for (std::size_t i = 0; i < n; ++i) {
        xs.push_back(4.0 * rng.uniform() - 2.0);
        ys.push_back(rng.normal());
    }
    RffPosterior rff(xs, ys, freqs, weights, noise);

    // Function-space oracle with the degenerate kernel
    // k~(x, x') = phi(x)^T diag(weights) phi(x').
    auto ktilde = [&](double a, double b) {
        auto pa = fourier_feature_map(a, freqs);
        auto pb = fourier_feature_map(b, freqs);
        double s = 0.0;
        for (std::size_t i = 0; i < pa.size(); ++i) s += weights[i] * pa[i] * pb[i];
        return s;
    };
    Eigen::MatrixXd k(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) k(i, j) = ktilde(xs[i], xs[j]);
        k(i, i) += noise;
    }
    Eigen::MatrixXd kinv = k.fullPivLu().inverse();
    for (double a : {-1.5, 0.0, 0.8}) {
        for (double b : {-0.9, 0.3, 1.7}) {
            Eigen::VectorXd ka(n), kb(n);
            for (std::size_t i = 0; i < n; ++i) {
                ka(static_cast<Eigen::Index>(i)) = ktilde(a, xs[i]);
                kb(static_cast<Eigen::Index>(i)) = ktilde(b, xs[i]);
            }
            double fn_space = ktilde(a, b) - ka.dot(kinv * kb);
            CHECK(std::abs(rff.covar(a, b) - fn_space) < 1e-8);
        }
    }
}

TEST_CASE("additive composition") {
    Rng rng(51);
    BasisSpec ident;
    BasisSpec trig;
    trig.kind = BasisKind::trig;
    trig.frequencies = {1.0, 2.0};
    BasisSpec poly;
    poly.kind = BasisKind::polynomial;
    poly.degree = 2;

    AdditiveComponent c1{0, ident, rng.draw_normal({3, 1})};
    AdditiveComponent c2{1, trig, rng.draw_normal({3, 4})};
    AdditiveComponent c3{2, poly, rng.draw_normal({3, 2})};
    std::vector<double> x{0.7, -1.2, 2.0};

    // single component = plain prior mean
    Tensor single = compose_additive({c1}, x);
    for (std::size_t l = 0; l < 3; ++l) {
        CHECK(single[l] == doctest::Approx(c1.effect.at(l, 0) * 0.7));
    }

    // adding a zero component changes nothing
    AdditiveComponent zero = c2;
    std::fill(zero.effect.data().begin(), zero.effect.data().end(), 0.0);
    Tensor with_zero = compose_additive({c1, zero}, x);
    CHECK(testutil::max_abs_diff(single, with_zero) < 1e-15);

    // three components vs a hand-summed oracle
    Tensor got = compose_additive({c1, c2, c3}, x);
    auto phi2 = fourier_feature_map(-1.2, trig.frequencies);
    for (std::size_t l = 0; l < 3; ++l) {
        double want = c1.effect.at(l, 0) * 0.7;
        for (std::size_t j = 0; j < 4; ++j) want += c2.effect.at(l, j) * phi2[j];
        want += c3.effect.at(l, 0) * 2.0 + c3.effect.at(l, 1) * 4.0;
        CHECK(std::abs(got[l] - want) < 1e-12);
    }

    AdditiveComponent bad = c2;
    bad.effect = rng.draw_normal({3, 3});
    CHECK(testutil::throws_with([&] { (void)compose_additive({bad}, x); }, "width"));
}

TEST_CASE("fourier-feature lmm prior reproduces the approximate kernel covariance") {
    // bayes effects with the random-feature prior sigma^2/M and sigma_z -> 0:
    // Cov(z(x), z(x')) should equal k~(x - x').
    const std::size_t m = 16;
    Rng freq_rng(61);
    auto freqs = sample_random_frequencies(1.0, m, freq_rng);
    double weight = 1.0 / static_cast<double>(m);

    std::vector<double> grid{-2.0, -0.7, 0.0, 1.1, 2.3};
    const std::size_t n_draws = 100000;
    Rng draw_rng(62);
    std::vector<std::vector<double>> phis;
    for (double x : grid) phis.push_back(fourier_feature_map(x, freqs));

    std::vector<std::vector<double>> z(grid.size(), std::vector<double>(n_draws));
    std::vector<double> a(2 * m);
    for (std::size_t s = 0; s < n_draws; ++s) {
        for (auto& v : a) v = std::sqrt(weight) * draw_rng.normal();
        for (std::size_t g = 0; g < grid.size(); ++g) {
            double dot = 0.0;
            for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * phis[g][i];
            z[g][s] = dot;
        }
    }
    for (std::size_t g1 = 0; g1 < grid.size(); ++g1) {
        for (std::size_t g2 = g1; g2 < grid.size(); ++g2) {
            double mean = 0.0, mean_sq = 0.0;
            for (std::size_t s = 0; s < n_draws; ++s) {
                double prod = z[g1][s] * z[g2][s];
                mean += prod;
                mean_sq += prod * prod;
            }
            mean /= n_draws;
            mean_sq /= n_draws;
            double se = std::sqrt((mean_sq - mean * mean) / n_draws);
            double want = approx_kernel(grid[g1] - grid[g2], freqs, 1.0);
            CHECK(std::abs(mean - want) < 3.0 * se + 1e-12);
        }
    }
}

TEST_CASE("kernel and gp input validation") {
    CHECK(testutil::throws_with([] { KernelSpec{-1.0, 1.0}.validate(); }, "variance"));
    CHECK(testutil::throws_with([] { GpPosterior({0.0}, {1.0}, {1.0, 1.0}, -0.1); }, "noise"));
    CHECK(testutil::throws_with([] { GpPosterior({0.0}, {1.0, 2.0}, {1.0, 1.0}, 0.1); },
                                "length mismatch"));
    CHECK(testutil::throws_with(
        [] { RffPosterior({0.0}, {1.0}, {1.0}, {0.5, 0.5, 0.5}, 0.1); }, "weight variances"));
}
