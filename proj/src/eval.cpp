#include "lmmvae/eval.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace lmmvae {

double masked_mse(const Tensor& pred, const Tensor& truth, const Tensor& mask, MseTarget target) {
    if (!pred.same_shape(truth) || !pred.same_shape(mask)) {
        throw std::invalid_argument("masked_mse: shape mismatch");
    }
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        bool selected = target == MseTarget::all_entries || mask[i] == 0.0;
        if (!selected) continue;
        double r = pred[i] - truth[i];
        sum += r * r;
        ++count;
    }
    if (count == 0) throw std::invalid_argument("masked_mse: empty target entry set");
    return sum / static_cast<double>(count);
}

double nll(const Tensor& pred_mean, double sigma_y, const Tensor& truth, const Tensor& mask) {
    if (!pred_mean.same_shape(truth) || !pred_mean.same_shape(mask)) {
        throw std::invalid_argument("nll: shape mismatch");
    }
    if (!(sigma_y > 0.0)) throw std::invalid_argument("nll: sigma_y must be > 0");
    double s2 = sigma_y * sigma_y;
    double total = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (mask[i] == 0.0) continue;
        double r = truth[i] - pred_mean[i];
        total += 0.5 * std::log(2.0 * std::numbers::pi * s2) + r * r / (2.0 * s2);
    }
    return total / static_cast<double>(truth.cols());
}

std::vector<std::size_t> optimal_assignment(const std::vector<std::vector<double>>& cost) {
    std::size_t n = cost.size();
    if (n == 0) throw std::invalid_argument("optimal_assignment: empty cost matrix");
    for (const auto& row : cost) {
        if (row.size() != n) throw std::invalid_argument("optimal_assignment: non-square cost");
        for (double c : row) {
            if (!std::isfinite(c)) throw std::invalid_argument("optimal_assignment: non-finite cost");
        }
    }
    // Shortest-augmenting-path algorithm with dual potentials (1-based
    // internally, column 0 is a virtual root).
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            std::size_t i0 = p[j0], j1 = 0;
            double delta = inf;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<std::size_t> row_to_col(n, 0);
    for (std::size_t j = 1; j <= n; ++j) row_to_col[p[j] - 1] = j - 1;
    return row_to_col;
}

namespace {

// |Pearson correlation| between row a of za and row b of zb; 0 if either is
// constant.
double abs_correlation(const Tensor& za, std::size_t a, const Tensor& zb, std::size_t b) {
    std::size_t n = za.cols();
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        ma += za.at(a, i);
        mb += zb.at(b, i);
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double saa = 0.0, sbb = 0.0, sab = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double da = za.at(a, i) - ma, db = zb.at(b, i) - mb;
        saa += da * da;
        sbb += db * db;
        sab += da * db;
    }
    if (saa == 0.0 || sbb == 0.0) return 0.0;
    return std::abs(sab / std::sqrt(saa * sbb));
}

}  // namespace

double mcc(const Tensor& z_true, const Tensor& z_est) {
    if (z_true.ndim() != 2 || !z_true.same_shape(z_est)) {
        throw std::invalid_argument("mcc: latent matrices must share an L x N shape");
    }
    std::size_t l_dim = z_true.rows(), n = z_true.cols();
    if (n < 3) throw std::invalid_argument("mcc: needs at least 3 observations");
    std::vector<std::vector<double>> neg_corr(l_dim, std::vector<double>(l_dim, 0.0));
    for (std::size_t a = 0; a < l_dim; ++a) {
        for (std::size_t b = 0; b < l_dim; ++b) {
            neg_corr[a][b] = -abs_correlation(z_true, a, z_est, b);
        }
    }
    std::vector<std::size_t> match = optimal_assignment(neg_corr);
    double total = 0.0;
    for (std::size_t a = 0; a < l_dim; ++a) total += -neg_corr[a][match[a]];
    return total / static_cast<double>(l_dim);
}

MetricReport MetricReport::aggregate(std::string name, std::vector<double> per_seed,
                                     std::size_t n_items) {
    if (per_seed.empty()) throw std::invalid_argument("metric report: no values");
    MetricReport r;
    r.name = std::move(name);
    r.n_items = n_items;
    double mean = 0.0;
    for (double v : per_seed) mean += v;
    mean /= static_cast<double>(per_seed.size());
    double var = 0.0;
    for (double v : per_seed) var += (v - mean) * (v - mean);
    r.mean = mean;
    r.value = mean;
    r.std_dev = per_seed.size() >= 2
                    ? std::sqrt(var / static_cast<double>(per_seed.size() - 1))
                    : 0.0;
    r.per_seed = std::move(per_seed);
    return r;
}

}  // namespace lmmvae
