#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "lmmvae/tensor.hpp"

namespace lmmvae {

enum class MseTarget { masked_entries, all_entries };

/// Mean squared error over the selected entry set. masked_entries means the
/// originally hidden values (mask == 0), which is the imputation target.
double masked_mse(const Tensor& pred, const Tensor& truth, const Tensor& mask, MseTarget target);

/// Negative Gaussian log-likelihood summed over observed entries, averaged
/// per observation (column).
double nll(const Tensor& pred_mean, double sigma_y, const Tensor& truth, const Tensor& mask);

/// Exact minimum-cost assignment (Jonker-Volgenant style shortest augmenting
/// paths). Returns the column assigned to each row.
std::vector<std::size_t> optimal_assignment(const std::vector<std::vector<double>>& cost);

/// Mean correlation coefficient: absolute Pearson correlations between true
/// and estimated latent dimensions, optimally matched. Constant dimensions
/// correlate as 0.
double mcc(const Tensor& z_true, const Tensor& z_est);

struct MetricReport {
    std::string name;
    double value = 0.0;        // mean across seeds
    std::size_t n_items = 0;   // entries/observations the metric covers
    std::vector<double> per_seed;
    double mean = 0.0;
    double std_dev = 0.0;      // reported only with >= 2 seeds

    static MetricReport aggregate(std::string name, std::vector<double> per_seed,
                                  std::size_t n_items = 0);
};

}  // namespace lmmvae
