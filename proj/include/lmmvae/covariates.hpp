#pragma once

#include <cstddef>
#include <string>
#include <variant>
#include <vector>

#include "lmmvae/rng.hpp"
#include "lmmvae/tensor.hpp"

namespace lmmvae {

enum class CovariateKind { continuous, categorical };
enum class CovariateRole { shared, random };
enum class BasisKind { identity, polynomial, trig, custom_table };

/// Prior placed on the effect columns a basis produces. Trig bases carry
/// per-frequency spectral variances; everything else falls back to the
/// model's isotropic prior.
enum class SpectralWeightMode { regular_spectral, random_isotropic };

struct BasisSpec {
    BasisKind kind = BasisKind::identity;
    int degree = 1;                         // polynomial
    std::vector<double> frequencies;        // trig: omega_1..omega_M
    SpectralWeightMode weight_mode = SpectralWeightMode::random_isotropic;
    std::vector<double> spectral_weights;   // trig: 2M per-column prior variances
    std::vector<std::pair<double, std::vector<double>>> table;  // custom_table rows

    std::size_t width() const;
};

struct CovariateEntry {
    std::string name;
    CovariateKind kind = CovariateKind::continuous;
    std::vector<std::string> levels;  // categorical only
    CovariateRole role = CovariateRole::shared;
    BasisSpec basis;  // ignored for categorical entries

    std::size_t encoded_width() const;
};

/// Ordered covariate declarations. Encoded columns are laid out with every
/// shared-effect block before every random-effect block.
struct CovariateSchema {
    std::vector<CovariateEntry> entries;

    void validate() const;
    std::size_t shared_width() const;
    std::size_t random_width() const;
    std::size_t total_width() const { return shared_width() + random_width(); }

    /// Offset (in the encoded layout) and width of one covariate's block.
    std::pair<std::size_t, std::size_t> block(const std::string& name) const;

    const CovariateEntry& entry(const std::string& name) const;
};

using CovariateValue = std::variant<double, std::string>;

/// Raw per-observation covariates, column-oriented.
struct CovariateTable {
    std::vector<std::string> columns;
    std::vector<std::vector<CovariateValue>> values;  // [column][observation]

    std::size_t n_rows() const { return values.empty() ? 0 : values[0].size(); }
    std::size_t column_index(const std::string& name) const;  // throws if absent
};

struct DesignMatrix {
    Tensor X;  // Q x N, one column per observation
    std::size_t shared_width = 0;
    std::size_t random_width = 0;
    std::vector<std::string> column_labels;

    std::size_t total_width() const { return shared_width + random_width; }
};

/// Groups observations by instance for the shared-noise model variants.
struct GroupIndex {
    std::vector<int> group_of;     // per observation, 0-based
    std::vector<std::size_t> sizes;

    std::size_t n_groups() const { return sizes.size(); }
    void validate() const;

    static GroupIndex from_ids(const std::vector<int>& ids);
};

std::vector<double> expand_basis(double x, const BasisSpec& spec);

/// phi(x) = (cos(w_1 x)..cos(w_M x), sin(w_1 x)..sin(w_M x))
std::vector<double> fourier_feature_map(double x, const std::vector<double>& frequencies);

DesignMatrix build_design_matrix(const CovariateSchema& schema, const CovariateTable& raw);

/// Spectral density of the RBF kernel: s(w) = variance * l * sqrt(2 pi) *
/// exp(-w^2 l^2 / 2).
double rbf_spectral_density(double omega, double variance, double lengthscale);

/// Draws M frequencies from the RBF spectral distribution, i.e. N(0, 1/l^2).
/// Signs are kept (the cosine features are even in omega either way).
std::vector<double> sample_random_frequencies(double lengthscale, std::size_t m, Rng& rng);

struct FrequencyGrid {
    std::vector<double> frequencies;  // M entries
    std::vector<double> weights;      // 2M prior variances (cos block, sin block)
};

/// Equispaced frequencies w_m = m * pi / half_width with spectral-density
/// weights, duplicated across the cos and sin blocks.
FrequencyGrid regular_frequency_grid(double variance, double lengthscale, std::size_t m,
                                     double domain_half_width);

/// Per-encoded-column prior variances on the effect matrix A: trig columns
/// take their spectral weights, all other columns fall back to 1/beta.
Tensor prior_column_variances(const CovariateSchema& schema, double beta);

}  // namespace lmmvae
