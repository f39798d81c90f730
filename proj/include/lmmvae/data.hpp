#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lmmvae/covariates.hpp"
#include "lmmvae/tensor.hpp"

namespace lmmvae {

/// Longitudinal observations, one column per observation. mask entries are
/// 1 where the value is observed; masked entries keep their true value in Y
/// (that is the imputation ground truth) and models must only ever see
/// Y o mask.
struct LongitudinalDataset {
    Tensor Y;     // D x N
    Tensor mask;  // D x N
    CovariateTable covariates;
    std::vector<int> instance_ids;    // per observation
    std::vector<double> timepoints;   // per observation, increasing per instance
    std::optional<Tensor> Z_true;     // L x N
    std::optional<Tensor> A_true;

    std::size_t n_obs() const { return Y.ndim() == 2 ? Y.cols() : 0; }
    std::size_t data_dim() const { return Y.ndim() == 2 ? Y.rows() : 0; }
    bool has_missing() const;
    void validate() const;
};

struct SyntheticLmmSpec {
    std::size_t n_instances = 200;
    std::size_t n_timepoints = 20;
    std::size_t latent_dim = 8;
    std::size_t data_dim = 50;
    double latent_noise = 0.3;        // sigma of eps in z = A* x + eps
    double obs_noise = 0.05;          // sigma of the additive output noise
    double random_effect_scale = 0.7; // scale of the per-instance columns of A*
    bool identity_decoder = false;    // requires data_dim == latent_dim
};

/// Synthetic longitudinal data with known ground truth: shared covariates
/// (time trend, binary trait, trait-gated late-time effect), an instance-id
/// random effect, latents z = A* x + eps and observations y = g(z) + noise
/// where g is a fixed random two-layer leaky-ReLU MLP with an orthonormal
/// (full-column-rank) output expansion. Column names: time, trait,
/// gated_time, id.
LongitudinalDataset gen_synthetic_lmm(const SyntheticLmmSpec& spec, std::uint64_t seed);

struct RotatingToySpec {
    std::size_t n_instances = 100;
    std::size_t n_angles = 16;
    std::size_t data_dim = 30;
    double noise = 0.02;
};

/// Rotating-template data: each instance owns an orthogonal template pair
/// (u, v) with equal norms, observed as u cos(theta) + v sin(theta) + noise
/// at angles uniform in [0, 2 pi). Column names: angle, cos_angle,
/// sin_angle, id.
LongitudinalDataset gen_rotating_toy(const RotatingToySpec& spec, std::uint64_t seed);

/// Masks exactly round(fraction * D) entries per observation, uniformly at
/// random. Y keeps the true values; only the mask changes.
LongitudinalDataset apply_missingness(const LongitudinalDataset& ds, double fraction,
                                      std::uint64_t seed);

struct SplitProtocol {
    enum class Kind { future, interpolation, random };
    Kind kind = Kind::random;
    // future
    std::size_t holdout_timepoints = 15;
    std::size_t holdout_instances = 0;
    std::size_t keep_first = 5;
    // interpolation
    std::size_t consecutive_angles = 4;
    // all kinds
    double train_ratio = 0.85;  // of the non-test pool
};

struct SplitIndices {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
    std::vector<std::size_t> test;
};

/// Disjoint, exhaustive observation split per the protocol. Held-out
/// instances keep a training prefix (future) or their remaining angles
/// (interpolation), so their random-effect columns stay estimable.
SplitIndices split(const LongitudinalDataset& ds, const SplitProtocol& protocol,
                   std::uint64_t seed);

struct CsvManifest {
    std::string id_column = "instance_id";
    std::string time_column = "timepoint";
    std::vector<std::string> covariate_columns;
    std::vector<std::string> feature_columns;  // in feature order
};

/// CSV layout: header row; instance_id,timepoint,<covariates...>,<features...>;
/// '.' decimal, empty cell = missing. Masked entries are written empty, so a
/// round trip preserves observed values and the mask but not hidden values.
LongitudinalDataset load_csv(const std::string& path, const CsvManifest& manifest);
void save_csv(const LongitudinalDataset& ds, const std::string& path);

}  // namespace lmmvae
