#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lmmvae/covariates.hpp"
#include "lmmvae/data.hpp"
#include "lmmvae/nets.hpp"
#include "lmmvae/prior.hpp"
#include "lmmvae/rng.hpp"

namespace lmmvae {

enum class ModelVariant { olmm, slmm, vae, cvae };
enum class Objective { vi, gsnn };

/// Appendix-style encoder aggregation uses residuals A x_n - mu_n ("paper");
/// "residual" flips the sign to mu_n - A x_n. Training absorbs either, so
/// both are offered rather than guessing intent.
enum class AggregationSign { paper, residual };

struct LikelihoodSpec {
    enum class Kind { gaussian, gaussian_sigmoid_mean };
    Kind kind = Kind::gaussian;
    double sigma_y = 1.0;
    bool learnable = true;  // gaussian only; sigmoid-mean keeps sigma_y fixed

    void validate() const;
};

struct ModelConfig {
    std::string name = "model";
    ModelVariant variant = ModelVariant::olmm;
    Objective objective = Objective::vi;
    AMode a_mode = AMode::deterministic;
    std::size_t latent_dim = 8;
    std::size_t mc_samples = 1;
    std::size_t epochs = 100;
    std::size_t batch_size = 256;
    std::uint64_t seed = 1;
    std::vector<std::size_t> encoder_hidden = {64, 32};
    std::vector<std::size_t> decoder_hidden = {32, 64};
    Activation activation = Activation::elu;
    LikelihoodSpec likelihood;
    double sigma_z = 1.0;
    bool learn_sigma_z = false;
    double beta = 1.0;           // isotropic prior precision on A
    bool spectral_prior = false; // take per-column prior variances from the schema
    AggregationSign aggregation_sign = AggregationSign::paper;
    double lr = 0.001;
    double lr_gamma = 0.9;
    std::size_t lr_step_size = 500;

    bool uses_lmm_prior() const {
        return variant == ModelVariant::olmm || variant == ModelVariant::slmm;
    }
    void validate() const;
};

/// Dataset plus everything training needs derived from it once: the design
/// matrix, split indices, and the encoder input convention.
struct PreparedData {
    const LongitudinalDataset* dataset = nullptr;
    CovariateSchema schema;
    DesignMatrix design;
    SplitIndices splits;
    bool use_mask_channel = false;  // encoder sees [y o mask; mask] when set
};

PreparedData prepare(const LongitudinalDataset& ds, const CovariateSchema& schema,
                     const SplitIndices& splits);

/// One training batch, columns aligned across fields. For grouped batches
/// the columns of each group are contiguous.
struct Batch {
    Tensor Y;     // D x B (true values; loss masks them)
    Tensor X;     // Q x B
    Tensor mask;  // D x B
    std::vector<std::size_t> obs;  // dataset observation indices
    std::vector<std::pair<std::size_t, std::size_t>> group_spans;  // offset, count
    std::vector<int> group_ids;

    std::size_t size() const { return obs.size(); }
};

Batch make_batch(const PreparedData& data, const std::vector<std::size_t>& obs);

/// Grouped batch for the shared-noise variant. Every instance present in
/// `obs` must appear with all of its observations from `universe` (groups
/// may not straddle batches) and with at least two of them.
Batch make_grouped_batch(const PreparedData& data, std::vector<std::size_t> obs,
                         const std::vector<std::size_t>& universe);

struct LmmVaeModel {
    ModelConfig cfg;
    Mlp encoder;
    Mlp decoder;
    Tensor A_mean;         // L x Q, olmm/slmm only
    Tensor A_log_var;      // L x Q, bayes mode only
    Tensor prior_col_var;  // Q prior variances for kl_A
    Tensor log_sigma_y;    // {1}
    Tensor log_sigma_z;    // {1}
    bool use_mask_channel = false;
    std::size_t data_dim = 0;
    std::size_t covariate_dim = 0;

    std::vector<Tensor*> parameters();
    std::vector<const Tensor*> parameters() const;
    std::vector<std::string> parameter_names() const;
    LmmPrior prior_view() const;
    double sigma_y() const;
    double sigma_z_value() const;
};

/// Encoder/decoder specs implied by a config and the data dimensions.
std::pair<MlpSpec, MlpSpec> model_mlp_specs(const ModelConfig& cfg, std::size_t data_dim,
                                            std::size_t covariate_dim, bool use_mask_channel);

/// Model with the right tensor shapes but zero weights (snapshot loading).
LmmVaeModel model_shell(const ModelConfig& cfg, std::size_t data_dim, std::size_t covariate_dim,
                        bool use_mask_channel);

LmmVaeModel init_model(const ModelConfig& cfg, const PreparedData& data);

/// Builds the encoder input for a batch: y o mask, the mask channel when the
/// dataset has missing entries, and the covariates for the CVAE baseline.
Tensor encoder_input(const LmmVaeModel& model, const Batch& batch);

/// Tape handles for the model parameters, aligned with parameters().
struct StagedModel {
    MlpVars encoder;
    MlpVars decoder;
    Var A_mean;
    Var A_log_var;
    Var log_sigma_y;  // constant node when sigma_y is fixed
    Var log_sigma_z;  // constant node when sigma_z is fixed
    std::vector<Var> trainable;
};

StagedModel stage_model(Tape& tape, const LmmVaeModel& model);

struct LossTerms {
    Var total;      // training loss: (recon_sum + kl_sum)/B + (B/N) kl_a
    Var recon_sum;  // -(1/S) sum_s sum_n log p(y_n | z_{n,s}, theta)
    Var kl_sum;     // per-observation KLs (vi) or per-group KLs (slmm), summed
    Var kl_a;       // KL(q(A) || p(A)); zero node unless bayes mode
};

/// Negative-ELBO reconstruction term for an explicit posterior, shared by
/// the VI objectives and the forced-posterior identity with the GSNN loss:
/// z_s = mu + exp(log_var/2) o noise[s], decoded and scored per observed
/// entry.
Var reconstruction_term(Tape& tape, const LmmVaeModel& model, const StagedModel& staged,
                        const Batch& batch, Var mu, Var log_var,
                        const std::vector<Tensor>& noise);

/// Draws the Monte Carlo noise consumed by build_loss, in its documented
/// order. VI draws L x B reparameterization noise per sample (L x K
/// group noise for slmm, preceded by L x Q effect noise in bayes mode);
/// GSNN draws the prior noise the same way.
std::vector<Tensor> draw_mc_noise(Rng& rng, std::size_t s, Shape shape);

/// Builds the configured objective for one batch. All stochasticity comes
/// from `noise_rng` (passed by value so a copied rng reproduces the draws).
/// n_total is the training-set size N used to scale kl_a by B/N.
LossTerms build_loss(Tape& tape, const LmmVaeModel& model, const StagedModel& staged,
                     const Batch& batch, std::size_t n_total, Rng noise_rng);

/// Appendix-style group aggregation of encoder means: with residuals
/// r_n = A x_n - mu_n (paper sign), mu_k = mean(r_n) and var_k the unbiased
/// sample variance, elementwise. Needs n_k >= 2.
GaussianPosterior aggregate_group_posterior(const Tensor& a_mean, const Tensor& x_cols,
                                            const Tensor& encoder_mus,
                                            AggregationSign sign = AggregationSign::paper);

struct TrainingRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double lr = 0.0;
};

struct FittedModel {
    LmmVaeModel model;  // best-validation checkpoint
    std::vector<TrainingRecord> history;
    std::size_t best_epoch = 0;
    double best_val_loss = 0.0;
    std::map<int, GaussianPosterior> group_epsilon;  // slmm: per instance id
};

/// Adam + per-epoch exponential LR schedule, best-validation checkpointing.
/// Deterministic given (config, data): every random draw flows from
/// cfg.seed through named substreams.
FittedModel train(const ModelConfig& cfg, const PreparedData& data);

enum class GenMode { mean, sample };

struct Generated {
    Tensor y;  // D or D x n
    Tensor z;  // L or L x n
};

/// Conditional generation at encoded covariates x (Q or Q x n). Mean mode
/// decodes E[A] x (+ the group epsilon mean for slmm); sample mode averages
/// `n_samples` decoded prior draws.
Generated conditional_generate(const FittedModel& fitted, const Tensor& x, GenMode mode,
                               std::size_t n_samples = 1, Rng* rng = nullptr,
                               const GaussianPosterior* group_epsilon = nullptr);

/// Posterior-mean reconstruction decoder(mu_enc(y)) for a set of columns.
Tensor reconstruct(const FittedModel& fitted, const Tensor& y, const Tensor& mask,
                   const Tensor& x);

/// Encoder posterior means for a set of columns (the MCC latent estimate).
Tensor encode_means(const FittedModel& fitted, const Tensor& y, const Tensor& mask,
                    const Tensor& x);

/// Runs the encoder on one instance's observations and aggregates, exactly
/// as training does. Needs >= 2 observations.
GaussianPosterior estimate_group_epsilon(const FittedModel& fitted, const Tensor& y,
                                         const Tensor& mask, const Tensor& x);

}  // namespace lmmvae
