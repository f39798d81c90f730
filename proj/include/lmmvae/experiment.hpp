#pragma once

#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmmvae/eval.hpp"
#include "lmmvae/models.hpp"

namespace lmmvae {

/// Schema-validated experiment description. Unknown keys are rejected up
/// front so typos fail loudly instead of silently using defaults.
struct ExperimentConfig {
    nlohmann::json raw;

    static ExperimentConfig from_json(nlohmann::json j);
    static ExperimentConfig from_file(const std::string& path);

    /// Dotted-path override ("train.epochs=50", "data.missing_fraction=0.25").
    /// The value is parsed as JSON when possible, else taken as a string.
    void apply_override(const std::string& assignment);

    std::vector<std::uint64_t> seeds() const;
    std::string output_dir() const;
};

/// Owns one experiment's dataset and everything derived from it. Not
/// movable: PreparedData points into the dataset.
struct RunContext {
    LongitudinalDataset dataset;
    CovariateSchema schema;
    SplitIndices splits;
    PreparedData prepared;

    RunContext() = default;
    RunContext(const RunContext&) = delete;
    RunContext& operator=(const RunContext&) = delete;
};

std::unique_ptr<RunContext> build_run_context(const ExperimentConfig& cfg);

/// Model config assembled from the shared train section plus one entry of
/// the models list, with the run seed applied.
ModelConfig resolve_model_config(const ExperimentConfig& cfg, const nlohmann::json& model_spec,
                                 std::uint64_t seed);

/// Metrics for one fitted model: imputation MSE on train-set masked entries,
/// predictive MSE / NLL on the test split (conditional generation),
/// reconstruction MSE / NLL on validation, and MCC when ground-truth
/// latents exist.
nlohmann::json evaluate_model(const RunContext& ctx, const FittedModel& fitted);

nlohmann::json cmd_gen_data(const ExperimentConfig& cfg, const std::string& out_dir);
nlohmann::json cmd_train(const ExperimentConfig& cfg, const std::string& out_dir);
nlohmann::json cmd_eval(const ExperimentConfig& cfg, const std::string& out_dir);
nlohmann::json cmd_sweep_basis(const ExperimentConfig& cfg, std::vector<std::size_t> m_values,
                               const std::string& out_dir);
nlohmann::json cmd_mcc_study(const ExperimentConfig& cfg, const std::string& out_dir);

}  // namespace lmmvae
