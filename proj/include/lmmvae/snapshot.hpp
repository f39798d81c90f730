#pragma once

#include <string>

#include <json.hpp>

#include "lmmvae/models.hpp"

namespace lmmvae {

// Enum <-> string names used across snapshots, configs and reports.
std::string to_string(ModelVariant v);
std::string to_string(Objective o);
std::string to_string(AMode m);
std::string to_string(AggregationSign s);
ModelVariant variant_from_string(const std::string& s);
Objective objective_from_string(const std::string& s);
AMode a_mode_from_string(const std::string& s);
AggregationSign aggregation_sign_from_string(const std::string& s);

nlohmann::json tensor_to_json(const Tensor& t);
Tensor tensor_from_json(const nlohmann::json& j);

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Versioned JSON container with the config echo, every weight tensor, the
/// prior parameters, group epsilons and the training history. Doubles are
/// serialized so that parsing restores them bit-exactly.
nlohmann::json snapshot_to_json(const FittedModel& fitted);
FittedModel snapshot_from_json(const nlohmann::json& j);

void save_snapshot(const FittedModel& fitted, const std::string& path);
FittedModel load_snapshot(const std::string& path);

}  // namespace lmmvae
