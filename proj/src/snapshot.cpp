#include "lmmvae/snapshot.hpp"

#include <fstream>
#include <stdexcept>

namespace lmmvae {

using nlohmann::json;

std::string to_string(ModelVariant v) {
    switch (v) {
        case ModelVariant::olmm: return "olmm";
        case ModelVariant::slmm: return "slmm";
        case ModelVariant::vae: return "vae";
        case ModelVariant::cvae: return "cvae";
    }
    return "?";
}

std::string to_string(Objective o) { return o == Objective::vi ? "vi" : "gsnn"; }
std::string to_string(AMode m) { return m == AMode::deterministic ? "deterministic" : "bayes"; }
std::string to_string(AggregationSign s) {
    return s == AggregationSign::paper ? "paper" : "residual";
}

ModelVariant variant_from_string(const std::string& s) {
    if (s == "olmm") return ModelVariant::olmm;
    if (s == "slmm") return ModelVariant::slmm;
    if (s == "vae") return ModelVariant::vae;
    if (s == "cvae") return ModelVariant::cvae;
    throw std::invalid_argument("unknown model variant '" + s + "'");
}

Objective objective_from_string(const std::string& s) {
    if (s == "vi") return Objective::vi;
    if (s == "gsnn") return Objective::gsnn;
    throw std::invalid_argument("unknown objective '" + s + "'");
}

AMode a_mode_from_string(const std::string& s) {
    if (s == "deterministic") return AMode::deterministic;
    if (s == "bayes") return AMode::bayes;
    throw std::invalid_argument("unknown a_mode '" + s + "'");
}

AggregationSign aggregation_sign_from_string(const std::string& s) {
    if (s == "paper") return AggregationSign::paper;
    if (s == "residual") return AggregationSign::residual;
    throw std::invalid_argument("unknown aggregation_sign '" + s + "'");
}

json tensor_to_json(const Tensor& t) {
    return json{{"shape", t.shape()}, {"data", t.data()}};
}

Tensor tensor_from_json(const json& j) {
    return Tensor(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>());
}

json model_config_to_json(const ModelConfig& cfg) {
    return json{
        {"name", cfg.name},
        {"variant", to_string(cfg.variant)},
        {"objective", to_string(cfg.objective)},
        {"a_mode", to_string(cfg.a_mode)},
        {"latent_dim", cfg.latent_dim},
        {"mc_samples", cfg.mc_samples},
        {"epochs", cfg.epochs},
        {"batch_size", cfg.batch_size},
        {"seed", cfg.seed},
        {"encoder_hidden", cfg.encoder_hidden},
        {"decoder_hidden", cfg.decoder_hidden},
        {"activation", to_string(cfg.activation)},
        {"likelihood",
         json{{"kind", cfg.likelihood.kind == LikelihoodSpec::Kind::gaussian
                           ? "gaussian"
                           : "gaussian_sigmoid_mean"},
              {"sigma_y", cfg.likelihood.sigma_y},
              {"learnable", cfg.likelihood.learnable}}},
        {"sigma_z", cfg.sigma_z},
        {"learn_sigma_z", cfg.learn_sigma_z},
        {"beta", cfg.beta},
        {"spectral_prior", cfg.spectral_prior},
        {"aggregation_sign", to_string(cfg.aggregation_sign)},
        {"lr", cfg.lr},
        {"lr_gamma", cfg.lr_gamma},
        {"lr_step_size", cfg.lr_step_size},
    };
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig cfg;
    cfg.name = j.value("name", cfg.name);
    if (j.contains("variant")) cfg.variant = variant_from_string(j.at("variant"));
    if (j.contains("objective")) cfg.objective = objective_from_string(j.at("objective"));
    if (j.contains("a_mode")) cfg.a_mode = a_mode_from_string(j.at("a_mode"));
    cfg.latent_dim = j.value("latent_dim", cfg.latent_dim);
    cfg.mc_samples = j.value("mc_samples", cfg.mc_samples);
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.encoder_hidden = j.value("encoder_hidden", cfg.encoder_hidden);
    cfg.decoder_hidden = j.value("decoder_hidden", cfg.decoder_hidden);
    if (j.contains("activation")) {
        cfg.activation = activation_from_string(j.at("activation").get<std::string>());
    }
    if (j.contains("likelihood")) {
        const json& lk = j.at("likelihood");
        if (lk.contains("kind")) {
            std::string kind = lk.at("kind");
            if (kind == "gaussian") {
                cfg.likelihood.kind = LikelihoodSpec::Kind::gaussian;
            } else if (kind == "gaussian_sigmoid_mean") {
                cfg.likelihood.kind = LikelihoodSpec::Kind::gaussian_sigmoid_mean;
            } else {
                throw std::invalid_argument("unknown likelihood kind '" + kind + "'");
            }
        }
        cfg.likelihood.sigma_y = lk.value("sigma_y", cfg.likelihood.sigma_y);
        cfg.likelihood.learnable = lk.value("learnable", cfg.likelihood.learnable);
    }
    cfg.sigma_z = j.value("sigma_z", cfg.sigma_z);
    cfg.learn_sigma_z = j.value("learn_sigma_z", cfg.learn_sigma_z);
    cfg.beta = j.value("beta", cfg.beta);
    cfg.spectral_prior = j.value("spectral_prior", cfg.spectral_prior);
    if (j.contains("aggregation_sign")) {
        cfg.aggregation_sign =
            aggregation_sign_from_string(j.at("aggregation_sign").get<std::string>());
    }
    cfg.lr = j.value("lr", cfg.lr);
    cfg.lr_gamma = j.value("lr_gamma", cfg.lr_gamma);
    cfg.lr_step_size = j.value("lr_step_size", cfg.lr_step_size);
    return cfg;
}

json snapshot_to_json(const FittedModel& fitted) {
    const LmmVaeModel& model = fitted.model;
    json params = json::object();
    auto names = model.parameter_names();
    auto values = model.parameters();
    for (std::size_t i = 0; i < names.size(); ++i) params[names[i]] = tensor_to_json(*values[i]);

    json eps = json::object();
    for (const auto& [id, ge] : fitted.group_epsilon) {
        eps[std::to_string(id)] = json{{"mu", ge.mu.data()}, {"var", ge.var.data()}};
    }
    json history = json::array();
    for (const auto& rec : fitted.history) {
        history.push_back(json{{"epoch", rec.epoch},
                               {"train_loss", rec.train_loss},
                               {"val_loss", rec.val_loss},
                               {"lr", rec.lr}});
    }
    return json{
        {"format", "lmmvae-snapshot"},
        {"format_version", 1},
        {"config", model_config_to_json(model.cfg)},
        {"dims",
         json{{"data_dim", model.data_dim},
              {"covariate_dim", model.covariate_dim},
              {"use_mask_channel", model.use_mask_channel}}},
        {"prior_col_var", tensor_to_json(model.prior_col_var)},
        {"parameters", params},
        {"group_epsilon", eps},
        {"history", history},
        {"best_epoch", fitted.best_epoch},
        {"best_val_loss", fitted.best_val_loss},
    };
}

FittedModel snapshot_from_json(const json& j) {
    if (j.value("format", "") != "lmmvae-snapshot") {
        throw std::invalid_argument("snapshot: not a lmmvae-snapshot file");
    }
    if (j.value("format_version", 0) != 1) {
        throw std::invalid_argument("snapshot: unsupported format_version");
    }
    ModelConfig cfg = model_config_from_json(j.at("config"));
    const json& dims = j.at("dims");
    FittedModel fitted;
    fitted.model = model_shell(cfg, dims.at("data_dim").get<std::size_t>(),
                               dims.at("covariate_dim").get<std::size_t>(),
                               dims.at("use_mask_channel").get<bool>());
    fitted.model.prior_col_var = tensor_from_json(j.at("prior_col_var"));
    auto names = fitted.model.parameter_names();
    auto values = fitted.model.parameters();
    const json& params = j.at("parameters");
    for (std::size_t i = 0; i < names.size(); ++i) {
        Tensor t = tensor_from_json(params.at(names[i]));
        if (!t.same_shape(*values[i])) {
            throw std::invalid_argument("snapshot: parameter '" + names[i] + "' has shape " +
                                        shape_str(t.shape()) + ", expected " +
                                        shape_str(values[i]->shape()));
        }
        *values[i] = std::move(t);
    }
    for (const auto& [key, ge] : j.at("group_epsilon").items()) {
        GaussianPosterior g;
        g.mu = Tensor({ge.at("mu").size()}, ge.at("mu").get<std::vector<double>>());
        g.var = Tensor({ge.at("var").size()}, ge.at("var").get<std::vector<double>>());
        fitted.group_epsilon.emplace(std::stoi(key), std::move(g));
    }
    for (const auto& rec : j.at("history")) {
        fitted.history.push_back({rec.at("epoch").get<std::size_t>(),
                                  rec.at("train_loss").get<double>(),
                                  rec.at("val_loss").get<double>(), rec.at("lr").get<double>()});
    }
    fitted.best_epoch = j.at("best_epoch").get<std::size_t>();
    fitted.best_val_loss = j.at("best_val_loss").get<double>();
    return fitted;
}

void save_snapshot(const FittedModel& fitted, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("snapshot: cannot write '" + path + "'");
    out << snapshot_to_json(fitted).dump() << "\n";
}

FittedModel load_snapshot(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("snapshot: cannot read '" + path + "'");
    json j = json::parse(in);
    return snapshot_from_json(j);
}

}  // namespace lmmvae
