#include "lmmvae/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>

#include "lmmvae/snapshot.hpp"

namespace lmmvae {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void check_allowed(const json& obj, const std::set<std::string>& keys, const std::string& where) {
    if (!obj.is_object()) throw std::invalid_argument("config: " + where + " must be an object");
    for (const auto& [key, value] : obj.items()) {
        if (!keys.count(key)) {
            throw std::invalid_argument("config: unknown key '" + key + "' in " + where);
        }
    }
}

void validate_basis_json(const json& b, const std::string& where) {
    check_allowed(b, {"kind", "degree", "frequencies", "weights", "weight_mode", "grid", "random"},
                  where);
    std::string kind = b.value("kind", "identity");
    if (kind != "identity" && kind != "polynomial" && kind != "trig") {
        throw std::invalid_argument("config: unknown basis kind '" + kind + "' in " + where);
    }
    if (b.contains("grid")) {
        check_allowed(b.at("grid"), {"m", "half_width", "variance", "lengthscale"},
                      where + ".grid");
    }
    if (b.contains("random")) {
        check_allowed(b.at("random"), {"m", "lengthscale", "variance", "seed"},
                      where + ".random");
    }
}

void validate_config(const json& j) {
    check_allowed(j, {"version", "output_dir", "seeds", "data", "schema", "split", "train",
                      "models", "sweep"},
                  "top level");
    if (j.value("version", 0) != 1) {
        throw std::invalid_argument("config: version must be 1");
    }
    if (!j.contains("seeds") || !j.at("seeds").is_array() || j.at("seeds").empty()) {
        throw std::invalid_argument("config: seeds must be a non-empty array");
    }
    if (!j.contains("data")) throw std::invalid_argument("config: missing data section");
    const json& data = j.at("data");
    check_allowed(data,
                  {"source", "seed", "missing_fraction", "missing_seed", "synthetic_lmm",
                   "rotating_toy", "csv"},
                  "data");
    std::string source = data.value("source", "");
    if (source != "synthetic_lmm" && source != "rotating_toy" && source != "csv") {
        throw std::invalid_argument("config: data.source must be synthetic_lmm, rotating_toy or csv");
    }
    if (data.contains("synthetic_lmm")) {
        check_allowed(data.at("synthetic_lmm"),
                      {"n_instances", "n_timepoints", "latent_dim", "data_dim", "latent_noise",
                       "obs_noise", "random_effect_scale", "identity_decoder"},
                      "data.synthetic_lmm");
    }
    if (data.contains("rotating_toy")) {
        check_allowed(data.at("rotating_toy"), {"n_instances", "n_angles", "data_dim", "noise"},
                      "data.rotating_toy");
    }
    if (data.contains("csv")) {
        check_allowed(data.at("csv"), {"path", "manifest"}, "data.csv");
        if (data.at("csv").contains("manifest")) {
            check_allowed(data.at("csv").at("manifest"),
                          {"id_column", "time_column", "covariate_columns", "feature_columns"},
                          "data.csv.manifest");
        }
    }
    if (!j.contains("schema")) throw std::invalid_argument("config: missing schema section");
    check_allowed(j.at("schema"), {"covariates"}, "schema");
    for (const auto& entry : j.at("schema").at("covariates")) {
        check_allowed(entry, {"name", "kind", "role", "levels", "basis"}, "schema.covariates[]");
        validate_basis_json(entry.value("basis", json::object()), "schema.covariates[].basis");
    }
    if (j.contains("split")) {
        check_allowed(j.at("split"),
                      {"kind", "holdout_timepoints", "holdout_instances", "holdout_fraction",
                       "keep_first", "consecutive_angles", "train_ratio", "seed"},
                      "split");
    }
    if (j.contains("train")) {
        check_allowed(j.at("train"),
                      {"epochs", "batch_size", "lr", "lr_gamma", "lr_step_size", "mc_samples"},
                      "train");
    }
    if (!j.contains("models") || !j.at("models").is_array() || j.at("models").empty()) {
        throw std::invalid_argument("config: models must be a non-empty array");
    }
    for (const auto& m : j.at("models")) {
        check_allowed(m,
                      {"name", "variant", "objective", "a_mode", "latent_dim", "mc_samples",
                       "epochs", "batch_size", "encoder_hidden", "decoder_hidden", "activation",
                       "likelihood", "sigma_z", "learn_sigma_z", "beta", "spectral_prior",
                       "aggregation_sign", "lr", "lr_gamma", "lr_step_size"},
                      "models[]");
        if (m.contains("likelihood")) {
            check_allowed(m.at("likelihood"), {"kind", "sigma_y", "learnable"},
                          "models[].likelihood");
        }
    }
    if (j.contains("sweep")) {
        check_allowed(j.at("sweep"),
                      {"covariate", "m_values", "half_width", "variance", "lengthscale", "mode",
                       "random_seed"},
                      "sweep");
    }
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(json j) {
    validate_config(j);
    return ExperimentConfig{std::move(j)};
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot read '" + path + "'");
    return from_json(json::parse(in));
}

void ExperimentConfig::apply_override(const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos) {
        throw std::invalid_argument("override: expected key=value, got '" + assignment + "'");
    }
    std::string key = assignment.substr(0, eq);
    std::string value = assignment.substr(eq + 1);
    json parsed;
    try {
        parsed = json::parse(value);
    } catch (const json::parse_error&) {
        parsed = value;  // plain string
    }
    json* node = &raw;
    std::size_t start = 0;
    for (;;) {
        std::size_t dot = key.find('.', start);
        std::string part = key.substr(start, dot == std::string::npos ? dot : dot - start);
        if (part.empty()) throw std::invalid_argument("override: empty path segment in '" + key + "'");
        if (dot == std::string::npos) {
            (*node)[part] = parsed;
            break;
        }
        node = &(*node)[part];
        start = dot + 1;
    }
    validate_config(raw);
}

std::vector<std::uint64_t> ExperimentConfig::seeds() const {
    return raw.at("seeds").get<std::vector<std::uint64_t>>();
}

std::string ExperimentConfig::output_dir() const { return raw.value("output_dir", "out"); }

namespace {

BasisSpec parse_basis(const json& b) {
    BasisSpec spec;
    std::string kind = b.value("kind", "identity");
    if (kind == "identity") {
        spec.kind = BasisKind::identity;
    } else if (kind == "polynomial") {
        spec.kind = BasisKind::polynomial;
        spec.degree = b.value("degree", 1);
    } else if (kind == "trig") {
        spec.kind = BasisKind::trig;
        if (b.contains("grid")) {
            const json& g = b.at("grid");
            FrequencyGrid grid = regular_frequency_grid(
                g.value("variance", 1.0), g.value("lengthscale", 1.0),
                g.at("m").get<std::size_t>(), g.at("half_width").get<double>());
            spec.frequencies = grid.frequencies;
            spec.spectral_weights = grid.weights;
            spec.weight_mode = SpectralWeightMode::regular_spectral;
        } else if (b.contains("random")) {
            const json& r = b.at("random");
            Rng rng(r.value("seed", 1234));
            std::size_t m = r.at("m").get<std::size_t>();
            double variance = r.value("variance", 1.0);
            spec.frequencies = sample_random_frequencies(r.value("lengthscale", 1.0), m, rng);
            spec.spectral_weights.assign(2 * m, variance / static_cast<double>(m));
            spec.weight_mode = SpectralWeightMode::random_isotropic;
        } else {
            spec.frequencies = b.at("frequencies").get<std::vector<double>>();
            if (b.contains("weights")) {
                spec.spectral_weights = b.at("weights").get<std::vector<double>>();
            }
            if (b.value("weight_mode", "regular") == "random") {
                spec.weight_mode = SpectralWeightMode::random_isotropic;
            } else {
                spec.weight_mode = SpectralWeightMode::regular_spectral;
            }
        }
    }
    return spec;
}

// Distinct raw values of a covariate column in a stable order: numeric
// values sorted numerically, labels lexicographically.
std::vector<std::string> auto_levels(const CovariateTable& table, const std::string& column) {
    std::size_t col = table.column_index(column);
    std::set<double> numeric;
    std::set<std::string> labels;
    for (const auto& v : table.values[col]) {
        if (const double* x = std::get_if<double>(&v)) {
            numeric.insert(*x);
        } else {
            labels.insert(std::get<std::string>(v));
        }
    }
    std::vector<std::string> out;
    for (double x : numeric) {
        // Integral values print without a decimal point, matching the
        // categorical encoding of numeric ids.
        if (x == std::floor(x) && std::abs(x) < 1e15) {
            out.push_back(std::to_string(static_cast<long long>(x)));
        } else {
            out.push_back(std::to_string(x));
        }
    }
    out.insert(out.end(), labels.begin(), labels.end());
    return out;
}

CovariateSchema parse_schema(const json& j, const LongitudinalDataset& ds) {
    CovariateSchema schema;
    for (const auto& entry : j.at("schema").at("covariates")) {
        CovariateEntry e;
        e.name = entry.at("name").get<std::string>();
        std::string kind = entry.value("kind", "continuous");
        if (kind == "continuous") {
            e.kind = CovariateKind::continuous;
        } else if (kind == "categorical") {
            e.kind = CovariateKind::categorical;
        } else {
            throw std::invalid_argument("config: unknown covariate kind '" + kind + "'");
        }
        std::string role = entry.value("role", "shared");
        if (role == "shared") {
            e.role = CovariateRole::shared;
        } else if (role == "random") {
            e.role = CovariateRole::random;
        } else {
            throw std::invalid_argument("config: unknown covariate role '" + role + "'");
        }
        if (e.kind == CovariateKind::categorical) {
            if (entry.contains("levels") && entry.at("levels").is_array()) {
                e.levels = entry.at("levels").get<std::vector<std::string>>();
            } else {
                e.levels = auto_levels(ds.covariates, e.name);
            }
        }
        if (entry.contains("basis")) e.basis = parse_basis(entry.at("basis"));
        schema.entries.push_back(std::move(e));
    }
    schema.validate();
    return schema;
}

SplitProtocol parse_split(const json& j, const LongitudinalDataset& ds) {
    SplitProtocol p;
    if (!j.contains("split")) return p;  // random 85:15 default
    const json& s = j.at("split");
    std::string kind = s.value("kind", "random");
    if (kind == "future") {
        p.kind = SplitProtocol::Kind::future;
    } else if (kind == "interpolation") {
        p.kind = SplitProtocol::Kind::interpolation;
    } else if (kind == "random") {
        p.kind = SplitProtocol::Kind::random;
    } else {
        throw std::invalid_argument("config: unknown split kind '" + kind + "'");
    }
    p.holdout_timepoints = s.value("holdout_timepoints", p.holdout_timepoints);
    p.keep_first = s.value("keep_first", p.keep_first);
    p.consecutive_angles = s.value("consecutive_angles", p.consecutive_angles);
    p.train_ratio = s.value("train_ratio", p.train_ratio);
    if (s.contains("holdout_instances")) {
        p.holdout_instances = s.at("holdout_instances").get<std::size_t>();
    } else if (s.contains("holdout_fraction")) {
        std::set<int> distinct(ds.instance_ids.begin(), ds.instance_ids.end());
        p.holdout_instances = static_cast<std::size_t>(std::llround(
            s.at("holdout_fraction").get<double>() * static_cast<double>(distinct.size())));
    }
    return p;
}

LongitudinalDataset load_dataset(const json& data) {
    std::string source = data.at("source").get<std::string>();
    std::uint64_t seed = data.value("seed", 42);
    LongitudinalDataset ds;
    if (source == "synthetic_lmm") {
        SyntheticLmmSpec spec;
        const json& s = data.value("synthetic_lmm", json::object());
        spec.n_instances = s.value("n_instances", spec.n_instances);
        spec.n_timepoints = s.value("n_timepoints", spec.n_timepoints);
        spec.latent_dim = s.value("latent_dim", spec.latent_dim);
        spec.data_dim = s.value("data_dim", spec.data_dim);
        spec.latent_noise = s.value("latent_noise", spec.latent_noise);
        spec.obs_noise = s.value("obs_noise", spec.obs_noise);
        spec.random_effect_scale = s.value("random_effect_scale", spec.random_effect_scale);
        spec.identity_decoder = s.value("identity_decoder", spec.identity_decoder);
        ds = gen_synthetic_lmm(spec, seed);
    } else if (source == "rotating_toy") {
        RotatingToySpec spec;
        const json& s = data.value("rotating_toy", json::object());
        spec.n_instances = s.value("n_instances", spec.n_instances);
        spec.n_angles = s.value("n_angles", spec.n_angles);
        spec.data_dim = s.value("data_dim", spec.data_dim);
        spec.noise = s.value("noise", spec.noise);
        ds = gen_rotating_toy(spec, seed);
    } else {
        const json& c = data.at("csv");
        CsvManifest manifest;
        if (c.contains("manifest")) {
            const json& m = c.at("manifest");
            manifest.id_column = m.value("id_column", manifest.id_column);
            manifest.time_column = m.value("time_column", manifest.time_column);
            manifest.covariate_columns =
                m.value("covariate_columns", manifest.covariate_columns);
            manifest.feature_columns = m.value("feature_columns", manifest.feature_columns);
        }
        ds = load_csv(c.at("path").get<std::string>(), manifest);
    }
    double missing = data.value("missing_fraction", 0.0);
    if (missing > 0.0) {
        ds = apply_missingness(ds, missing, data.value("missing_seed", 13));
    }
    return ds;
}

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

std::unique_ptr<RunContext> build_run_context(const ExperimentConfig& cfg) {
    auto ctx = std::make_unique<RunContext>();
    ctx->dataset = load_dataset(cfg.raw.at("data"));
    ctx->schema = parse_schema(cfg.raw, ctx->dataset);
    SplitProtocol protocol = parse_split(cfg.raw, ctx->dataset);
    std::uint64_t split_seed = cfg.raw.contains("split")
                                   ? cfg.raw.at("split").value("seed", 7)
                                   : 7;
    ctx->splits = split(ctx->dataset, protocol, split_seed);
    ctx->prepared = prepare(ctx->dataset, ctx->schema, ctx->splits);
    return ctx;
}

ModelConfig resolve_model_config(const ExperimentConfig& cfg, const json& model_spec,
                                 std::uint64_t seed) {
    json merged = cfg.raw.value("train", json::object());
    for (const auto& [key, value] : model_spec.items()) merged[key] = value;
    ModelConfig mc = model_config_from_json(merged);
    mc.seed = seed;
    return mc;
}

namespace {

Tensor take_columns(const Tensor& m, const std::vector<std::size_t>& idx) {
    Tensor out({m.rows(), idx.size()});
    for (std::size_t c = 0; c < idx.size(); ++c) {
        for (std::size_t r = 0; r < m.rows(); ++r) out.at(r, c) = m.at(r, idx[c]);
    }
    return out;
}

double observed_mse(const Tensor& pred, const Tensor& truth, const Tensor& mask) {
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (mask[i] == 0.0) continue;
        double r = pred[i] - truth[i];
        sum += r * r;
        ++count;
    }
    if (count == 0) throw std::invalid_argument("evaluate: no observed entries to score");
    return sum / static_cast<double>(count);
}

// Conditional generation for a set of observation columns, routing each
// instance through its group epsilon for the shared-noise variant.
Tensor predict_columns(const RunContext& ctx, const FittedModel& fitted,
                       const std::vector<std::size_t>& idx) {
    Tensor x = take_columns(ctx.prepared.design.X, idx);
    if (fitted.model.cfg.variant != ModelVariant::slmm) {
        return conditional_generate(fitted, x, GenMode::mean).y;
    }
    Tensor out({ctx.dataset.data_dim(), idx.size()});
    for (std::size_t c = 0; c < idx.size(); ++c) {
        int id = ctx.dataset.instance_ids[idx[c]];
        auto it = fitted.group_epsilon.find(id);
        if (it == fitted.group_epsilon.end()) {
            throw std::runtime_error("evaluate: no group epsilon for instance " +
                                     std::to_string(id));
        }
        Tensor xc({x.rows()});
        for (std::size_t r = 0; r < x.rows(); ++r) xc[r] = x.at(r, c);
        Generated g = conditional_generate(fitted, xc, GenMode::mean, 1, nullptr, &it->second);
        for (std::size_t r = 0; r < out.rows(); ++r) out.at(r, c) = g.y[r];
    }
    return out;
}

}  // namespace

json evaluate_model(const RunContext& ctx, const FittedModel& fitted) {
    json out = json::object();
    const auto& splits = ctx.splits;
    double sigma_y = fitted.model.sigma_y();
    out["sigma_y"] = sigma_y;
    out["best_epoch"] = fitted.best_epoch;
    out["best_val_loss"] = fitted.best_val_loss;

    // Imputation: reconstruct training observations from their masked views
    // and score the hidden entries (Y keeps the true values).
    Tensor y_tr = take_columns(ctx.dataset.Y, splits.train);
    Tensor m_tr = take_columns(ctx.dataset.mask, splits.train);
    Tensor x_tr = take_columns(ctx.prepared.design.X, splits.train);
    bool any_masked = false;
    for (double v : m_tr.data()) {
        if (v == 0.0) {
            any_masked = true;
            break;
        }
    }
    if (any_masked) {
        Tensor recon = reconstruct(fitted, y_tr, m_tr, x_tr);
        out["imputation_mse"] = masked_mse(recon, y_tr, m_tr, MseTarget::masked_entries);
    }

    if (!splits.val.empty()) {
        Tensor y_val = take_columns(ctx.dataset.Y, splits.val);
        Tensor m_val = take_columns(ctx.dataset.mask, splits.val);
        Tensor x_val = take_columns(ctx.prepared.design.X, splits.val);
        Tensor recon = reconstruct(fitted, y_val, m_val, x_val);
        out["val_mse"] = observed_mse(recon, y_val, m_val);
        out["val_nll"] = nll(recon, sigma_y, y_val, m_val);
    }

    if (!splits.test.empty()) {
        Tensor y_te = take_columns(ctx.dataset.Y, splits.test);
        Tensor m_te = take_columns(ctx.dataset.mask, splits.test);
        Tensor pred = predict_columns(ctx, fitted, splits.test);
        out["predictive_mse"] = observed_mse(pred, y_te, m_te);
        out["test_nll"] = nll(pred, sigma_y, y_te, m_te);
    }

    if (ctx.dataset.Z_true) {
        Tensor z_est = encode_means(fitted, ctx.dataset.Y, ctx.dataset.mask,
                                    ctx.prepared.design.X);
        out["mcc"] = mcc(*ctx.dataset.Z_true, z_est);
    }
    return out;
}

namespace {

void write_text(const std::string& path, const std::string& content) {
    fs::create_directories(fs::path(path).parent_path().empty()
                               ? fs::path(".")
                               : fs::path(path).parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out << content;
}

void write_history_csv(const FittedModel& fitted, const std::string& path) {
    std::string text = "epoch,train_loss,val_loss,lr\n";
    for (const auto& rec : fitted.history) {
        text += std::to_string(rec.epoch) + "," + format_double(rec.train_loss) + "," +
                format_double(rec.val_loss) + "," + format_double(rec.lr) + "\n";
    }
    write_text(path, text);
}

json environment_stamp() {
    return json{{"library", "lmmvae"}, {"version", "0.1.0"}};
}

json aggregate_metrics(const std::map<std::string, std::vector<double>>& per_metric,
                       std::size_t n_seeds) {
    json out = json::object();
    for (const auto& [metric, values] : per_metric) {
        if (values.size() != n_seeds) continue;  // metric missing for some seed
        MetricReport rep = MetricReport::aggregate(metric, values);
        out[metric] = json{{"mean", rep.mean}, {"std", rep.std_dev}, {"per_seed", rep.per_seed}};
    }
    return out;
}

std::string snapshot_path(const std::string& out_dir, const std::string& model,
                          std::uint64_t seed) {
    return out_dir + "/" + model + "/seed_" + std::to_string(seed) + "/snapshot.json";
}

}  // namespace

json cmd_gen_data(const ExperimentConfig& cfg, const std::string& out_dir) {
    auto ctx = build_run_context(cfg);
    fs::create_directories(out_dir);
    save_csv(ctx->dataset, out_dir + "/data.csv");

    CsvManifest manifest;
    manifest.covariate_columns = ctx->dataset.covariates.columns;
    for (std::size_t d = 0; d < ctx->dataset.data_dim(); ++d) {
        manifest.feature_columns.push_back("feature_" + std::to_string(d));
    }
    json mj{{"id_column", manifest.id_column},
            {"time_column", manifest.time_column},
            {"covariate_columns", manifest.covariate_columns},
            {"feature_columns", manifest.feature_columns},
            {"config", cfg.raw}};
    write_text(out_dir + "/manifest.json", mj.dump(2) + "\n");

    json result{{"data_csv", out_dir + "/data.csv"},
                {"n_obs", ctx->dataset.n_obs()},
                {"data_dim", ctx->dataset.data_dim()}};
    if (ctx->dataset.Z_true) {
        std::string z_path = out_dir + "/z_true.csv";
        std::string text;
        const Tensor& z = *ctx->dataset.Z_true;
        for (std::size_t r = 0; r < z.rows(); ++r) {
            for (std::size_t c = 0; c < z.cols(); ++c) {
                text += (c ? "," : "") + format_double(z.at(r, c));
            }
            text += "\n";
        }
        write_text(z_path, text);
        result["z_true_csv"] = z_path;
    }
    if (ctx->dataset.A_true) {
        std::string a_path = out_dir + "/a_true.csv";
        std::string text;
        const Tensor& a = *ctx->dataset.A_true;
        for (std::size_t r = 0; r < a.rows(); ++r) {
            for (std::size_t c = 0; c < a.cols(); ++c) {
                text += (c ? "," : "") + format_double(a.at(r, c));
            }
            text += "\n";
        }
        write_text(a_path, text);
        result["a_true_csv"] = a_path;
    }
    return result;
}

json cmd_train(const ExperimentConfig& cfg, const std::string& out_dir) {
    auto ctx = build_run_context(cfg);
    json result{{"snapshots", json::array()}};
    for (const auto& model_spec : cfg.raw.at("models")) {
        for (std::uint64_t seed : cfg.seeds()) {
            ModelConfig mc = resolve_model_config(cfg, model_spec, seed);
            FittedModel fitted = train(mc, ctx->prepared);
            std::string path = snapshot_path(out_dir, mc.name, seed);
            fs::create_directories(fs::path(path).parent_path());
            save_snapshot(fitted, path);
            write_history_csv(fitted, out_dir + "/" + mc.name + "/seed_" +
                                          std::to_string(seed) + "/history.csv");
            result["snapshots"].push_back(json{{"model", mc.name},
                                               {"seed", seed},
                                               {"path", path},
                                               {"best_epoch", fitted.best_epoch},
                                               {"best_val_loss", fitted.best_val_loss}});
        }
    }
    return result;
}

json cmd_eval(const ExperimentConfig& cfg, const std::string& out_dir) {
    auto ctx = build_run_context(cfg);
    json models = json::object();
    std::string metrics_csv = "model,metric,mean,std,n_seeds\n";
    for (const auto& model_spec : cfg.raw.at("models")) {
        std::string name = model_spec.at("name").get<std::string>();
        json seeds_json = json::object();
        std::map<std::string, std::vector<double>> per_metric;
        std::size_t n_seeds = 0;
        for (std::uint64_t seed : cfg.seeds()) {
            FittedModel fitted = load_snapshot(snapshot_path(out_dir, name, seed));
            json metrics = evaluate_model(*ctx, fitted);
            seeds_json[std::to_string(seed)] = metrics;
            for (const auto& [key, value] : metrics.items()) {
                if (value.is_number()) per_metric[key].push_back(value.get<double>());
            }
            ++n_seeds;
        }
        json agg = aggregate_metrics(per_metric, n_seeds);
        for (const auto& [metric, stats] : agg.items()) {
            metrics_csv += name + "," + metric + "," +
                           format_double(stats.at("mean").get<double>()) + "," +
                           format_double(stats.at("std").get<double>()) + "," +
                           std::to_string(n_seeds) + "\n";
        }
        models[name] = json{{"seeds", seeds_json}, {"aggregate", agg}};
    }
    json results{{"format", "lmmvae-results"},
                 {"format_version", 1},
                 {"environment", environment_stamp()},
                 {"config", cfg.raw},
                 {"models", models}};
    fs::create_directories(out_dir);
    write_text(out_dir + "/results.json", results.dump(2) + "\n");
    write_text(out_dir + "/metrics.csv", metrics_csv);
    return results;
}

json cmd_sweep_basis(const ExperimentConfig& cfg, std::vector<std::size_t> m_values,
                     const std::string& out_dir) {
    if (!cfg.raw.contains("sweep")) throw std::invalid_argument("config: missing sweep section");
    const json& sweep = cfg.raw.at("sweep");
    std::string covariate = sweep.at("covariate").get<std::string>();
    if (m_values.empty() && sweep.contains("m_values")) {
        m_values = sweep.at("m_values").get<std::vector<std::size_t>>();
    }
    if (m_values.empty()) throw std::invalid_argument("sweep: no m_values given");
    std::sort(m_values.begin(), m_values.end());

    json rows = json::array();
    std::string csv = "m,model,predictive_mse_mean,predictive_mse_std\n";
    std::map<std::string, std::vector<double>> trend;  // model -> per-M means
    for (std::size_t m : m_values) {
        ExperimentConfig patched = cfg;
        bool found = false;
        for (auto& entry : patched.raw.at("schema").at("covariates")) {
            if (entry.at("name").get<std::string>() != covariate) continue;
            found = true;
            json basis{{"kind", "trig"}};
            if (sweep.value("mode", "regular") == "random") {
                basis["random"] = json{{"m", m},
                                       {"lengthscale", sweep.value("lengthscale", 1.0)},
                                       {"variance", sweep.value("variance", 1.0)},
                                       {"seed", sweep.value("random_seed", 1234)}};
            } else {
                basis["grid"] = json{{"m", m},
                                     {"half_width", sweep.at("half_width").get<double>()},
                                     {"variance", sweep.value("variance", 1.0)},
                                     {"lengthscale", sweep.value("lengthscale", 1.0)}};
            }
            entry["basis"] = basis;
        }
        if (!found) {
            throw std::invalid_argument("sweep: covariate '" + covariate + "' not in schema");
        }
        auto ctx = build_run_context(patched);
        for (const auto& model_spec : patched.raw.at("models")) {
            std::vector<double> mses;
            std::string name = model_spec.at("name").get<std::string>();
            for (std::uint64_t seed : patched.seeds()) {
                ModelConfig mc = resolve_model_config(patched, model_spec, seed);
                FittedModel fitted = train(mc, ctx->prepared);
                json metrics = evaluate_model(*ctx, fitted);
                mses.push_back(metrics.at("predictive_mse").get<double>());
            }
            MetricReport rep = MetricReport::aggregate("predictive_mse", mses);
            rows.push_back(json{{"m", m},
                                {"model", name},
                                {"predictive_mse_mean", rep.mean},
                                {"predictive_mse_std", rep.std_dev},
                                {"per_seed", rep.per_seed}});
            csv += std::to_string(m) + "," + name + "," + format_double(rep.mean) + "," +
                   format_double(rep.std_dev) + "\n";
            trend[name].push_back(rep.mean);
        }
    }
    // Trend report: non-increasing MSE in M, with one adjacent violation
    // tolerated.
    json trend_json = json::object();
    for (const auto& [name, means] : trend) {
        std::size_t violations = 0;
        for (std::size_t i = 1; i < means.size(); ++i) {
            if (means[i] > means[i - 1]) ++violations;
        }
        trend_json[name] = json{{"violations", violations},
                                {"monotone_within_tolerance", violations <= 1}};
    }
    json results{{"format", "lmmvae-sweep"},
                 {"format_version", 1},
                 {"environment", environment_stamp()},
                 {"config", cfg.raw},
                 {"m_values", m_values},
                 {"rows", rows},
                 {"trend", trend_json}};
    fs::create_directories(out_dir);
    write_text(out_dir + "/sweep.json", results.dump(2) + "\n");
    write_text(out_dir + "/sweep.csv", csv);
    return results;
}

json cmd_mcc_study(const ExperimentConfig& cfg, const std::string& out_dir) {
    auto ctx = build_run_context(cfg);
    if (!ctx->dataset.Z_true) {
        throw std::invalid_argument("mcc-study: dataset has no ground-truth latents");
    }
    json table = json::array();
    std::string csv = "model,mcc_mean,mcc_std,val_nll_mean,val_nll_std\n";
    for (const auto& model_spec : cfg.raw.at("models")) {
        std::string name = model_spec.at("name").get<std::string>();
        std::vector<double> mccs, nlls;
        json per_seed = json::object();
        for (std::uint64_t seed : cfg.seeds()) {
            ModelConfig mc = resolve_model_config(cfg, model_spec, seed);
            FittedModel fitted = train(mc, ctx->prepared);
            json metrics = evaluate_model(*ctx, fitted);
            mccs.push_back(metrics.at("mcc").get<double>());
            nlls.push_back(metrics.at("val_nll").get<double>());
            per_seed[std::to_string(seed)] = metrics;
        }
        MetricReport mcc_rep = MetricReport::aggregate("mcc", mccs);
        MetricReport nll_rep = MetricReport::aggregate("val_nll", nlls);
        table.push_back(json{{"model", name},
                             {"mcc_mean", mcc_rep.mean},
                             {"mcc_std", mcc_rep.std_dev},
                             {"val_nll_mean", nll_rep.mean},
                             {"val_nll_std", nll_rep.std_dev},
                             {"seeds", per_seed}});
        csv += name + "," + format_double(mcc_rep.mean) + "," + format_double(mcc_rep.std_dev) +
               "," + format_double(nll_rep.mean) + "," + format_double(nll_rep.std_dev) + "\n";
    }
    json results{{"format", "lmmvae-mcc"},
                 {"format_version", 1},
                 {"environment", environment_stamp()},
                 {"config", cfg.raw},
                 {"table", table}};
    fs::create_directories(out_dir);
    write_text(out_dir + "/mcc.json", results.dump(2) + "\n");
    write_text(out_dir + "/mcc.csv", csv);
    return results;
}

}  // namespace lmmvae
