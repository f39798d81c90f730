#include "lmmvae/models.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

#include "lmmvae/optim.hpp"

namespace lmmvae {

void LikelihoodSpec::validate() const {
    if (!(sigma_y > 0.0)) throw std::invalid_argument("likelihood: sigma_y must be > 0");
}

void ModelConfig::validate() const {
    if (latent_dim == 0) throw std::invalid_argument("model config: latent_dim must be >= 1");
    if (mc_samples == 0) throw std::invalid_argument("model config: mc_samples must be >= 1");
    if (batch_size == 0) throw std::invalid_argument("model config: batch_size must be >= 1");
    if (!(lr > 0.0)) throw std::invalid_argument("model config: lr must be > 0");
    if (!(sigma_z > 0.0)) throw std::invalid_argument("model config: sigma_z must be > 0");
    if (!(beta > 0.0)) throw std::invalid_argument("model config: beta must be > 0");
    if (!(lr_gamma > 0.0) || lr_gamma > 1.0 || lr_step_size == 0) {
        throw std::invalid_argument("model config: bad lr schedule");
    }
    likelihood.validate();
    if (objective == Objective::gsnn && a_mode == AMode::bayes) {
        throw std::invalid_argument(
            "model config: the gsnn objective is defined for deterministic effects only");
    }
}

PreparedData prepare(const LongitudinalDataset& ds, const CovariateSchema& schema,
                     const SplitIndices& splits) {
    ds.validate();
    PreparedData out;
    out.dataset = &ds;
    out.schema = schema;
    out.design = build_design_matrix(schema, ds.covariates);
    out.splits = splits;
    out.use_mask_channel = ds.has_missing();
    return out;
}

namespace {

Tensor columns_of(const Tensor& m, const std::vector<std::size_t>& idx) {
    std::size_t rows = m.rows();
    Tensor out({rows, idx.size()});
    for (std::size_t c = 0; c < idx.size(); ++c) {
        for (std::size_t r = 0; r < rows; ++r) out.at(r, c) = m.at(r, idx[c]);
    }
    return out;
}

Tensor vstack(const std::vector<const Tensor*>& parts) {
    std::size_t rows = 0, cols = parts.front()->cols();
    for (const Tensor* p : parts) rows += p->rows();
    Tensor out({rows, cols});
    std::size_t r0 = 0;
    for (const Tensor* p : parts) {
        for (std::size_t r = 0; r < p->rows(); ++r) {
            for (std::size_t c = 0; c < cols; ++c) out.at(r0 + r, c) = p->at(r, c);
        }
        r0 += p->rows();
    }
    return out;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    return out;
}

}  // namespace

Batch make_batch(const PreparedData& data, const std::vector<std::size_t>& obs) {
    if (obs.empty()) throw std::invalid_argument("batch: empty observation list");
    Batch b;
    b.obs = obs;
    b.Y = columns_of(data.dataset->Y, obs);
    b.X = columns_of(data.design.X, obs);
    b.mask = columns_of(data.dataset->mask, obs);
    return b;
}

Batch make_grouped_batch(const PreparedData& data, std::vector<std::size_t> obs,
                         const std::vector<std::size_t>& universe) {
    if (obs.empty()) throw std::invalid_argument("batch: empty observation list");
    std::map<int, std::size_t> universe_count;
    for (std::size_t i : universe) ++universe_count[data.dataset->instance_ids[i]];

    // Group observations by instance, keeping the order of first appearance
    // and time order inside each group (dataset columns are time-ordered).
    std::vector<int> order;
    std::map<int, std::vector<std::size_t>> members;
    for (std::size_t i : obs) {
        int id = data.dataset->instance_ids[i];
        auto [it, inserted] = members.try_emplace(id);
        if (inserted) order.push_back(id);
        it->second.push_back(i);
    }
    std::vector<std::size_t> sorted;
    Batch b;
    for (int id : order) {
        auto& group = members[id];
        std::sort(group.begin(), group.end());
        auto uc = universe_count.find(id);
        if (uc == universe_count.end() || group.size() != uc->second) {
            throw std::invalid_argument("batch: group " + std::to_string(id) +
                                        " straddles the batch boundary");
        }
        if (group.size() < 2) {
            throw std::invalid_argument("batch: group " + std::to_string(id) +
                                        " too small for variance estimate");
        }
        b.group_spans.emplace_back(sorted.size(), group.size());
        b.group_ids.push_back(id);
        sorted.insert(sorted.end(), group.begin(), group.end());
    }
    b.obs = std::move(sorted);
    b.Y = columns_of(data.dataset->Y, b.obs);
    b.X = columns_of(data.design.X, b.obs);
    b.mask = columns_of(data.dataset->mask, b.obs);
    return b;
}

std::vector<Tensor*> LmmVaeModel::parameters() {
    std::vector<Tensor*> out;
    for (std::size_t i = 0; i < encoder.n_layers(); ++i) {
        out.push_back(&encoder.weights[i]);
        out.push_back(&encoder.biases[i]);
    }
    for (std::size_t i = 0; i < decoder.n_layers(); ++i) {
        out.push_back(&decoder.weights[i]);
        out.push_back(&decoder.biases[i]);
    }
    if (cfg.uses_lmm_prior()) {
        out.push_back(&A_mean);
        if (cfg.a_mode == AMode::bayes) out.push_back(&A_log_var);
    }
    if (cfg.likelihood.kind == LikelihoodSpec::Kind::gaussian && cfg.likelihood.learnable) {
        out.push_back(&log_sigma_y);
    }
    if (cfg.learn_sigma_z) out.push_back(&log_sigma_z);
    return out;
}

std::vector<const Tensor*> LmmVaeModel::parameters() const {
    auto mut = const_cast<LmmVaeModel*>(this)->parameters();
    return {mut.begin(), mut.end()};
}

std::vector<std::string> LmmVaeModel::parameter_names() const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < encoder.n_layers(); ++i) {
        out.push_back("encoder.w" + std::to_string(i));
        out.push_back("encoder.b" + std::to_string(i));
    }
    for (std::size_t i = 0; i < decoder.n_layers(); ++i) {
        out.push_back("decoder.w" + std::to_string(i));
        out.push_back("decoder.b" + std::to_string(i));
    }
    if (cfg.uses_lmm_prior()) {
        out.push_back("A_mean");
        if (cfg.a_mode == AMode::bayes) out.push_back("A_log_var");
    }
    if (cfg.likelihood.kind == LikelihoodSpec::Kind::gaussian && cfg.likelihood.learnable) {
        out.push_back("log_sigma_y");
    }
    if (cfg.learn_sigma_z) out.push_back("log_sigma_z");
    return out;
}

LmmPrior LmmVaeModel::prior_view() const {
    LmmPrior p;
    p.mode = cfg.a_mode;
    p.A_mean = A_mean;
    if (cfg.a_mode == AMode::bayes) {
        p.A_var = Tensor(A_log_var.shape());
        for (std::size_t i = 0; i < A_log_var.size(); ++i) p.A_var[i] = std::exp(A_log_var[i]);
        p.prior_on_a.kind = PriorOnAKind::spectral;
        p.prior_on_a.column_variances = prior_col_var;
    }
    p.sigma_z = sigma_z_value();
    return p;
}

double LmmVaeModel::sigma_y() const { return std::exp(log_sigma_y[0]); }
double LmmVaeModel::sigma_z_value() const { return std::exp(log_sigma_z[0]); }

std::pair<MlpSpec, MlpSpec> model_mlp_specs(const ModelConfig& cfg, std::size_t data_dim,
                                            std::size_t covariate_dim, bool use_mask_channel) {
    std::size_t enc_in = data_dim + (use_mask_channel ? data_dim : 0);
    std::size_t dec_in = cfg.latent_dim;
    if (cfg.variant == ModelVariant::cvae) {
        enc_in += covariate_dim;
        dec_in += covariate_dim;
    }
    MlpSpec enc_spec{enc_in,
                     cfg.encoder_hidden,
                     {{"mu", cfg.latent_dim}, {"log_var", cfg.latent_dim}},
                     cfg.activation,
                     false};
    MlpSpec dec_spec{dec_in,
                     cfg.decoder_hidden,
                     {{"mean", data_dim}},
                     cfg.activation,
                     cfg.likelihood.kind == LikelihoodSpec::Kind::gaussian_sigmoid_mean};
    return {enc_spec, dec_spec};
}

LmmVaeModel model_shell(const ModelConfig& cfg, std::size_t data_dim, std::size_t covariate_dim,
                        bool use_mask_channel) {
    cfg.validate();
    LmmVaeModel model;
    model.cfg = cfg;
    model.data_dim = data_dim;
    model.covariate_dim = covariate_dim;
    model.use_mask_channel = use_mask_channel;
    auto [enc_spec, dec_spec] = model_mlp_specs(cfg, data_dim, covariate_dim, use_mask_channel);
    auto zero_mlp = [](MlpSpec spec) {
        spec.validate();
        Mlp net;
        net.spec = spec;
        std::size_t fan_in = spec.input_dim;
        std::vector<std::size_t> widths = spec.hidden;
        widths.push_back(spec.output_dim());
        for (std::size_t out : widths) {
            net.weights.push_back(Tensor::zeros({out, fan_in}));
            net.biases.push_back(Tensor::zeros({out}));
            fan_in = out;
        }
        return net;
    };
    model.encoder = zero_mlp(enc_spec);
    model.decoder = zero_mlp(dec_spec);
    if (cfg.uses_lmm_prior()) {
        model.A_mean = Tensor::zeros({cfg.latent_dim, covariate_dim});
        if (cfg.a_mode == AMode::bayes) {
            model.A_log_var = Tensor::zeros({cfg.latent_dim, covariate_dim});
        }
    }
    model.prior_col_var = Tensor::full({covariate_dim}, 1.0 / cfg.beta);
    model.log_sigma_y = Tensor::scalar(std::log(cfg.likelihood.sigma_y));
    model.log_sigma_z = Tensor::scalar(std::log(cfg.sigma_z));
    return model;
}

LmmVaeModel init_model(const ModelConfig& cfg, const PreparedData& data) {
    cfg.validate();
    LmmVaeModel model;
    model.cfg = cfg;
    model.data_dim = data.dataset->data_dim();
    model.covariate_dim = data.design.total_width();
    model.use_mask_channel = data.use_mask_channel;

    auto [enc_spec, dec_spec] =
        model_mlp_specs(cfg, model.data_dim, model.covariate_dim, model.use_mask_channel);

    Rng root(cfg.seed);
    Rng enc_rng = root.fork("init/encoder");
    model.encoder = Mlp::init(enc_spec, enc_rng);
    Rng dec_rng = root.fork("init/decoder");
    model.decoder = Mlp::init(dec_spec, dec_rng);

    if (cfg.uses_lmm_prior()) {
        Rng a_rng = root.fork("init/prior");
        model.A_mean = a_rng.draw_normal({cfg.latent_dim, model.covariate_dim});
        for (auto& v : model.A_mean.data()) v *= 0.01;
        if (cfg.a_mode == AMode::bayes) {
            model.A_log_var =
                Tensor::full({cfg.latent_dim, model.covariate_dim}, std::log(1e-2));
        }
    }
    model.prior_col_var = cfg.spectral_prior
                              ? prior_column_variances(data.schema, cfg.beta)
                              : Tensor::full({model.covariate_dim}, 1.0 / cfg.beta);
    model.log_sigma_y = Tensor::scalar(std::log(cfg.likelihood.sigma_y));
    model.log_sigma_z = Tensor::scalar(std::log(cfg.sigma_z));
    return model;
}

Tensor encoder_input(const LmmVaeModel& model, const Batch& batch) {
    Tensor masked = hadamard(batch.Y, batch.mask);
    std::vector<const Tensor*> parts{&masked};
    if (model.use_mask_channel) parts.push_back(&batch.mask);
    if (model.cfg.variant == ModelVariant::cvae) parts.push_back(&batch.X);
    return parts.size() == 1 ? masked : vstack(parts);
}

StagedModel stage_model(Tape& tape, const LmmVaeModel& model) {
    StagedModel s;
    s.encoder = stage_mlp(tape, model.encoder);
    s.decoder = stage_mlp(tape, model.decoder);
    for (std::size_t i = 0; i < model.encoder.n_layers(); ++i) {
        s.trainable.push_back(s.encoder.weights[i]);
        s.trainable.push_back(s.encoder.biases[i]);
    }
    for (std::size_t i = 0; i < model.decoder.n_layers(); ++i) {
        s.trainable.push_back(s.decoder.weights[i]);
        s.trainable.push_back(s.decoder.biases[i]);
    }
    if (model.cfg.uses_lmm_prior()) {
        s.A_mean = tape.input(model.A_mean);
        s.trainable.push_back(s.A_mean);
        if (model.cfg.a_mode == AMode::bayes) {
            s.A_log_var = tape.input(model.A_log_var);
            s.trainable.push_back(s.A_log_var);
        }
    }
    bool learn_sy = model.cfg.likelihood.kind == LikelihoodSpec::Kind::gaussian &&
                    model.cfg.likelihood.learnable;
    s.log_sigma_y = learn_sy ? tape.input(model.log_sigma_y) : tape.constant(model.log_sigma_y);
    if (learn_sy) s.trainable.push_back(s.log_sigma_y);
    s.log_sigma_z = model.cfg.learn_sigma_z ? tape.input(model.log_sigma_z)
                                            : tape.constant(model.log_sigma_z);
    if (model.cfg.learn_sigma_z) s.trainable.push_back(s.log_sigma_z);
    return s;
}

namespace {

Var decode_and_score(Tape& tape, const LmmVaeModel& model, const StagedModel& staged,
                     const Batch& batch, Var z) {
    Var dec_in = model.cfg.variant == ModelVariant::cvae
                     ? concat_rows(z, tape.constant(batch.X))
                     : z;
    Var y_hat = mlp_forward(model.decoder.spec, staged.decoder, dec_in);
    return masked_gaussian_loglik(y_hat, batch.Y, batch.mask, staged.log_sigma_y);
}

// KL(q(A) || p(A)) for mean-field q and a diagonal column-variance prior.
Var kl_a_term(Tape& tape, const LmmVaeModel& model, const StagedModel& staged) {
    std::size_t l_dim = model.cfg.latent_dim, q_dim = model.covariate_dim;
    Tensor inv_v0({l_dim, q_dim});
    Tensor log_v0({l_dim, q_dim});
    for (std::size_t l = 0; l < l_dim; ++l) {
        for (std::size_t q = 0; q < q_dim; ++q) {
            inv_v0.at(l, q) = 1.0 / model.prior_col_var[q];
            log_v0.at(l, q) = std::log(model.prior_col_var[q]);
        }
    }
    Var v = exp(staged.A_log_var);
    Var ratio = mul(v, tape.constant(inv_v0));
    Var msq = mul(square(staged.A_mean), tape.constant(inv_v0));
    Var t = sadd(add(ratio, msq), -1.0);
    Var log_ratio = sub(staged.A_log_var, tape.constant(log_v0));
    return smul(sum(sub(t, log_ratio)), 0.5);
}

// Column-averaging, expansion and variance matrices for grouped batches.
struct GroupMatrices {
    Tensor avg;       // B x K, entry (n, k) = 1/n_k for n in group k
    Tensor expand;    // K x B, entry (k, n) = 1 for n in group k
    Tensor var_norm;  // B x K, entry (n, k) = 1/(n_k - 1)
};

GroupMatrices group_matrices(const Batch& batch) {
    std::size_t b = batch.size(), k = batch.group_spans.size();
    GroupMatrices g{Tensor::zeros({b, k}), Tensor::zeros({k, b}), Tensor::zeros({b, k})};
    for (std::size_t gi = 0; gi < k; ++gi) {
        auto [offset, count] = batch.group_spans[gi];
        for (std::size_t n = offset; n < offset + count; ++n) {
            g.avg.at(n, gi) = 1.0 / static_cast<double>(count);
            g.expand.at(gi, n) = 1.0;
            g.var_norm.at(n, gi) = 1.0 / static_cast<double>(count - 1);
        }
    }
    return g;
}

Tensor expand_group_columns(const Tensor& per_group, const Batch& batch) {
    std::size_t rows = per_group.rows();
    Tensor out({rows, batch.size()});
    for (std::size_t gi = 0; gi < batch.group_spans.size(); ++gi) {
        auto [offset, count] = batch.group_spans[gi];
        for (std::size_t n = offset; n < offset + count; ++n) {
            for (std::size_t r = 0; r < rows; ++r) out.at(r, n) = per_group.at(r, gi);
        }
    }
    return out;
}

}  // namespace

Var reconstruction_term(Tape& tape, const LmmVaeModel& model, const StagedModel& staged,
                        const Batch& batch, Var mu, Var log_var,
                        const std::vector<Tensor>& noise) {
    if (noise.empty()) throw std::invalid_argument("reconstruction_term: needs >= 1 noise draw");
    EncoderOutput out{mu, log_var};
    Var acc{};
    for (std::size_t s = 0; s < noise.size(); ++s) {
        Var z = reparameterize(out, tape.constant(noise[s]));
        Var ll = decode_and_score(tape, model, staged, batch, z);
        acc = s == 0 ? ll : add(acc, ll);
    }
    return smul(neg(acc), 1.0 / static_cast<double>(noise.size()));
}

std::vector<Tensor> draw_mc_noise(Rng& rng, std::size_t s, Shape shape) {
    std::vector<Tensor> out;
    out.reserve(s);
    for (std::size_t i = 0; i < s; ++i) out.push_back(rng.draw_normal(shape));
    return out;
}

namespace {

LossTerms finalize(Tape& tape, LossTerms lt, const ModelConfig& cfg, std::size_t batch_size,
                   std::size_t n_total) {
    double inv_b = 1.0 / static_cast<double>(batch_size);
    lt.total = smul(add(lt.recon_sum, lt.kl_sum), inv_b);
    if (cfg.uses_lmm_prior() && cfg.a_mode == AMode::bayes && cfg.objective == Objective::vi) {
        double scale = static_cast<double>(batch_size) / static_cast<double>(n_total);
        lt.total = add(lt.total, smul(lt.kl_a, scale));
    }
    (void)tape;
    return lt;
}

LossTerms vi_loss(Tape& tape, const LmmVaeModel& model, const StagedModel& staged,
                  const Batch& batch, std::size_t n_total, Rng& noise_rng) {
    const ModelConfig& cfg = model.cfg;
    std::size_t l_dim = cfg.latent_dim, b = batch.size();
    Var zero = tape.constant(Tensor::scalar(0.0));
    LossTerms lt{zero, zero, zero, zero};

    Tensor enc_in = encoder_input(model, batch);
    EncoderOutput q = encode(model.encoder.spec, staged.encoder, tape.constant(enc_in));
    Var x_const = tape.constant(batch.X);

    std::vector<Tensor> noise = draw_mc_noise(noise_rng, cfg.mc_samples, {l_dim, b});
    lt.recon_sum = reconstruction_term(tape, model, staged, batch, q.mu, q.log_var, noise);

    if (cfg.uses_lmm_prior()) {
        Var prior_mu = matmul(staged.A_mean, x_const);
        Var e2 = square(sub(q.mu, prior_mu));
        if (cfg.a_mode == AMode::bayes) {
            Tensor xx = hadamard(batch.X, batch.X);
            e2 = add(e2, matmul(exp(staged.A_log_var), tape.constant(xx)));
        }
        Var inv_sz2 = exp(smul(staged.log_sigma_z, -2.0));
        Var quad = smul(mul(e2, inv_sz2), 0.5);
        Var ratio = mul(exp(q.log_var), inv_sz2);
        Var gauss = smul(
            sub(add(sadd(ratio, -1.0), smul(staged.log_sigma_z, 2.0)), q.log_var), 0.5);
        lt.kl_sum = sum(add(quad, gauss));
        if (cfg.a_mode == AMode::bayes) lt.kl_a = kl_a_term(tape, model, staged);
    } else {
        Var t = sadd(add(square(q.mu), exp(q.log_var)), -1.0);
        lt.kl_sum = smul(sum(sub(t, q.log_var)), 0.5);
    }
    return finalize(tape, lt, cfg, b, n_total);
}

LossTerms vi_slmm_loss(Tape& tape, const LmmVaeModel& model, const StagedModel& staged,
                       const Batch& batch, std::size_t n_total, Rng& noise_rng) {
    const ModelConfig& cfg = model.cfg;
    if (batch.group_spans.empty()) {
        throw std::invalid_argument("slmm objective needs a grouped batch");
    }
    std::size_t l_dim = cfg.latent_dim, b = batch.size(), k = batch.group_spans.size();
    Var zero = tape.constant(Tensor::scalar(0.0));
    LossTerms lt{zero, zero, zero, zero};

    Tensor enc_in = encoder_input(model, batch);
    EncoderOutput q = encode(model.encoder.spec, staged.encoder, tape.constant(enc_in));
    Var x_const = tape.constant(batch.X);
    GroupMatrices gm = group_matrices(batch);

    // Encoder aggregation (the bayes reconstruction samples A, but the
    // variational family for epsilon is defined through E[A]).
    Var prior_mu = matmul(staged.A_mean, x_const);
    Var resid = cfg.aggregation_sign == AggregationSign::paper ? sub(prior_mu, q.mu)
                                                               : sub(q.mu, prior_mu);
    Var group_mu = matmul(resid, tape.constant(gm.avg));                       // L x K
    Var dev = sub(resid, matmul(group_mu, tape.constant(gm.expand)));          // L x B
    Var group_var = matmul(square(dev), tape.constant(gm.var_norm));           // L x K

    Var acc{};
    for (std::size_t s = 0; s < cfg.mc_samples; ++s) {
        Var a_sample = staged.A_mean;
        if (cfg.a_mode == AMode::bayes) {
            Tensor zeta = noise_rng.draw_normal({l_dim, model.covariate_dim});
            a_sample = add(staged.A_mean,
                           mul(exp(smul(staged.A_log_var, 0.5)), tape.constant(zeta)));
        }
        Tensor xi = noise_rng.draw_normal({l_dim, k});
        Var eps = add(group_mu, mul(sqrt(group_var), tape.constant(xi)));
        Var z = add(matmul(a_sample, x_const), matmul(eps, tape.constant(gm.expand)));
        Var ll = decode_and_score(tape, model, staged, batch, z);
        acc = s == 0 ? ll : add(acc, ll);
    }
    lt.recon_sum = smul(neg(acc), 1.0 / static_cast<double>(cfg.mc_samples));

    // KL(q(eps_k) || N(0, sigma_z^2 I)), once per group.
    Var inv_sz2 = exp(smul(staged.log_sigma_z, -2.0));
    Var quad = smul(mul(add(square(group_mu), group_var), inv_sz2), 0.5);
    Var log_ratio = smul(sub(log(group_var), smul(staged.log_sigma_z, 2.0)), 0.5);
    lt.kl_sum = sum(sub(sadd(quad, -0.5), log_ratio));

    if (cfg.a_mode == AMode::bayes) lt.kl_a = kl_a_term(tape, model, staged);
    return finalize(tape, lt, cfg, b, n_total);
}

LossTerms gsnn_loss(Tape& tape, const LmmVaeModel& model, const StagedModel& staged,
                    const Batch& batch, std::size_t n_total, Rng& noise_rng) {
    const ModelConfig& cfg = model.cfg;
    std::size_t l_dim = cfg.latent_dim, b = batch.size();
    Var zero = tape.constant(Tensor::scalar(0.0));
    LossTerms lt{zero, zero, zero, zero};

    bool grouped = cfg.variant == ModelVariant::slmm;
    if (grouped && batch.group_spans.empty()) {
        throw std::invalid_argument("slmm objective needs a grouped batch");
    }
    Var prior_mu{};
    if (cfg.uses_lmm_prior()) {
        prior_mu = matmul(staged.A_mean, tape.constant(batch.X));
    }
    Var acc{};
    for (std::size_t s = 0; s < cfg.mc_samples; ++s) {
        Tensor xi = grouped ? noise_rng.draw_normal({l_dim, batch.group_spans.size()})
                            : noise_rng.draw_normal({l_dim, b});
        if (grouped) xi = expand_group_columns(xi, batch);
        Var eps = mul(exp(staged.log_sigma_z), tape.constant(xi));
        Var z = cfg.uses_lmm_prior() ? add(prior_mu, eps) : eps;
        Var ll = decode_and_score(tape, model, staged, batch, z);
        acc = s == 0 ? ll : add(acc, ll);
    }
    lt.recon_sum = smul(neg(acc), 1.0 / static_cast<double>(cfg.mc_samples));
    return finalize(tape, lt, cfg, b, n_total);
}

}  // namespace

LossTerms build_loss(Tape& tape, const LmmVaeModel& model, const StagedModel& staged,
                     const Batch& batch, std::size_t n_total, Rng noise_rng) {
    if (batch.size() == 0) throw std::invalid_argument("build_loss: empty batch");
    if (n_total == 0) throw std::invalid_argument("build_loss: n_total must be positive");
    if (model.cfg.objective == Objective::gsnn) {
        return gsnn_loss(tape, model, staged, batch, n_total, noise_rng);
    }
    if (model.cfg.variant == ModelVariant::slmm) {
        return vi_slmm_loss(tape, model, staged, batch, n_total, noise_rng);
    }
    return vi_loss(tape, model, staged, batch, n_total, noise_rng);
}

GaussianPosterior aggregate_group_posterior(const Tensor& a_mean, const Tensor& x_cols,
                                            const Tensor& encoder_mus, AggregationSign sign) {
    std::size_t n = x_cols.cols();
    if (n < 2) throw std::invalid_argument("aggregate: group too small for variance estimate");
    if (encoder_mus.cols() != n || a_mean.cols() != x_cols.rows()) {
        throw std::invalid_argument("aggregate: dimension mismatch");
    }
    std::size_t l_dim = a_mean.rows();
    Tensor resid({l_dim, n});
    for (std::size_t c = 0; c < n; ++c) {
        for (std::size_t l = 0; l < l_dim; ++l) {
            double ax = 0.0;
            for (std::size_t q = 0; q < a_mean.cols(); ++q) ax += a_mean.at(l, q) * x_cols.at(q, c);
            double r = ax - encoder_mus.at(l, c);
            resid.at(l, c) = sign == AggregationSign::paper ? r : -r;
        }
    }
    GaussianPosterior out{Tensor::zeros({l_dim}), Tensor::zeros({l_dim})};
    for (std::size_t l = 0; l < l_dim; ++l) {
        double m = 0.0;
        for (std::size_t c = 0; c < n; ++c) m += resid.at(l, c);
        m /= static_cast<double>(n);
        double v = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
            double d = m - resid.at(l, c);
            v += d * d;
        }
        out.mu[l] = m;
        out.var[l] = v / static_cast<double>(n - 1);
    }
    return out;
}

namespace {

std::vector<std::vector<std::size_t>> epoch_batches(const PreparedData& data,
                                                    const ModelConfig& cfg, Rng rng) {
    const auto& train = data.splits.train;
    std::vector<std::vector<std::size_t>> chunks;
    if (cfg.variant == ModelVariant::slmm) {
        std::map<int, std::vector<std::size_t>> groups;
        for (std::size_t i : train) groups[data.dataset->instance_ids[i]].push_back(i);
        std::vector<int> ids;
        for (const auto& [id, members] : groups) ids.push_back(id);
        for (std::size_t i = ids.size(); i > 1; --i) {
            std::swap(ids[i - 1], ids[rng.below(i)]);
        }
        std::vector<std::size_t> chunk;
        for (int id : ids) {
            const auto& members = groups[id];
            if (!chunk.empty() && chunk.size() + members.size() > cfg.batch_size) {
                chunks.push_back(std::move(chunk));
                chunk.clear();
            }
            chunk.insert(chunk.end(), members.begin(), members.end());
        }
        if (!chunk.empty()) chunks.push_back(std::move(chunk));
    } else {
        std::vector<std::size_t> idx = train;
        for (std::size_t i = idx.size(); i > 1; --i) {
            std::swap(idx[i - 1], idx[rng.below(i)]);
        }
        for (std::size_t start = 0; start < idx.size(); start += cfg.batch_size) {
            std::size_t end = std::min(idx.size(), start + cfg.batch_size);
            chunks.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(start),
                                idx.begin() + static_cast<std::ptrdiff_t>(end));
        }
    }
    return chunks;
}

GaussianPosterior aggregate_with_model(const LmmVaeModel& model, const Tensor& y,
                                       const Tensor& mask, const Tensor& x) {
    Batch b;
    b.Y = y;
    b.mask = mask;
    b.X = x;
    b.obs.resize(y.cols());
    Tensor enc_in = encoder_input(model, b);
    Tensor enc_out = mlp_eval(model.encoder, enc_in);
    auto [m0, m1] = model.encoder.spec.head_range("mu");
    Tensor mus({m1 - m0, y.cols()});
    for (std::size_t c = 0; c < y.cols(); ++c) {
        for (std::size_t r = m0; r < m1; ++r) mus.at(r - m0, c) = enc_out.at(r, c);
    }
    return aggregate_group_posterior(model.A_mean, x, mus, model.cfg.aggregation_sign);
}

}  // namespace

FittedModel train(const ModelConfig& cfg, const PreparedData& data) {
    cfg.validate();
    if (data.splits.train.empty()) throw std::invalid_argument("train: empty train split");
    if (data.splits.val.empty()) throw std::invalid_argument("train: empty validation split");

    LmmVaeModel model = init_model(cfg, data);
    Rng root(cfg.seed);
    std::size_t n_train = data.splits.train.size();
    bool grouped = cfg.variant == ModelVariant::slmm;

    Batch val_batch = grouped
                          ? make_grouped_batch(data, data.splits.val, data.splits.val)
                          : make_batch(data, data.splits.val);

    auto params = model.parameters();
    auto snapshot = [&]() {
        std::vector<Tensor> copy;
        copy.reserve(params.size());
        for (Tensor* p : params) copy.push_back(*p);
        return copy;
    };
    auto restore = [&](const std::vector<Tensor>& snap) {
        for (std::size_t i = 0; i < params.size(); ++i) *params[i] = snap[i];
    };
    auto val_loss = [&](std::size_t eval_index) {
        Tape tape;
        StagedModel staged = stage_model(tape, model);
        LossTerms lt = build_loss(tape, model, staged, val_batch, n_train,
                                  root.fork("val-noise", eval_index));
        return lt.total.value().item();
    };

    Adam adam({cfg.lr, 0.9, 0.999, 1e-8});
    FittedModel out;
    std::vector<Tensor> best = snapshot();
    out.best_val_loss = val_loss(0);
    out.best_epoch = 0;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        adam.set_lr(exp_lr(cfg.lr, cfg.lr_gamma, cfg.lr_step_size, epoch));
        auto chunks = epoch_batches(data, cfg, root.fork("shuffle", epoch));
        double epoch_sum = 0.0;
        std::size_t epoch_obs = 0;
        for (std::size_t b = 0; b < chunks.size(); ++b) {
            Batch batch = grouped ? make_grouped_batch(data, chunks[b], data.splits.train)
                                  : make_batch(data, chunks[b]);
            Tape tape;
            StagedModel staged = stage_model(tape, model);
            LossTerms lt = build_loss(tape, model, staged, batch, n_train,
                                      root.fork("noise", epoch).fork("batch", b));
            double loss = lt.total.value().item();
            if (!std::isfinite(loss)) {
                std::ostringstream os;
                os << "train: non-finite loss at epoch " << epoch << " batch " << b
                   << " (recon=" << lt.recon_sum.value().item()
                   << ", kl=" << lt.kl_sum.value().item()
                   << ", kl_a=" << lt.kl_a.value().item() << ")";
                throw std::runtime_error(os.str());
            }
            tape.backward(lt.total);
            std::vector<const Tensor*> grads;
            grads.reserve(staged.trainable.size());
            for (Var v : staged.trainable) grads.push_back(&v.grad());
            adam.step(params, grads);
            epoch_sum += loss * static_cast<double>(batch.size());
            epoch_obs += batch.size();
        }
        double vloss = val_loss(epoch + 1);
        out.history.push_back({epoch, epoch_sum / static_cast<double>(epoch_obs), vloss,
                               adam.lr()});
        if (vloss < out.best_val_loss) {
            out.best_val_loss = vloss;
            out.best_epoch = epoch + 1;
            best = snapshot();
        }
    }
    restore(best);
    out.model = std::move(model);

    if (grouped) {
        std::map<int, std::vector<std::size_t>> groups;
        for (std::size_t i : data.splits.train) {
            groups[data.dataset->instance_ids[i]].push_back(i);
        }
        for (const auto& [id, members] : groups) {
            Tensor y = columns_of(data.dataset->Y, members);
            Tensor mask = columns_of(data.dataset->mask, members);
            Tensor x = columns_of(data.design.X, members);
            out.group_epsilon.emplace(id, aggregate_with_model(out.model, y, mask, x));
        }
    }
    return out;
}

namespace {

Tensor as_matrix(const Tensor& x) {
    return x.ndim() == 1 ? x.reshaped({x.rows(), 1}) : x;
}

Tensor decode_latents(const LmmVaeModel& model, const Tensor& z, const Tensor& x) {
    Tensor dec_in = model.cfg.variant == ModelVariant::cvae ? vstack({&z, &x}) : z;
    return mlp_eval(model.decoder, dec_in);
}

}  // namespace

Generated conditional_generate(const FittedModel& fitted, const Tensor& x, GenMode mode,
                               std::size_t n_samples, Rng* rng,
                               const GaussianPosterior* group_epsilon) {
    const LmmVaeModel& model = fitted.model;
    bool vector_input = x.ndim() == 1;
    Tensor xm = as_matrix(x);
    std::size_t q_dim = model.cfg.variant == ModelVariant::vae ? xm.rows() : model.covariate_dim;
    if ((model.cfg.uses_lmm_prior() || model.cfg.variant == ModelVariant::cvae) &&
        xm.rows() != q_dim) {
        throw std::invalid_argument("conditional_generate: x has wrong covariate dimension");
    }
    std::size_t n = xm.cols(), l_dim = model.cfg.latent_dim;
    if (model.cfg.variant == ModelVariant::slmm && group_epsilon == nullptr) {
        throw std::invalid_argument(
            "conditional_generate: slmm needs a group epsilon (none supplied or estimable)");
    }

    Tensor z_mean = Tensor::zeros({l_dim, n});
    if (model.cfg.uses_lmm_prior()) {
        for (std::size_t c = 0; c < n; ++c) {
            for (std::size_t l = 0; l < l_dim; ++l) {
                double s = 0.0;
                for (std::size_t q = 0; q < model.covariate_dim; ++q) {
                    s += model.A_mean.at(l, q) * xm.at(q, c);
                }
                if (model.cfg.variant == ModelVariant::slmm) s += group_epsilon->mu[l];
                z_mean.at(l, c) = s;
            }
        }
    }

    Generated out;
    if (mode == GenMode::mean) {
        out.z = z_mean;
        out.y = decode_latents(model, z_mean, xm);
    } else {
        if (n_samples == 0) throw std::invalid_argument("conditional_generate: n_samples >= 1");
        if (rng == nullptr) throw std::invalid_argument("conditional_generate: sample mode needs an rng");
        double sigma_z = model.sigma_z_value();
        Tensor y_acc;
        Tensor z_acc = Tensor::zeros({l_dim, n});
        for (std::size_t s = 0; s < n_samples; ++s) {
            Tensor z({l_dim, n});
            Tensor a_draw = model.A_mean;
            if (model.cfg.uses_lmm_prior() && model.cfg.a_mode == AMode::bayes) {
                for (std::size_t i = 0; i < a_draw.size(); ++i) {
                    a_draw[i] += std::sqrt(std::exp(model.A_log_var[i])) * rng->normal();
                }
            }
            for (std::size_t c = 0; c < n; ++c) {
                for (std::size_t l = 0; l < l_dim; ++l) {
                    double m = 0.0;
                    if (model.cfg.uses_lmm_prior()) {
                        for (std::size_t q = 0; q < model.covariate_dim; ++q) {
                            m += a_draw.at(l, q) * xm.at(q, c);
                        }
                    }
                    if (model.cfg.variant == ModelVariant::slmm) {
                        m += group_epsilon->mu[l] +
                             std::sqrt(group_epsilon->var[l]) * rng->normal();
                    } else {
                        m += sigma_z * rng->normal();
                    }
                    z.at(l, c) = m;
                }
            }
            Tensor y = decode_latents(model, z, xm);
            if (s == 0) {
                y_acc = y;
            } else {
                for (std::size_t i = 0; i < y_acc.size(); ++i) y_acc[i] += y[i];
            }
            for (std::size_t i = 0; i < z_acc.size(); ++i) z_acc[i] += z[i];
        }
        for (auto& v : y_acc.data()) v /= static_cast<double>(n_samples);
        for (auto& v : z_acc.data()) v /= static_cast<double>(n_samples);
        out.y = y_acc;
        out.z = z_acc;
    }
    if (vector_input) {
        out.y = out.y.reshaped({out.y.rows()});
        out.z = out.z.reshaped({out.z.rows()});
    }
    return out;
}

Tensor encode_means(const FittedModel& fitted, const Tensor& y, const Tensor& mask,
                    const Tensor& x) {
    const LmmVaeModel& model = fitted.model;
    Batch b;
    b.Y = as_matrix(y);
    b.mask = as_matrix(mask);
    b.X = as_matrix(x);
    b.obs.resize(b.Y.cols());
    Tensor enc_out = mlp_eval(model.encoder, encoder_input(model, b));
    auto [m0, m1] = model.encoder.spec.head_range("mu");
    Tensor mus({m1 - m0, b.Y.cols()});
    for (std::size_t c = 0; c < b.Y.cols(); ++c) {
        for (std::size_t r = m0; r < m1; ++r) mus.at(r - m0, c) = enc_out.at(r, c);
    }
    return mus;
}

Tensor reconstruct(const FittedModel& fitted, const Tensor& y, const Tensor& mask,
                   const Tensor& x) {
    Tensor mus = encode_means(fitted, y, mask, x);
    return decode_latents(fitted.model, mus, as_matrix(x));
}

GaussianPosterior estimate_group_epsilon(const FittedModel& fitted, const Tensor& y,
                                         const Tensor& mask, const Tensor& x) {
    if (as_matrix(y).cols() < 2) {
        throw std::invalid_argument("estimate_group_epsilon: group too small for variance estimate");
    }
    return aggregate_with_model(fitted.model, as_matrix(y), as_matrix(mask), as_matrix(x));
}

}  // namespace lmmvae
