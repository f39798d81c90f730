#include "lmmvae/nets.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace lmmvae {

Activation activation_from_string(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "elu") return Activation::elu;
    if (s == "tanh") return Activation::tanh;
    throw std::invalid_argument("unknown activation '" + s + "'");
}

std::string to_string(Activation a) {
    switch (a) {
        case Activation::relu:
            return "relu";
        case Activation::elu:
            return "elu";
        case Activation::tanh:
            return "tanh";
    }
    return "?";
}

std::size_t MlpSpec::output_dim() const {
    std::size_t w = 0;
    for (const auto& [name, width] : heads) w += width;
    return w;
}

std::pair<std::size_t, std::size_t> MlpSpec::head_range(const std::string& name) const {
    std::size_t offset = 0;
    for (const auto& [head, width] : heads) {
        if (head == name) return {offset, offset + width};
        offset += width;
    }
    throw std::invalid_argument("mlp: no head named '" + name + "'");
}

void MlpSpec::validate() const {
    if (input_dim == 0) throw std::invalid_argument("mlp: input_dim must be positive");
    if (heads.empty()) throw std::invalid_argument("mlp: needs at least one output head");
    for (std::size_t w : hidden) {
        if (w == 0) throw std::invalid_argument("mlp: zero-width hidden layer");
    }
    if (output_dim() == 0) throw std::invalid_argument("mlp: zero-width output");
}

Mlp Mlp::init(MlpSpec spec, Rng& rng) {
    spec.validate();
    Mlp net;
    net.spec = std::move(spec);
    std::size_t fan_in = net.spec.input_dim;
    std::vector<std::size_t> widths = net.spec.hidden;
    widths.push_back(net.spec.output_dim());
    for (std::size_t out : widths) {
        double scale = std::sqrt(2.0 / static_cast<double>(fan_in + out));
        Tensor w = rng.draw_normal({out, fan_in});
        for (auto& v : w.data()) v *= scale;
        net.weights.push_back(std::move(w));
        net.biases.push_back(Tensor::zeros({out}));
        fan_in = out;
    }
    return net;
}

MlpVars stage_mlp(Tape& tape, const Mlp& net) {
    MlpVars vars;
    for (std::size_t i = 0; i < net.n_layers(); ++i) {
        vars.weights.push_back(tape.input(net.weights[i]));
        vars.biases.push_back(tape.input(net.biases[i]));
    }
    return vars;
}

MlpVars stage_mlp_const(Tape& tape, const Mlp& net) {
    MlpVars vars;
    for (std::size_t i = 0; i < net.n_layers(); ++i) {
        vars.weights.push_back(tape.constant(net.weights[i]));
        vars.biases.push_back(tape.constant(net.biases[i]));
    }
    return vars;
}

namespace {

Var apply_activation(Activation act, Var h) {
    switch (act) {
        case Activation::relu:
            return relu(h);
        case Activation::elu:
            return elu(h);
        case Activation::tanh:
            return tanh(h);
    }
    throw std::invalid_argument("mlp: unknown activation");
}

}  // namespace

Var mlp_forward(const MlpSpec& spec, const MlpVars& vars, Var input) {
    if (input.value().ndim() != 2 || input.value().rows() != spec.input_dim) {
        throw std::invalid_argument("mlp: input shape " + shape_str(input.value().shape()) +
                                    " does not match input_dim " + std::to_string(spec.input_dim));
    }
    Var h = input;
    for (std::size_t i = 0; i < vars.weights.size(); ++i) {
        h = add(matmul(vars.weights[i], h), vars.biases[i]);
        if (i + 1 < vars.weights.size()) h = apply_activation(spec.activation, h);
    }
    if (spec.sigmoid_output) h = sigmoid(h);
    return h;
}

Tensor mlp_eval(const Mlp& net, const Tensor& input) {
    Tape tape;
    MlpVars vars = stage_mlp_const(tape, net);
    Var out = mlp_forward(net.spec, vars, tape.constant(input));
    return out.value();
}

EncoderOutput encode(const MlpSpec& spec, const MlpVars& vars, Var y) {
    Var out = mlp_forward(spec, vars, y);
    auto [mu0, mu1] = spec.head_range("mu");
    auto [lv0, lv1] = spec.head_range("log_var");
    return {slice_rows(out, mu0, mu1), slice_rows(out, lv0, lv1)};
}

Var reparameterize(const EncoderOutput& out, Var noise) {
    return add(out.mu, mul(exp(smul(out.log_var, 0.5)), noise));
}

double gaussian_log_lik(const Tensor& y, const Tensor& y_hat, double sigma_y) {
    if (!y.same_shape(y_hat)) {
        throw std::invalid_argument("gaussian_log_lik: shape mismatch " + shape_str(y.shape()) +
                                    " vs " + shape_str(y_hat.shape()));
    }
    if (!(sigma_y > 0.0)) throw std::invalid_argument("gaussian_log_lik: sigma_y must be > 0");
    double s2 = sigma_y * sigma_y;
    double ll = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        double r = y[i] - y_hat[i];
        ll += -0.5 * std::log(2.0 * std::numbers::pi * s2) - r * r / (2.0 * s2);
    }
    return ll;
}

Var masked_gaussian_loglik(Var y_hat, const Tensor& y, const Tensor& mask, Var log_sigma_y) {
    if (!y.same_shape(y_hat.value()) || !mask.same_shape(y)) {
        throw std::invalid_argument("masked_gaussian_loglik: shape mismatch");
    }
    Tape& tape = *y_hat.tape;
    double n_obs = 0.0;
    for (double m : mask.data()) n_obs += m;
    Var resid = sub(tape.constant(y), y_hat);
    Var ssq = sum(mul(square(resid), tape.constant(mask)));
    Var quad = smul(mul(exp(smul(log_sigma_y, -2.0)), ssq), 0.5);
    Var norm = sadd(smul(log_sigma_y, -n_obs), -0.5 * n_obs * std::log(2.0 * std::numbers::pi));
    return sub(norm, quad);
}

}  // namespace lmmvae
