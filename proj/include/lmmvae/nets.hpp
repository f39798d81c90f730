#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "lmmvae/autodiff.hpp"
#include "lmmvae/rng.hpp"
#include "lmmvae/tensor.hpp"

namespace lmmvae {

enum class Activation { relu, elu, tanh };

Activation activation_from_string(const std::string& s);
std::string to_string(Activation a);

/// Feedforward network spec: hidden widths, a final layer split into named
/// heads, and an optional sigmoid squashing the final output (decoder means
/// for data living in [0, 1]).
struct MlpSpec {
    std::size_t input_dim = 0;
    std::vector<std::size_t> hidden;
    std::vector<std::pair<std::string, std::size_t>> heads;  // final layer slices
    Activation activation = Activation::elu;
    bool sigmoid_output = false;

    std::size_t output_dim() const;
    std::pair<std::size_t, std::size_t> head_range(const std::string& name) const;
    void validate() const;
};

struct Mlp {
    MlpSpec spec;
    std::vector<Tensor> weights;  // [layer] out x in
    std::vector<Tensor> biases;   // [layer] out

    /// Glorot-normal weights, zero biases; consumes the rng sequentially.
    static Mlp init(MlpSpec spec, Rng& rng);

    std::size_t n_layers() const { return weights.size(); }
};

/// Per-tape handles for one Mlp's parameters, in parameter order
/// (w0, b0, w1, b1, ...).
struct MlpVars {
    std::vector<Var> weights;
    std::vector<Var> biases;
};

/// Registers the network's parameters on the tape as differentiable inputs.
MlpVars stage_mlp(Tape& tape, const Mlp& net);

/// Same layout but registered as constants (evaluation passes).
MlpVars stage_mlp_const(Tape& tape, const Mlp& net);

/// Forward pass on a batch (input_dim x batch). Activations between layers,
/// none on the final layer except the optional output sigmoid.
Var mlp_forward(const MlpSpec& spec, const MlpVars& vars, Var input);

/// Pure evaluation (no gradients), same arithmetic as mlp_forward.
Tensor mlp_eval(const Mlp& net, const Tensor& input);

struct EncoderOutput {
    Var mu;
    Var log_var;
};

/// Runs an encoder with "mu" / "log_var" heads on a batch.
EncoderOutput encode(const MlpSpec& spec, const MlpVars& vars, Var y);

/// z = mu + exp(log_var / 2) o noise.
Var reparameterize(const EncoderOutput& out, Var noise);

/// sum_d [ -log(2 pi sigma_y^2)/2 - (y_d - y_hat_d)^2 / (2 sigma_y^2) ]
double gaussian_log_lik(const Tensor& y, const Tensor& y_hat, double sigma_y);

/// Graph form over a batch, restricted to observed entries:
///   -n_obs * (log(2 pi)/2 + s) - exp(-2 s) * sum(mask o (y - y_hat)^2) / 2,
/// with s = log sigma_y (a scalar Var so it may be learnable).
Var masked_gaussian_loglik(Var y_hat, const Tensor& y, const Tensor& mask, Var log_sigma_y);

}  // namespace lmmvae
