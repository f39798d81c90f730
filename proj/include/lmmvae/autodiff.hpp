#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "lmmvae/tensor.hpp"

namespace lmmvae {

class Tape;

/// Handle to a node on a Tape. Cheap to copy.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    const Tensor& grad() const;
};

/// Reverse-mode autodiff over a dynamically grown operation list.
///
/// Ops append nodes in evaluation order, which is also a topological order,
/// so backward() is a single reverse sweep. Values are computed eagerly;
/// gradients live next to each node and are zero until backward() touches
/// them. Single-threaded by design.
class Tape {
public:
    struct Node {
        Tensor value;
        Tensor grad;
        bool needs_grad = false;
        std::function<void(Tape&)> backprop;  // empty for leaves
    };

    /// Differentiable leaf (parameter or input we want gradients for).
    Var input(Tensor v);
    /// Non-differentiable leaf (data, noise, masks).
    Var constant(Tensor v);

    const Tensor& value(std::size_t id) const { return nodes_[id].value; }
    const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }
    Node& node(std::size_t id) { return nodes_[id]; }

    /// Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
    /// ancestor. `loss` must be a scalar node of this tape.
    void backward(Var loss);

    std::size_t size() const { return nodes_.size(); }

    Var emplace(Tensor value, bool needs_grad, std::function<void(Tape&)> backprop);

private:
    std::vector<Node> nodes_;
};

// Elementwise binary ops accept equal shapes, a scalar on either side, or a
// column vector ({m} or m x 1) broadcast over the columns of an m x n matrix.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // Hadamard product

Var neg(Var a);
Var smul(Var a, double c);
Var sadd(Var a, double c);

Var matmul(Var a, Var b);  // strict 2-d

Var sum(Var a);   // -> scalar
Var mean(Var a);  // -> scalar

Var exp(Var a);
Var log(Var a);
Var sqrt(Var a);
Var square(Var a);
Var tanh(Var a);
Var relu(Var a);
Var elu(Var a);
Var sigmoid(Var a);

Var slice_rows(Var a, std::size_t row_begin, std::size_t row_end);
Var concat_rows(Var a, Var b);
Var broadcast_cols(Var a, std::size_t n_cols);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator-(Var a) { return neg(a); }
inline Var operator*(double c, Var a) { return smul(a, c); }
inline Var operator*(Var a, double c) { return smul(a, c); }

}  // namespace lmmvae
