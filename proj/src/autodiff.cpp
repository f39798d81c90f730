#include "lmmvae/autodiff.hpp"

#include <Eigen/Core>

#include <cmath>
#include <stdexcept>
#include <string>

namespace lmmvae {

namespace {

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
    throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) +
                                " and " + shape_str(b.shape()));
}

void check_same_tape(const char* op, Var a, Var b) {
    if (a.tape == nullptr || a.tape != b.tape) {
        throw std::invalid_argument(std::string(op) + ": operands live on different tapes");
    }
}

// How operand b lines up against operand a in an elementwise op.
enum class Bcast { same, b_scalar, a_scalar, b_column, a_column };

Bcast broadcast_kind(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() == b.shape()) return Bcast::same;
    if (b.size() == 1) return Bcast::b_scalar;
    if (a.size() == 1) return Bcast::a_scalar;
    bool a_mat = a.ndim() == 2;
    bool b_mat = b.ndim() == 2;
    if (a_mat && b.rows() == a.rows() && b.cols() == 1) return Bcast::b_column;
    if (b_mat && a.rows() == b.rows() && a.cols() == 1) return Bcast::a_column;
    shape_error(op, a, b);
}

// Value of operand `t` at flat position i of the result (result has the
// larger operand's shape).
inline double pick(const Tensor& t, Bcast kind, bool is_a, std::size_t i, std::size_t n_cols) {
    switch (kind) {
        case Bcast::same:
            return t[i];
        case Bcast::b_scalar:
            return is_a ? t[i] : t[0];
        case Bcast::a_scalar:
            return is_a ? t[0] : t[i];
        case Bcast::b_column:
            return is_a ? t[i] : t[i / n_cols];
        case Bcast::a_column:
            return is_a ? t[i / n_cols] : t[i];
    }
    return 0.0;  // unreachable
}

// Accumulates a full-shape gradient contribution into a (possibly
// broadcast) parent gradient.
void reduce_into(Tensor& parent_grad, const Tensor& full, Bcast kind, bool is_a,
                 std::size_t n_cols) {
    bool reduced_scalar = (kind == Bcast::b_scalar && !is_a) || (kind == Bcast::a_scalar && is_a);
    bool reduced_column = (kind == Bcast::b_column && !is_a) || (kind == Bcast::a_column && is_a);
    if (reduced_scalar) {
        double s = 0.0;
        for (double v : full.data()) s += v;
        parent_grad[0] += s;
    } else if (reduced_column) {
        for (std::size_t i = 0; i < full.size(); ++i) parent_grad[i / n_cols] += full[i];
    } else {
        for (std::size_t i = 0; i < full.size(); ++i) parent_grad[i] += full[i];
    }
}

struct BinaryPlan {
    Bcast kind;
    std::size_t n_cols;   // columns of the full-shape result
    const Tensor* big;    // operand carrying the result shape
};

BinaryPlan plan_binary(const char* op, const Tensor& a, const Tensor& b) {
    Bcast kind = broadcast_kind(op, a, b);
    const Tensor* big = (kind == Bcast::a_scalar || kind == Bcast::a_column) ? &b : &a;
    std::size_t n_cols = big->ndim() >= 2 ? big->cols() : 1;
    return {kind, n_cols, big};
}

}  // namespace

const Tensor& Var::value() const { return tape->value(id); }
const Tensor& Var::grad() const { return tape->grad(id); }

Var Tape::input(Tensor v) { return emplace(std::move(v), true, nullptr); }
Var Tape::constant(Tensor v) { return emplace(std::move(v), false, nullptr); }

Var Tape::emplace(Tensor value, bool needs_grad, std::function<void(Tape&)> backprop) {
    Node n;
    n.grad = Tensor::zeros(value.shape());
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
}

void Tape::backward(Var loss) {
    if (loss.tape != this) throw std::invalid_argument("backward: loss lives on another tape");
    if (value(loss.id).size() != 1) {
        throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                    shape_str(value(loss.id).shape()));
    }
    for (auto& n : nodes_) std::fill(n.grad.data().begin(), n.grad.data().end(), 0.0);
    nodes_[loss.id].grad[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.backprop && n.needs_grad) n.backprop(*this);
    }
}

#define LMMVAE_BINARY_OP(NAME, FWD, DDA, DDB)                                                   \
    Var NAME(Var a, Var b) {                                                                    \
        check_same_tape(#NAME, a, b);                                                           \
        Tape& t = *a.tape;                                                                      \
        const Tensor& av = a.value();                                                           \
        const Tensor& bv = b.value();                                                           \
        BinaryPlan plan = plan_binary(#NAME, av, bv);                                           \
        Tensor out(plan.big->shape());                                                          \
        for (std::size_t i = 0; i < out.size(); ++i) {                                          \
            double x = pick(av, plan.kind, true, i, plan.n_cols);                               \
            double y = pick(bv, plan.kind, false, i, plan.n_cols);                              \
            out[i] = (FWD);                                                                     \
        }                                                                                       \
        bool needs = t.node(a.id).needs_grad || t.node(b.id).needs_grad;                        \
        std::size_t aid = a.id, bid = b.id;                                                     \
        Bcast kind = plan.kind;                                                                 \
        std::size_t n_cols = plan.n_cols;                                                       \
        Var outv = t.emplace(std::move(out), needs, nullptr);                                   \
        std::size_t oid = outv.id;                                                              \
        t.node(oid).backprop = [aid, bid, oid, kind, n_cols](Tape& tp) {                        \
            const Tensor& g = tp.grad(oid);                                                     \
            const Tensor& av = tp.value(aid);                                                   \
            const Tensor& bv = tp.value(bid);                                                   \
            if (tp.node(aid).needs_grad) {                                                      \
                Tensor full(g.shape());                                                         \
                for (std::size_t i = 0; i < g.size(); ++i) {                                    \
                    double x = pick(av, kind, true, i, n_cols);                                 \
                    double y = pick(bv, kind, false, i, n_cols);                                \
                    (void)x;                                                                    \
                    (void)y;                                                                    \
                    full[i] = g[i] * (DDA);                                                     \
                }                                                                               \
                reduce_into(tp.node(aid).grad, full, kind, true, n_cols);                       \
            }                                                                                   \
            if (tp.node(bid).needs_grad) {                                                      \
                Tensor full(g.shape());                                                         \
                for (std::size_t i = 0; i < g.size(); ++i) {                                    \
                    double x = pick(av, kind, true, i, n_cols);                                 \
                    double y = pick(bv, kind, false, i, n_cols);                                \
                    (void)x;                                                                    \
                    (void)y;                                                                    \
                    full[i] = g[i] * (DDB);                                                     \
                }                                                                               \
                reduce_into(tp.node(bid).grad, full, kind, false, n_cols);                      \
            }                                                                                   \
        };                                                                                      \
        return outv;                                                                            \
    }

LMMVAE_BINARY_OP(add, x + y, 1.0, 1.0)
LMMVAE_BINARY_OP(sub, x - y, 1.0, -1.0)
LMMVAE_BINARY_OP(mul, x * y, y, x)

#undef LMMVAE_BINARY_OP

namespace {

template <typename F, typename DF>
Var unary_op(const char* op, Var a, F fwd, DF dfdx) {
    (void)op;
    Tape& t = *a.tape;
    const Tensor& av = a.value();
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
    Var outv = t.emplace(std::move(out), t.node(a.id).needs_grad, nullptr);
    std::size_t aid = a.id, oid = outv.id;
    t.node(oid).backprop = [aid, oid, dfdx](Tape& tp) {
        if (!tp.node(aid).needs_grad) return;
        const Tensor& g = tp.grad(oid);
        const Tensor& x = tp.value(aid);
        const Tensor& y = tp.value(oid);
        Tensor& ga = tp.node(aid).grad;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(x[i], y[i]);
    };
    return outv;
}

}  // namespace

Var neg(Var a) {
    return unary_op("neg", a, [](double x) { return -x; },
                    [](double, double) { return -1.0; });
}

Var smul(Var a, double c) {
    return unary_op("smul", a, [c](double x) { return c * x; },
                    [c](double, double) { return c; });
}

Var sadd(Var a, double c) {
    return unary_op("sadd", a, [c](double x) { return x + c; },
                    [](double, double) { return 1.0; });
}

Var exp(Var a) {
    return unary_op("exp", a, [](double x) { return std::exp(x); },
                    [](double, double y) { return y; });
}

Var log(Var a) {
    return unary_op("log", a, [](double x) { return std::log(x); },
                    [](double x, double) { return 1.0 / x; });
}

Var sqrt(Var a) {
    return unary_op("sqrt", a, [](double x) { return std::sqrt(x); },
                    [](double, double y) { return 0.5 / y; });
}

Var square(Var a) {
    return unary_op("square", a, [](double x) { return x * x; },
                    [](double x, double) { return 2.0 * x; });
}

Var tanh(Var a) {
    return unary_op("tanh", a, [](double x) { return std::tanh(x); },
                    [](double, double y) { return 1.0 - y * y; });
}

Var relu(Var a) {
    return unary_op("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
                    [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var elu(Var a) {
    return unary_op("elu", a, [](double x) { return x > 0.0 ? x : std::expm1(x); },
                    [](double x, double y) { return x > 0.0 ? 1.0 : y + 1.0; });
}

Var sigmoid(Var a) {
    return unary_op("sigmoid", a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                    [](double, double y) { return y * (1.0 - y); });
}

Var matmul(Var a, Var b) {
    check_same_tape("matmul", a, b);
    Tape& t = *a.tape;
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.ndim() != 2 || bv.ndim() != 2 || av.cols() != bv.rows()) {
        shape_error("matmul", av, bv);
    }
    std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
    Tensor out({m, n});
    {
        ConstMatMap A(av.data().data(), m, k);
        ConstMatMap B(bv.data().data(), k, n);
        MatMap C(out.data().data(), m, n);
        C.noalias() = A * B;
    }
    bool needs = t.node(a.id).needs_grad || t.node(b.id).needs_grad;
    Var outv = t.emplace(std::move(out), needs, nullptr);
    std::size_t aid = a.id, bid = b.id, oid = outv.id;
    t.node(oid).backprop = [aid, bid, oid, m, k, n](Tape& tp) {
        ConstMatMap G(tp.grad(oid).data().data(), m, n);
        if (tp.node(aid).needs_grad) {
            ConstMatMap B(tp.value(bid).data().data(), k, n);
            MatMap GA(tp.node(aid).grad.data().data(), m, k);
            GA.noalias() += G * B.transpose();
        }
        if (tp.node(bid).needs_grad) {
            ConstMatMap A(tp.value(aid).data().data(), m, k);
            MatMap GB(tp.node(bid).grad.data().data(), k, n);
            GB.noalias() += A.transpose() * G;
        }
    };
    return outv;
}

namespace {

Var reduce_op(Var a, double scale) {
    Tape& t = *a.tape;
    const Tensor& av = a.value();
    double s = 0.0;
    for (double v : av.data()) s += v;
    Var outv = t.emplace(Tensor::scalar(s * scale), t.node(a.id).needs_grad, nullptr);
    std::size_t aid = a.id, oid = outv.id;
    t.node(oid).backprop = [aid, oid, scale](Tape& tp) {
        if (!tp.node(aid).needs_grad) return;
        double g = tp.grad(oid)[0] * scale;
        Tensor& ga = tp.node(aid).grad;
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    };
    return outv;
}

}  // namespace

Var sum(Var a) { return reduce_op(a, 1.0); }

Var mean(Var a) { return reduce_op(a, 1.0 / static_cast<double>(a.value().size())); }

Var slice_rows(Var a, std::size_t row_begin, std::size_t row_end) {
    Tape& t = *a.tape;
    const Tensor& av = a.value();
    if (av.ndim() != 2 || row_begin >= row_end || row_end > av.rows()) {
        throw std::invalid_argument("slice_rows: bad range [" + std::to_string(row_begin) + ", " +
                                    std::to_string(row_end) + ") for shape " +
                                    shape_str(av.shape()));
    }
    std::size_t n = av.cols();
    Tensor out({row_end - row_begin, n});
    std::copy(av.data().begin() + static_cast<std::ptrdiff_t>(row_begin * n),
              av.data().begin() + static_cast<std::ptrdiff_t>(row_end * n), out.data().begin());
    Var outv = t.emplace(std::move(out), t.node(a.id).needs_grad, nullptr);
    std::size_t aid = a.id, oid = outv.id;
    t.node(oid).backprop = [aid, oid, row_begin, n](Tape& tp) {
        if (!tp.node(aid).needs_grad) return;
        const Tensor& g = tp.grad(oid);
        Tensor& ga = tp.node(aid).grad;
        for (std::size_t i = 0; i < g.size(); ++i) ga[row_begin * n + i] += g[i];
    };
    return outv;
}

Var concat_rows(Var a, Var b) {
    check_same_tape("concat_rows", a, b);
    Tape& t = *a.tape;
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.ndim() != 2 || bv.ndim() != 2 || av.cols() != bv.cols()) {
        shape_error("concat_rows", av, bv);
    }
    Tensor out({av.rows() + bv.rows(), av.cols()});
    std::copy(av.data().begin(), av.data().end(), out.data().begin());
    std::copy(bv.data().begin(), bv.data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(av.size()));
    bool needs = t.node(a.id).needs_grad || t.node(b.id).needs_grad;
    Var outv = t.emplace(std::move(out), needs, nullptr);
    std::size_t aid = a.id, bid = b.id, oid = outv.id, a_sz = av.size();
    t.node(oid).backprop = [aid, bid, oid, a_sz](Tape& tp) {
        const Tensor& g = tp.grad(oid);
        if (tp.node(aid).needs_grad) {
            Tensor& ga = tp.node(aid).grad;
            for (std::size_t i = 0; i < a_sz; ++i) ga[i] += g[i];
        }
        if (tp.node(bid).needs_grad) {
            Tensor& gb = tp.node(bid).grad;
            for (std::size_t i = a_sz; i < g.size(); ++i) gb[i - a_sz] += g[i];
        }
    };
    return outv;
}

Var broadcast_cols(Var a, std::size_t n_cols) {
    Tape& t = *a.tape;
    const Tensor& av = a.value();
    if (av.cols() != 1) {
        throw std::invalid_argument("broadcast_cols: operand must be a column, got " +
                                    shape_str(av.shape()));
    }
    std::size_t m = av.rows();
    Tensor out({m, n_cols});
    for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < n_cols; ++c) out[r * n_cols + c] = av[r];
    }
    Var outv = t.emplace(std::move(out), t.node(a.id).needs_grad, nullptr);
    std::size_t aid = a.id, oid = outv.id;
    t.node(oid).backprop = [aid, oid, m, n_cols](Tape& tp) {
        if (!tp.node(aid).needs_grad) return;
        const Tensor& g = tp.grad(oid);
        Tensor& ga = tp.node(aid).grad;
        for (std::size_t r = 0; r < m; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < n_cols; ++c) s += g[r * n_cols + c];
            ga[r] += s;
        }
    };
    return outv;
}

}  // namespace lmmvae
