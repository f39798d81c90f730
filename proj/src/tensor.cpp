#include "lmmvae/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace lmmvae {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    os << ")";
    return os.str();
}

namespace {
std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}
}  // namespace

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_)) {
        throw std::invalid_argument("tensor: data length " + std::to_string(data_.size()) +
                                    " does not match shape " + shape_str(shape_));
    }
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }
Tensor Tensor::zeros(Shape shape) { return Tensor(std::move(shape)); }
Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
}

std::size_t Tensor::rows() const {
    if (ndim() == 1 || ndim() == 2) return shape_[0];
    throw std::invalid_argument("tensor: rows() needs a 1-d or 2-d tensor, got " + shape_str(shape_));
}

std::size_t Tensor::cols() const {
    if (ndim() == 1) return 1;
    if (ndim() == 2) return shape_[1];
    throw std::invalid_argument("tensor: cols() needs a 1-d or 2-d tensor, got " + shape_str(shape_));
}

double& Tensor::at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
double Tensor::at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

double Tensor::item() const {
    if (size() != 1) {
        throw std::invalid_argument("tensor: item() on non-scalar of shape " + shape_str(shape_));
    }
    return data_[0];
}

bool Tensor::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != size()) {
        throw std::invalid_argument("tensor: cannot reshape " + shape_str(shape_) + " to " +
                                    shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
}

}  // namespace lmmvae
