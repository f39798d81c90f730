#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace lmmvae {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);

/// Dense row-major tensor of 64-bit floats. Scalars are shape {1}.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double v);
    static Tensor zeros(Shape shape);
    static Tensor ones(Shape shape);
    static Tensor full(Shape shape, double v);

    const Shape& shape() const { return shape_; }
    std::size_t ndim() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }

    // 1-d tensors are treated as column vectors (rows = extent, cols = 1).
    std::size_t rows() const;
    std::size_t cols() const;

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& at(std::size_t r, std::size_t c);
    double at(std::size_t r, std::size_t c) const;

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    double item() const;
    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    bool all_finite() const;
    Tensor reshaped(Shape shape) const;

private:
    Shape shape_;
    std::vector<double> data_;
};

}  // namespace lmmvae
