#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "fedcondi/errors.hpp"

namespace fedcondi {

// Dense row-major tensor of 64-bit floats. Value semantics throughout.
class Tensor {
public:
    Tensor() = default;

    Tensor(std::vector<std::int64_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (numel_of(shape_) != static_cast<std::int64_t>(data_.size())) {
            throw ShapeError("Tensor: shape/data length mismatch");
        }
    }

    static Tensor zeros(std::vector<std::int64_t> shape) {
        auto n = numel_of(shape);
        return Tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0));
    }

    static Tensor full(std::vector<std::int64_t> shape, double value) {
        auto n = numel_of(shape);
        return Tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value));
    }

    static Tensor scalar(double value) { return Tensor({1}, {value}); }

    static std::int64_t numel_of(const std::vector<std::int64_t>& shape) {
        std::int64_t n = 1;
        for (auto d : shape) {
            if (d < 0) throw ShapeError("Tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    const std::vector<std::int64_t>& shape() const { return shape_; }
    std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
    std::int64_t dim(std::size_t i) const { return shape_.at(i); }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    // Row-major element access for ranks 2 and 3.
    double& at(std::int64_t i, std::int64_t j) {
        return data_[static_cast<std::size_t>(i * shape_[1] + j)];
    }
    double at(std::int64_t i, std::int64_t j) const {
        return data_[static_cast<std::size_t>(i * shape_[1] + j)];
    }
    double& at(std::int64_t i, std::int64_t j, std::int64_t k) {
        return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
    }
    double at(std::int64_t i, std::int64_t j, std::int64_t k) const {
        return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    bool all_finite() const;

    // Reshape preserving the flat buffer; numel must match.
    Tensor reshaped(std::vector<std::int64_t> new_shape) const {
        if (numel_of(new_shape) != numel()) {
            throw ShapeError("Tensor::reshaped: numel mismatch " + shape_str() + " -> " +
                             shape_str(new_shape));
        }
        return Tensor(std::move(new_shape), data_);
    }

    std::string shape_str() const { return shape_str(shape_); }
    static std::string shape_str(const std::vector<std::int64_t>& s);

private:
    std::vector<std::int64_t> shape_;
    std::vector<double> data_;
};

}  // namespace fedcondi
