#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "sgla/common.hpp"

namespace sgla {

/// Dense row-major tensor of float or double. Image tensors use the
/// [batch, channel, height, width] axis order. The buffer length always
/// equals the product of the extents and every extent is at least 1.
template <typename T>
class Tensor {
    static_assert(std::is_floating_point_v<T>, "Tensor holds float or double");

public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
        data_.assign(checked_numel(shape_), T{0});
    }

    Tensor(std::vector<std::size_t> shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (checked_numel(shape_) != data_.size()) {
            throw ShapeError("tensor: buffer length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_string(shape_));
        }
    }

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<std::size_t> shape, T value) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    static Tensor scalar(T value) { return Tensor({1}, {value}); }

    bool empty() const { return data_.empty(); }
    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const { return data_.size(); }
    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& operator[](std::size_t flat) { return data_[flat]; }
    const T& operator[](std::size_t flat) const { return data_[flat]; }

    template <typename... Is>
    T& at(Is... indices) {
        return data_[flat_index(indices...)];
    }

    template <typename... Is>
    const T& at(Is... indices) const {
        return data_[flat_index(indices...)];
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.size());
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return Tensor<U>(shape_, std::move(out));
    }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    static std::string shape_string(const std::vector<std::size_t>& shape) {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
        os << "]";
        return os.str();
    }

private:
    static std::size_t checked_numel(const std::vector<std::size_t>& shape) {
        if (shape.empty()) throw ShapeError("tensor: shape must have at least one axis");
        std::size_t n = 1;
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (shape[i] == 0) {
                throw ShapeError("tensor: extent of axis " + std::to_string(i) + " must be >= 1");
            }
            n *= shape[i];
        }
        return n;
    }

    template <typename... Is>
    std::size_t flat_index(Is... indices) const {
        const std::size_t idx[] = {static_cast<std::size_t>(indices)...};
        const std::size_t n = sizeof...(Is);
        std::size_t flat = 0;
        for (std::size_t k = 0; k < n; ++k) flat = flat * shape_[k] + idx[k];
        return flat;
    }

    std::vector<std::size_t> shape_;
    std::vector<T> data_;
};

}  // namespace sgla
