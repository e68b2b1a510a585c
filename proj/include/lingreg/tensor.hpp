// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensor used as the carrier for activations, parameters and
// their gradients.

#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace lingreg {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)), values_(shape_numel(shape_), T{0}) {
        validate_shape();
    }

    Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), values_(std::move(values)) {
        validate_shape();
        if (values_.size() != shape_numel(shape_)) {
            throw std::invalid_argument("tensor of shape " + shape_str(shape_) + " given " +
                                        std::to_string(values_.size()) + " values");
        }
    }

    const Shape& shape() const { return shape_; }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const { return values_.size(); }

    std::vector<T>& values() { return values_; }
    const std::vector<T>& values() const { return values_; }
    T* data() { return values_.data(); }
    const T* data() const { return values_.data(); }
    T& operator[](std::size_t i) { return values_[i]; }
    const T& operator[](std::size_t i) const { return values_[i]; }

    bool has_grad() const { return !grad_.empty(); }
    std::vector<T>& grad() { return grad_; }
    const std::vector<T>& grad() const { return grad_; }
    void ensure_grad() {
        if (grad_.empty()) grad_.assign(values_.size(), T{0});
    }

private:
    void validate_shape() const {
        for (std::size_t d : shape_) {
            if (d == 0) throw std::invalid_argument("tensor dimensions must be positive, got " + shape_str(shape_));
        }
    }

    Shape shape_;
    std::vector<T> values_;
    std::vector<T> grad_;
};

}  // namespace lingreg
