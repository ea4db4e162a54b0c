// Copyright (c) 2026, The RBDC Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensor. A plain value type: copies are deep, moves are cheap.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "rbdc/errors.hpp"

namespace rbdc {

using Shape = std::vector<std::size_t>;

enum class Precision { f32, f64 };

inline const char* to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

inline Precision precision_from_string(const std::string& s) {
    if (s == "f32") return Precision::f32;
    if (s == "f64") return Precision::f64;
    throw FormatError("unknown precision '" + s + "'");
}

inline std::size_t bytes_per_element(Precision p) { return p == Precision::f32 ? 4 : 8; }

template <typename T>
constexpr Precision precision_of() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "tensor scalar must be float or double");
    return std::is_same_v<T, float> ? Precision::f32 : Precision::f64;
}

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
    os << ')';
    return os.str();
}

template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
        check_shape();
    }

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_shape();
        if (data_.size() != shape_numel(shape_))
            throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                             shape_str(shape_));
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T{0}); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), T{1}); }
    static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

    // 2-D literal, row by row.
    static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r ? rows.begin()->size() : 0;
        std::vector<T> d;
        d.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c) throw ShapeError("ragged matrix literal");
            d.insert(d.end(), row.begin(), row.end());
        }
        return Tensor(Shape{r, c}, std::move(d));
    }

    static Tensor vector(std::initializer_list<T> values) {
        return Tensor(Shape{values.size()}, std::vector<T>(values));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    std::vector<T>& storage() noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    const T& at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

    T& at(std::size_t a, std::size_t b, std::size_t c, std::size_t d) {
        return data_[((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
    }
    const T& at(std::size_t a, std::size_t b, std::size_t c, std::size_t d) const {
        return data_[((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
    }

    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != size())
            throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        return Tensor(std::move(shape), data_);
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> d(data_.size());
        std::transform(data_.begin(), data_.end(), d.begin(), [](T v) { return static_cast<U>(v); });
        return Tensor<U>(shape_, std::move(d));
    }

    // Bit-level equality: distinguishes -0.0 from 0.0 and compares NaN payloads.
    bool bit_equal(const Tensor& other) const {
        return shape_ == other.shape_ &&
               (data_.empty() || std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(T)) == 0);
    }

    T max_abs_diff(const Tensor& other) const {
        if (shape_ != other.shape_)
            throw ShapeError("max_abs_diff shape mismatch " + shape_str(shape_) + " vs " + shape_str(other.shape_));
        T m = 0;
        for (std::size_t i = 0; i < data_.size(); ++i) m = std::max(m, std::abs(data_[i] - other.data_[i]));
        return m;
    }

    T max_abs() const {
        T m = 0;
        for (T v : data_) m = std::max(m, std::abs(v));
        return m;
    }

private:
    void check_shape() const {
        for (std::size_t d : shape_)
            if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape_));
    }

    Shape shape_;
    std::vector<T> data_;
};

template <typename T>
void require_finite(const Tensor<T>& t, const char* op) {
    if (!t.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op);
}

} // namespace rbdc
