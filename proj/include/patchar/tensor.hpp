// Copyright (C) 2026 The patchar Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "patchar/errors.hpp"
#include "patchar/rng.hpp"

namespace patchar {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
}

/// Dense row-major tensor. Most of the engine only needs 1-D and 2-D.
template <class T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(shape_size(shape), fill) {}
    Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
        if (data.size() != shape_size(shape)) throw ShapeError("tensor data does not match shape " + shape_str(shape));
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<T> values) {
        return Tensor({rows, cols}, std::vector<T>(values));
    }

    std::size_t size() const { return data.size(); }
    std::size_t rows() const { return shape.empty() ? 1 : shape.front(); }
    std::size_t cols() const { return shape.size() < 2 ? (shape.empty() ? 1 : shape[0]) : shape[1]; }

    T& operator()(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }
    T& operator[](std::size_t i) { return data[i]; }
    const T& operator[](std::size_t i) const { return data[i]; }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    bool all_finite() const {
        for (auto v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    bool operator==(const Tensor&) const = default;
};

template <class T>
Tensor<T> randn(Shape shape, T stddev, CounterRng& rng) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<T>(rng.normal()) * stddev;
    return t;
}

template <class T>
Tensor<T> uniform(Shape shape, T lo, T hi, CounterRng& rng) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data) v = lo + static_cast<T>(rng.uniform()) * (hi - lo);
    return t;
}

}  // namespace patchar
