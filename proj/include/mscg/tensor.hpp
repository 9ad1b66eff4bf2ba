#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <utility>
#include <vector>

#include "mscg/common.hpp"

namespace mscg {

// Dense row-major n-dimensional array. Rank-0 (shape {}) is a scalar.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() : shape{}, data(1, T(0)) {}

    explicit Tensor(Shape s) : shape(std::move(s)), data(static_cast<std::size_t>(shape_numel(shape)), T(0)) {}

    Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<std::int64_t>(data.size()) != shape_numel(shape)) {
            throw contract_violation("tensor data length " + std::to_string(data.size()) +
                                     " does not match shape " + shape_str(shape));
        }
    }

    static Tensor full(Shape s, T v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    std::int64_t rank() const { return static_cast<std::int64_t>(shape.size()); }
    std::int64_t extent(std::size_t axis) const { return shape[axis]; }

    T& at(std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    const T& at(std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

    T& at2(std::int64_t i, std::int64_t j) { return data[static_cast<std::size_t>(i * shape[1] + j)]; }
    const T& at2(std::int64_t i, std::int64_t j) const { return data[static_cast<std::size_t>(i * shape[1] + j)]; }

    T item() const {
        if (numel() != 1) throw contract_violation("item() on tensor of shape " + shape_str(shape));
        return data[0];
    }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    bool all_finite() const {
        for (T v : data) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    Tensor<T> reshaped(Shape s) const {
        if (shape_numel(s) != numel()) {
            throw contract_violation("reshape " + shape_str(shape) + " -> " + shape_str(s) + " changes element count");
        }
        return Tensor<T>(std::move(s), data);
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> d(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) d[i] = static_cast<U>(data[i]);
        return Tensor<U>(shape, std::move(d));
    }
};

// Lower median of all entries: sorted[(k-1)/2]. Errors on empty input.
template <typename T>
T median(const Tensor<T>& t) {
    if (t.numel() == 0) throw contract_violation("median of empty tensor");
    std::vector<T> v = t.data;
    std::sort(v.begin(), v.end());
    return v[(v.size() - 1) / 2];
}

// Broadcast of two shapes by the trailing-dimension rule.
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    const std::size_t ra = a.size(), rb = b.size();
    const std::size_t r = std::max(ra, rb);
    Shape out(r, 1);
    for (std::size_t i = 0; i < r; ++i) {
        const std::int64_t ea = (i < r - ra) ? 1 : a[i - (r - ra)];
        const std::int64_t eb = (i < r - rb) ? 1 : b[i - (r - rb)];
        if (ea != eb && ea != 1 && eb != 1) {
            throw contract_violation("shapes " + shape_str(a) + " and " + shape_str(b) + " are not broadcastable");
        }
        out[i] = std::max(ea, eb);
    }
    return out;
}

} // namespace mscg
