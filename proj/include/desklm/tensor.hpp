#pragma once

#include <cassert>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <vector>

namespace desklm {

// Dense row-major tensor. Rank 1 and 2 cover the whole engine; the
// checkpoint format allows higher ranks, so shape stays a vector.
template <typename T>
struct Tensor {
    std::vector<size_t> shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<size_t> s) : shape(std::move(s)) {
        data.assign(element_count(), T{});
    }
    Tensor(size_t rows, size_t cols) : Tensor(std::vector<size_t>{rows, cols}) {}
    Tensor(std::vector<size_t> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        assert(data.size() == element_count());
    }

    size_t element_count() const {
        size_t n = 1;
        for (size_t d : shape) n *= d;
        return shape.empty() ? 0 : n;
    }
    size_t rank() const { return shape.size(); }
    size_t rows() const { return shape.empty() ? 0 : shape[0]; }
    size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    T& operator()(size_t i, size_t j) { return data[i * cols() + j]; }
    const T& operator()(size_t i, size_t j) const { return data[i * cols() + j]; }
    T& operator[](size_t i) { return data[i]; }
    const T& operator[](size_t i) const { return data[i]; }

    T* row(size_t i) { return data.data() + i * cols(); }
    const T* row(size_t i) const { return data.data() + i * cols(); }

    std::span<T> flat() { return {data.data(), data.size()}; }
    std::span<const T> flat() const { return {data.data(), data.size()}; }

    void zero() { std::fill(data.begin(), data.end(), T{}); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

} // namespace desklm
