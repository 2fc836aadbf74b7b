#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "hmseg/error.hpp"

namespace hmseg {

// Dense row-major tensor. Rank is dynamic: volumes are (D,H,W), feature maps
// (C,D,H,W), dense-layer weights (out,in), vectors (n), scalars (1).
template <typename S>
struct Tensor {
    std::vector<int> shape;
    std::vector<S> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> sh) : shape(std::move(sh)), data(count(shape), S(0)) {}
    Tensor(std::vector<int> sh, std::vector<S> d) : shape(std::move(sh)), data(std::move(d)) {
        require(static_cast<int64_t>(data.size()) == count(shape), ErrClass::precondition,
                "tensor data size does not match shape");
    }

    static int64_t count(const std::vector<int>& sh) {
        int64_t n = 1;
        for (int d : sh) {
            require(d > 0, ErrClass::precondition, "tensor dims must be positive");
            n *= d;
        }
        return sh.empty() ? 0 : n;
    }

    static Tensor scalar(S v) { return Tensor({1}, {v}); }

    int64_t size() const { return static_cast<int64_t>(data.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(shape.size()); }

    S* ptr() { return data.data(); }
    const S* ptr() const { return data.data(); }

    S& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    const S& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    void fill(S v) { std::fill(data.begin(), data.end(), v); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

template <typename From, typename To>
Tensor<To> tensor_cast(const Tensor<From>& t) {
    Tensor<To> out;
    out.shape = t.shape;
    out.data.reserve(t.data.size());
    for (const From& v : t.data) out.data.push_back(To(v));
    return out;
}

}  // namespace hmseg
