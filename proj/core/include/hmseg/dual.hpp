#pragma once

#include <cmath>
#include <type_traits>

namespace hmseg {

// First-order dual number: v carries the value, t the directional derivative.
// Running the whole reverse-mode gradient computation on dual scalars yields
// exact Hessian-vector products (forward-over-reverse).
template <typename T>
struct DualT {
    T v = T(0);
    T t = T(0);

    DualT() = default;
    template <typename U, typename = std::enable_if_t<std::is_arithmetic_v<U>>>
    DualT(U value) : v(static_cast<T>(value)) {}  // NOLINT: implicit, mirrors the base type
    DualT(T value, T tangent) : v(value), t(tangent) {}

    DualT& operator+=(const DualT& o) {
        v += o.v;
        t += o.t;
        return *this;
    }
    DualT& operator-=(const DualT& o) {
        v -= o.v;
        t -= o.t;
        return *this;
    }
    DualT& operator*=(const DualT& o) {
        t = t * o.v + v * o.t;
        v *= o.v;
        return *this;
    }
    DualT& operator/=(const DualT& o) {
        t = (t * o.v - v * o.t) / (o.v * o.v);
        v /= o.v;
        return *this;
    }
};

template <typename T>
DualT<T> operator+(DualT<T> a, const DualT<T>& b) {
    return a += b;
}
template <typename T>
DualT<T> operator-(DualT<T> a, const DualT<T>& b) {
    return a -= b;
}
template <typename T>
DualT<T> operator*(DualT<T> a, const DualT<T>& b) {
    return a *= b;
}
template <typename T>
DualT<T> operator/(DualT<T> a, const DualT<T>& b) {
    return a /= b;
}
template <typename T>
DualT<T> operator-(const DualT<T>& a) {
    return {-a.v, -a.t};
}

template <typename T>
bool operator<(const DualT<T>& a, const DualT<T>& b) {
    return a.v < b.v;
}
template <typename T>
bool operator>(const DualT<T>& a, const DualT<T>& b) {
    return a.v > b.v;
}
template <typename T>
bool operator<=(const DualT<T>& a, const DualT<T>& b) {
    return a.v <= b.v;
}
template <typename T>
bool operator>=(const DualT<T>& a, const DualT<T>& b) {
    return a.v >= b.v;
}
template <typename T>
bool operator==(const DualT<T>& a, const DualT<T>& b) {
    return a.v == b.v;
}

template <typename T>
DualT<T> exp(const DualT<T>& x) {
    T e = std::exp(x.v);
    return {e, e * x.t};
}
template <typename T>
DualT<T> log(const DualT<T>& x) {
    return {std::log(x.v), x.t / x.v};
}
template <typename T>
DualT<T> sqrt(const DualT<T>& x) {
    T r = std::sqrt(x.v);
    return {r, x.t / (T(2) * r)};
}
template <typename T>
DualT<T> tanh(const DualT<T>& x) {
    T th = std::tanh(x.v);
    return {th, (T(1) - th * th) * x.t};
}
template <typename T>
DualT<T> fabs(const DualT<T>& x) {
    return x.v < T(0) ? DualT<T>{-x.v, -x.t} : x;
}
template <typename T>
bool isfinite(const DualT<T>& x) {
    return std::isfinite(x.v) && std::isfinite(x.t);
}

using Dual = DualT<double>;

// Scalar accessors usable in code templated over float / double / DualT.
inline double value_of(double x) { return x; }
inline double value_of(float x) { return static_cast<double>(x); }
template <typename T>
double value_of(const DualT<T>& x) {
    return static_cast<double>(x.v);
}

inline double tangent_of(double) { return 0.0; }
inline double tangent_of(float) { return 0.0; }
template <typename T>
double tangent_of(const DualT<T>& x) {
    return static_cast<double>(x.t);
}

}  // namespace hmseg
