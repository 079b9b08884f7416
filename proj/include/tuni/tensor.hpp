#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "tuni/errors.hpp"
#include "tuni/rng.hpp"

namespace tuni {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

/// Row-major strides, innermost axis contiguous.
inline std::vector<std::int64_t> shape_strides(const Shape& s) {
    std::vector<std::int64_t> st(s.size(), 1);
    for (int i = int(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
    return st;
}

/// Dense N-dimensional array. Image tensors are canonical row-major N x C x H x W.
/// Value semantics; `grad` is filled by Graph::backward for bound leaves.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;
    bool requires_grad = false;
    std::vector<T> grad;

    Tensor() = default;

    explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)) {
        for (int d : shape)
            if (d <= 0) throw DimensionError("tensor dims must be positive, got " + shape_str(shape));
        data.assign(std::size_t(shape_numel(shape)), fill);
    }

    Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
        if (std::int64_t(data.size()) != shape_numel(shape))
            throw DimensionError("data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s), T(0)); }
    static Tensor full(Shape s, T v) { return Tensor(std::move(s), v); }

    static Tensor uniform(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
        Tensor t(std::move(s));
        for (auto& v : t.data) v = T(rng.uniform(lo, hi));
        return t;
    }

    std::int64_t numel() const { return std::int64_t(data.size()); }
    int rank() const { return int(shape.size()); }
    int dim(int i) const { return shape[std::size_t(i)]; }

    /// Debug accessor; production paths use raw indexing.
    T& at(std::initializer_list<int> idx) {
        auto st = shape_strides(shape);
        std::int64_t off = 0;
        int i = 0;
        for (int v : idx) off += st[std::size_t(i++)] * v;
        return data[std::size_t(off)];
    }
    const T& at(std::initializer_list<int> idx) const {
        return const_cast<Tensor*>(this)->at(idx);
    }

    bool all_finite() const {
        for (const T& v : data)
            if (!std::isfinite(double(v))) return false;
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = U(data[i]);
        return out;
    }
};

template <typename T>
inline void ensure_finite(const Tensor<T>& t, const char* op) {
    if (!t.all_finite())
        throw NumericError(std::string("non-finite value produced by op '") + op + "'");
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

/// True when `b` broadcasts over `a`: right-aligned, every b-dim is 1 or equals a's.
inline bool broadcastable_over(const Shape& b, const Shape& a) {
    if (b.size() > a.size()) return false;
    std::size_t off = a.size() - b.size();
    for (std::size_t i = 0; i < b.size(); ++i)
        if (b[i] != 1 && b[i] != a[off + i]) return false;
    return true;
}

/// Strides for reading `b` while iterating `a`'s index space (0 on broadcast axes).
inline std::vector<std::int64_t> broadcast_strides(const Shape& b, const Shape& a) {
    std::vector<std::int64_t> st(a.size(), 0);
    auto bst = shape_strides(b);
    std::size_t off = a.size() - b.size();
    for (std::size_t i = 0; i < b.size(); ++i)
        if (b[i] != 1) st[off + i] = bst[i];
    return st;
}

} // namespace tuni
