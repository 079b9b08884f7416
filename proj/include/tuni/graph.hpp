#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tuni/errors.hpp"
#include "tuni/tensor.hpp"

namespace tuni {

template <typename T>
class Graph;

/// Handle to a node inside a Graph. Cheap to copy; only valid for the graph
/// that created it.
template <typename T>
struct Val {
    Graph<T>* g = nullptr;
    int id = -1;
};

/// Define-by-run reverse-mode tape. Ops execute eagerly and append a node with
/// a backward closure; backward() replays the tape in exact reverse append
/// order. Gradient accumulation is additive: a value consumed by k ops
/// receives the sum of the k contributions. A Graph is confined to the thread
/// that builds it.
template <typename T>
class Graph {
public:
    struct Node {
        Tensor<T> value;
        std::vector<T> grad;          // lazily allocated, zero-initialized
        bool needs_grad = false;
        Tensor<T>* binding = nullptr; // leaf write-back target
        std::function<void(Graph&)> backward;
        const char* op = "";
    };

    std::vector<Node> nodes;

    /// Binds an externally owned tensor. Repeated calls with the same address
    /// return the same node, so k uses accumulate into one gradient.
    Val<T> leaf(Tensor<T>& t) {
        auto it = leaf_ids_.find(&t);
        if (it != leaf_ids_.end()) return {this, it->second};
        ensure_finite(t, "leaf");
        int id = add_node(t, t.requires_grad, "leaf");
        nodes[std::size_t(id)].binding = &t;
        leaf_ids_.emplace(&t, id);
        return {this, id};
    }

    /// An owned constant; never receives gradient.
    Val<T> constant(Tensor<T> t) {
        ensure_finite(t, "constant");
        return {this, add_node(std::move(t), false, "constant")};
    }

    /// An owned input whose gradient is readable through grad_tensor().
    Val<T> input(Tensor<T> t, bool requires_grad = false) {
        ensure_finite(t, "input");
        return {this, add_node(std::move(t), requires_grad, "input")};
    }

    const Tensor<T>& value(Val<T> v) const { return check(v).value; }

    /// dLoss/dNode as a tensor (zeros if the node never received gradient).
    Tensor<T> grad_tensor(Val<T> v) const {
        const Node& n = check(v);
        Tensor<T> out(n.value.shape);
        if (!n.grad.empty()) out.data = n.grad;
        return out;
    }

    /// Reverse sweep from a scalar loss. Leaves bound via leaf() with
    /// requires_grad get their .grad filled (overwritten, not accumulated
    /// across separate backward calls; the tape is rebuilt per forward pass).
    void backward(Val<T> loss) {
        const Node& ln = check(loss);
        if (ln.value.numel() != 1)
            throw ContractError("backward requires a scalar loss, got shape " +
                                shape_str(ln.value.shape));
        if (backward_ran_)
            throw ContractError("backward already ran on this graph; rebuild the graph");
        backward_ran_ = true;
        gbuf(loss.id).assign(1, T(1));
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes[std::size_t(i)];
            if (!n.needs_grad || n.grad.empty() || !n.backward) continue;
            n.backward(*this);
        }
        for (Node& n : nodes) {
            if (n.binding && n.binding->requires_grad) {
                if (n.grad.empty())
                    n.binding->grad.assign(n.value.data.size(), T(0));
                else
                    n.binding->grad = n.grad;
            }
        }
    }

    bool backward_ran() const { return backward_ran_; }

    // --- builder interface used by op functions ---

    int add_node(Tensor<T> out, bool needs_grad, const char* op) {
        nodes.push_back(Node{std::move(out), {}, needs_grad, nullptr, nullptr, op});
        return int(nodes.size()) - 1;
    }

    /// Grad accumulator for a node, sized and zeroed on first touch.
    std::vector<T>& gbuf(int id) {
        Node& n = nodes[std::size_t(id)];
        if (n.grad.empty()) n.grad.assign(n.value.data.size(), T(0));
        return n.grad;
    }

    bool has_grad(int id) const { return !nodes[std::size_t(id)].grad.empty(); }
    const Tensor<T>& val(int id) const { return nodes[std::size_t(id)].value; }
    bool node_needs_grad(int id) const { return nodes[std::size_t(id)].needs_grad; }

    const Node& check(Val<T> v) const {
        if (v.g != this)
            throw ContractError("value belongs to a different (or stale) graph");
        if (v.id < 0 || v.id >= int(nodes.size()))
            throw ContractError("invalid graph node id");
        return nodes[std::size_t(v.id)];
    }

private:
    std::unordered_map<const Tensor<T>*, int> leaf_ids_;
    bool backward_ran_ = false;
};

namespace detail {

template <typename T>
Graph<T>& same_graph(Val<T> a, Val<T> b) {
    if (a.g == nullptr || a.g != b.g)
        throw ContractError("operands must come from the same graph");
    return *a.g;
}

// C[M,N] += opA[M,K] * opB[K,N].  ta: A stored as [K,M]; tb: B stored as [N,K].
template <typename T>
void gemm_acc(const T* A, const T* B, T* C, int M, int K, int N, bool ta, bool tb) {
    if (!ta && !tb) {
        for (int m = 0; m < M; ++m) {
            T* crow = C + std::int64_t(m) * N;
            const T* arow = A + std::int64_t(m) * K;
            for (int k = 0; k < K; ++k) {
                const T a = arow[k];
                const T* brow = B + std::int64_t(k) * N;
                for (int n = 0; n < N; ++n) crow[n] += a * brow[n];
            }
        }
    } else if (!ta && tb) {
        for (int m = 0; m < M; ++m) {
            const T* arow = A + std::int64_t(m) * K;
            T* crow = C + std::int64_t(m) * N;
            for (int n = 0; n < N; ++n) {
                const T* brow = B + std::int64_t(n) * K;
                T acc = T(0);
                for (int k = 0; k < K; ++k) acc += arow[k] * brow[k];
                crow[n] += acc;
            }
        }
    } else if (ta && !tb) {
        for (int k = 0; k < K; ++k) {
            const T* arow = A + std::int64_t(k) * M;
            const T* brow = B + std::int64_t(k) * N;
            for (int m = 0; m < M; ++m) {
                const T a = arow[m];
                T* crow = C + std::int64_t(m) * N;
                for (int n = 0; n < N; ++n) crow[n] += a * brow[n];
            }
        }
    } else {
        for (int m = 0; m < M; ++m) {
            T* crow = C + std::int64_t(m) * N;
            for (int n = 0; n < N; ++n) {
                const T* brow = B + std::int64_t(n) * K;
                T acc = T(0);
                for (int k = 0; k < K; ++k) acc += A[std::int64_t(k) * M + m] * brow[k];
                crow[n] += acc;
            }
        }
    }
}

inline Shape broadcast_batch(const Shape& a, const Shape& b) {
    Shape out(std::max(a.size(), b.size()), 1);
    for (std::size_t i = 0; i < out.size(); ++i) {
        int da = i < out.size() - a.size() ? 1 : a[i - (out.size() - a.size())];
        int db = i < out.size() - b.size() ? 1 : b[i - (out.size() - b.size())];
        if (da != db && da != 1 && db != 1)
            throw DimensionError("batch dims not broadcastable: " + shape_str(a) +
                                 " vs " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

/// Offset of operand batch index corresponding to flat output batch index.
inline std::int64_t map_batch(std::int64_t flat, const Shape& out_b, const Shape& op_b) {
    if (op_b.empty()) return 0;
    std::int64_t off = 0;
    auto ost = shape_strides(out_b);
    auto pst = shape_strides(op_b);
    std::size_t shift = out_b.size() - op_b.size();
    for (std::size_t i = 0; i < out_b.size(); ++i) {
        std::int64_t idx = flat / ost[i];
        flat -= idx * ost[i];
        if (i >= shift && op_b[i - shift] != 1) off += idx * pst[i - shift];
    }
    return off;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops (b broadcastable over a along singleton axes)
// ---------------------------------------------------------------------------

enum class EwKind { Add, Sub, Mul, Div, AbsDiff };

template <typename T>
Val<T> elementwise(Val<T> av, Val<T> bv, EwKind kind) {
    Graph<T>& g = detail::same_graph(av, bv);
    const Tensor<T>& a = g.value(av);
    const Tensor<T>& b = g.value(bv);
    const bool equal = same_shape(a.shape, b.shape);
    if (!equal && !broadcastable_over(b.shape, a.shape))
        throw DimensionError("elementwise: shape " + shape_str(b.shape) +
                             " not broadcastable over " + shape_str(a.shape));

    Tensor<T> out(a.shape);
    const std::int64_t n = a.numel();
    auto bstride = equal ? std::vector<std::int64_t>{} : broadcast_strides(b.shape, a.shape);
    auto astride = shape_strides(a.shape);

    auto apply = [kind](T x, T y) -> T {
        switch (kind) {
            case EwKind::Add: return x + y;
            case EwKind::Sub: return x - y;
            case EwKind::Mul: return x * y;
            case EwKind::Div: return x / y;
            case EwKind::AbsDiff: return std::abs(x - y);
        }
        return T(0);
    };

    std::vector<std::int64_t> bidx; // b offset per a element when broadcasting
    if (equal) {
        for (std::int64_t i = 0; i < n; ++i) out.data[std::size_t(i)] =
            apply(a.data[std::size_t(i)], b.data[std::size_t(i)]);
    } else {
        bidx.resize(std::size_t(n));
        Shape idx(a.shape.size(), 0);
        std::int64_t boff = 0;
        for (std::int64_t i = 0; i < n; ++i) {
            bidx[std::size_t(i)] = boff;
            out.data[std::size_t(i)] = apply(a.data[std::size_t(i)], b.data[std::size_t(boff)]);
            for (int d = int(a.shape.size()) - 1; d >= 0; --d) {
                boff += bstride[std::size_t(d)];
                if (++idx[std::size_t(d)] < a.shape[std::size_t(d)]) break;
                boff -= bstride[std::size_t(d)] * a.shape[std::size_t(d)];
                idx[std::size_t(d)] = 0;
            }
        }
    }
    ensure_finite(out, "elementwise");

    bool ng = g.node_needs_grad(av.id) || g.node_needs_grad(bv.id);
    int id = g.add_node(std::move(out), ng, "elementwise");
    if (ng) {
        int aid = av.id, bid = bv.id, oid = id;
        g.nodes[std::size_t(id)].backward = [aid, bid, oid, kind, bidx = std::move(bidx)](Graph<T>& gr) {
            const auto& go = gr.nodes[std::size_t(oid)].grad;
            const auto& A = gr.val(aid).data;
            const auto& B = gr.val(bid).data;
            const std::int64_t n = std::int64_t(go.size());
            const bool eq = bidx.empty();
            auto bat = [&](std::int64_t i) { return eq ? std::size_t(i) : std::size_t(bidx[std::size_t(i)]); };
            if (gr.node_needs_grad(aid)) {
                auto& ga = gr.gbuf(aid);
                for (std::int64_t i = 0; i < n; ++i) {
                    const T gz = go[std::size_t(i)];
                    switch (kind) {
                        case EwKind::Add: case EwKind::Sub: ga[std::size_t(i)] += gz; break;
                        case EwKind::Mul: ga[std::size_t(i)] += gz * B[bat(i)]; break;
                        case EwKind::Div: ga[std::size_t(i)] += gz / B[bat(i)]; break;
                        case EwKind::AbsDiff: {
                            const T d = A[std::size_t(i)] - B[bat(i)];
                            const T s = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0)); // sign(0) := 0
                            ga[std::size_t(i)] += gz * s;
                            break;
                        }
                    }
                }
            }
            if (gr.node_needs_grad(bid)) {
                auto& gb = gr.gbuf(bid);
                for (std::int64_t i = 0; i < n; ++i) {
                    const T gz = go[std::size_t(i)];
                    switch (kind) {
                        case EwKind::Add: gb[bat(i)] += gz; break;
                        case EwKind::Sub: gb[bat(i)] -= gz; break;
                        case EwKind::Mul: gb[bat(i)] += gz * A[std::size_t(i)]; break;
                        case EwKind::Div: {
                            const T bvv = B[bat(i)];
                            gb[bat(i)] -= gz * A[std::size_t(i)] / (bvv * bvv);
                            break;
                        }
                        case EwKind::AbsDiff: {
                            const T d = A[std::size_t(i)] - B[bat(i)];
                            const T s = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
                            gb[bat(i)] -= gz * s;
                            break;
                        }
                    }
                }
            }
        };
    }
    return {&g, id};
}

template <typename T> Val<T> add(Val<T> a, Val<T> b) { return elementwise(a, b, EwKind::Add); }
template <typename T> Val<T> sub(Val<T> a, Val<T> b) { return elementwise(a, b, EwKind::Sub); }
template <typename T> Val<T> mul(Val<T> a, Val<T> b) { return elementwise(a, b, EwKind::Mul); }
template <typename T> Val<T> div(Val<T> a, Val<T> b) { return elementwise(a, b, EwKind::Div); }
template <typename T> Val<T> absdiff(Val<T> a, Val<T> b) { return elementwise(a, b, EwKind::AbsDiff); }

/// y = alpha * x + beta
template <typename T>
Val<T> affine(Val<T> xv, T alpha, T beta) {
    Graph<T>& g = *xv.g;
    const Tensor<T>& x = g.value(xv);
    Tensor<T> out(x.shape);
    for (std::size_t i = 0; i < x.data.size(); ++i) out.data[i] = alpha * x.data[i] + beta;
    ensure_finite(out, "affine");
    bool ng = g.node_needs_grad(xv.id);
    int id = g.add_node(std::move(out), ng, "affine");
    if (ng) {
        int xid = xv.id, oid = id;
        g.nodes[std::size_t(id)].backward = [xid, oid, alpha](Graph<T>& gr) {
            const auto& go = gr.nodes[std::size_t(oid)].grad;
            auto& gx = gr.gbuf(xid);
            for (std::size_t i = 0; i < go.size(); ++i) gx[i] += alpha * go[i];
        };
    }
    return {&g, id};
}

// ---------------------------------------------------------------------------
// Unary activations
// ---------------------------------------------------------------------------

namespace detail {

template <typename T, typename Fwd, typename Bwd>
Val<T> unary_op(Val<T> xv, const char* name, Fwd fwd, Bwd dfdx) {
    Graph<T>& g = *xv.g;
    const Tensor<T>& x = g.value(xv);
    Tensor<T> out(x.shape);
    for (std::size_t i = 0; i < x.data.size(); ++i) out.data[i] = fwd(x.data[i]);
    ensure_finite(out, name);
    bool ng = g.node_needs_grad(xv.id);
    int id = g.add_node(std::move(out), ng, name);
    if (ng) {
        int xid = xv.id, oid = id;
        g.nodes[std::size_t(id)].backward = [xid, oid, dfdx](Graph<T>& gr) {
            const auto& go = gr.nodes[std::size_t(oid)].grad;
            const auto& X = gr.val(xid).data;
            const auto& Y = gr.val(oid).data;
            auto& gx = gr.gbuf(xid);
            for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * dfdx(X[i], Y[i]);
        };
    }
    return {&g, id};
}

} // namespace detail

template <typename T>
Val<T> relu(Val<T> x) {
    return detail::unary_op(x, "relu",
        [](T v) { return v > T(0) ? v : T(0); },
        [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Val<T> gelu(Val<T> x) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    return detail::unary_op(x, "gelu",
        [=](T v) { return T(0.5 * double(v) * (1.0 + std::erf(double(v) * inv_sqrt2))); },
        [=](T v, T) {
            const double xv = double(v);
            const double cdf = 0.5 * (1.0 + std::erf(xv * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * xv * xv);
            return T(cdf + xv * pdf);
        });
}

/// Saturated tails are clamped into the open interval so outputs stay
/// strictly inside (0,1) for every finite input.
template <typename T>
Val<T> sigmoid(Val<T> x) {
    return detail::unary_op(x, "sigmoid",
        [](T v) {
            T y;
            if (v >= T(0)) y = T(1) / (T(1) + T(std::exp(-double(v))));
            else {
                const T e = T(std::exp(double(v)));
                y = e / (T(1) + e);
            }
            const T hi = T(1) - std::numeric_limits<T>::epsilon() / T(2);
            return std::clamp(y, std::numeric_limits<T>::min(), hi);
        },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Val<T> sqrt_op(Val<T> x) {
    return detail::unary_op(x, "sqrt",
        [](T v) { return T(std::sqrt(double(v))); },
        [](T, T y) { return T(0.5) / y; });
}

// ---------------------------------------------------------------------------
// Matmul: a[..,M,K] x b[..,K,N] -> [..,M,N], leading dims broadcast
// ---------------------------------------------------------------------------

template <typename T>
Val<T> matmul(Val<T> av, Val<T> bv) {
    Graph<T>& g = detail::same_graph(av, bv);
    const Tensor<T>& a = g.value(av);
    const Tensor<T>& b = g.value(bv);
    if (a.rank() < 2 || b.rank() < 2)
        throw DimensionError("matmul requires rank >= 2 operands");
    const int M = a.shape[a.shape.size() - 2], K = a.shape.back();
    const int K2 = b.shape[b.shape.size() - 2], N = b.shape.back();
    if (K != K2)
        throw DimensionError("matmul inner dims disagree: " + shape_str(a.shape) +
                             " x " + shape_str(b.shape));
    Shape ab(a.shape.begin(), a.shape.end() - 2);
    Shape bb(b.shape.begin(), b.shape.end() - 2);
    Shape ob = detail::broadcast_batch(ab, bb);
    Shape oshape = ob;
    oshape.push_back(M);
    oshape.push_back(N);

    Tensor<T> out(oshape);
    const std::int64_t nbatch = shape_numel(ob);
    for (std::int64_t i = 0; i < nbatch; ++i) {
        const T* A = a.data.data() + detail::map_batch(i, ob, ab) * M * K;
        const T* B = b.data.data() + detail::map_batch(i, ob, bb) * K * N;
        detail::gemm_acc(A, B, out.data.data() + i * M * N, M, K, N, false, false);
    }
    ensure_finite(out, "matmul");

    bool ng = g.node_needs_grad(av.id) || g.node_needs_grad(bv.id);
    int id = g.add_node(std::move(out), ng, "matmul");
    if (ng) {
        int aid = av.id, bid = bv.id, oid = id;
        g.nodes[std::size_t(id)].backward = [aid, bid, oid, ab, bb, ob, M, K, N](Graph<T>& gr) {
            const auto& go = gr.nodes[std::size_t(oid)].grad;
            const auto& A = gr.val(aid).data;
            const auto& B = gr.val(bid).data;
            const std::int64_t nbatch = shape_numel(ob);
            if (gr.node_needs_grad(aid)) {
                auto& ga = gr.gbuf(aid);
                for (std::int64_t i = 0; i < nbatch; ++i) {
                    // dA = dC * B^T
                    detail::gemm_acc(go.data() + i * M * N,
                                     B.data() + detail::map_batch(i, ob, bb) * K * N,
                                     ga.data() + detail::map_batch(i, ob, ab) * M * K,
                                     M, N, K, false, true);
                }
            }
            if (gr.node_needs_grad(bid)) {
                auto& gb = gr.gbuf(bid);
                for (std::int64_t i = 0; i < nbatch; ++i) {
                    // dB = A^T * dC
                    detail::gemm_acc(A.data() + detail::map_batch(i, ob, ab) * M * K,
                                     go.data() + i * M * N,
                                     gb.data() + detail::map_batch(i, ob, bb) * K * N,
                                     K, M, N, true, false);
                }
            }
        };
    }
    return {&g, id};
}

// ---------------------------------------------------------------------------
// Softmax along an axis (max-shifted)
// ---------------------------------------------------------------------------

template <typename T>
Val<T> softmax(Val<T> xv, int axis) {
    Graph<T>& g = *xv.g;
    const Tensor<T>& x = g.value(xv);
    if (axis < 0 || axis >= x.rank())
        throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range");
    const std::int64_t len = x.shape[std::size_t(axis)];
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.shape[std::size_t(i)];
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.shape[std::size_t(i)];

    Tensor<T> out(x.shape);
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * len * inner + in;
            T mx = x.data[std::size_t(base)];
            for (std::int64_t j = 1; j < len; ++j)
                mx = std::max(mx, x.data[std::size_t(base + j * inner)]);
            T sum = T(0);
            for (std::int64_t j = 0; j < len; ++j) {
                T e = T(std::exp(double(x.data[std::size_t(base + j * inner)] - mx)));
                out.data[std::size_t(base + j * inner)] = e;
                sum += e;
            }
            for (std::int64_t j = 0; j < len; ++j)
                out.data[std::size_t(base + j * inner)] /= sum;
        }
    }
    ensure_finite(out, "softmax");

    bool ng = g.node_needs_grad(xv.id);
    int id = g.add_node(std::move(out), ng, "softmax");
    if (ng) {
        int xid = xv.id, oid = id;
        g.nodes[std::size_t(id)].backward = [xid, oid, outer, len, inner](Graph<T>& gr) {
            const auto& go = gr.nodes[std::size_t(oid)].grad;
            const auto& P = gr.val(oid).data;
            auto& gx = gr.gbuf(xid);
            for (std::int64_t o = 0; o < outer; ++o) {
                for (std::int64_t in = 0; in < inner; ++in) {
                    const std::int64_t base = o * len * inner + in;
                    T dot = T(0);
                    for (std::int64_t j = 0; j < len; ++j) {
                        const std::size_t k = std::size_t(base + j * inner);
                        dot += go[k] * P[k];
                    }
                    for (std::int64_t j = 0; j < len; ++j) {
                        const std::size_t k = std::size_t(base + j * inner);
                        gx[k] += P[k] * (go[k] - dot);
                    }
                }
            }
        };
    }
    return {&g, id};
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

enum class ReduceKind { Sum, Mean };

template <typename T>
Val<T> reduce(Val<T> xv, int axis, ReduceKind kind, bool keepdim = false) {
    Graph<T>& g = *xv.g;
    const Tensor<T>& x = g.value(xv);
    if (axis < 0 || axis >= x.rank())
        throw DimensionError("reduce: axis " + std::to_string(axis) + " out of range");
    const std::int64_t len = x.shape[std::size_t(axis)];
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.shape[std::size_t(i)];
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.shape[std::size_t(i)];

    Shape oshape;
    for (int i = 0; i < x.rank(); ++i) {
        if (i == axis) {
            if (keepdim) oshape.push_back(1);
        } else {
            oshape.push_back(x.shape[std::size_t(i)]);
        }
    }
    if (oshape.empty()) oshape.push_back(1);

    Tensor<T> out(oshape);
    const bool mean = kind == ReduceKind::Mean;
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            T acc = T(0);
            const std::int64_t base = o * len * inner + in;
            for (std::int64_t j = 0; j < len; ++j) acc += x.data[std::size_t(base + j * inner)];
            out.data[std::size_t(o * inner + in)] = mean ? acc / T(len) : acc;
        }
    }
    ensure_finite(out, "reduce");

    bool ng = g.node_needs_grad(xv.id);
    int id = g.add_node(std::move(out), ng, "reduce");
    if (ng) {
        int xid = xv.id, oid = id;
        g.nodes[std::size_t(id)].backward = [xid, oid, outer, len, inner, mean](Graph<T>& gr) {
            const auto& go = gr.nodes[std::size_t(oid)].grad;
            auto& gx = gr.gbuf(xid);
            for (std::int64_t o = 0; o < outer; ++o) {
                for (std::int64_t in = 0; in < inner; ++in) {
                    const T gz = mean ? go[std::size_t(o * inner + in)] / T(len)
                                      : go[std::size_t(o * inner + in)];
                    const std::int64_t base = o * len * inner + in;
                    for (std::int64_t j = 0; j < len; ++j)
                        gx[std::size_t(base + j * inner)] += gz;
                }
            }
        };
    }
    return {&g, id};
}

template <typename T>
Val<T> reduce_sum_all(Val<T> x) {
    Val<T> cur = x;
    while (x.g->value(cur).numel() > 1 || x.g->value(cur).rank() > 1)
        cur = reduce(cur, 0, ReduceKind::Sum, false);
    return cur;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
Val<T> reshape(Val<T> xv, Shape target) {
    Graph<T>& g = *xv.g;
    const Tensor<T>& x = g.value(xv);
    if (shape_numel(target) != x.numel())
        throw DimensionError("reshape: numel mismatch " + shape_str(x.shape) + " -> " +
                             shape_str(target));
    Tensor<T> out(target);
    out.data = x.data;
    bool ng = g.node_needs_grad(xv.id);
    int id = g.add_node(std::move(out), ng, "reshape");
    if (ng) {
        int xid = xv.id, oid = id;
        g.nodes[std::size_t(id)].backward = [xid, oid](Graph<T>& gr) {
            const auto& go = gr.nodes[std::size_t(oid)].grad;
            auto& gx = gr.gbuf(xid);
            for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
        };
    }
    return {&g, id};
}

template <typename T>
Val<T> transpose(Val<T> xv, int ax0, int ax1) {
    Graph<T>& g = *xv.g;
    const Tensor<T>& x = g.value(xv);
    if (ax0 < 0 || ax1 < 0 || ax0 >= x.rank() || ax1 >= x.rank())
        throw DimensionError("transpose: axis out of range");
    Shape oshape = x.shape;
    std::swap(oshape[std::size_t(ax0)], oshape[std::size_t(ax1)]);

    auto permute = [ax0, ax1](const std::vector<T>& src, std::vector<T>& dst,
                              const Shape& sshape, const Shape& dshape) {
        auto sst = shape_strides(sshape);
        std::swap(sst[std::size_t(ax0)], sst[std::size_t(ax1)]); // source strides in dst index space
        const std::int64_t n = shape_numel(dshape);
        Shape idx(dshape.size(), 0);
        std::int64_t soff = 0;
        for (std::int64_t i = 0; i < n; ++i) {
            dst[std::size_t(i)] = src[std::size_t(soff)];
            for (int d = int(dshape.size()) - 1; d >= 0; --d) {
                soff += sst[std::size_t(d)];
                if (++idx[std::size_t(d)] < dshape[std::size_t(d)]) break;
                soff -= sst[std::size_t(d)] * dshape[std::size_t(d)];
                idx[std::size_t(d)] = 0;
            }
        }
    };

    Tensor<T> out(oshape);
    permute(x.data, out.data, x.shape, oshape);
    const Shape xshape = x.shape; // copy before add_node may reallocate nodes
    bool ng = g.node_needs_grad(xv.id);
    int id = g.add_node(std::move(out), ng, "transpose");
    if (ng) {
        int xid = xv.id, oid = id;
        g.nodes[std::size_t(id)].backward = [xid, oid, ax0, ax1, oshape, xshape, permute](Graph<T>& gr) {
            const auto& go = gr.nodes[std::size_t(oid)].grad;
            std::vector<T> tmp(go.size());
            permute(go, tmp, oshape, xshape);
            auto& gx = gr.gbuf(xid);
            for (std::size_t i = 0; i < tmp.size(); ++i) gx[i] += tmp[i];
        };
    }
    return {&g, id};
}

template <typename T>
Val<T> concat(const std::vector<Val<T>>& parts, int axis) {
    if (parts.empty()) throw ContractError("concat: empty input list");
    Graph<T>& g = *parts[0].g;
    const Tensor<T>& first = g.value(parts[0]);
    if (axis < 0 || axis >= first.rank())
        throw DimensionError("concat: axis out of range");
    Shape oshape = first.shape;
    int total = 0;
    for (const auto& p : parts) {
        detail::same_graph(parts[0], p);
        const Tensor<T>& t = g.value(p);
        if (t.rank() != first.rank())
            throw DimensionError("concat: rank mismatch");
        for (int d = 0; d < t.rank(); ++d)
            if (d != axis && t.shape[std::size_t(d)] != first.shape[std::size_t(d)])
                throw DimensionError("concat: non-axis dims differ: " + shape_str(t.shape) +
                                     " vs " + shape_str(first.shape));
        total += t.shape[std::size_t(axis)];
    }
    oshape[std::size_t(axis)] = total;

    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= oshape[std::size_t(i)];
    for (int i = axis + 1; i < int(oshape.size()); ++i) inner *= oshape[std::size_t(i)];

    Tensor<T> out(oshape);
    std::vector<int> ids;
    std::vector<std::int64_t> spans;
    std::int64_t pos = 0;
    for (const auto& p : parts) {
        const Tensor<T>& t = g.value(p);
        const std::int64_t span = std::int64_t(t.shape[std::size_t(axis)]) * inner;
        for (std::int64_t o = 0; o < outer; ++o)
            std::memcpy(out.data.data() + o * total * inner + pos,
                        t.data.data() + o * span, std::size_t(span) * sizeof(T));
        ids.push_back(p.id);
        spans.push_back(span);
        pos += span;
    }

    bool ng = false;
    for (const auto& p : parts) ng = ng || g.node_needs_grad(p.id);
    int id = g.add_node(std::move(out), ng, "concat");
    if (ng) {
        int oid = id;
        std::int64_t tot_inner = std::int64_t(total) * inner;
        g.nodes[std::size_t(id)].backward = [ids, spans, oid, outer, tot_inner](Graph<T>& gr) {
            const auto& go = gr.nodes[std::size_t(oid)].grad;
            std::int64_t pos = 0;
            for (std::size_t pi = 0; pi < ids.size(); ++pi) {
                if (gr.node_needs_grad(ids[pi])) {
                    auto& gx = gr.gbuf(ids[pi]);
                    for (std::int64_t o = 0; o < outer; ++o) {
                        const T* src = go.data() + o * tot_inner + pos;
                        T* dst = gx.data() + o * spans[pi];
                        for (std::int64_t i = 0; i < spans[pi]; ++i) dst[i] += src[i];
                    }
                }
                pos += spans[pi];
            }
        };
    }
    return {&g, id};
}

/// Slice along an axis: indices [start, start+len).
template <typename T>
Val<T> slice(Val<T> xv, int axis, int start, int len) {
    Graph<T>& g = *xv.g;
    const Tensor<T>& x = g.value(xv);
    if (axis < 0 || axis >= x.rank()) throw DimensionError("slice: axis out of range");
    if (start < 0 || len <= 0 || start + len > x.shape[std::size_t(axis)])
        throw DimensionError("slice: range out of bounds");
    Shape oshape = x.shape;
    oshape[std::size_t(axis)] = len;
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.shape[std::size_t(i)];
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.shape[std::size_t(i)];
    const std::int64_t src_span = std::int64_t(x.shape[std::size_t(axis)]) * inner;
    const std::int64_t dst_span = std::int64_t(len) * inner;

    Tensor<T> out(oshape);
    for (std::int64_t o = 0; o < outer; ++o)
        std::memcpy(out.data.data() + o * dst_span,
                    x.data.data() + o * src_span + start * inner,
                    std::size_t(dst_span) * sizeof(T));

    bool ng = g.node_needs_grad(xv.id);
    int id = g.add_node(std::move(out), ng, "slice");
    if (ng) {
        int xid = xv.id, oid = id;
        g.nodes[std::size_t(id)].backward =
            [xid, oid, outer, inner, start, src_span, dst_span](Graph<T>& gr) {
                const auto& go = gr.nodes[std::size_t(oid)].grad;
                auto& gx = gr.gbuf(xid);
                for (std::int64_t o = 0; o < outer; ++o) {
                    const T* src = go.data() + o * dst_span;
                    T* dst = gx.data() + o * src_span + start * inner;
                    for (std::int64_t i = 0; i < dst_span; ++i) dst[i] += src[i];
                }
            };
    }
    return {&g, id};
}

// ---------------------------------------------------------------------------
// conv2d: x[N,Cin,H,W], weight[Cout,Cin/groups,kh,kw], bias[Cout]
// ---------------------------------------------------------------------------

template <typename T>
Val<T> conv2d(Val<T> xv, Val<T> wv, Val<T> bv, int stride, int pad, int groups) {
    Graph<T>& g = detail::same_graph(xv, wv);
    detail::same_graph(xv, bv);
    const Tensor<T>& x = g.value(xv);
    const Tensor<T>& w = g.value(wv);
    const Tensor<T>& b = g.value(bv);
    if (x.rank() != 4 || w.rank() != 4)
        throw DimensionError("conv2d expects 4-D input and weight");
    const int N = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int Cout = w.shape[0], Cpg = w.shape[1], kh = w.shape[2], kw = w.shape[3];
    if (groups <= 0 || Cin % groups != 0 || Cout % groups != 0 || Cpg != Cin / groups)
        throw DimensionError("conv2d: invalid group/channel combination (Cin=" +
                             std::to_string(Cin) + ", Cout=" + std::to_string(Cout) +
                             ", groups=" + std::to_string(groups) + ")");
    if (kh % 2 == 0 || kw % 2 == 0)
        throw DimensionError("conv2d: kernel sizes must be odd");
    if (b.numel() != Cout) throw DimensionError("conv2d: bias size must equal Cout");
    const int OH = (H + 2 * pad - kh) / stride + 1;
    const int OW = (W + 2 * pad - kw) / stride + 1;
    if (OH <= 0 || OW <= 0) throw DimensionError("conv2d: output would be empty");

    const int cout_pg = Cout / groups;
    Tensor<T> out({N, Cout, OH, OW});
    for (int n = 0; n < N; ++n) {
        for (int co = 0; co < Cout; ++co) {
            const int grp = co / cout_pg;
            T* oplane = out.data.data() + (std::int64_t(n) * Cout + co) * OH * OW;
            const T bias = b.data[std::size_t(co)];
            for (std::int64_t i = 0; i < std::int64_t(OH) * OW; ++i) oplane[i] = bias;
            for (int cig = 0; cig < Cpg; ++cig) {
                const int ci = grp * Cpg + cig;
                const T* xplane = x.data.data() + (std::int64_t(n) * Cin + ci) * H * W;
                const T* wk = w.data.data() + ((std::int64_t(co) * Cpg + cig) * kh) * kw;
                for (int dy = 0; dy < kh; ++dy) {
                    for (int dx = 0; dx < kw; ++dx) {
                        const T wv_ = wk[dy * kw + dx];
                        if (wv_ == T(0)) continue;
                        for (int oy = 0; oy < OH; ++oy) {
                            const int iy = oy * stride - pad + dy;
                            if (iy < 0 || iy >= H) continue;
                            T* orow = oplane + std::int64_t(oy) * OW;
                            const T* xrow = xplane + std::int64_t(iy) * W;
                            for (int ox = 0; ox < OW; ++ox) {
                                const int ix = ox * stride - pad + dx;
                                if (ix < 0 || ix >= W) continue;
                                orow[ox] += wv_ * xrow[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    ensure_finite(out, "conv2d");

    bool ng = g.node_needs_grad(xv.id) || g.node_needs_grad(wv.id) || g.node_needs_grad(bv.id);
    int id = g.add_node(std::move(out), ng, "conv2d");
    if (ng) {
        int xid = xv.id, wid = wv.id, bid = bv.id, oid = id;
        g.nodes[std::size_t(id)].backward = [=](Graph<T>& gr) {
            const auto& go = gr.nodes[std::size_t(oid)].grad;
            const auto& X = gr.val(xid).data;
            const auto& Wt = gr.val(wid).data;
            const bool need_x = gr.node_needs_grad(xid);
            const bool need_w = gr.node_needs_grad(wid);
            const bool need_b = gr.node_needs_grad(bid);
            std::vector<T>* gx = need_x ? &gr.gbuf(xid) : nullptr;
            std::vector<T>* gw = need_w ? &gr.gbuf(wid) : nullptr;
            std::vector<T>* gb = need_b ? &gr.gbuf(bid) : nullptr;
            for (int n = 0; n < N; ++n) {
                for (int co = 0; co < Cout; ++co) {
                    const int grp = co / cout_pg;
                    const T* gplane = go.data() + (std::int64_t(n) * Cout + co) * OH * OW;
                    if (need_b) {
                        T acc = T(0);
                        for (std::int64_t i = 0; i < std::int64_t(OH) * OW; ++i) acc += gplane[i];
                        (*gb)[std::size_t(co)] += acc;
                    }
                    for (int cig = 0; cig < Cpg; ++cig) {
                        const int ci = grp * Cpg + cig;
                        const T* xplane = X.data() + (std::int64_t(n) * Cin + ci) * H * W;
                        T* gxplane = need_x ? gx->data() + (std::int64_t(n) * Cin + ci) * H * W : nullptr;
                        const std::int64_t wbase = (std::int64_t(co) * Cpg + cig) * kh * kw;
                        for (int dy = 0; dy < kh; ++dy) {
                            for (int dx = 0; dx < kw; ++dx) {
                                const T wv_ = Wt[std::size_t(wbase + dy * kw + dx)];
                                T wacc = T(0);
                                for (int oy = 0; oy < OH; ++oy) {
                                    const int iy = oy * stride - pad + dy;
                                    if (iy < 0 || iy >= H) continue;
                                    const T* grow = gplane + std::int64_t(oy) * OW;
                                    const T* xrow = xplane + std::int64_t(iy) * W;
                                    T* gxrow = need_x ? gxplane + std::int64_t(iy) * W : nullptr;
                                    for (int ox = 0; ox < OW; ++ox) {
                                        const int ix = ox * stride - pad + dx;
                                        if (ix < 0 || ix >= W) continue;
                                        const T gz = grow[ox];
                                        if (need_w) wacc += gz * xrow[ix];
                                        if (need_x) gxrow[ix] += gz * wv_;
                                    }
                                }
                                if (need_w) (*gw)[std::size_t(wbase + dy * kw + dx)] += wacc;
                            }
                        }
                    }
                }
            }
        };
    }
    return {&g, id};
}

// ---------------------------------------------------------------------------
// linear over the channel axis: x[N,C,...] -> [N,Cout,...]; w[Cin,Cout], b[Cout]
// ---------------------------------------------------------------------------

template <typename T>
Val<T> linear_channels(Val<T> xv, Val<T> wv, Val<T> bv) {
    Graph<T>& g = detail::same_graph(xv, wv);
    detail::same_graph(xv, bv);
    const Tensor<T>& x = g.value(xv);
    const Tensor<T>& w = g.value(wv);
    const Tensor<T>& b = g.value(bv);
    if (x.rank() < 2) throw DimensionError("linear: input rank must be >= 2");
    if (w.rank() != 2) throw DimensionError("linear: weight must be 2-D [Cin,Cout]");
    const int N = x.shape[0], Cin = x.shape[1];
    if (w.shape[0] != Cin)
        throw DimensionError("linear: channel mismatch, input C=" + std::to_string(Cin) +
                             " weight Cin=" + std::to_string(w.shape[0]));
    const int Cout = w.shape[1];
    if (b.numel() != Cout) throw DimensionError("linear: bias size must equal Cout");
    std::int64_t S = 1;
    for (int i = 2; i < x.rank(); ++i) S *= x.shape[std::size_t(i)];
    Shape oshape = x.shape;
    oshape[1] = Cout;

    Tensor<T> out(oshape);
    for (int n = 0; n < N; ++n) {
        const T* xs = x.data.data() + std::int64_t(n) * Cin * S;
        T* os = out.data.data() + std::int64_t(n) * Cout * S;
        for (int co = 0; co < Cout; ++co) {
            T* orow = os + std::int64_t(co) * S;
            const T bias = b.data[std::size_t(co)];
            for (std::int64_t s = 0; s < S; ++s) orow[s] = bias;
        }
        for (int ci = 0; ci < Cin; ++ci) {
            const T* xrow = xs + std::int64_t(ci) * S;
            const T* wrow = w.data.data() + std::int64_t(ci) * Cout;
            for (int co = 0; co < Cout; ++co) {
                const T wv_ = wrow[co];
                if (wv_ == T(0)) continue;
                T* orow = os + std::int64_t(co) * S;
                for (std::int64_t s = 0; s < S; ++s) orow[s] += wv_ * xrow[s];
            }
        }
    }
    ensure_finite(out, "linear");

    bool ng = g.node_needs_grad(xv.id) || g.node_needs_grad(wv.id) || g.node_needs_grad(bv.id);
    int id = g.add_node(std::move(out), ng, "linear");
    if (ng) {
        int xid = xv.id, wid = wv.id, bid = bv.id, oid = id;
        g.nodes[std::size_t(id)].backward = [xid, wid, bid, oid, N, Cin, Cout, S](Graph<T>& gr) {
            const auto& go = gr.nodes[std::size_t(oid)].grad;
            const auto& X = gr.val(xid).data;
            const auto& Wt = gr.val(wid).data;
            const bool need_x = gr.node_needs_grad(xid);
            const bool need_w = gr.node_needs_grad(wid);
            const bool need_b = gr.node_needs_grad(bid);
            std::vector<T>* gx = need_x ? &gr.gbuf(xid) : nullptr;
            std::vector<T>* gw = need_w ? &gr.gbuf(wid) : nullptr;
            std::vector<T>* gb = need_b ? &gr.gbuf(bid) : nullptr;
            for (int n = 0; n < N; ++n) {
                const T* gs = go.data() + std::int64_t(n) * Cout * S;
                const T* xs = X.data() + std::int64_t(n) * Cin * S;
                if (need_b) {
                    for (int co = 0; co < Cout; ++co) {
                        const T* grow = gs + std::int64_t(co) * S;
                        T acc = T(0);
                        for (std::int64_t s = 0; s < S; ++s) acc += grow[s];
                        (*gb)[std::size_t(co)] += acc;
                    }
                }
                if (need_x) {
                    T* gxs = gx->data() + std::int64_t(n) * Cin * S;
                    for (int co = 0; co < Cout; ++co) {
                        const T* grow = gs + std::int64_t(co) * S;
                        for (int ci = 0; ci < Cin; ++ci) {
                            const T wv_ = Wt[std::size_t(std::int64_t(ci) * Cout + co)];
                            if (wv_ == T(0)) continue;
                            T* gxrow = gxs + std::int64_t(ci) * S;
                            for (std::int64_t s = 0; s < S; ++s) gxrow[s] += wv_ * grow[s];
                        }
                    }
                }
                if (need_w) {
                    for (int ci = 0; ci < Cin; ++ci) {
                        const T* xrow = xs + std::int64_t(ci) * S;
                        T* gwrow = gw->data() + std::int64_t(ci) * Cout;
                        for (int co = 0; co < Cout; ++co) {
                            const T* grow = gs + std::int64_t(co) * S;
                            T acc = T(0);
                            for (std::int64_t s = 0; s < S; ++s) acc += xrow[s] * grow[s];
                            gwrow[co] += acc;
                        }
                    }
                }
            }
        };
    }
    return {&g, id};
}

// ---------------------------------------------------------------------------
// Adaptive average pooling over N,C,H,W
// ---------------------------------------------------------------------------

template <typename T>
Val<T> adaptive_avg_pool(Val<T> xv, int out_h, int out_w) {
    Graph<T>& g = *xv.g;
    const Tensor<T>& x = g.value(xv);
    if (x.rank() != 4) throw DimensionError("adaptive_avg_pool expects N,C,H,W");
    const int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    if (out_h > H || out_w > W || out_h <= 0 || out_w <= 0)
        throw DimensionError("adaptive_avg_pool: target " + std::to_string(out_h) + "x" +
                             std::to_string(out_w) + " larger than input " +
                             std::to_string(H) + "x" + std::to_string(W));

    // window i covers [floor(i*H/out), ceil((i+1)*H/out))
    auto lo = [](int i, int in, int out) { return (i * in) / out; };
    auto hi = [](int i, int in, int out) { return ((i + 1) * in + out - 1) / out; };

    Tensor<T> out({N, C, out_h, out_w});
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const T* xp = x.data.data() + (std::int64_t(n) * C + c) * H * W;
            T* op = out.data.data() + (std::int64_t(n) * C + c) * out_h * out_w;
            for (int oy = 0; oy < out_h; ++oy) {
                const int y0 = lo(oy, H, out_h), y1 = hi(oy, H, out_h);
                for (int ox = 0; ox < out_w; ++ox) {
                    const int x0 = lo(ox, W, out_w), x1 = hi(ox, W, out_w);
                    T acc = T(0);
                    for (int y = y0; y < y1; ++y)
                        for (int xx = x0; xx < x1; ++xx) acc += xp[std::int64_t(y) * W + xx];
                    op[std::int64_t(oy) * out_w + ox] = acc / T((y1 - y0) * (x1 - x0));
                }
            }
        }
    }
    ensure_finite(out, "adaptive_avg_pool");

    bool ng = g.node_needs_grad(xv.id);
    int id = g.add_node(std::move(out), ng, "adaptive_avg_pool");
    if (ng) {
        int xid = xv.id, oid = id;
        g.nodes[std::size_t(id)].backward = [xid, oid, N, C, H, W, out_h, out_w, lo, hi](Graph<T>& gr) {
            const auto& go = gr.nodes[std::size_t(oid)].grad;
            auto& gx = gr.gbuf(xid);
            for (int n = 0; n < N; ++n) {
                for (int c = 0; c < C; ++c) {
                    T* gxp = gx.data() + (std::int64_t(n) * C + c) * H * W;
                    const T* gop = go.data() + (std::int64_t(n) * C + c) * out_h * out_w;
                    for (int oy = 0; oy < out_h; ++oy) {
                        const int y0 = lo(oy, H, out_h), y1 = hi(oy, H, out_h);
                        for (int ox = 0; ox < out_w; ++ox) {
                            const int x0 = lo(ox, W, out_w), x1 = hi(ox, W, out_w);
                            const T gz = gop[std::int64_t(oy) * out_w + ox] /
                                         T((y1 - y0) * (x1 - x0));
                            for (int y = y0; y < y1; ++y)
                                for (int xx = x0; xx < x1; ++xx)
                                    gxp[std::int64_t(y) * W + xx] += gz;
                        }
                    }
                }
            }
        };
    }
    return {&g, id};
}

// ---------------------------------------------------------------------------
// Bilinear upsampling (align_corners = false)
// ---------------------------------------------------------------------------

template <typename T>
Val<T> bilinear_upsample(Val<T> xv, int out_h, int out_w) {
    Graph<T>& g = *xv.g;
    const Tensor<T>& x = g.value(xv);
    if (x.rank() != 4) throw DimensionError("bilinear_upsample expects N,C,H,W");
    const int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    if (out_h < H || out_w < W)
        throw DimensionError("bilinear_upsample: target smaller than input");

    struct Tap { int i0, i1; T w1; };
    auto taps = [](int out, int in) {
        std::vector<Tap> t;
        t.resize(std::size_t(out));
        const double scale = double(in) / double(out);
        for (int i = 0; i < out; ++i) {
            double src = (i + 0.5) * scale - 0.5;
            int i0 = int(std::floor(src));
            double w1 = src - i0;
            int i0c = std::clamp(i0, 0, in - 1);
            int i1c = std::clamp(i0 + 1, 0, in - 1);
            t[std::size_t(i)] = {i0c, i1c, T(w1)};
        }
        return t;
    };
    auto ty = taps(out_h, H);
    auto tx = taps(out_w, W);

    Tensor<T> out({N, C, out_h, out_w});
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const T* xp = x.data.data() + (std::int64_t(n) * C + c) * H * W;
            T* op = out.data.data() + (std::int64_t(n) * C + c) * out_h * out_w;
            for (int oy = 0; oy < out_h; ++oy) {
                const Tap& a = ty[std::size_t(oy)];
                const T* r0 = xp + std::int64_t(a.i0) * W;
                const T* r1 = xp + std::int64_t(a.i1) * W;
                T* orow = op + std::int64_t(oy) * out_w;
                for (int ox = 0; ox < out_w; ++ox) {
                    const Tap& bt = tx[std::size_t(ox)];
                    const T top = r0[bt.i0] * (T(1) - bt.w1) + r0[bt.i1] * bt.w1;
                    const T bot = r1[bt.i0] * (T(1) - bt.w1) + r1[bt.i1] * bt.w1;
                    orow[ox] = top * (T(1) - a.w1) + bot * a.w1;
                }
            }
        }
    }
    ensure_finite(out, "bilinear_upsample");

    bool ng = g.node_needs_grad(xv.id);
    int id = g.add_node(std::move(out), ng, "bilinear_upsample");
    if (ng) {
        int xid = xv.id, oid = id;
        g.nodes[std::size_t(id)].backward = [xid, oid, N, C, H, W, out_h, out_w, ty, tx](Graph<T>& gr) {
            const auto& go = gr.nodes[std::size_t(oid)].grad;
            auto& gx = gr.gbuf(xid);
            for (int n = 0; n < N; ++n) {
                for (int c = 0; c < C; ++c) {
                    T* gxp = gx.data() + (std::int64_t(n) * C + c) * H * W;
                    const T* gop = go.data() + (std::int64_t(n) * C + c) * out_h * out_w;
                    for (int oy = 0; oy < out_h; ++oy) {
                        const Tap& a = ty[std::size_t(oy)];
                        const T* grow = gop + std::int64_t(oy) * out_w;
                        for (int ox = 0; ox < out_w; ++ox) {
                            const Tap& bt = tx[std::size_t(ox)];
                            const T gz = grow[ox];
                            gxp[std::int64_t(a.i0) * W + bt.i0] += gz * (T(1) - a.w1) * (T(1) - bt.w1);
                            gxp[std::int64_t(a.i0) * W + bt.i1] += gz * (T(1) - a.w1) * bt.w1;
                            gxp[std::int64_t(a.i1) * W + bt.i0] += gz * a.w1 * (T(1) - bt.w1);
                            gxp[std::int64_t(a.i1) * W + bt.i1] += gz * a.w1 * bt.w1;
                        }
                    }
                }
            }
        };
    }
    return {&g, id};
}

// ---------------------------------------------------------------------------
// Layer normalization over the channel axis (axis 1), per position
// ---------------------------------------------------------------------------

template <typename T>
Val<T> layernorm_channels(Val<T> xv, Val<T> gammav, Val<T> betav, T eps = T(1e-6)) {
    Graph<T>& g = detail::same_graph(xv, gammav);
    detail::same_graph(xv, betav);
    const Tensor<T>& x = g.value(xv);
    const Tensor<T>& gamma = g.value(gammav);
    const Tensor<T>& beta = g.value(betav);
    if (x.rank() < 2) throw DimensionError("layernorm: input rank must be >= 2");
    const int C = x.shape[1];
    if (gamma.numel() != C || beta.numel() != C)
        throw DimensionError("layernorm: gamma/beta must have C elements");
    const int N = x.shape[0];
    std::int64_t S = 1;
    for (int i = 2; i < x.rank(); ++i) S *= x.shape[std::size_t(i)];

    Tensor<T> out(x.shape);
    std::vector<T> inv_std(std::size_t(N) * std::size_t(S));
    std::vector<T> mean(std::size_t(N) * std::size_t(S));
    for (int n = 0; n < N; ++n) {
        for (std::int64_t s = 0; s < S; ++s) {
            const std::int64_t base = std::int64_t(n) * C * S + s;
            T mu = T(0);
            for (int c = 0; c < C; ++c) mu += x.data[std::size_t(base + std::int64_t(c) * S)];
            mu /= T(C);
            T var = T(0);
            for (int c = 0; c < C; ++c) {
                const T d = x.data[std::size_t(base + std::int64_t(c) * S)] - mu;
                var += d * d;
            }
            var /= T(C);
            const T inv = T(1) / T(std::sqrt(double(var + eps)));
            mean[std::size_t(n * S + s)] = mu;
            inv_std[std::size_t(n * S + s)] = inv;
            for (int c = 0; c < C; ++c) {
                const std::size_t k = std::size_t(base + std::int64_t(c) * S);
                out.data[k] = (x.data[k] - mu) * inv * gamma.data[std::size_t(c)] +
                              beta.data[std::size_t(c)];
            }
        }
    }
    ensure_finite(out, "layernorm");

    bool ng = g.node_needs_grad(xv.id) || g.node_needs_grad(gammav.id) || g.node_needs_grad(betav.id);
    int id = g.add_node(std::move(out), ng, "layernorm");
    if (ng) {
        int xid = xv.id, gid = gammav.id, bid = betav.id, oid = id;
        g.nodes[std::size_t(id)].backward =
            [xid, gid, bid, oid, N, C, S, mean = std::move(mean),
             inv_std = std::move(inv_std)](Graph<T>& gr) {
                const auto& go = gr.nodes[std::size_t(oid)].grad;
                const auto& X = gr.val(xid).data;
                const auto& Gm = gr.val(gid).data;
                const bool need_x = gr.node_needs_grad(xid);
                const bool need_g = gr.node_needs_grad(gid);
                const bool need_b = gr.node_needs_grad(bid);
                std::vector<T>* gx = need_x ? &gr.gbuf(xid) : nullptr;
                std::vector<T>* gg = need_g ? &gr.gbuf(gid) : nullptr;
                std::vector<T>* gb = need_b ? &gr.gbuf(bid) : nullptr;
                for (int n = 0; n < N; ++n) {
                    for (std::int64_t s = 0; s < S; ++s) {
                        const std::int64_t base = std::int64_t(n) * C * S + s;
                        const T mu = mean[std::size_t(n * S + s)];
                        const T inv = inv_std[std::size_t(n * S + s)];
                        T m1 = T(0), m2 = T(0);
                        for (int c = 0; c < C; ++c) {
                            const std::size_t k = std::size_t(base + std::int64_t(c) * S);
                            const T xhat = (X[k] - mu) * inv;
                            const T h = go[k] * Gm[std::size_t(c)];
                            m1 += h;
                            m2 += h * xhat;
                            if (need_g) (*gg)[std::size_t(c)] += go[k] * xhat;
                            if (need_b) (*gb)[std::size_t(c)] += go[k];
                        }
                        if (need_x) {
                            m1 /= T(C);
                            m2 /= T(C);
                            for (int c = 0; c < C; ++c) {
                                const std::size_t k = std::size_t(base + std::int64_t(c) * S);
                                const T xhat = (X[k] - mu) * inv;
                                const T h = go[k] * Gm[std::size_t(c)];
                                (*gx)[k] += inv * (h - m1 - xhat * m2);
                            }
                        }
                    }
                }
            };
    }
    return {&g, id};
}

} // namespace tuni
