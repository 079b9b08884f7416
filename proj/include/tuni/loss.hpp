#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "tuni/graph.hpp"

namespace tuni {

inline constexpr int kIgnoreLabel = 255;

/// ENet-style inverse-log-frequency weights: w_c = 1 / ln(1.02 + freq_c).
/// Classes absent from the histogram get the maximal weight 1/ln(1.02).
inline std::vector<double> class_weights(const std::vector<std::int64_t>& histogram) {
    std::int64_t total = 0;
    for (auto c : histogram) {
        if (c < 0) throw ContractError("class_weights: negative count");
        total += c;
    }
    if (total == 0) throw ContractError("class_weights: all-zero histogram");
    std::vector<double> w(histogram.size());
    for (std::size_t i = 0; i < histogram.size(); ++i) {
        const double freq = double(histogram[i]) / double(total);
        w[i] = 1.0 / std::log(1.02 + freq);
    }
    return w;
}

namespace detail {

template <typename T>
void check_labels(const std::vector<std::int32_t>& labels, int num_classes) {
    for (auto l : labels)
        if ((l < 0 || l >= num_classes) && l != kIgnoreLabel)
            throw ContractError("label " + std::to_string(l) + " outside {0.." +
                                std::to_string(num_classes - 1) + "} u {IGNORE}");
}

} // namespace detail

/// Weighted cross-entropy over non-ignored pixels, normalized by the sum of
/// the applied weights. logits: [N,K,...]; labels flat over [N, spatial].
template <typename T>
Val<T> weighted_ce(Val<T> logitsv, const std::vector<std::int32_t>& labels,
                   const std::vector<T>& weights) {
    Graph<T>& g = *logitsv.g;
    const Tensor<T>& logits = g.value(logitsv);
    if (logits.rank() < 2) throw DimensionError("weighted_ce: logits rank must be >= 2");
    const int N = logits.shape[0], K = logits.shape[1];
    std::int64_t S = 1;
    for (int i = 2; i < logits.rank(); ++i) S *= logits.shape[std::size_t(i)];
    if (std::int64_t(labels.size()) != std::int64_t(N) * S)
        throw DimensionError("weighted_ce: label count mismatch");
    if (int(weights.size()) != K)
        throw DimensionError("weighted_ce: need one weight per class");
    bool any_pos = false;
    for (T w : weights) {
        if (!(w >= T(0)) || !std::isfinite(double(w)))
            throw ContractError("weighted_ce: weights must be finite and >= 0");
        any_pos = any_pos || w > T(0);
    }
    if (!any_pos) throw ContractError("weighted_ce: at least one weight must be > 0");
    detail::check_labels<T>(labels, K);

    std::vector<T> probs(std::size_t(std::int64_t(N) * K * S));
    double loss_sum = 0.0, weight_sum = 0.0;
    for (int n = 0; n < N; ++n) {
        for (std::int64_t s = 0; s < S; ++s) {
            const std::int32_t lab = labels[std::size_t(n * S + s)];
            const std::int64_t base = (std::int64_t(n) * K) * S + s;
            if (lab == kIgnoreLabel) continue;
            T mx = logits.data[std::size_t(base)];
            for (int k = 1; k < K; ++k)
                mx = std::max(mx, logits.data[std::size_t(base + std::int64_t(k) * S)]);
            double sum = 0.0;
            for (int k = 0; k < K; ++k)
                sum += std::exp(double(logits.data[std::size_t(base + std::int64_t(k) * S)] - mx));
            const double lse = double(mx) + std::log(sum);
            for (int k = 0; k < K; ++k)
                probs[std::size_t(base + std::int64_t(k) * S)] = T(std::exp(
                    double(logits.data[std::size_t(base + std::int64_t(k) * S)]) - lse));
            const double w = double(weights[std::size_t(lab)]);
            loss_sum += w * (lse - double(logits.data[std::size_t(base + std::int64_t(lab) * S)]));
            weight_sum += w;
        }
    }
    if (weight_sum == 0.0) throw ContractError("weighted_ce: every pixel is ignored");

    Tensor<T> out({1});
    out.data[0] = T(loss_sum / weight_sum);
    ensure_finite(out, "weighted_ce");

    bool ng = g.node_needs_grad(logitsv.id);
    int id = g.add_node(std::move(out), ng, "weighted_ce");
    if (ng) {
        int lid = logitsv.id, oid = id;
        g.nodes[std::size_t(id)].backward =
            [lid, oid, N, K, S, labels, weights, probs = std::move(probs),
             weight_sum](Graph<T>& gr) {
                const T gz = gr.nodes[std::size_t(oid)].grad[0];
                auto& gl = gr.gbuf(lid);
                for (int n = 0; n < N; ++n) {
                    for (std::int64_t s = 0; s < S; ++s) {
                        const std::int32_t lab = labels[std::size_t(n * S + s)];
                        if (lab == kIgnoreLabel) continue;
                        const std::int64_t base = (std::int64_t(n) * K) * S + s;
                        const T scale = gz * weights[std::size_t(lab)] / T(weight_sum);
                        for (int k = 0; k < K; ++k) {
                            const std::size_t i = std::size_t(base + std::int64_t(k) * S);
                            const T delta = k == lab ? T(1) : T(0);
                            gl[i] += scale * (probs[i] - delta);
                        }
                    }
                }
            };
    }
    return {&g, id};
}

/// Soft dice on softmax probabilities, per class, masked by IGNORE and
/// averaged over all K classes. Result in [0, 1).
template <typename T>
Val<T> dice_loss(Val<T> logitsv, const std::vector<std::int32_t>& labels, T eps = T(1)) {
    Graph<T>& g = *logitsv.g;
    const Tensor<T>& logits = g.value(logitsv);
    if (logits.rank() < 2) throw DimensionError("dice_loss: logits rank must be >= 2");
    const int N = logits.shape[0], K = logits.shape[1];
    std::int64_t S = 1;
    for (int i = 2; i < logits.rank(); ++i) S *= logits.shape[std::size_t(i)];
    if (std::int64_t(labels.size()) != std::int64_t(N) * S)
        throw DimensionError("dice_loss: label count mismatch");
    detail::check_labels<T>(labels, K);

    Shape mshape = logits.shape;
    mshape[1] = 1;
    Tensor<T> mask(mshape);
    Tensor<T> onehot(logits.shape);
    for (int n = 0; n < N; ++n) {
        for (std::int64_t s = 0; s < S; ++s) {
            const std::int32_t lab = labels[std::size_t(n * S + s)];
            if (lab == kIgnoreLabel) continue;
            mask.data[std::size_t(n * S + s)] = T(1);
            onehot.data[std::size_t((std::int64_t(n) * K + lab) * S + s)] = T(1);
        }
    }

    Val<T> probs = softmax(logitsv, 1);
    Val<T> pm = mul(probs, g.constant(std::move(mask)));
    Val<T> gt = g.constant(std::move(onehot));

    auto class_sum = [&](Val<T> x) { // [N,K,...] -> [K]
        Val<T> r = x;
        while (g.value(r).rank() > 2) r = reduce(r, g.value(r).rank() - 1, ReduceKind::Sum, false);
        return reduce(r, 0, ReduceKind::Sum, false);
    };
    Val<T> inter = class_sum(mul(pm, gt));
    Val<T> denom = add(class_sum(pm), class_sum(gt));
    Val<T> ratio = div(affine(inter, T(2), eps), affine(denom, T(1), eps));
    return reduce(affine(ratio, T(-1), T(1)), 0, ReduceKind::Mean, false);
}

/// Loss = weighted CE + dice, both differentiable end-to-end.
template <typename T>
Val<T> total_loss(Val<T> logits, const std::vector<std::int32_t>& labels,
                  const std::vector<T>& weights, T dice_eps = T(1)) {
    return add(weighted_ce(logits, labels, weights), dice_loss(logits, labels, dice_eps));
}

} // namespace tuni
