#pragma once

#include <cstdint>
#include <vector>

#include "tuni/errors.hpp"
#include "tuni/loss.hpp"
#include "tuni/tensor.hpp"

namespace tuni {

/// K x K integer counts; rows = ground-truth class, cols = predicted class.
/// IGNORE pixels are never counted. Accumulation across batches is a
/// commutative monoid (elementwise add).
struct ConfusionMatrix {
    int num_classes = 0;
    std::vector<std::int64_t> counts; // row-major K x K

    explicit ConfusionMatrix(int k = 0) : num_classes(k), counts(std::size_t(k) * k, 0) {}

    void add(std::int32_t gt, std::int32_t pred) {
        if (gt == kIgnoreLabel) return;
        counts[std::size_t(gt) * num_classes + std::size_t(pred)] += 1;
    }

    void add_batch(const std::vector<std::int32_t>& gt, const std::vector<std::int32_t>& pred) {
        if (gt.size() != pred.size())
            throw DimensionError("confusion: gt/pred size mismatch");
        for (std::size_t i = 0; i < gt.size(); ++i) add(gt[i], pred[i]);
    }

    void merge(const ConfusionMatrix& other) {
        if (other.num_classes != num_classes)
            throw DimensionError("confusion: class count mismatch");
        for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
    }

    std::int64_t total() const {
        std::int64_t t = 0;
        for (auto c : counts) t += c;
        return t;
    }
};

struct IouResult {
    double miou = 0.0;
    std::vector<double> per_class; // -1 marks classes with zero union (excluded)
};

/// IoU_c = TP / (TP + FP + FN); classes with zero union are excluded from
/// the mean.
inline IouResult miou(const ConfusionMatrix& conf) {
    if (conf.num_classes == 0 || conf.total() == 0)
        throw ContractError("miou: empty confusion matrix");
    const int k = conf.num_classes;
    IouResult res;
    res.per_class.assign(std::size_t(k), -1.0);
    double sum = 0.0;
    int counted = 0;
    for (int c = 0; c < k; ++c) {
        const std::int64_t tp = conf.counts[std::size_t(c) * k + std::size_t(c)];
        std::int64_t fp = 0, fn = 0;
        for (int o = 0; o < k; ++o) {
            if (o == c) continue;
            fp += conf.counts[std::size_t(o) * k + std::size_t(c)];
            fn += conf.counts[std::size_t(c) * k + std::size_t(o)];
        }
        const std::int64_t uni = tp + fp + fn;
        if (uni == 0) continue;
        res.per_class[std::size_t(c)] = double(tp) / double(uni);
        sum += res.per_class[std::size_t(c)];
        ++counted;
    }
    res.miou = counted ? sum / counted : 0.0;
    return res;
}

/// Per-pixel argmax over the channel axis of [N,K,...] logits.
template <typename T>
std::vector<std::int32_t> argmax_channels(const Tensor<T>& logits) {
    const int N = logits.shape[0], K = logits.shape[1];
    std::int64_t S = 1;
    for (int i = 2; i < logits.rank(); ++i) S *= logits.shape[std::size_t(i)];
    std::vector<std::int32_t> out(std::size_t(std::int64_t(N) * S));
    for (int n = 0; n < N; ++n) {
        for (std::int64_t s = 0; s < S; ++s) {
            const std::int64_t base = (std::int64_t(n) * K) * S + s;
            int best = 0;
            T bv = logits.data[std::size_t(base)];
            for (int k = 1; k < K; ++k) {
                const T v = logits.data[std::size_t(base + std::int64_t(k) * S)];
                if (v > bv) {
                    bv = v;
                    best = k;
                }
            }
            out[std::size_t(n * S + s)] = best;
        }
    }
    return out;
}

} // namespace tuni
