#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <thread>
#include <vector>

#include "tuni/checkpoint.hpp"
#include "tuni/config.hpp"
#include "tuni/data.hpp"
#include "tuni/decoder.hpp"
#include "tuni/loss.hpp"
#include "tuni/metrics.hpp"
#include "tuni/optim.hpp"

namespace tuni {

// ---------------------------------------------------------------------------
// Model assembly
// ---------------------------------------------------------------------------

template <typename T>
void build_seg_registry(const ModelConfig& cfg, ParamRegistry<T>& reg) {
    cfg.validate();
    for_each_encoder_layer(cfg, [&](const std::string& n, const LayerSpec& s) {
        create_layer_params(reg, n, s);
    });
    for_each_decoder_layer(cfg, [&](const std::string& n, const LayerSpec& s) {
        create_layer_params(reg, n, s);
    });
}

template <typename T>
void build_cls_registry(const ModelConfig& cfg, ParamRegistry<T>& reg) {
    cfg.validate();
    for_each_encoder_layer(cfg, [&](const std::string& n, const LayerSpec& s) {
        create_layer_params(reg, n, s);
    });
    for_each_cls_head_layer(cfg, [&](const std::string& n, const LayerSpec& s) {
        create_layer_params(reg, n, s);
    });
}

/// Stacks samples into [B,3,H,W] / [B,1,H,W] batch tensors.
template <typename T>
void stack_batch(const std::vector<SegSample>& data, const std::vector<int>& idx,
                 Tensor<T>& rgb, Tensor<T>& thermal, std::vector<std::int32_t>& labels,
                 std::vector<std::int32_t>& cls_labels, bool zero_thermal = false) {
    const int B = int(idx.size());
    const int H = data[0].rgb.shape[1], W = data[0].rgb.shape[2];
    rgb = Tensor<T>({B, 3, H, W});
    thermal = Tensor<T>({B, 1, H, W});
    labels.resize(std::size_t(B) * H * W);
    cls_labels.resize(std::size_t(B));
    const std::size_t hw = std::size_t(H) * W;
    for (int b = 0; b < B; ++b) {
        const SegSample& s = data[std::size_t(idx[std::size_t(b)])];
        for (std::size_t i = 0; i < 3 * hw; ++i)
            rgb.data[std::size_t(b) * 3 * hw + i] = T(s.rgb.data[i]);
        if (!zero_thermal)
            for (std::size_t i = 0; i < hw; ++i)
                thermal.data[std::size_t(b) * hw + i] = T(s.thermal.data[i]);
        std::copy(s.label.begin(), s.label.end(), labels.begin() + std::int64_t(b) * std::int64_t(hw));
        cls_labels[std::size_t(b)] = s.cls_label;
    }
}

// ---------------------------------------------------------------------------
// Evaluation (forward-only; parallel over samples, capped by TUNI_THREADS)
// ---------------------------------------------------------------------------

inline int eval_threads() {
    int n = int(std::thread::hardware_concurrency());
    if (n < 1) n = 1;
    n = std::min(n, 8);
    if (const char* env = std::getenv("TUNI_THREADS")) {
        const int cap = std::atoi(env);
        if (cap >= 1) n = std::min(n, cap);
    }
    return n;
}

namespace detail {

template <typename Fn>
void parallel_over(int count, Fn&& fn) {
    const int nthreads = std::min(eval_threads(), count);
    if (nthreads <= 1) {
        for (int i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    for (int t = 0; t < nthreads; ++t)
        pool.emplace_back([&, t] {
            for (int i = t; i < count; i += nthreads) fn(i);
        });
    for (auto& th : pool) th.join();
}

} // namespace detail

/// Per-class IoU / mIoU of the argmax prediction over a sample set.
template <typename T>
IouResult evaluate_seg(ParamRegistry<T>& reg, const ModelConfig& cfg,
                       const std::vector<SegSample>& data, bool zero_thermal = false) {
    if (data.empty()) throw ContractError("evaluate_seg: empty sample set");
    std::vector<ConfusionMatrix> partial(data.size(), ConfusionMatrix(cfg.num_classes));
    detail::parallel_over(int(data.size()), [&](int i) {
        Graph<T> g;
        Tensor<T> rgb, thermal;
        std::vector<std::int32_t> labels, cls;
        stack_batch(data, {i}, rgb, thermal, labels, cls, zero_thermal);
        auto enc = encoder_forward(g, reg, cfg, g.constant(std::move(rgb)),
                                   g.constant(std::move(thermal)));
        auto logits = mlp_decode(g, reg, cfg, enc);
        partial[std::size_t(i)].add_batch(labels, argmax_channels(g.value(logits)));
    });
    ConfusionMatrix conf(cfg.num_classes);
    for (const auto& p : partial) conf.merge(p);
    return miou(conf);
}

/// Top-1 accuracy of the classification head.
template <typename T>
double evaluate_cls(ParamRegistry<T>& reg, const ModelConfig& cfg,
                    const std::vector<SegSample>& data, bool zero_thermal = false) {
    if (data.empty()) throw ContractError("evaluate_cls: empty sample set");
    std::vector<int> hit(data.size(), 0);
    detail::parallel_over(int(data.size()), [&](int i) {
        Graph<T> g;
        Tensor<T> rgb, thermal;
        std::vector<std::int32_t> labels, cls;
        stack_batch(data, {i}, rgb, thermal, labels, cls, zero_thermal);
        auto enc = encoder_forward(g, reg, cfg, g.constant(std::move(rgb)),
                                   g.constant(std::move(thermal)));
        auto logits = cls_head(g, reg, enc);
        hit[std::size_t(i)] = argmax_channels(g.value(logits))[0] == cls[0] ? 1 : 0;
    });
    int total = 0;
    for (int h : hit) total += h;
    return double(total) / double(data.size());
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainResult {
    std::vector<std::string> log_lines;
    std::vector<double> losses;
    double final_metric = 0.0;
    double best_metric = 0.0;
    int best_iter = -1;
    int steps_to_target = -1; // first iter whose eval met target_metric; -1 if never
    std::string final_ckpt;
    std::string best_ckpt;
};

namespace detail {

inline void hflip_sample(SegSample& s) {
    const int H = s.rgb.shape[1], W = s.rgb.shape[2];
    auto flip_plane = [&](float* p) {
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W / 2; ++x)
                std::swap(p[y * W + x], p[y * W + (W - 1 - x)]);
    };
    for (int c = 0; c < 3; ++c) flip_plane(s.rgb.data.data() + std::size_t(c) * H * W);
    flip_plane(s.thermal.data.data());
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W / 2; ++x)
            std::swap(s.label[std::size_t(y) * W + x], s.label[std::size_t(y) * W + (W - 1 - x)]);
}

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace detail

/// Deterministic loop: sample batch -> forward -> loss -> backward -> AdamW
/// with poly-decayed LR. Logs every step; evaluates on the configured split
/// every eval_interval steps; writes final and best checkpoints.
template <typename T = float>
TrainResult train(const TrainConfig& cfg, const std::vector<SegSample>& train_data,
                  const std::vector<SegSample>& eval_data) {
    cfg.validate();
    if (train_data.empty()) throw ContractError("train: empty training set");
    const bool seg = cfg.mode == TrainMode::Finetune;

    ParamRegistry<T> reg;
    if (seg) build_seg_registry(cfg.model, reg);
    else build_cls_registry(cfg.model, reg);
    init_params(reg, cfg.seed);
    for (auto& kv : reg) kv.second.requires_grad = true;
    if (!cfg.init_ckpt.empty())
        load_checkpoint(cfg.init_ckpt, reg, LoadMode::EncoderPrefix);

    std::vector<T> weights(std::size_t(cfg.model.num_classes), T(1));
    if (seg && cfg.class_weight_source == "data") {
        const auto w = class_weights(label_histogram(train_data, cfg.model.num_classes));
        for (std::size_t i = 0; i < w.size(); ++i) weights[i] = T(w[i]);
    }

    AdamW<T> opt(cfg.weight_decay);
    Rng rng(derive_seed(cfg.seed, 0x7247ULL));
    std::filesystem::create_directories(cfg.out_dir);

    TrainResult res;
    const std::vector<SegSample>& eval_set =
        cfg.eval_split == "train" ? train_data : eval_data;

    auto run_eval = [&](int iter) {
        double metric;
        if (seg) metric = evaluate_seg(reg, cfg.model, eval_set).miou;
        else metric = evaluate_cls(reg, cfg.model, eval_set);
        res.log_lines.push_back("iter=" + std::to_string(iter) +
                                (seg ? " eval_miou=" : " eval_acc=") +
                                detail::fmt_double(metric));
        if (metric > res.best_metric || res.best_iter < 0) {
            res.best_metric = metric;
            res.best_iter = iter;
            res.best_ckpt = cfg.out_dir + "/best.ckpt";
            save_checkpoint(res.best_ckpt, reg);
        }
        res.final_metric = metric;
        return metric;
    };

    for (int iter = 0; iter < cfg.max_iter; ++iter) {
        std::vector<int> idx(std::size_t(cfg.batch_size));
        for (auto& i : idx) i = rng.uniform_int(0, int(train_data.size()) - 1);

        Tensor<T> rgb, thermal;
        std::vector<std::int32_t> labels, cls;
        if (cfg.augment && seg) {
            std::vector<SegSample> aug;
            aug.reserve(idx.size());
            std::vector<int> local(idx.size());
            for (std::size_t b = 0; b < idx.size(); ++b) {
                aug.push_back(train_data[std::size_t(idx[b])]);
                if (rng.uniform() < 0.5) detail::hflip_sample(aug.back());
                local[b] = int(b);
            }
            stack_batch(aug, local, rgb, thermal, labels, cls);
        } else {
            stack_batch(train_data, idx, rgb, thermal, labels, cls);
        }

        Graph<T> g;
        auto enc = encoder_forward(g, reg, cfg.model, g.constant(std::move(rgb)),
                                   g.constant(std::move(thermal)));
        Val<T> loss;
        if (seg) {
            loss = total_loss(mlp_decode(g, reg, cfg.model, enc), labels, weights);
        } else {
            std::vector<T> unit(std::size_t(cfg.model.num_classes), T(1));
            loss = weighted_ce(cls_head(g, reg, enc), cls, unit);
        }
        g.backward(loss);

        const double lr = poly_lr(cfg.base_lr, iter, cfg.max_iter, cfg.power);
        opt.step(reg, lr);

        const double lv = double(g.value(loss).data[0]);
        res.losses.push_back(lv);
        res.log_lines.push_back("iter=" + std::to_string(iter) +
                                " lr=" + detail::fmt_double(lr) +
                                " loss=" + detail::fmt_double(lv));

        if ((iter + 1) % cfg.eval_interval == 0 || iter + 1 == cfg.max_iter) {
            const double metric = run_eval(iter + 1);
            if (cfg.target_metric > 0.0 && metric >= cfg.target_metric &&
                res.steps_to_target < 0) {
                res.steps_to_target = iter + 1;
                break;
            }
        }
    }
    if (cfg.max_iter == 0 && !eval_set.empty() && res.best_iter < 0) {
        // no-op loop still reports the metric of the initialization
        run_eval(0);
    }

    res.final_ckpt = cfg.out_dir + "/final.ckpt";
    save_checkpoint(res.final_ckpt, reg);
    if (res.best_ckpt.empty()) res.best_ckpt = res.final_ckpt;
    return res;
}

} // namespace tuni
