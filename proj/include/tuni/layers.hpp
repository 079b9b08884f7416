#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tuni/graph.hpp"
#include "tuni/rng.hpp"
#include "tuni/tensor.hpp"

namespace tuni {

/// Ordered parameter store; dotted names, stable insertion order.
template <typename T>
class ParamRegistry {
public:
    Tensor<T>& add(const std::string& name, Tensor<T> t) {
        if (index_.count(name))
            throw ContractError("duplicate parameter name: " + name);
        index_.emplace(name, items_.size());
        items_.emplace_back(name, std::move(t));
        return items_.back().second;
    }

    Tensor<T>* find(const std::string& name) {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &items_[it->second].second;
    }

    Tensor<T>& at(const std::string& name) {
        Tensor<T>* t = find(name);
        if (!t) throw ContractError("unknown parameter: " + name);
        return *t;
    }

    std::size_t size() const { return items_.size(); }
    std::int64_t total_elements() const {
        std::int64_t n = 0;
        for (const auto& kv : items_) n += kv.second.numel();
        return n;
    }

    auto begin() { return items_.begin(); }
    auto end() { return items_.end(); }
    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }
    const std::pair<std::string, Tensor<T>>& item(std::size_t i) const { return items_[i]; }
    std::pair<std::string, Tensor<T>>& item(std::size_t i) { return items_[i]; }

private:
    std::vector<std::pair<std::string, Tensor<T>>> items_;
    std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Layer specs and closed-form parameter counts
// ---------------------------------------------------------------------------

enum class LayerKind { Linear, DwConv, Conv, LayerNorm, Se };

struct LayerSpec {
    LayerKind kind = LayerKind::Linear;
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 1;
    int stride = 1;
    int pad = 0;
    int groups = 1;
    int se_reduction = 4;

    static LayerSpec linear(int cin, int cout) {
        return {LayerKind::Linear, cin, cout, 1, 1, 0, 1, 0};
    }
    static LayerSpec dwconv(int c, int k = 3) {
        return {LayerKind::DwConv, c, c, k, 1, k / 2, c, 0};
    }
    static LayerSpec conv(int cin, int cout, int k, int stride, int pad, int groups = 1) {
        return {LayerKind::Conv, cin, cout, k, stride, pad, groups, 0};
    }
    static LayerSpec layernorm(int c) { return {LayerKind::LayerNorm, c, c, 1, 1, 0, 1, 0}; }
    static LayerSpec se(int c, int r = 4) { return {LayerKind::Se, c, c, 1, 1, 0, 1, r}; }

    int se_hidden() const { return std::max(1, in_channels / se_reduction); }

    std::int64_t param_count() const {
        const std::int64_t cin = in_channels, cout = out_channels, k = kernel;
        switch (kind) {
            case LayerKind::Linear: return cin * cout + cout;
            case LayerKind::DwConv: return cin * k * k + cin;
            case LayerKind::Conv: return cin * cout * k * k / groups + cout;
            case LayerKind::LayerNorm: return 2 * cin;
            case LayerKind::Se: {
                const std::int64_t h = se_hidden();
                return cin * h + h + h * cin + cin;
            }
        }
        return 0;
    }
};

/// Registers the tensors that realize a spec under `prefix`.
template <typename T>
void create_layer_params(ParamRegistry<T>& reg, const std::string& prefix, const LayerSpec& s) {
    switch (s.kind) {
        case LayerKind::Linear:
            reg.add(prefix + ".weight", Tensor<T>({s.in_channels, s.out_channels}));
            reg.add(prefix + ".bias", Tensor<T>({s.out_channels}));
            break;
        case LayerKind::DwConv:
            reg.add(prefix + ".weight", Tensor<T>({s.in_channels, 1, s.kernel, s.kernel}));
            reg.add(prefix + ".bias", Tensor<T>({s.in_channels}));
            break;
        case LayerKind::Conv:
            reg.add(prefix + ".weight",
                    Tensor<T>({s.out_channels, s.in_channels / s.groups, s.kernel, s.kernel}));
            reg.add(prefix + ".bias", Tensor<T>({s.out_channels}));
            break;
        case LayerKind::LayerNorm:
            reg.add(prefix + ".gamma", Tensor<T>({s.in_channels}));
            reg.add(prefix + ".beta", Tensor<T>({s.in_channels}));
            break;
        case LayerKind::Se: {
            const int h = s.se_hidden();
            reg.add(prefix + ".fc1.weight", Tensor<T>({s.in_channels, h}));
            reg.add(prefix + ".fc1.bias", Tensor<T>({h}));
            reg.add(prefix + ".fc2.weight", Tensor<T>({h, s.in_channels}));
            reg.add(prefix + ".fc2.bias", Tensor<T>({s.in_channels}));
            break;
        }
    }
}

// ---------------------------------------------------------------------------
// Forward helpers: graph-building against registry parameters
// ---------------------------------------------------------------------------

template <typename T>
Val<T> linear_forward(Graph<T>& g, Val<T> x, ParamRegistry<T>& reg, const std::string& name) {
    return linear_channels(x, g.leaf(reg.at(name + ".weight")), g.leaf(reg.at(name + ".bias")));
}

template <typename T>
Val<T> conv_forward(Graph<T>& g, Val<T> x, ParamRegistry<T>& reg, const std::string& name,
                    int stride, int pad, int groups = 1) {
    return conv2d(x, g.leaf(reg.at(name + ".weight")), g.leaf(reg.at(name + ".bias")),
                  stride, pad, groups);
}

template <typename T>
Val<T> dwconv_forward(Graph<T>& g, Val<T> x, ParamRegistry<T>& reg, const std::string& name) {
    const Tensor<T>& w = reg.at(name + ".weight");
    return conv2d(x, g.leaf(reg.at(name + ".weight")), g.leaf(reg.at(name + ".bias")),
                  1, w.shape[2] / 2, w.shape[0]);
}

template <typename T>
Val<T> layernorm_forward(Graph<T>& g, Val<T> x, ParamRegistry<T>& reg, const std::string& name,
                         T eps = T(1e-6)) {
    return layernorm_channels(x, g.leaf(reg.at(name + ".gamma")), g.leaf(reg.at(name + ".beta")), eps);
}

/// Squeeze-and-Excitation gate on a channel vector [N,C] -> (0,1)^[N,C].
template <typename T>
Val<T> se_forward(Graph<T>& g, Val<T> w, ParamRegistry<T>& reg, const std::string& name) {
    Val<T> h = relu(linear_forward(g, w, reg, name + ".fc1"));
    return sigmoid(linear_forward(g, h, reg, name + ".fc2"));
}

/// Stem: two 3x3 stride-2 convs, each followed by channel LayerNorm and GELU.
/// Output spatial dims are H/4 x W/4.
template <typename T>
Val<T> stem_forward(Graph<T>& g, Val<T> img, ParamRegistry<T>& reg, const std::string& prefix) {
    const Tensor<T>& x = g.value(img);
    if (x.shape[2] % 4 != 0 || x.shape[3] % 4 != 0)
        throw ContractError("stem: input dims must be divisible by 4, got " +
                            shape_str(x.shape));
    Val<T> y = conv_forward(g, img, reg, prefix + ".conv1", 2, 1);
    y = gelu(layernorm_forward(g, y, reg, prefix + ".norm1"));
    y = conv_forward(g, y, reg, prefix + ".conv2", 2, 1);
    return gelu(layernorm_forward(g, y, reg, prefix + ".norm2"));
}

/// Inter-stage downsampler: 3x3 stride-2 conv followed by LayerNorm.
template <typename T>
Val<T> downsample_forward(Graph<T>& g, Val<T> x, ParamRegistry<T>& reg, const std::string& prefix) {
    Val<T> y = conv_forward(g, x, reg, prefix + ".conv", 2, 1);
    return layernorm_forward(g, y, reg, prefix + ".norm");
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Weights ~ normal(0, 0.02) truncated at 2 sigma; norm gains 1; biases and
/// shifts 0. One RNG stream over the registry in insertion order, so the
/// result is fully determined by the seed.
template <typename T>
void init_params(ParamRegistry<T>& reg, std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0xD1CEULL));
    for (auto& kv : reg) {
        const std::string& name = kv.first;
        Tensor<T>& t = kv.second;
        auto ends_with = [&](const char* suffix) {
            const std::size_t n = std::string(suffix).size();
            return name.size() >= n && name.compare(name.size() - n, n, suffix) == 0;
        };
        if (ends_with(".weight")) {
            for (auto& v : t.data) v = T(rng.truncated_normal(0.0, 0.02));
        } else if (ends_with(".gamma")) {
            for (auto& v : t.data) v = T(1);
        } else { // .bias, .beta
            for (auto& v : t.data) v = T(0);
        }
    }
}

} // namespace tuni
