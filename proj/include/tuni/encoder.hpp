#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "tuni/graph.hpp"
#include "tuni/layers.hpp"

namespace tuni {

enum class Variant { Full, NoRrl, NoRtg, NoRtl, DformerLocal };

inline const char* variant_name(Variant v) {
    switch (v) {
        case Variant::Full: return "full";
        case Variant::NoRrl: return "no_rrl";
        case Variant::NoRtg: return "no_rtg";
        case Variant::NoRtl: return "no_rtl";
        case Variant::DformerLocal: return "dformer_local";
    }
    return "?";
}

inline Variant parse_variant(const std::string& s) {
    if (s == "full") return Variant::Full;
    if (s == "no_rrl") return Variant::NoRrl;
    if (s == "no_rtg") return Variant::NoRtg;
    if (s == "no_rtl") return Variant::NoRtl;
    if (s == "dformer_local") return Variant::DformerLocal;
    throw ConfigError("unknown variant: " + s);
}

/// Fully determines the network: stage depths, widths, thermal slimming,
/// attention heads, pooled-query size, ablation variant, decoder shape.
struct ModelConfig {
    std::array<int, 4> depths{2, 2, 4, 2};
    std::array<int, 4> rgb_channels{32, 64, 128, 256};
    double thermal_ratio = 0.5;
    std::array<int, 4> heads{1, 2, 4, 8};
    int pool_size = 7;
    Variant variant = Variant::Full;
    int num_classes = 4;
    int decoder_dim = 64;
    int se_reduction = 4;
    // Attention orientation. Off: pooled queries attend over full-resolution
    // keys/values (output upsampled back). On: full-resolution queries over
    // pooled keys/values.
    bool attn_full_res_queries = false;

    int thermal_channels(int stage) const {
        return std::max(1, int(std::llround(rgb_channels[std::size_t(stage)] * thermal_ratio)));
    }

    void validate() const {
        for (int d : depths)
            if (d < 1) throw ConfigError("stage depths must be >= 1");
        for (int i = 0; i < 4; ++i) {
            if (rgb_channels[std::size_t(i)] < 2 || rgb_channels[std::size_t(i)] % 2 != 0)
                throw ConfigError("rgb channels must be even and >= 2");
            if (i > 0 && rgb_channels[std::size_t(i)] <= rgb_channels[std::size_t(i - 1)])
                throw ConfigError("rgb channels must be strictly increasing across stages");
            if (heads[std::size_t(i)] < 1 ||
                rgb_channels[std::size_t(i)] % heads[std::size_t(i)] != 0)
                throw ConfigError("heads must divide the stage channel width");
            if (thermal_channels(i) < 1) throw ConfigError("thermal width must be >= 1");
        }
        if (thermal_ratio <= 0.0 || thermal_ratio > 1.0)
            throw ConfigError("thermal_ratio must be in (0, 1]");
        if (pool_size < 1) throw ConfigError("pool_size must be >= 1");
        if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
        if (decoder_dim < 1) throw ConfigError("decoder_dim must be >= 1");
    }
};

/// Per-block tensors exposed for inspection and verification.
template <typename T>
struct BlockIntermediates {
    Tensor<T> l_rr;
    Tensor<T> q_t, k_r, v_r;
    Tensor<T> g_rt;
    Tensor<T> attn; // post-softmax scores [N*heads, Tq, Tk]
    Tensor<T> f_c, f_d, f_cd;
    Tensor<T> w_cos; // [N, C], entries in [-1, 1]
    Tensor<T> se_w;  // [N, C], entries in (0, 1)
    Tensor<T> l_rt;
};

template <typename T>
struct FeaturePairVals {
    Val<T> f_r;
    Val<T> f_t;
};

template <typename T>
struct EncoderOutVals {
    std::array<Val<T>, 4> rgb;     // R1..R4
    std::array<Val<T>, 4> thermal; // T1..T4
};

// ---------------------------------------------------------------------------
// Parameter enumeration (single source for the builder and the cost model)
// ---------------------------------------------------------------------------

using LayerFn = std::function<void(const std::string&, const LayerSpec&)>;

inline void for_each_stem_layer(const std::string& prefix, int cin, int cout, const LayerFn& fn) {
    fn(prefix + ".conv1", LayerSpec::conv(cin, cout, 3, 2, 1));
    fn(prefix + ".norm1", LayerSpec::layernorm(cout));
    fn(prefix + ".conv2", LayerSpec::conv(cout, cout, 3, 2, 1));
    fn(prefix + ".norm2", LayerSpec::layernorm(cout));
}

inline void for_each_block_layer(const ModelConfig& cfg, int stage, const std::string& prefix,
                                 const LayerFn& fn) {
    const int ci = cfg.rgb_channels[std::size_t(stage)];
    const int ct = cfg.thermal_channels(stage);
    const int ch = ci / 2;
    fn(prefix + ".norm_r", LayerSpec::layernorm(ci));
    fn(prefix + ".norm_t", LayerSpec::layernorm(ct));
    int parts = 0;
    if (cfg.variant != Variant::NoRrl) {
        fn(prefix + ".rrl.gate", LayerSpec::linear(ci, ci));
        fn(prefix + ".rrl.value", LayerSpec::linear(ci, ci));
        fn(prefix + ".rrl.dw", LayerSpec::dwconv(ci));
        ++parts;
    }
    if (cfg.variant != Variant::NoRtg) {
        fn(prefix + ".rtg.key", LayerSpec::linear(ci, ci));
        fn(prefix + ".rtg.value", LayerSpec::linear(ci, ci));
        fn(prefix + ".rtg.query", LayerSpec::linear(ct + ci, ci));
        fn(prefix + ".rtg.merge", LayerSpec::linear(ci, ci));
        ++parts;
    }
    if (cfg.variant == Variant::DformerLocal) {
        fn(prefix + ".dfl.proj_r", LayerSpec::linear(ci, ch));
        fn(prefix + ".dfl.proj_t", LayerSpec::linear(ct, ch));
        fn(prefix + ".dfl.merge", LayerSpec::linear(ch, ci));
        ++parts;
    } else if (cfg.variant != Variant::NoRtl) {
        fn(prefix + ".rtl.proj_r", LayerSpec::linear(ci, ch));
        fn(prefix + ".rtl.proj_t", LayerSpec::linear(ct, ch));
        fn(prefix + ".rtl.dw_c", LayerSpec::dwconv(ch));
        fn(prefix + ".rtl.dw_d", LayerSpec::dwconv(ch));
        fn(prefix + ".rtl.se", LayerSpec::se(ci, cfg.se_reduction));
        fn(prefix + ".rtl.merge", LayerSpec::linear(ci, ci));
        ++parts;
    }
    fn(prefix + ".fuse_r", LayerSpec::linear(parts * ci, ci));
    fn(prefix + ".fuse_t", LayerSpec::linear(parts * ci, ct));
}

inline void for_each_encoder_layer(const ModelConfig& cfg, const LayerFn& fn) {
    for_each_stem_layer("encoder.stem_r", 3, cfg.rgb_channels[0], fn);
    for_each_stem_layer("encoder.stem_t", 1, cfg.thermal_channels(0), fn);
    for (int s = 0; s < 4; ++s) {
        for (int b = 0; b < cfg.depths[std::size_t(s)]; ++b) {
            const std::string prefix =
                "encoder.stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
            for_each_block_layer(cfg, s, prefix, fn);
        }
        if (s < 3) {
            const std::string dn = "encoder.down" + std::to_string(s + 1);
            fn(dn + ".r.conv", LayerSpec::conv(cfg.rgb_channels[std::size_t(s)],
                                               cfg.rgb_channels[std::size_t(s + 1)], 3, 2, 1));
            fn(dn + ".r.norm", LayerSpec::layernorm(cfg.rgb_channels[std::size_t(s + 1)]));
            fn(dn + ".t.conv",
               LayerSpec::conv(cfg.thermal_channels(s), cfg.thermal_channels(s + 1), 3, 2, 1));
            fn(dn + ".t.norm", LayerSpec::layernorm(cfg.thermal_channels(s + 1)));
        }
    }
}

inline void for_each_decoder_layer(const ModelConfig& cfg, const LayerFn& fn) {
    for (int s = 0; s < 4; ++s)
        fn("decoder.proj" + std::to_string(s + 1),
           LayerSpec::linear(cfg.rgb_channels[std::size_t(s)], cfg.decoder_dim));
    fn("decoder.fuse", LayerSpec::linear(4 * cfg.decoder_dim, cfg.decoder_dim));
    fn("decoder.classify", LayerSpec::linear(cfg.decoder_dim, cfg.num_classes));
}

inline void for_each_cls_head_layer(const ModelConfig& cfg, const LayerFn& fn) {
    fn("head.fc", LayerSpec::linear(cfg.rgb_channels[3], cfg.num_classes));
}

// ---------------------------------------------------------------------------
// Fusion submodules
// ---------------------------------------------------------------------------

/// Local RGB enhancement: Linear(f_r) gated elementwise with
/// DWConv(Linear(f_r)).
template <typename T>
Val<T> rgb_rgb_local(Graph<T>& g, ParamRegistry<T>& reg, const std::string& prefix, Val<T> f_r) {
    Val<T> gate = linear_forward(g, f_r, reg, prefix + ".gate");
    Val<T> value = dwconv_forward(g, linear_forward(g, f_r, reg, prefix + ".value"), reg,
                                  prefix + ".dw");
    return mul(gate, value);
}

namespace detail {

/// [N,C,H,W] -> [N*heads, H*W, C/heads]
template <typename T>
Val<T> to_tokens(Val<T> x, int heads) {
    const Shape& s = x.g->value(x).shape;
    const int N = s[0], C = s[1], HW = s[2] * s[3];
    const int dh = C / heads;
    Val<T> t = reshape(x, {N, C, HW});
    t = transpose(t, 1, 2);              // [N, HW, C]
    t = reshape(t, {N, HW, heads, dh});
    t = transpose(t, 1, 2);              // [N, heads, HW, dh]
    return reshape(t, {N * heads, HW, dh});
}

/// [N*heads, T, dh] -> [N,C,h,w] with T == h*w
template <typename T>
Val<T> from_tokens(Val<T> x, int n, int heads, int h, int w) {
    const Shape& s = x.g->value(x).shape;
    const int tok = s[1], dh = s[2];
    Val<T> t = reshape(x, {n, heads, tok, dh});
    t = transpose(t, 1, 2);              // [N, T, heads, dh]
    t = reshape(t, {n, tok, heads * dh});
    t = transpose(t, 1, 2);              // [N, C, T]
    return reshape(t, {n, heads * dh, h, w});
}

} // namespace detail

/// Cross-modal global fusion: pooled queries from Cat(f_t, f_r) attend over
/// full-resolution RGB keys/values; the pooled-grid context is restored
/// bilinearly. Scores scaled by 1/sqrt(d_head); softmax over the key axis.
template <typename T>
Val<T> rgbt_global(Graph<T>& g, ParamRegistry<T>& reg, const std::string& prefix,
                   Val<T> f_r, Val<T> f_t, int heads, int pool_size,
                   bool full_res_queries = false, BlockIntermediates<T>* inter = nullptr) {
    const Shape& rs = g.value(f_r).shape;
    const Shape& ts = g.value(f_t).shape;
    if (rs[0] != ts[0] || rs[2] != ts[2] || rs[3] != ts[3])
        throw DimensionError("rgbt_global: modalities must be spatially aligned");
    const int N = rs[0], Ci = rs[1], h = rs[2], w = rs[3];
    const int p = std::min({pool_size, h, w}); // clamp on small deep-stage maps
    const double scale = 1.0 / std::sqrt(double(Ci / heads));

    Val<T> qin = concat<T>({f_t, f_r}, 1);
    Val<T> q, k, v;
    if (!full_res_queries) {
        q = linear_forward(g, adaptive_avg_pool(qin, p, p), reg, prefix + ".query");
        k = linear_forward(g, f_r, reg, prefix + ".key");
        v = linear_forward(g, f_r, reg, prefix + ".value");
    } else {
        q = linear_forward(g, qin, reg, prefix + ".query");
        Val<T> pooled = adaptive_avg_pool(f_r, p, p);
        k = linear_forward(g, pooled, reg, prefix + ".key");
        v = linear_forward(g, pooled, reg, prefix + ".value");
    }
    if (inter) {
        inter->q_t = g.value(q);
        inter->k_r = g.value(k);
        inter->v_r = g.value(v);
    }

    Val<T> qt = detail::to_tokens(affine(q, T(scale), T(0)), heads);
    Val<T> kt = detail::to_tokens(k, heads);
    Val<T> vt = detail::to_tokens(v, heads);
    Val<T> scores = matmul(qt, transpose(kt, 1, 2));
    Val<T> probs = softmax(scores, 2);
    if (inter) inter->attn = g.value(probs);
    Val<T> ctx = matmul(probs, vt);

    Val<T> out;
    if (!full_res_queries) {
        out = detail::from_tokens(ctx, N, heads, p, p);
        out = bilinear_upsample(out, h, w);
    } else {
        out = detail::from_tokens(ctx, N, heads, h, w);
    }
    return linear_forward(g, out, reg, prefix + ".merge");
}

/// Cosine similarity of each channel map against the channel-mean map,
/// per sample; norms use eps inside the square root.
template <typename T>
Val<T> cosine_channel_weights(Graph<T>& g, Val<T> x, T eps = T(1e-8)) {
    const Shape& s = g.value(x).shape;
    const int N = s[0], C = s[1];
    Val<T> a = reduce(x, 1, ReduceKind::Mean, true); // [N,1,H,W]
    auto spatial_sum = [&](Val<T> t) {
        return reduce(reduce(t, 3, ReduceKind::Sum, false), 2, ReduceKind::Sum, false);
    };
    Val<T> dot = spatial_sum(mul(x, a));                              // [N,C]
    Val<T> nx = sqrt_op(affine(spatial_sum(mul(x, x)), T(1), eps));   // [N,C]
    Val<T> na = sqrt_op(affine(spatial_sum(mul(a, a)), T(1), eps));   // [N,1]
    Val<T> denom = mul(nx, na);
    (void)N; (void)C;
    return div(dot, denom); // [N,C]
}

/// Cross-modal local fusion: consistent (product) and distinct (absolute
/// difference) components at hidden width Ci/2, depthwise-refined, then the
/// concatenated map is reweighted by SE(cosine channel weights).
template <typename T>
Val<T> rgbt_local(Graph<T>& g, ParamRegistry<T>& reg, const std::string& prefix,
                  Val<T> f_r, Val<T> f_t, BlockIntermediates<T>* inter = nullptr) {
    const Shape& rs = g.value(f_r).shape;
    const int N = rs[0], Ci = rs[1];
    Val<T> pr = linear_forward(g, f_r, reg, prefix + ".proj_r");
    Val<T> pt = linear_forward(g, f_t, reg, prefix + ".proj_t");
    Val<T> f_c = mul(pr, pt);
    Val<T> f_d = absdiff(pr, pt);
    Val<T> f_cd = concat<T>({dwconv_forward(g, f_c, reg, prefix + ".dw_c"),
                             dwconv_forward(g, f_d, reg, prefix + ".dw_d")}, 1);
    Val<T> w_cos = cosine_channel_weights(g, f_cd);
    Val<T> se_w = se_forward(g, w_cos, reg, prefix + ".se");
    Val<T> gated = mul(f_cd, reshape(se_w, {N, Ci, 1, 1}));
    if (inter) {
        inter->f_c = g.value(f_c);
        inter->f_d = g.value(f_d);
        inter->f_cd = g.value(f_cd);
        inter->w_cos = g.value(w_cos);
        inter->se_w = g.value(se_w);
    }
    return linear_forward(g, gated, reg, prefix + ".merge");
}

/// DFormer-style substitute for the local fusion: plain Hamilton product of
/// two projections, then a merge linear.
template <typename T>
Val<T> dformer_local(Graph<T>& g, ParamRegistry<T>& reg, const std::string& prefix,
                     Val<T> f_r, Val<T> f_t) {
    Val<T> pr = linear_forward(g, f_r, reg, prefix + ".proj_r");
    Val<T> pt = linear_forward(g, f_t, reg, prefix + ".proj_t");
    return linear_forward(g, mul(pr, pt), reg, prefix + ".merge");
}

// ---------------------------------------------------------------------------
// Encoder block and full encoder
// ---------------------------------------------------------------------------

/// Pre-norm block: submodule outputs are concatenated and fused back into
/// both branches through residual connections.
template <typename T>
FeaturePairVals<T> encoder_block(Graph<T>& g, ParamRegistry<T>& reg, const ModelConfig& cfg,
                                 int stage, int block, Val<T> f_r, Val<T> f_t,
                                 BlockIntermediates<T>* inter = nullptr) {
    const std::string prefix =
        "encoder.stage" + std::to_string(stage + 1) + ".block" + std::to_string(block);
    Val<T> ln_r = layernorm_forward(g, f_r, reg, prefix + ".norm_r");
    Val<T> ln_t = layernorm_forward(g, f_t, reg, prefix + ".norm_t");

    std::vector<Val<T>> parts;
    if (cfg.variant != Variant::NoRrl) {
        Val<T> l_rr = rgb_rgb_local(g, reg, prefix + ".rrl", ln_r);
        if (inter) inter->l_rr = g.value(l_rr);
        parts.push_back(l_rr);
    }
    if (cfg.variant != Variant::NoRtg) {
        Val<T> g_rt = rgbt_global(g, reg, prefix + ".rtg", ln_r, ln_t,
                                  cfg.heads[std::size_t(stage)], cfg.pool_size,
                                  cfg.attn_full_res_queries, inter);
        if (inter) inter->g_rt = g.value(g_rt);
        parts.push_back(g_rt);
    }
    if (cfg.variant == Variant::DformerLocal) {
        parts.push_back(dformer_local(g, reg, prefix + ".dfl", ln_r, ln_t));
        if (inter) inter->l_rt = g.value(parts.back());
    } else if (cfg.variant != Variant::NoRtl) {
        Val<T> l_rt = rgbt_local(g, reg, prefix + ".rtl", ln_r, ln_t, inter);
        if (inter) inter->l_rt = g.value(l_rt);
        parts.push_back(l_rt);
    }

    Val<T> cat = parts.size() == 1 ? parts[0] : concat(parts, 1);
    Val<T> out_r = add(f_r, linear_forward(g, cat, reg, prefix + ".fuse_r"));
    Val<T> out_t = add(f_t, linear_forward(g, cat, reg, prefix + ".fuse_t"));
    return {out_r, out_t};
}

/// Stems -> four stages of blocks with stride-2 downsampling between stages.
/// Stage maps come out at 1/4, 1/8, 1/16, 1/32 of the input resolution.
template <typename T>
EncoderOutVals<T> encoder_forward(Graph<T>& g, ParamRegistry<T>& reg, const ModelConfig& cfg,
                                  Val<T> rgb, Val<T> thermal,
                                  std::vector<BlockIntermediates<T>>* collect = nullptr) {
    const Shape& rs = g.value(rgb).shape;
    const Shape& ts = g.value(thermal).shape;
    if (rs.size() != 4 || ts.size() != 4 || rs[1] != 3 || ts[1] != 1)
        throw DimensionError("encoder: expected rgb [N,3,H,W] and thermal [N,1,H,W]");
    if (rs[0] != ts[0] || rs[2] != ts[2] || rs[3] != ts[3])
        throw DimensionError("encoder: rgb and thermal must be aligned");
    if (rs[2] % 32 != 0 || rs[3] % 32 != 0)
        throw ContractError("encoder: input dims must be divisible by 32, got " +
                            std::to_string(rs[2]) + "x" + std::to_string(rs[3]));

    Val<T> f_r = stem_forward(g, rgb, reg, "encoder.stem_r");
    Val<T> f_t = stem_forward(g, thermal, reg, "encoder.stem_t");

    EncoderOutVals<T> out;
    for (int s = 0; s < 4; ++s) {
        for (int b = 0; b < cfg.depths[std::size_t(s)]; ++b) {
            BlockIntermediates<T> inter;
            auto pair = encoder_block(g, reg, cfg, s, b, f_r, f_t,
                                      collect ? &inter : nullptr);
            f_r = pair.f_r;
            f_t = pair.f_t;
            if (collect) collect->push_back(std::move(inter));
        }
        out.rgb[std::size_t(s)] = f_r;
        out.thermal[std::size_t(s)] = f_t;
        if (s < 3) {
            const std::string dn = "encoder.down" + std::to_string(s + 1);
            f_r = downsample_forward(g, f_r, reg, dn + ".r");
            f_t = downsample_forward(g, f_t, reg, dn + ".t");
        }
    }
    return out;
}

} // namespace tuni
