#pragma once

#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "tuni/encoder.hpp"

namespace tuni {

/// One accounted operation. `kind` drives the resolution-scaling assertions:
/// conv/dwconv/linear/norm/act/ew/upsample rows scale with the pixel count,
/// attn rows with the token product, attn_q and se rows are resolution-fixed
/// once pooling is unclamped, pool/cosine rows mix both.
struct CostRow {
    std::string name;
    std::string kind;
    std::int64_t params = 0;
    std::int64_t flops = 0;
};

struct CostReport {
    ModelConfig config;
    int input_h = 0;
    int input_w = 0;
    std::vector<CostRow> rows;

    std::int64_t total_params() const {
        std::int64_t t = 0;
        for (const auto& r : rows) t += r.params;
        return t;
    }
    std::int64_t total_flops() const {
        std::int64_t t = 0;
        for (const auto& r : rows) t += r.flops;
        return t;
    }
    std::int64_t sum_params(const std::string& needle) const {
        std::int64_t t = 0;
        for (const auto& r : rows)
            if (r.name.find(needle) != std::string::npos) t += r.params;
        return t;
    }
    std::int64_t sum_flops(const std::string& needle) const {
        std::int64_t t = 0;
        for (const auto& r : rows)
            if (r.name.find(needle) != std::string::npos) t += r.flops;
        return t;
    }
};

/// The FLOP convention embedded in every report. Published tables rarely
/// state theirs, so deltas between variants are the contract here, not
/// absolute values.
inline const char* cost_convention() {
    return "1 MAC = 2 FLOPs; linear/conv count out_elems*(2*fan_in+1) (bias=1/elem); "
           "elementwise 1/elem (absdiff 2); relu 1, sigmoid 4, gelu 8, softmax 4, "
           "layernorm 8 per element; avg-pool in_elems+out_elems; bilinear resize "
           "8/out_elem; attention matmuls as MACs*2; cosine weights: reduce+dot+norms "
           "counted per element, 8/channel finalize; batch size 1";
}

namespace cost_detail {

inline std::int64_t linear_flops(std::int64_t positions, std::int64_t cin, std::int64_t cout) {
    return positions * (2 * cin * cout + cout);
}
inline std::int64_t conv_flops(std::int64_t out_elems, std::int64_t fan_in) {
    return out_elems * (2 * fan_in + 1);
}

struct Walker {
    const ModelConfig& cfg;
    std::unordered_map<std::string, LayerSpec> specs;
    std::unordered_set<std::string> used;
    std::vector<CostRow>* rows;

    void param_row(const std::string& name, const std::string& kind, std::int64_t flops) {
        auto it = specs.find(name);
        if (it == specs.end())
            throw ContractError("cost walk references unknown layer '" + name + "'");
        if (!used.insert(name).second)
            throw ContractError("cost walk visited layer twice: '" + name + "'");
        rows->push_back({name, kind, it->second.param_count(), flops});
    }
    void op_row(const std::string& name, const std::string& kind, std::int64_t flops) {
        rows->push_back({name, kind, 0, flops});
    }
    const LayerSpec& spec(const std::string& name) const { return specs.at(name); }
};

inline void walk_stem(Walker& w, const std::string& prefix, int h, int w_) {
    // conv1 halves the resolution, conv2 halves it again
    const auto& c1 = w.spec(prefix + ".conv1");
    const auto& c2 = w.spec(prefix + ".conv2");
    const std::int64_t e1 = std::int64_t(c1.out_channels) * (h / 2) * (w_ / 2);
    const std::int64_t e2 = std::int64_t(c2.out_channels) * (h / 4) * (w_ / 4);
    w.param_row(prefix + ".conv1", "conv",
                conv_flops(e1, std::int64_t(c1.in_channels) * c1.kernel * c1.kernel));
    w.param_row(prefix + ".norm1", "norm", 8 * e1);
    w.op_row(prefix + ".act1", "act", 8 * e1);
    w.param_row(prefix + ".conv2", "conv",
                conv_flops(e2, std::int64_t(c2.in_channels) * c2.kernel * c2.kernel));
    w.param_row(prefix + ".norm2", "norm", 8 * e2);
    w.op_row(prefix + ".act2", "act", 8 * e2);
}

inline void walk_block(Walker& w, int stage, const std::string& prefix, int h, int ww) {
    const ModelConfig& cfg = w.cfg;
    const std::int64_t ci = cfg.rgb_channels[std::size_t(stage)];
    const std::int64_t ct = cfg.thermal_channels(stage);
    const std::int64_t ch = ci / 2;
    const std::int64_t hw = std::int64_t(h) * ww;
    const std::int64_t heads = cfg.heads[std::size_t(stage)];
    const int p = std::min({cfg.pool_size, h, ww});
    const std::int64_t p2 = std::int64_t(p) * p;

    w.param_row(prefix + ".norm_r", "norm", 8 * ci * hw);
    w.param_row(prefix + ".norm_t", "norm", 8 * ct * hw);

    std::int64_t parts = 0;
    if (cfg.variant != Variant::NoRrl) {
        w.param_row(prefix + ".rrl.gate", "linear", linear_flops(hw, ci, ci));
        w.param_row(prefix + ".rrl.value", "linear", linear_flops(hw, ci, ci));
        w.param_row(prefix + ".rrl.dw", "dwconv", conv_flops(ci * hw, 9));
        w.op_row(prefix + ".rrl.mul", "ew", ci * hw);
        ++parts;
    }
    if (cfg.variant != Variant::NoRtg) {
        const std::int64_t tq = cfg.attn_full_res_queries ? hw : p2;
        const std::int64_t tk = cfg.attn_full_res_queries ? p2 : hw;
        if (!cfg.attn_full_res_queries) {
            w.op_row(prefix + ".rtg.pool", "pool", (ct + ci) * hw + (ct + ci) * p2);
            w.param_row(prefix + ".rtg.query", "attn_q", linear_flops(p2, ct + ci, ci));
            w.param_row(prefix + ".rtg.key", "linear", linear_flops(hw, ci, ci));
            w.param_row(prefix + ".rtg.value", "linear", linear_flops(hw, ci, ci));
            w.op_row(prefix + ".rtg.attn.scale", "attn_q", ci * p2);
        } else {
            w.op_row(prefix + ".rtg.pool", "pool", ci * hw + ci * p2);
            w.param_row(prefix + ".rtg.query", "linear", linear_flops(hw, ct + ci, ci));
            w.param_row(prefix + ".rtg.key", "attn_q", linear_flops(p2, ci, ci));
            w.param_row(prefix + ".rtg.value", "attn_q", linear_flops(p2, ci, ci));
            w.op_row(prefix + ".rtg.attn.scale", "ew", ci * hw);
        }
        w.op_row(prefix + ".rtg.attn.scores", "attn", 2 * tq * tk * ci);
        w.op_row(prefix + ".rtg.attn.softmax", "attn", 4 * heads * tq * tk);
        w.op_row(prefix + ".rtg.attn.context", "attn", 2 * tq * tk * ci);
        if (!cfg.attn_full_res_queries)
            w.op_row(prefix + ".rtg.upsample", "upsample", 8 * ci * hw);
        w.param_row(prefix + ".rtg.merge", "linear", linear_flops(hw, ci, ci));
        ++parts;
    }
    if (cfg.variant == Variant::DformerLocal) {
        w.param_row(prefix + ".dfl.proj_r", "linear", linear_flops(hw, ci, ch));
        w.param_row(prefix + ".dfl.proj_t", "linear", linear_flops(hw, ct, ch));
        w.op_row(prefix + ".dfl.mul", "ew", ch * hw);
        w.param_row(prefix + ".dfl.merge", "linear", linear_flops(hw, ch, ci));
        ++parts;
    } else if (cfg.variant != Variant::NoRtl) {
        w.param_row(prefix + ".rtl.proj_r", "linear", linear_flops(hw, ci, ch));
        w.param_row(prefix + ".rtl.proj_t", "linear", linear_flops(hw, ct, ch));
        w.op_row(prefix + ".rtl.consistent", "ew", ch * hw);
        w.op_row(prefix + ".rtl.distinct", "ew", 2 * ch * hw);
        w.param_row(prefix + ".rtl.dw_c", "dwconv", conv_flops(ch * hw, 9));
        w.param_row(prefix + ".rtl.dw_d", "dwconv", conv_flops(ch * hw, 9));
        // channel mean + dot + both norms per element, sqrt/eps/div per channel
        w.op_row(prefix + ".rtl.cosine", "cosine",
                 (ci * hw + hw) + 2 * ci * hw + 2 * ci * hw + 2 * hw + 8 * ci + 8);
        const std::int64_t hid = w.spec(prefix + ".rtl.se").se_hidden();
        w.param_row(prefix + ".rtl.se", "se",
                    linear_flops(1, ci, hid) + hid + linear_flops(1, hid, ci) + 4 * ci);
        w.op_row(prefix + ".rtl.reweight", "ew", ci * hw);
        w.param_row(prefix + ".rtl.merge", "linear", linear_flops(hw, ci, ci));
        ++parts;
    }
    w.param_row(prefix + ".fuse_r", "linear", linear_flops(hw, parts * ci, ci));
    w.param_row(prefix + ".fuse_t", "linear", linear_flops(hw, parts * ci, ct));
    w.op_row(prefix + ".residual_r", "ew", ci * hw);
    w.op_row(prefix + ".residual_t", "ew", ct * hw);
}

} // namespace cost_detail

/// Closed-form parameter and FLOP accounting for the full segmentation model
/// (encoder + MLP decoder) at the given input resolution, batch size 1.
/// Parameter counts come from the same layer enumeration the builder uses.
inline CostReport cost_report(const ModelConfig& cfg, int input_h, int input_w) {
    cfg.validate();
    if (input_h % 32 != 0 || input_w % 32 != 0)
        throw ContractError("cost_report: input dims must be divisible by 32");

    CostReport rep;
    rep.config = cfg;
    rep.input_h = input_h;
    rep.input_w = input_w;

    cost_detail::Walker w{cfg, {}, {}, &rep.rows};
    auto collect = [&](const std::string& name, const LayerSpec& s) {
        w.specs.emplace(name, s);
    };
    for_each_encoder_layer(cfg, collect);
    for_each_decoder_layer(cfg, collect);

    cost_detail::walk_stem(w, "encoder.stem_r", input_h, input_w);
    cost_detail::walk_stem(w, "encoder.stem_t", input_h, input_w);

    int h = input_h / 4, ww = input_w / 4;
    for (int s = 0; s < 4; ++s) {
        for (int b = 0; b < cfg.depths[std::size_t(s)]; ++b) {
            const std::string prefix =
                "encoder.stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
            cost_detail::walk_block(w, s, prefix, h, ww);
        }
        if (s < 3) {
            const std::string dn = "encoder.down" + std::to_string(s + 1);
            const std::int64_t eo_r =
                std::int64_t(cfg.rgb_channels[std::size_t(s + 1)]) * (h / 2) * (ww / 2);
            const std::int64_t eo_t =
                std::int64_t(cfg.thermal_channels(s + 1)) * (h / 2) * (ww / 2);
            w.param_row(dn + ".r.conv", "conv",
                        cost_detail::conv_flops(eo_r,
                                                std::int64_t(cfg.rgb_channels[std::size_t(s)]) * 9));
            w.param_row(dn + ".r.norm", "norm", 8 * eo_r);
            w.param_row(dn + ".t.conv", "conv",
                        cost_detail::conv_flops(eo_t, std::int64_t(cfg.thermal_channels(s)) * 9));
            w.param_row(dn + ".t.norm", "norm", 8 * eo_t);
            h /= 2;
            ww /= 2;
        }
    }

    // decoder at stage resolutions; everything restored to the stage-1 grid
    const int h1 = input_h / 4, w1 = input_w / 4;
    const std::int64_t hw1 = std::int64_t(h1) * w1;
    const std::int64_t d = cfg.decoder_dim;
    int hs = h1, ws = w1;
    for (int s = 0; s < 4; ++s) {
        w.param_row("decoder.proj" + std::to_string(s + 1), "linear",
                    cost_detail::linear_flops(std::int64_t(hs) * ws,
                                              cfg.rgb_channels[std::size_t(s)], d));
        if (s > 0)
            w.op_row("decoder.up" + std::to_string(s + 1), "upsample", 8 * d * hw1);
        hs /= 2;
        ws /= 2;
    }
    w.param_row("decoder.fuse", "linear", cost_detail::linear_flops(hw1, 4 * d, d));
    w.param_row("decoder.classify", "linear",
                cost_detail::linear_flops(hw1, d, cfg.num_classes));
    w.op_row("decoder.up_final", "upsample",
             8 * std::int64_t(cfg.num_classes) * input_h * input_w);

    if (w.used.size() != w.specs.size()) {
        for (const auto& kv : w.specs)
            if (!w.used.count(kv.first))
                throw ContractError("cost walk missed layer '" + kv.first + "'");
    }
    return rep;
}

inline ModelConfig build_variant(ModelConfig cfg, Variant v) {
    cfg.variant = v;
    return cfg;
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

inline std::string emit_text(const CostReport& rep) {
    std::ostringstream os;
    std::size_t name_w = 4;
    for (const auto& r : rep.rows) name_w = std::max(name_w, r.name.size());
    os << "config: variant=" << variant_name(rep.config.variant)
       << " depths=" << rep.config.depths[0] << "," << rep.config.depths[1] << ","
       << rep.config.depths[2] << "," << rep.config.depths[3]
       << " channels=" << rep.config.rgb_channels[0] << "," << rep.config.rgb_channels[1] << ","
       << rep.config.rgb_channels[2] << "," << rep.config.rgb_channels[3]
       << " thermal_ratio=" << rep.config.thermal_ratio << " input=" << rep.input_h << "x"
       << rep.input_w << "\n";
    os << "convention: " << cost_convention() << "\n";
    os << std::left << std::setw(int(name_w)) << "name" << "  " << std::setw(9) << "kind"
       << std::right << std::setw(12) << "params" << std::setw(16) << "flops" << "\n";
    for (const auto& r : rep.rows)
        os << std::left << std::setw(int(name_w)) << r.name << "  " << std::setw(9) << r.kind
           << std::right << std::setw(12) << r.params << std::setw(16) << r.flops << "\n";
    os << std::left << std::setw(int(name_w)) << "TOTAL" << "  " << std::setw(9) << ""
       << std::right << std::setw(12) << rep.total_params() << std::setw(16)
       << rep.total_flops() << "\n";
    return os.str();
}

inline std::string emit_json(const CostReport& rep) {
    std::ostringstream os;
    auto esc = [](const std::string& s) { return s; }; // names are ascii identifiers
    os << "{\n";
    os << "  \"convention\": \"" << esc(cost_convention()) << "\",\n";
    os << "  \"config\": {\"variant\": \"" << variant_name(rep.config.variant)
       << "\", \"depths\": [" << rep.config.depths[0] << "," << rep.config.depths[1] << ","
       << rep.config.depths[2] << "," << rep.config.depths[3] << "], \"channels\": ["
       << rep.config.rgb_channels[0] << "," << rep.config.rgb_channels[1] << ","
       << rep.config.rgb_channels[2] << "," << rep.config.rgb_channels[3]
       << "], \"thermal_ratio\": " << rep.config.thermal_ratio
       << ", \"heads\": [" << rep.config.heads[0] << "," << rep.config.heads[1] << ","
       << rep.config.heads[2] << "," << rep.config.heads[3]
       << "], \"pool_size\": " << rep.config.pool_size
       << ", \"num_classes\": " << rep.config.num_classes
       << ", \"decoder_dim\": " << rep.config.decoder_dim << "},\n";
    os << "  \"input\": {\"h\": " << rep.input_h << ", \"w\": " << rep.input_w << "},\n";
    os << "  \"rows\": [\n";
    for (std::size_t i = 0; i < rep.rows.size(); ++i) {
        const auto& r = rep.rows[i];
        os << "    {\"name\": \"" << esc(r.name) << "\", \"kind\": \"" << r.kind
           << "\", \"params\": " << r.params << ", \"flops\": " << r.flops << "}"
           << (i + 1 < rep.rows.size() ? ",\n" : "\n");
    }
    os << "  ],\n";
    os << "  \"totals\": {\"params\": " << rep.total_params()
       << ", \"flops\": " << rep.total_flops() << "}\n";
    os << "}\n";
    return os.str();
}

} // namespace tuni
