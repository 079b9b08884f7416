#include <gtest/gtest.h>

#include <json.hpp>

#include "tuni/cost.hpp"
#include "tuni/train.hpp"

using namespace tuni;

namespace {

ModelConfig random_config(Rng& rng) {
    ModelConfig cfg;
    const int base = 2 * rng.uniform_int(2, 12); // even, 4..24
    for (int i = 0; i < 4; ++i) cfg.rgb_channels[std::size_t(i)] = base << i;
    for (int i = 0; i < 4; ++i) cfg.heads[std::size_t(i)] = rng.uniform_int(0, 1) ? 2 : 1;
    for (auto& d : cfg.depths) d = rng.uniform_int(1, 3);
    cfg.thermal_ratio = 0.25 * rng.uniform_int(1, 4);
    cfg.pool_size = rng.uniform_int(1, 7);
    cfg.num_classes = rng.uniform_int(2, 6);
    cfg.decoder_dim = rng.uniform_int(4, 32);
    const Variant variants[5] = {Variant::Full, Variant::NoRrl, Variant::NoRtg, Variant::NoRtl,
                                 Variant::DformerLocal};
    cfg.variant = variants[rng.uniform_int(0, 4)];
    cfg.attn_full_res_queries = rng.uniform_int(0, 3) == 0;
    return cfg;
}

// closed-form fuse-shrink when one ci-wide concat part disappears
std::int64_t fuse_shrink(const ModelConfig& cfg) {
    std::int64_t c = 0;
    for (int st = 0; st < 4; ++st) {
        const std::int64_t ci = cfg.rgb_channels[std::size_t(st)];
        const std::int64_t ct = cfg.thermal_channels(st);
        c += cfg.depths[std::size_t(st)] * (ci * ci + ci * ct);
    }
    return c;
}

} // namespace

TEST(CostModel, SingleLinearParamCount) {
    EXPECT_EQ(LayerSpec::linear(4, 8).param_count(), 40);
}

TEST(CostModel, LinearFlopsConvention) {
    // one position, 4 -> 8: 2*4*8 + 8 = 72 under MAC=2 with 1 FLOP per bias add
    EXPECT_EQ(cost_detail::linear_flops(1, 4, 8), 72);
}

TEST(CostModel, ParamsMatchLiveRegistryDeskConfig) {
    ModelConfig cfg; // desk defaults
    ParamRegistry<float> reg;
    build_seg_registry(cfg, reg);
    EXPECT_EQ(cost_report(cfg, 64, 64).total_params(), reg.total_elements());
}

TEST(CostModel, ParamsMatchLiveRegistryFiftyRandomConfigs) {
    Rng rng(404);
    for (int trial = 0; trial < 50; ++trial) {
        const ModelConfig cfg = random_config(rng);
        ParamRegistry<float> reg;
        build_seg_registry(cfg, reg);
        EXPECT_EQ(cost_report(cfg, 64, 64).total_params(), reg.total_elements())
            << "variant=" << variant_name(cfg.variant) << " base=" << cfg.rgb_channels[0];
    }
}

TEST(CostModel, VariantAdditivityExact) {
    ModelConfig cfg; // desk defaults
    const auto full = cost_report(cfg, 64, 64);
    struct Case {
        Variant v;
        const char* tag;
    } cases[] = {{Variant::NoRtl, ".rtl."}, {Variant::NoRrl, ".rrl."}, {Variant::NoRtg, ".rtg."}};
    for (const auto& c : cases) {
        const auto ablated = cost_report(build_variant(cfg, c.v), 64, 64);
        EXPECT_EQ(full.total_params() - ablated.total_params(),
                  full.sum_params(c.tag) + fuse_shrink(cfg))
            << c.tag;
        // flops delta: module rows plus the shrunk fuse rows
        const std::int64_t fuse_flops_full =
            full.sum_flops(".fuse_r") + full.sum_flops(".fuse_t");
        const std::int64_t fuse_flops_ablated =
            ablated.sum_flops(".fuse_r") + ablated.sum_flops(".fuse_t");
        EXPECT_EQ(full.total_flops() - ablated.total_flops(),
                  full.sum_flops(c.tag) + (fuse_flops_full - fuse_flops_ablated))
            << c.tag;
    }
}

TEST(CostModel, DformerSubstitutionCounts) {
    ModelConfig cfg;
    const auto full = cost_report(cfg, 64, 64);
    const auto df = cost_report(build_variant(cfg, Variant::DformerLocal), 64, 64);
    // substitution swaps rtl rows for dfl rows; fuse widths unchanged
    EXPECT_EQ(full.total_params() - df.total_params(),
              full.sum_params(".rtl.") - df.sum_params(".dfl."));
    // dfl fusion is exactly two projection linears plus a merge linear per block
    std::int64_t expect = 0;
    for (int st = 0; st < 4; ++st) {
        const std::int64_t ci = cfg.rgb_channels[std::size_t(st)];
        const std::int64_t ct = cfg.thermal_channels(st);
        const std::int64_t ch = ci / 2;
        expect += cfg.depths[std::size_t(st)] *
                  ((ci * ch + ch) + (ct * ch + ch) + (ch * ci + ci));
    }
    EXPECT_EQ(df.sum_params(".dfl."), expect);
}

TEST(CostModel, NoRtgRegistryHasNoAttentionProjections) {
    ModelConfig cfg;
    ParamRegistry<float> reg;
    build_seg_registry(build_variant(cfg, Variant::NoRtg), reg);
    for (std::size_t i = 0; i < reg.size(); ++i)
        EXPECT_EQ(reg.item(i).first.find(".rtg."), std::string::npos) << reg.item(i).first;
}

TEST(CostModel, BuildVariantFullIsIdentity) {
    ModelConfig cfg;
    const ModelConfig same = build_variant(cfg, Variant::Full);
    EXPECT_EQ(same.variant, Variant::Full);
    EXPECT_EQ(cost_report(cfg, 64, 64).total_params(),
              cost_report(same, 64, 64).total_params());
}

TEST(CostModel, FlopsScaleWithResolutionByKind) {
    ModelConfig cfg; // desk defaults; 448 keeps every stage map >= 14, pool unclamped
    const auto lo = cost_report(cfg, 448, 448);
    const auto hi = cost_report(cfg, 896, 896);
    ASSERT_EQ(lo.rows.size(), hi.rows.size());
    for (std::size_t i = 0; i < lo.rows.size(); ++i) {
        const auto& a = lo.rows[i];
        const auto& b = hi.rows[i];
        ASSERT_EQ(a.name, b.name);
        if (a.kind == "conv" || a.kind == "dwconv" || a.kind == "linear" || a.kind == "norm" ||
            a.kind == "act" || a.kind == "ew" || a.kind == "upsample" || a.kind == "attn") {
            EXPECT_EQ(b.flops, 4 * a.flops) << a.name << " (" << a.kind << ")";
        } else if (a.kind == "attn_q" || a.kind == "se") {
            EXPECT_EQ(b.flops, a.flops) << a.name << " (" << a.kind << ")";
        } else { // pool, cosine mix pixel-scaled and fixed terms
            EXPECT_GT(b.flops, a.flops) << a.name;
            EXPECT_LE(b.flops, 4 * a.flops) << a.name;
        }
    }
}

TEST(CostModel, IndivisibleInputRejected) {
    ModelConfig cfg;
    EXPECT_THROW(cost_report(cfg, 60, 64), ContractError);
}

TEST(CostModel, EmptyReportTotalsZero) {
    CostReport rep;
    EXPECT_EQ(rep.total_params(), 0);
    EXPECT_EQ(rep.total_flops(), 0);
}

TEST(CostModel, JsonRoundTripPreservesCounts) {
    ModelConfig cfg;
    const auto rep = cost_report(cfg, 64, 96);
    const auto parsed = nlohmann::json::parse(emit_json(rep));
    EXPECT_EQ(parsed["totals"]["params"].get<std::int64_t>(), rep.total_params());
    EXPECT_EQ(parsed["totals"]["flops"].get<std::int64_t>(), rep.total_flops());
    EXPECT_EQ(parsed["rows"].size(), rep.rows.size());
    std::int64_t psum = 0, fsum = 0;
    for (const auto& row : parsed["rows"]) {
        psum += row["params"].get<std::int64_t>();
        fsum += row["flops"].get<std::int64_t>();
    }
    EXPECT_EQ(psum, rep.total_params());
    EXPECT_EQ(fsum, rep.total_flops());
    EXPECT_EQ(parsed["input"]["h"].get<int>(), 64);
    EXPECT_EQ(parsed["input"]["w"].get<int>(), 96);
    EXPECT_FALSE(parsed["convention"].get<std::string>().empty());
}

TEST(CostModel, ReportsByteIdenticalAcrossRuns) {
    ModelConfig cfg;
    EXPECT_EQ(emit_json(cost_report(cfg, 64, 64)), emit_json(cost_report(cfg, 64, 64)));
    EXPECT_EQ(emit_text(cost_report(cfg, 64, 64)), emit_text(cost_report(cfg, 64, 64)));
}

TEST(CostModel, TextReportAlignsAndEmbedsConvention) {
    ModelConfig cfg;
    const std::string text = emit_text(cost_report(cfg, 64, 64));
    EXPECT_NE(text.find("convention:"), std::string::npos);
    EXPECT_NE(text.find("TOTAL"), std::string::npos);
    EXPECT_NE(text.find("encoder.stage1.block0.rtl.cosine"), std::string::npos);
}

TEST(CostModel, MonotonicAcrossVariants) {
    ModelConfig cfg;
    const auto full = cost_report(cfg, 64, 64);
    for (Variant v : {Variant::NoRrl, Variant::NoRtg, Variant::NoRtl, Variant::DformerLocal}) {
        const auto rep = cost_report(build_variant(cfg, v), 64, 64);
        EXPECT_LT(rep.total_params(), full.total_params()) << variant_name(v);
        EXPECT_LT(rep.total_flops(), full.total_flops()) << variant_name(v);
    }
}
