#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "tuni/layers.hpp"
#include "tuni/encoder.hpp"

using namespace tuni;

namespace {

template <typename T>
Tensor<T> rnd(Rng& rng, Shape s, double lo = -2.0, double hi = 2.0) {
    Tensor<T> t(std::move(s));
    for (auto& v : t.data) v = T(rng.uniform(lo, hi));
    return t;
}

} // namespace

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

TEST(Linear, ZeroWeightsYieldBias) {
    ParamRegistry<double> reg;
    create_layer_params(reg, "fc", LayerSpec::linear(3, 4));
    for (int i = 0; i < 4; ++i) reg.at("fc.bias").data[std::size_t(i)] = 0.5 + i;
    Rng rng(1);
    Tensor<double> x = rnd<double>(rng, {2, 3, 2, 2});
    Graph<double> g;
    auto y = linear_forward(g, g.leaf(x), reg, "fc");
    const auto& o = g.value(y);
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 4; ++c)
            for (int s = 0; s < 4; ++s)
                EXPECT_EQ(o.data[std::size_t((n * 4 + c) * 4 + s)], 0.5 + c);
}

TEST(Linear, IdentityWeightsPreserveInput) {
    ParamRegistry<double> reg;
    create_layer_params(reg, "fc", LayerSpec::linear(3, 3));
    for (int i = 0; i < 3; ++i) reg.at("fc.weight").data[std::size_t(i * 3 + i)] = 1.0;
    Rng rng(2);
    Tensor<double> x = rnd<double>(rng, {1, 3, 2, 2});
    Graph<double> g;
    auto y = linear_forward(g, g.leaf(x), reg, "fc");
    for (std::size_t i = 0; i < x.data.size(); ++i)
        EXPECT_EQ(g.value(y).data[i], x.data[i]);
}

TEST(Linear, MatchesMatmulPlusBiasOracle) {
    Rng rng(3);
    ParamRegistry<double> reg;
    create_layer_params(reg, "fc", LayerSpec::linear(5, 3));
    for (auto& v : reg.at("fc.weight").data) v = rng.uniform(-1, 1);
    for (auto& v : reg.at("fc.bias").data) v = rng.uniform(-1, 1);
    Tensor<double> x = rnd<double>(rng, {4, 5}); // rows x channels
    Graph<double> g;
    auto y = linear_forward(g, g.leaf(x), reg, "fc");
    const auto mm = oracle::matmul(x.data, reg.at("fc.weight").data, 4, 5, 3);
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 3; ++c)
            EXPECT_NEAR(g.value(y).data[std::size_t(r * 3 + c)],
                        mm[std::size_t(r * 3 + c)] + reg.at("fc.bias").data[std::size_t(c)],
                        1e-12);
}

TEST(Linear, ChannelMismatchThrows) {
    ParamRegistry<float> reg;
    create_layer_params(reg, "fc", LayerSpec::linear(3, 4));
    Graph<float> g;
    Tensor<float> x({1, 5, 2, 2});
    EXPECT_THROW(linear_forward(g, g.leaf(x), reg, "fc"), DimensionError);
}

// ---------------------------------------------------------------------------
// layernorm
// ---------------------------------------------------------------------------

TEST(LayerNorm, ConstantChannelsGiveZeros) {
    ParamRegistry<double> reg;
    create_layer_params(reg, "ln", LayerSpec::layernorm(4));
    init_params(reg, 0); // gamma 1, beta 0
    Graph<double> g;
    auto y = layernorm_forward(g, g.constant(Tensor<double>({1, 4, 2, 2}, 3.25)), reg, "ln");
    for (double v : g.value(y).data) EXPECT_NEAR(v, 0.0, 1e-9);
}

TEST(LayerNorm, NormalizedInputIsFixedPoint) {
    // channels already zero-mean unit-variance at each position
    const int C = 4;
    Tensor<double> x({2, C, 3, 3});
    const double pattern[C] = {-1.3416407864998738, -0.4472135954999579,
                               0.4472135954999579, 1.3416407864998738};
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < C; ++c)
            for (int s = 0; s < 9; ++s)
                x.data[std::size_t((n * C + c) * 9 + s)] = pattern[c];
    ParamRegistry<double> reg;
    create_layer_params(reg, "ln", LayerSpec::layernorm(C));
    init_params(reg, 0);
    Graph<double> g;
    auto y = layernorm_forward(g, g.leaf(x), reg, "ln");
    for (std::size_t i = 0; i < x.data.size(); ++i)
        EXPECT_NEAR(g.value(y).data[i], x.data[i], 1e-5);
}

TEST(LayerNorm, MatchesTwoPassOracle) {
    Rng rng(11);
    const int C = 6;
    Tensor<double> x = rnd<double>(rng, {2, C, 2, 2});
    ParamRegistry<double> reg;
    create_layer_params(reg, "ln", LayerSpec::layernorm(C));
    for (auto& v : reg.at("ln.gamma").data) v = rng.uniform(0.5, 1.5);
    for (auto& v : reg.at("ln.beta").data) v = rng.uniform(-0.5, 0.5);
    Graph<double> g;
    auto y = layernorm_forward(g, g.leaf(x), reg, "ln");
    for (int n = 0; n < 2; ++n)
        for (int s = 0; s < 4; ++s) {
            double mu = 0, var = 0;
            for (int c = 0; c < C; ++c) mu += x.data[std::size_t((n * C + c) * 4 + s)];
            mu /= C;
            for (int c = 0; c < C; ++c) {
                const double d = x.data[std::size_t((n * C + c) * 4 + s)] - mu;
                var += d * d;
            }
            var /= C;
            for (int c = 0; c < C; ++c) {
                const double expect =
                    (x.data[std::size_t((n * C + c) * 4 + s)] - mu) / std::sqrt(var + 1e-6) *
                        reg.at("ln.gamma").data[std::size_t(c)] +
                    reg.at("ln.beta").data[std::size_t(c)];
                const double got = g.value(y).data[std::size_t((n * C + c) * 4 + s)];
                EXPECT_LT(std::abs(got - expect) / std::max(1.0, std::abs(expect)), 1e-6);
            }
        }
}

TEST(LayerNorm, OutputMomentsNearStandard) {
    Rng rng(12);
    const int C = 16;
    Tensor<double> x = rnd<double>(rng, {1, C, 4, 4});
    ParamRegistry<double> reg;
    create_layer_params(reg, "ln", LayerSpec::layernorm(C));
    init_params(reg, 0);
    Graph<double> g;
    auto y = layernorm_forward(g, g.leaf(x), reg, "ln");
    for (int s = 0; s < 16; ++s) {
        double mu = 0, var = 0;
        for (int c = 0; c < C; ++c) mu += g.value(y).data[std::size_t(c * 16 + s)];
        mu /= C;
        for (int c = 0; c < C; ++c) {
            const double d = g.value(y).data[std::size_t(c * 16 + s)] - mu;
            var += d * d;
        }
        var /= C;
        EXPECT_LT(std::abs(mu), 1e-5);
        EXPECT_NEAR(var, 1.0, 1e-3);
    }
}

// ---------------------------------------------------------------------------
// SE block
// ---------------------------------------------------------------------------

TEST(SeBlock, ZeroInputZeroBiasesGiveHalf) {
    ParamRegistry<double> reg;
    create_layer_params(reg, "se", LayerSpec::se(8, 4));
    Rng rng(21);
    for (auto& v : reg.at("se.fc1.weight").data) v = rng.uniform(-1, 1);
    for (auto& v : reg.at("se.fc2.weight").data) v = rng.uniform(-1, 1);
    Graph<double> g;
    auto y = se_forward(g, g.constant(Tensor<double>({2, 8})), reg, "se");
    for (double v : g.value(y).data) EXPECT_EQ(v, 0.5);
}

TEST(SeBlock, OutputsStrictlyInsideUnitInterval) {
    Rng rng(22);
    ParamRegistry<double> reg;
    create_layer_params(reg, "se", LayerSpec::se(8, 4));
    for (auto& kv : reg)
        for (auto& v : kv.second.data) v = rng.uniform(-3, 3);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor<double> w = rnd<double>(rng, {1, 8}, -10.0, 10.0);
        Graph<double> g;
        auto y = se_forward(g, g.leaf(w), reg, "se");
        for (double v : g.value(y).data) {
            EXPECT_GT(v, 0.0);
            EXPECT_LT(v, 1.0);
        }
    }
}

TEST(SeBlock, MatchesComposedOracle) {
    Rng rng(23);
    const int C = 8, r = 4, H = C / r;
    ParamRegistry<double> reg;
    create_layer_params(reg, "se", LayerSpec::se(C, r));
    for (auto& kv : reg)
        for (auto& v : kv.second.data) v = rng.uniform(-1, 1);
    Tensor<double> in = rnd<double>(rng, {1, C});
    Graph<double> g;
    auto y = se_forward(g, g.leaf(in), reg, "se");

    const auto& w1 = reg.at("se.fc1.weight").data;
    const auto& b1 = reg.at("se.fc1.bias").data;
    const auto& w2 = reg.at("se.fc2.weight").data;
    const auto& b2 = reg.at("se.fc2.bias").data;
    std::vector<double> hid(H);
    for (int h = 0; h < H; ++h) {
        double acc = b1[std::size_t(h)];
        for (int c = 0; c < C; ++c) acc += in.data[std::size_t(c)] * w1[std::size_t(c * H + h)];
        hid[std::size_t(h)] = std::max(0.0, acc);
    }
    for (int c = 0; c < C; ++c) {
        double acc = b2[std::size_t(c)];
        for (int h = 0; h < H; ++h) acc += hid[std::size_t(h)] * w2[std::size_t(h * C + c)];
        const double expect = 1.0 / (1.0 + std::exp(-acc));
        EXPECT_NEAR(g.value(y).data[std::size_t(c)], expect, 1e-12);
    }
}

TEST(SeBlock, PadRuleForSmallChannels) {
    // hidden = max(1, C/r)
    EXPECT_EQ(LayerSpec::se(2, 4).se_hidden(), 1);
    ParamRegistry<float> reg;
    create_layer_params(reg, "se", LayerSpec::se(2, 4));
    EXPECT_EQ(reg.at("se.fc1.weight").shape, (Shape{2, 1}));
}

// ---------------------------------------------------------------------------
// stem / downsampler
// ---------------------------------------------------------------------------

TEST(Stem, QuartersSpatialDims) {
    ParamRegistry<float> reg;
    for_each_stem_layer("stem", 3, 16, [&](const std::string& n, const LayerSpec& s) {
        create_layer_params(reg, n, s);
    });
    init_params(reg, 7);
    Graph<float> g;
    Rng rng(31);
    Tensor<float> img({1, 3, 64, 64});
    for (auto& v : img.data) v = float(rng.uniform(0, 1));
    auto y = stem_forward(g, g.leaf(img), reg, "stem");
    EXPECT_EQ(g.value(y).shape, (Shape{1, 16, 16, 16}));
}

TEST(Stem, ZeroConvAndBetaGiveZeros) {
    ParamRegistry<double> reg;
    for_each_stem_layer("stem", 3, 8, [&](const std::string& n, const LayerSpec& s) {
        create_layer_params(reg, n, s);
    });
    // conv output constant 0 everywhere, norm maps it to beta = 0, gelu(0) = 0
    for (auto& kv : reg)
        for (auto& v : kv.second.data)
            v = kv.first.find(".gamma") != std::string::npos ? 1.0 : 0.0;
    Graph<double> g;
    auto y = stem_forward(g, g.constant(Tensor<double>({1, 3, 32, 32}, 0.7)), reg, "stem");
    for (double v : g.value(y).data) EXPECT_EQ(v, 0.0);
}

TEST(Stem, OddSizeRejected) {
    ParamRegistry<float> reg;
    for_each_stem_layer("stem", 3, 8, [&](const std::string& n, const LayerSpec& s) {
        create_layer_params(reg, n, s);
    });
    Graph<float> g;
    Tensor<float> img({1, 3, 30, 32});
    EXPECT_THROW(stem_forward(g, g.leaf(img), reg, "stem"), ContractError);
}

TEST(Stem, SpatialDimsMatchConvArithmetic) {
    ParamRegistry<float> reg;
    for_each_stem_layer("stem", 1, 4, [&](const std::string& n, const LayerSpec& s) {
        create_layer_params(reg, n, s);
    });
    init_params(reg, 3);
    for (int hw : {32, 64, 96}) {
        Graph<float> g;
        Tensor<float> img({1, 1, hw, hw}, 0.25f);
        auto y = stem_forward(g, g.leaf(img), reg, "stem");
        // two k=3 s=2 p=1 convs: H -> floor((H+2-3)/2)+1, applied twice
        const int once = (hw + 2 - 3) / 2 + 1;
        const int twice = (once + 2 - 3) / 2 + 1;
        EXPECT_EQ(g.value(y).shape[2], twice);
        EXPECT_EQ(twice, hw / 4);
    }
}

// ---------------------------------------------------------------------------
// init
// ---------------------------------------------------------------------------

TEST(Init, SameSeedBitIdentical) {
    auto build = [] {
        ParamRegistry<float> reg;
        create_layer_params(reg, "a", LayerSpec::linear(16, 16));
        create_layer_params(reg, "b", LayerSpec::dwconv(8));
        create_layer_params(reg, "c", LayerSpec::layernorm(8));
        return reg;
    };
    auto r1 = build();
    auto r2 = build();
    init_params(r1, 99);
    init_params(r2, 99);
    for (std::size_t i = 0; i < r1.size(); ++i)
        EXPECT_EQ(r1.item(i).second.data, r2.item(i).second.data);
    init_params(r2, 100);
    EXPECT_NE(r1.item(0).second.data, r2.item(0).second.data);
}

TEST(Init, BiasesExactlyZeroGammaOne) {
    ParamRegistry<float> reg;
    create_layer_params(reg, "fc", LayerSpec::linear(4, 4));
    create_layer_params(reg, "ln", LayerSpec::layernorm(4));
    init_params(reg, 5);
    for (float v : reg.at("fc.bias").data) EXPECT_EQ(v, 0.0f);
    for (float v : reg.at("ln.beta").data) EXPECT_EQ(v, 0.0f);
    for (float v : reg.at("ln.gamma").data) EXPECT_EQ(v, 1.0f);
}

TEST(Init, TruncatedNormalMoments) {
    ParamRegistry<double> reg;
    create_layer_params(reg, "big", LayerSpec::linear(100, 100)); // 10^4 weights
    init_params(reg, 2024);
    const auto& w = reg.at("big.weight").data;
    double mean = 0;
    for (double v : w) {
        mean += v;
        EXPECT_LE(std::abs(v), 0.04 + 1e-12); // hard truncation at 2 sigma
    }
    mean /= double(w.size());
    double var = 0;
    for (double v : w) var += (v - mean) * (v - mean);
    var /= double(w.size());
    // std of a +/-2sigma truncated normal: sigma * sqrt(1 - 4*phi(2)/(2*Phi(2)-1))
    const double expect_std = 0.02 * 0.8796256;
    const double mean_tol = 3.0 * expect_std / 100.0;
    const double std_tol = 3.0 * expect_std / std::sqrt(2.0 * double(w.size()));
    EXPECT_LT(std::abs(mean), mean_tol);
    EXPECT_NEAR(std::sqrt(var), expect_std, std_tol);
}

// ---------------------------------------------------------------------------
// param-count formulas (property over random specs)
// ---------------------------------------------------------------------------

TEST(ParamCount, FormulasMatchCreatedTensors) {
    Rng rng(41);
    for (int trial = 0; trial < 40; ++trial) {
        const int cin = rng.uniform_int(1, 32);
        const int cout = rng.uniform_int(1, 32);
        const int k = 2 * rng.uniform_int(0, 2) + 1;
        std::vector<LayerSpec> specs = {
            LayerSpec::linear(cin, cout),
            LayerSpec::dwconv(cin, k),
            LayerSpec::layernorm(cin),
            LayerSpec::se(4 * rng.uniform_int(1, 8), 4),
        };
        const int groups = rng.uniform_int(1, 4);
        specs.push_back(LayerSpec::conv(cin * groups, cout * groups, k, 1, k / 2, groups));
        for (const auto& s : specs) {
            ParamRegistry<float> reg;
            create_layer_params(reg, "x", s);
            EXPECT_EQ(reg.total_elements(), s.param_count());
        }
    }
}

TEST(ParamCount, SpecExampleValues) {
    EXPECT_EQ(LayerSpec::linear(4, 8).param_count(), 40);   // 4*8 + 8
    EXPECT_EQ(LayerSpec::dwconv(16, 3).param_count(), 160); // 16*9 + 16
    EXPECT_EQ(LayerSpec::layernorm(32).param_count(), 64);
    EXPECT_EQ(LayerSpec::se(8, 4).param_count(), 8 * 2 + 2 + 2 * 8 + 8);
}

TEST(Registry, DuplicateNameRejected) {
    ParamRegistry<float> reg;
    create_layer_params(reg, "a", LayerSpec::linear(2, 2));
    EXPECT_THROW(create_layer_params(reg, "a", LayerSpec::linear(2, 2)), ContractError);
}

TEST(Forward, DeterministicBitwise) {
    ParamRegistry<float> reg;
    create_layer_params(reg, "fc", LayerSpec::linear(6, 6));
    init_params(reg, 17);
    Rng rng(55);
    Tensor<float> x = rnd<float>(rng, {2, 6, 3, 3});
    auto run = [&] {
        Graph<float> g;
        return g.value(linear_forward(g, g.leaf(x), reg, "fc")).data;
    };
    EXPECT_EQ(run(), run());
}
