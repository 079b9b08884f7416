#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "oracles.hpp"
#include "tuni/gradcheck.hpp"
#include "tuni/graph.hpp"
#include "tuni/verify.hpp"

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
// elementwise
// ---------------------------------------------------------------------------

TEST(Elementwise, HandMulCase) {
    Graph<float> g;
    auto a = g.constant(Tensor<float>({2}, std::vector<float>{1, 2}));
    auto b = g.constant(Tensor<float>({2}, std::vector<float>{3, 4}));
    auto out = mul(a, b);
    EXPECT_EQ(g.value(out).data, (std::vector<float>{3, 8}));
}

TEST(Elementwise, AbsDiffIdentityIsZero) {
    Rng rng(11);
    Graph<float> g;
    Tensor<float> x = rnd<float>(rng, {2, 3, 4, 4});
    auto out = absdiff(g.leaf(x), g.leaf(x));
    for (float v : g.value(out).data) EXPECT_EQ(v, 0.0f);
}

TEST(Elementwise, AllKindsMatchScalarLoopOracleExactly) {
    Rng rng(12);
    Tensor<double> a = rnd<double>(rng, {2, 3, 4, 4});
    Tensor<double> b = rnd<double>(rng, {2, 3, 4, 4});
    const std::pair<EwKind, oracle::Ew> kinds[] = {
        {EwKind::Add, oracle::Ew::Add},
        {EwKind::Sub, oracle::Ew::Sub},
        {EwKind::Mul, oracle::Ew::Mul},
        {EwKind::AbsDiff, oracle::Ew::AbsDiff},
    };
    for (auto [k, ok] : kinds) {
        Graph<double> g;
        auto out = elementwise(g.leaf(a), g.leaf(b), k);
        const auto expect = oracle::elementwise(a.data, b.data, ok);
        ASSERT_EQ(g.value(out).data.size(), expect.size());
        for (std::size_t i = 0; i < expect.size(); ++i)
            EXPECT_EQ(g.value(out).data[i], expect[i]);
    }
}

TEST(Elementwise, BroadcastChannelVector) {
    Rng rng(13);
    Graph<double> g;
    Tensor<double> a = rnd<double>(rng, {2, 3, 2, 2});
    Tensor<double> b = rnd<double>(rng, {1, 3, 1, 1});
    auto out = mul(g.leaf(a), g.leaf(b));
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 3; ++c)
            for (int i = 0; i < 4; ++i) {
                const std::size_t idx = std::size_t((n * 3 + c) * 4 + i);
                EXPECT_EQ(g.value(out).data[idx], a.data[idx] * b.data[std::size_t(c)]);
            }
}

TEST(Elementwise, InvalidBroadcastThrows) {
    Graph<float> g;
    auto a = g.constant(Tensor<float>({2, 3}));
    auto b = g.constant(Tensor<float>({2, 2}));
    EXPECT_THROW(add(a, b), DimensionError);
}

TEST(Elementwise, NonFiniteSurfacedNotPropagated) {
    Graph<float> g;
    Tensor<float> a({2}, std::vector<float>{1.0f, 0.0f});
    Tensor<float> b({2}, std::vector<float>{1.0f, 0.0f});
    EXPECT_THROW(div(g.leaf(a), g.leaf(b)), NumericError);
    Tensor<float> inf({1}, std::vector<float>{std::numeric_limits<float>::infinity()});
    EXPECT_THROW(g.constant(inf), NumericError);
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

TEST(Matmul, IdentityPreserves) {
    Rng rng(21);
    Graph<double> g;
    Tensor<double> a = rnd<double>(rng, {4, 4});
    Tensor<double> eye({4, 4});
    for (int i = 0; i < 4; ++i) eye.data[std::size_t(i * 4 + i)] = 1.0;
    auto out = matmul(g.leaf(a), g.constant(eye));
    for (std::size_t i = 0; i < a.data.size(); ++i)
        EXPECT_EQ(g.value(out).data[i], a.data[i]);
}

TEST(Matmul, MatchesTripleLoopOracleExactly) {
    Rng rng(22);
    Tensor<double> a = rnd<double>(rng, {3, 5});
    Tensor<double> b = rnd<double>(rng, {5, 2});
    Graph<double> g;
    auto out = matmul(g.leaf(a), g.leaf(b));
    const auto expect = oracle::matmul(a.data, b.data, 3, 5, 2);
    for (std::size_t i = 0; i < expect.size(); ++i)
        EXPECT_EQ(g.value(out).data[i], expect[i]); // 0 ulps: same accumulation order
}

TEST(Matmul, GradOfSumIsRowSumsOfB) {
    Rng rng(23);
    Tensor<double> a = rnd<double>(rng, {3, 5});
    Tensor<double> b = rnd<double>(rng, {5, 2});
    a.requires_grad = true;
    auto eval = [&](bool want) {
        Graph<double> g;
        auto loss = reduce_sum_all(matmul(g.leaf(a), g.leaf(b)));
        const double v = g.value(loss).data[0];
        if (want) g.backward(loss);
        return v;
    };
    auto rep = gradcheck(eval, {&a}, 1e-5, 1e-7);
    EXPECT_TRUE(rep.pass) << rep.max_rel_err;
    // analytic check: d(sum(AB))/dA[m,k] = sum_n B[k,n]
    for (int m = 0; m < 3; ++m)
        for (int k = 0; k < 5; ++k) {
            double rowsum = 0;
            for (int n = 0; n < 2; ++n) rowsum += b.data[std::size_t(k * 2 + n)];
            EXPECT_NEAR(a.grad[std::size_t(m * 5 + k)], rowsum, 1e-12);
        }
}

TEST(Matmul, InnerDimMismatchThrows) {
    Graph<float> g;
    auto a = g.constant(Tensor<float>({3, 5}));
    auto b = g.constant(Tensor<float>({4, 2}));
    EXPECT_THROW(matmul(a, b), DimensionError);
}

TEST(Matmul, Float32MatchesFloat64OracleWithin1e5) {
    Rng rng(24);
    Tensor<float> a = rnd<float>(rng, {7, 9});
    Tensor<float> b = rnd<float>(rng, {9, 5});
    Graph<float> g;
    auto out = matmul(g.leaf(a), g.leaf(b));
    const auto expect =
        oracle::matmul(a.cast<double>().data, b.cast<double>().data, 7, 9, 5);
    for (std::size_t i = 0; i < expect.size(); ++i) {
        const double rel = std::abs(double(g.value(out).data[i]) - expect[i]) /
                           std::max(1.0, std::abs(expect[i]));
        EXPECT_LT(rel, 1e-5);
    }
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

TEST(Softmax, EqualLogitsUniform) {
    Graph<float> g;
    auto out = softmax(g.constant(Tensor<float>({1, 4}, 3.7f)), 1);
    for (float v : g.value(out).data) EXPECT_NEAR(v, 0.25f, 1e-7f);
}

TEST(Softmax, ShiftInvariance) {
    Rng rng(31);
    Tensor<double> x = rnd<double>(rng, {3, 6});
    Tensor<double> shifted = x;
    for (auto& v : shifted.data) v += 17.25;
    Graph<double> g;
    auto a = softmax(g.leaf(x), 1);
    auto b = softmax(g.leaf(shifted), 1);
    for (std::size_t i = 0; i < x.data.size(); ++i)
        EXPECT_NEAR(g.value(a).data[i], g.value(b).data[i], 1e-6);
}

TEST(Softmax, MatchesDirectFormulaOracle) {
    Rng rng(32);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor<double> x = rnd<double>(rng, {4, 7});
        Graph<double> g;
        auto out = softmax(g.leaf(x), 1);
        const auto expect = oracle::softmax_rows(x.data, 4, 7);
        for (std::size_t i = 0; i < expect.size(); ++i) {
            const double rel =
                std::abs(g.value(out).data[i] - expect[i]) / std::max(1.0, expect[i]);
            EXPECT_LT(rel, 1e-6);
        }
    }
}

TEST(Softmax, NonNegativeAndRowsSumToOne) {
    Rng rng(33);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor<double> x = rnd<double>(rng, {2, 5, 3}, -8.0, 8.0);
        Graph<double> g;
        auto out = softmax(g.leaf(x), 1);
        const auto& p = g.value(out);
        for (double v : p.data) EXPECT_GE(v, 0.0);
        for (int n = 0; n < 2; ++n)
            for (int i = 0; i < 3; ++i) {
                double s = 0;
                for (int c = 0; c < 5; ++c) s += p.data[std::size_t((n * 5 + c) * 3 + i)];
                EXPECT_NEAR(s, 1.0, 1e-6);
            }
    }
}

// ---------------------------------------------------------------------------
// reduce
// ---------------------------------------------------------------------------

TEST(Reduce, ConstantChannelMean) {
    Graph<float> g;
    auto out = reduce(g.constant(Tensor<float>({1, 4, 3, 3}, 2.5f)), 1, ReduceKind::Mean, true);
    ASSERT_EQ(g.value(out).shape, (Shape{1, 1, 3, 3}));
    for (float v : g.value(out).data) EXPECT_EQ(v, 2.5f);
}

TEST(Reduce, MeanEqualsSumOverLenExactly) {
    Rng rng(41);
    Tensor<double> x = rnd<double>(rng, {2, 5, 3});
    Graph<double> g;
    auto xl = g.leaf(x);
    auto m = reduce(xl, 1, ReduceKind::Mean, false);
    auto s = reduce(xl, 1, ReduceKind::Sum, false);
    for (std::size_t i = 0; i < g.value(m).data.size(); ++i)
        EXPECT_EQ(g.value(m).data[i], g.value(s).data[i] / 5.0);
}

TEST(Reduce, ChannelMeanMatchesLoopOracle) {
    Rng rng(42);
    Tensor<double> x = rnd<double>(rng, {1, 4, 3, 3});
    Graph<double> g;
    auto out = reduce(g.leaf(x), 1, ReduceKind::Mean, false);
    for (int i = 0; i < 9; ++i) {
        double acc = 0;
        for (int c = 0; c < 4; ++c) acc += x.data[std::size_t(c * 9 + i)];
        EXPECT_NEAR(g.value(out).data[std::size_t(i)], acc / 4.0, 1e-15);
    }
}

// ---------------------------------------------------------------------------
// adaptive_avg_pool
// ---------------------------------------------------------------------------

TEST(AdaptivePool, SameSizeIsIdentity) {
    Rng rng(51);
    Tensor<double> x = rnd<double>(rng, {1, 2, 7, 7});
    Graph<double> g;
    auto out = adaptive_avg_pool(g.leaf(x), 7, 7);
    for (std::size_t i = 0; i < x.data.size(); ++i)
        EXPECT_EQ(g.value(out).data[i], x.data[i]);
}

TEST(AdaptivePool, ConstantInputConstantOutput) {
    Graph<float> g;
    auto out = adaptive_avg_pool(g.constant(Tensor<float>({1, 3, 10, 6}, -1.25f)), 4, 3);
    for (float v : g.value(out).data) EXPECT_NEAR(v, -1.25f, 1e-6f);
}

TEST(AdaptivePool, HalvingMatchesWindowOracle) {
    Rng rng(52);
    Tensor<double> x = rnd<double>(rng, {1, 2, 14, 14});
    Graph<double> g;
    auto out = adaptive_avg_pool(g.leaf(x), 7, 7);
    const auto expect = oracle::adaptive_avg_pool(x.data, 1, 2, 14, 14, 7, 7);
    for (std::size_t i = 0; i < expect.size(); ++i)
        EXPECT_NEAR(g.value(out).data[i], expect[i], 1e-14);
    // spot check: cell (0,0) is the mean of its 2x2 window
    EXPECT_NEAR(g.value(out).data[0],
                (x.data[0] + x.data[1] + x.data[14] + x.data[15]) / 4.0, 1e-14);
}

TEST(AdaptivePool, MeanPreservingOnDivisibleGrids) {
    Rng rng(53);
    Tensor<double> x = rnd<double>(rng, {1, 1, 12, 8});
    Graph<double> g;
    auto out = adaptive_avg_pool(g.leaf(x), 4, 4);
    double min = 0, mout = 0;
    for (double v : x.data) min += v;
    for (double v : g.value(out).data) mout += v;
    EXPECT_NEAR(min / double(x.numel()), mout / double(g.value(out).numel()), 1e-6);
}

TEST(AdaptivePool, UpscaleTargetThrows) {
    Graph<float> g;
    EXPECT_THROW(adaptive_avg_pool(g.constant(Tensor<float>({1, 1, 4, 4})), 5, 4),
                 DimensionError);
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

TEST(Conv2d, DepthwiseIdentityKernel) {
    Rng rng(61);
    Tensor<double> x = rnd<double>(rng, {1, 3, 6, 6});
    Tensor<double> w({3, 1, 3, 3});
    for (int c = 0; c < 3; ++c) w.data[std::size_t(c * 9 + 4)] = 1.0; // center tap
    Graph<double> g;
    auto out = conv2d(g.leaf(x), g.leaf(w), g.constant(Tensor<double>({3})), 1, 1, 3);
    for (std::size_t i = 0; i < x.data.size(); ++i)
        EXPECT_EQ(g.value(out).data[i], x.data[i]);
}

TEST(Conv2d, AveragingKernelOnConstantInterior) {
    Graph<double> g;
    Tensor<double> w({1, 1, 3, 3}, 1.0 / 9.0);
    auto out = conv2d(g.constant(Tensor<double>({1, 1, 5, 5}, 2.0)), g.constant(w),
                      g.constant(Tensor<double>({1})), 1, 1, 1);
    const auto& o = g.value(out);
    for (int y = 1; y < 4; ++y)
        for (int x = 1; x < 4; ++x) EXPECT_NEAR(o.data[std::size_t(y * 5 + x)], 2.0, 1e-12);
}

TEST(Conv2d, RandomCasesMatchSixLoopOracle) {
    Rng rng(62);
    struct Case {
        int n, cin, h, w, cout, k, stride, pad, groups;
    } cases[] = {
        {2, 3, 7, 6, 4, 3, 1, 1, 1},
        {1, 4, 8, 8, 4, 3, 2, 1, 4}, // depthwise stride 2
        {1, 6, 5, 5, 4, 3, 1, 1, 2},
        {2, 2, 9, 9, 3, 5, 1, 2, 1},
    };
    for (const auto& c : cases) {
        Tensor<float> x = rnd<float>(rng, {c.n, c.cin, c.h, c.w});
        Tensor<float> w = rnd<float>(rng, {c.cout, c.cin / c.groups, c.k, c.k}, -0.7, 0.7);
        Tensor<float> b = rnd<float>(rng, {c.cout}, -0.5, 0.5);
        Graph<float> g;
        auto out = conv2d(g.leaf(x), g.leaf(w), g.leaf(b), c.stride, c.pad, c.groups);
        const auto expect = oracle::conv2d(x.cast<double>().data, w.cast<double>().data,
                                           b.cast<double>().data, c.n, c.cin, c.h, c.w, c.cout,
                                           c.k, c.k, c.stride, c.pad, c.groups);
        ASSERT_EQ(std::size_t(g.value(out).numel()), expect.size());
        for (std::size_t i = 0; i < expect.size(); ++i) {
            const double rel = std::abs(double(g.value(out).data[i]) - expect[i]) /
                               std::max(1.0, std::abs(expect[i]));
            EXPECT_LT(rel, 1e-6);
        }
    }
}

TEST(Conv2d, InvalidGroupsThrow) {
    Graph<float> g;
    auto x = g.constant(Tensor<float>({1, 3, 4, 4}));
    auto w = g.constant(Tensor<float>({4, 2, 3, 3}));
    auto b = g.constant(Tensor<float>({4}));
    EXPECT_THROW(conv2d(x, w, b, 1, 1, 2), DimensionError);
}

// ---------------------------------------------------------------------------
// bilinear_upsample
// ---------------------------------------------------------------------------

TEST(Upsample, ConstantPreserved) {
    Graph<float> g;
    auto out = bilinear_upsample(g.constant(Tensor<float>({1, 2, 3, 3}, 0.75f)), 8, 5);
    for (float v : g.value(out).data) EXPECT_NEAR(v, 0.75f, 1e-6f);
}

TEST(Upsample, SingleCellReplicates) {
    Graph<float> g;
    auto out = bilinear_upsample(g.constant(Tensor<float>({1, 1, 1, 1}, 3.5f)), 4, 6);
    for (float v : g.value(out).data) EXPECT_EQ(v, 3.5f);
}

TEST(Upsample, RampMatchesInterpolationOracle) {
    Tensor<double> x({1, 1, 2, 2}, std::vector<double>{0.0, 1.0, 2.0, 3.0});
    Graph<double> g;
    auto out = bilinear_upsample(g.leaf(x), 4, 4);
    const auto expect = oracle::bilinear_upsample(x.data, 1, 1, 2, 2, 4, 4);
    for (std::size_t i = 0; i < expect.size(); ++i)
        EXPECT_NEAR(g.value(out).data[i], expect[i], 1e-14);
}

TEST(Upsample, SameSizeIsExactCopy) {
    Rng rng(71);
    Tensor<double> x = rnd<double>(rng, {1, 2, 5, 5});
    Graph<double> g;
    auto out = bilinear_upsample(g.leaf(x), 5, 5);
    for (std::size_t i = 0; i < x.data.size(); ++i)
        EXPECT_EQ(g.value(out).data[i], x.data[i]);
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

TEST(Backward, ProductRuleGradIsOtherOperand) {
    Rng rng(81);
    Tensor<double> a = rnd<double>(rng, {3, 4});
    Tensor<double> b = rnd<double>(rng, {3, 4});
    a.requires_grad = true;
    Graph<double> g;
    auto loss = reduce_sum_all(mul(g.leaf(a), g.leaf(b)));
    g.backward(loss);
    ASSERT_EQ(a.grad.size(), a.data.size());
    for (std::size_t i = 0; i < b.data.size(); ++i) EXPECT_EQ(a.grad[i], b.data[i]);
}

TEST(Backward, SoftmaxSumConservation) {
    Rng rng(82);
    Tensor<double> x = rnd<double>(rng, {2, 6});
    x.requires_grad = true;
    Graph<double> g;
    auto loss = reduce_sum_all(softmax(g.leaf(x), 1));
    g.backward(loss);
    for (double v : x.grad) EXPECT_NEAR(v, 0.0, 1e-6);
}

TEST(Backward, NonScalarLossThrows) {
    Graph<float> g;
    Tensor<float> x({2, 2}, 1.0f);
    x.requires_grad = true;
    auto v = mul(g.leaf(x), g.leaf(x));
    EXPECT_THROW(g.backward(v), ContractError);
}

TEST(Backward, RepeatedBackwardThrows) {
    Graph<float> g;
    Tensor<float> x({2}, 1.0f);
    x.requires_grad = true;
    auto loss = reduce_sum_all(mul(g.leaf(x), g.leaf(x)));
    g.backward(loss);
    EXPECT_THROW(g.backward(loss), ContractError);
}

TEST(Backward, CrossGraphValThrows) {
    Graph<float> g1, g2;
    Tensor<float> x({2}, 1.0f);
    auto a = g1.leaf(x);
    EXPECT_THROW(g2.value(a), ContractError);
}

TEST(Backward, AccumulationOverBranchesIsAdditive) {
    Rng rng(83);
    Tensor<double> x = rnd<double>(rng, {4});
    Tensor<double> a = rnd<double>(rng, {4});
    Tensor<double> b = rnd<double>(rng, {4});
    x.requires_grad = true;

    Graph<double> g;
    auto xl = g.leaf(x);
    auto loss = add(reduce_sum_all(mul(xl, g.leaf(a))), reduce_sum_all(mul(xl, g.leaf(b))));
    g.backward(loss);
    const auto both = x.grad;

    Graph<double> g2;
    auto l2 = reduce_sum_all(mul(g2.leaf(x), g2.leaf(a)));
    g2.backward(l2);
    const auto only_a = x.grad;
    Graph<double> g3;
    auto l3 = reduce_sum_all(mul(g3.leaf(x), g3.leaf(b)));
    g3.backward(l3);
    const auto only_b = x.grad;

    for (std::size_t i = 0; i < both.size(); ++i)
        EXPECT_EQ(both[i], only_a[i] + only_b[i]);
}

TEST(Backward, UnusedLeafGetsZeroGrad) {
    Tensor<float> x({3}, 1.0f);
    Tensor<float> unused({2}, 1.0f);
    x.requires_grad = true;
    unused.requires_grad = true;
    Graph<float> g;
    auto xl = g.leaf(x);
    (void)g.leaf(unused);
    g.backward(reduce_sum_all(mul(xl, xl)));
    ASSERT_EQ(unused.grad.size(), unused.data.size());
    for (float v : unused.grad) EXPECT_EQ(v, 0.0f);
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

TEST(GradCheck, LinearLayerPasses) {
    Rng rng(91);
    Tensor<double> x = rnd<double>(rng, {3, 8});
    Tensor<double> w = rnd<double>(rng, {8, 4}, -0.8, 0.8);
    Tensor<double> b = rnd<double>(rng, {4}, -0.5, 0.5);
    auto eval = [&](bool want) {
        Graph<double> g;
        Tensor<double> coeff({3, 4});
        Rng pr(7);
        for (auto& v : coeff.data) v = pr.uniform(-1, 1);
        auto y = linear_channels(g.leaf(x), g.leaf(w), g.leaf(b));
        auto loss = reduce_sum_all(mul(y, g.constant(coeff)));
        const double v = g.value(loss).data[0];
        if (want) g.backward(loss);
        return v;
    };
    auto rep = gradcheck(eval, {&x, &w, &b});
    EXPECT_TRUE(rep.pass) << rep.max_rel_err << " at " << rep.worst;
}

TEST(GradCheck, CosineWeightPathPasses) {
    Rng rng(92);
    Tensor<double> x = rnd<double>(rng, {1, 4, 5, 5}, -1.5, 1.5);
    auto eval = [&](bool want) {
        Graph<double> g;
        auto w = cosine_channel_weights(g, g.leaf(x));
        Tensor<double> coeff({1, 4});
        Rng pr(7);
        for (auto& v : coeff.data) v = pr.uniform(-1, 1);
        auto loss = reduce_sum_all(mul(w, g.constant(coeff)));
        const double v = g.value(loss).data[0];
        if (want) g.backward(loss);
        return v;
    };
    auto rep = gradcheck(eval, {&x});
    EXPECT_TRUE(rep.pass) << rep.max_rel_err << " at " << rep.worst;
}

TEST(GradCheck, CorruptedBackwardFails) {
    Rng rng(93);
    Tensor<double> x = rnd<double>(rng, {3, 4});
    auto eval = [&](bool want) {
        Graph<double> g;
        auto loss = reduce_sum_all(mul(g.leaf(x), g.leaf(x)));
        const double v = g.value(loss).data[0];
        if (want) {
            g.backward(loss);
            x.grad[2] += 1e-2; // deliberate corruption
        }
        return v;
    };
    auto rep = gradcheck(eval, {&x});
    EXPECT_FALSE(rep.pass);
}

// ---------------------------------------------------------------------------
// full primitive battery: 20 seeds per op (invariant)
// ---------------------------------------------------------------------------

TEST(GradCheck, AllPrimitivesTwentySeeds) {
    const auto results = run_gradcheck_suite(1234, 20, nullptr, /*include_modules=*/false);
    ASSERT_FALSE(results.empty());
    for (const auto& r : results)
        EXPECT_TRUE(r.pass) << r.name << " max_rel_err=" << r.max_rel_err;
}
