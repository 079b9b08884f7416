#pragma once

#include <chrono>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "tuni/decoder.hpp"
#include "tuni/encoder.hpp"
#include "tuni/gradcheck.hpp"
#include "tuni/loss.hpp"

namespace tuni {

struct CheckOutcome {
    std::string name;
    double max_rel_err = 0.0;
    bool pass = true;
};

namespace verify_detail {

inline Tensor<double> rand_tensor(Rng& rng, Shape s, double lo = -2.0, double hi = 2.0,
                                  double kink_band = 0.0) {
    Tensor<double> t(std::move(s));
    for (auto& v : t.data) {
        do {
            v = rng.uniform(lo, hi);
        } while (kink_band > 0.0 && std::abs(v) < kink_band);
    }
    return t;
}

inline void randomize_params(ParamRegistry<double>& reg, Rng& rng) {
    for (auto& kv : reg) {
        const bool is_gain = kv.first.size() >= 6 &&
                             kv.first.compare(kv.first.size() - 6, 6, ".gamma") == 0;
        for (auto& v : kv.second.data)
            v = is_gain ? rng.uniform(0.8, 1.2) : rng.uniform(-0.4, 0.4);
    }
}

/// Scalar probe: weighted sum with fixed random coefficients so every output
/// coordinate influences the loss.
inline Val<double> probe(Graph<double>& g, Val<double> v, Rng& rng) {
    Tensor<double> c(g.value(v).shape);
    for (auto& x : c.data) x = rng.uniform(-1.0, 1.0);
    return reduce_sum_all(mul(v, g.constant(std::move(c))));
}

using LossBuilder = std::function<Val<double>(Graph<double>&)>;

inline GradCheckReport run_one(const std::vector<Tensor<double>*>& inputs,
                               const LossBuilder& make_loss, double h = 1e-5,
                               double tol = 1e-4) {
    auto eval = [&](bool want) {
        Graph<double> g;
        Val<double> loss = make_loss(g);
        const double v = g.value(loss).data[0];
        if (want) g.backward(loss);
        return v;
    };
    return gradcheck(eval, inputs, h, tol);
}

struct Suite {
    std::vector<CheckOutcome> results;
    std::uint64_t base_seed;
    int nseeds;
    std::ostream* log;

    void item(const std::string& name,
              const std::function<GradCheckReport(Rng&)>& fn) {
        CheckOutcome out;
        out.name = name;
        for (int s = 0; s < nseeds; ++s) {
            Rng rng(derive_seed(base_seed, std::uint64_t(results.size()) * 1000 + s));
            const GradCheckReport rep = fn(rng);
            out.max_rel_err = std::max(out.max_rel_err, rep.max_rel_err);
            out.pass = out.pass && rep.pass;
        }
        if (log)
            (*log) << (out.pass ? "[PASS] " : "[FAIL] ") << name
                   << "  max_rel_err=" << out.max_rel_err << "\n";
        results.push_back(out);
    }
};

} // namespace verify_detail

/// Gradient verification battery: every primitive op, the three fusion
/// submodules (plus the DFormer substitute and the reversed attention
/// orientation), one full encoder block, the decoder, and the total loss.
/// Each item runs over `nseeds` seeds at 64-bit with h=1e-5, tol=1e-4.
inline std::vector<CheckOutcome> run_gradcheck_suite(std::uint64_t base_seed = 42,
                                                     int nseeds = 5,
                                                     std::ostream* log = nullptr,
                                                     bool include_modules = true) {
    using namespace verify_detail;
    Suite suite{{}, base_seed, nseeds, log};

    // --- elementwise ---
    for (auto kind : {EwKind::Add, EwKind::Sub, EwKind::Mul, EwKind::AbsDiff}) {
        const char* kn = kind == EwKind::Add ? "elementwise.add"
                         : kind == EwKind::Sub ? "elementwise.sub"
                         : kind == EwKind::Mul ? "elementwise.mul"
                                               : "elementwise.absdiff";
        suite.item(kn, [kind](Rng& rng) {
            // absdiff ties sit on a kink; keep operands separated
            auto a = rand_tensor(rng, {2, 3, 4});
            auto b = rand_tensor(rng, {2, 3, 4}, -2.0, 2.0);
            if (kind == EwKind::AbsDiff)
                for (std::size_t i = 0; i < b.data.size(); ++i)
                    if (std::abs(a.data[i] - b.data[i]) < 0.05) b.data[i] += 0.1;
            return run_one({&a, &b}, [&](Graph<double>& g) {
                Rng pr(7);
                return probe(g, elementwise(g.leaf(a), g.leaf(b), kind), pr);
            });
        });
        suite.item(std::string(kn) + ".broadcast", [kind](Rng& rng) {
            auto a = rand_tensor(rng, {2, 3, 2, 2});
            auto b = rand_tensor(rng, {1, 3, 1, 1}, 0.3, 1.8);
            return run_one({&a, &b}, [&](Graph<double>& g) {
                Rng pr(7);
                return probe(g, elementwise(g.leaf(a), g.leaf(b), kind), pr);
            });
        });
    }
    suite.item("elementwise.div", [](Rng& rng) {
        auto a = rand_tensor(rng, {2, 3, 4});
        auto b = rand_tensor(rng, {3, 4}, 0.5, 2.0); // broadcast, away from 0
        return run_one({&a, &b}, [&](Graph<double>& g) {
            Rng pr(7);
            return probe(g, div(g.leaf(a), g.leaf(b)), pr);
        });
    });
    suite.item("affine", [](Rng& rng) {
        auto x = rand_tensor(rng, {2, 5});
        return run_one({&x}, [&](Graph<double>& g) {
            Rng pr(7);
            return probe(g, affine(g.leaf(x), 1.7, -0.3), pr);
        });
    });

    // --- matmul ---
    suite.item("matmul.2d", [](Rng& rng) {
        auto a = rand_tensor(rng, {3, 5});
        auto b = rand_tensor(rng, {5, 2});
        return run_one({&a, &b}, [&](Graph<double>& g) {
            Rng pr(7);
            return probe(g, matmul(g.leaf(a), g.leaf(b)), pr);
        });
    });
    suite.item("matmul.batched", [](Rng& rng) {
        auto a = rand_tensor(rng, {2, 3, 4});
        auto b = rand_tensor(rng, {2, 4, 2});
        return run_one({&a, &b}, [&](Graph<double>& g) {
            Rng pr(7);
            return probe(g, matmul(g.leaf(a), g.leaf(b)), pr);
        });
    });
    suite.item("matmul.broadcast", [](Rng& rng) {
        auto a = rand_tensor(rng, {2, 3, 4});
        auto b = rand_tensor(rng, {4, 2});
        return run_one({&a, &b}, [&](Graph<double>& g) {
            Rng pr(7);
            return probe(g, matmul(g.leaf(a), g.leaf(b)), pr);
        });
    });

    // --- softmax / reductions ---
    suite.item("softmax.axis1", [](Rng& rng) {
        auto x = rand_tensor(rng, {2, 5});
        return run_one({&x}, [&](Graph<double>& g) {
            Rng pr(7);
            return probe(g, softmax(g.leaf(x), 1), pr);
        });
    });
    suite.item("softmax.inner_axis", [](Rng& rng) {
        auto x = rand_tensor(rng, {2, 3, 4});
        return run_one({&x}, [&](Graph<double>& g) {
            Rng pr(7);
            return probe(g, softmax(g.leaf(x), 1), pr);
        });
    });
    suite.item("reduce.sum", [](Rng& rng) {
        auto x = rand_tensor(rng, {2, 3, 4});
        return run_one({&x}, [&](Graph<double>& g) {
            Rng pr(7);
            return probe(g, reduce(g.leaf(x), 1, ReduceKind::Sum, false), pr);
        });
    });
    suite.item("reduce.mean_keepdim", [](Rng& rng) {
        auto x = rand_tensor(rng, {2, 3, 4});
        return run_one({&x}, [&](Graph<double>& g) {
            Rng pr(7);
            return probe(g, reduce(g.leaf(x), 2, ReduceKind::Mean, true), pr);
        });
    });

    // --- shape ops ---
    suite.item("reshape", [](Rng& rng) {
        auto x = rand_tensor(rng, {2, 3, 4});
        return run_one({&x}, [&](Graph<double>& g) {
            Rng pr(7);
            return probe(g, reshape(g.leaf(x), {6, 4}), pr);
        });
    });
    suite.item("transpose", [](Rng& rng) {
        auto x = rand_tensor(rng, {2, 3, 4});
        return run_one({&x}, [&](Graph<double>& g) {
            Rng pr(7);
            return probe(g, transpose(g.leaf(x), 0, 2), pr);
        });
    });
    suite.item("concat", [](Rng& rng) {
        auto a = rand_tensor(rng, {1, 2, 3, 3});
        auto b = rand_tensor(rng, {1, 3, 3, 3});
        auto c = rand_tensor(rng, {1, 1, 3, 3});
        return run_one({&a, &b, &c}, [&](Graph<double>& g) {
            Rng pr(7);
            return probe(g, concat<double>({g.leaf(a), g.leaf(b), g.leaf(c)}, 1), pr);
        });
    });
    suite.item("slice", [](Rng& rng) {
        auto x = rand_tensor(rng, {2, 6, 2});
        return run_one({&x}, [&](Graph<double>& g) {
            Rng pr(7);
            return probe(g, slice(g.leaf(x), 1, 1, 3), pr);
        });
    });

    // --- activations ---
    suite.item("relu", [](Rng& rng) {
        auto x = rand_tensor(rng, {2, 6}, -2.0, 2.0, 0.05);
        return run_one({&x}, [&](Graph<double>& g) {
            Rng pr(7);
            return probe(g, relu(g.leaf(x)), pr);
        });
    });
    suite.item("gelu", [](Rng& rng) {
        auto x = rand_tensor(rng, {2, 6});
        return run_one({&x}, [&](Graph<double>& g) {
            Rng pr(7);
            return probe(g, gelu(g.leaf(x)), pr);
        });
    });
    suite.item("sigmoid", [](Rng& rng) {
        auto x = rand_tensor(rng, {2, 6});
        return run_one({&x}, [&](Graph<double>& g) {
            Rng pr(7);
            return probe(g, sigmoid(g.leaf(x)), pr);
        });
    });
    suite.item("sqrt", [](Rng& rng) {
        auto x = rand_tensor(rng, {2, 4}, 0.2, 2.0);
        return run_one({&x}, [&](Graph<double>& g) {
            Rng pr(7);
            return probe(g, sqrt_op(g.leaf(x)), pr);
        });
    });

    // --- linear / conv / pool / resize / norm ---
    suite.item("linear.nchw", [](Rng& rng) {
        auto x = rand_tensor(rng, {2, 3, 2, 2});
        auto w = rand_tensor(rng, {3, 4}, -0.8, 0.8);
        auto b = rand_tensor(rng, {4}, -0.5, 0.5);
        return run_one({&x, &w, &b}, [&](Graph<double>& g) {
            Rng pr(7);
            return probe(g, linear_channels(g.leaf(x), g.leaf(w), g.leaf(b)), pr);
        });
    });
    suite.item("linear.2d", [](Rng& rng) {
        auto x = rand_tensor(rng, {3, 5});
        auto w = rand_tensor(rng, {5, 2}, -0.8, 0.8);
        auto b = rand_tensor(rng, {2}, -0.5, 0.5);
        return run_one({&x, &w, &b}, [&](Graph<double>& g) {
            Rng pr(7);
            return probe(g, linear_channels(g.leaf(x), g.leaf(w), g.leaf(b)), pr);
        });
    });
    suite.item("conv2d.dense", [](Rng& rng) {
        auto x = rand_tensor(rng, {1, 2, 5, 5});
        auto w = rand_tensor(rng, {3, 2, 3, 3}, -0.6, 0.6);
        auto b = rand_tensor(rng, {3}, -0.5, 0.5);
        return run_one({&x, &w, &b}, [&](Graph<double>& g) {
            Rng pr(7);
            return probe(g, conv2d(g.leaf(x), g.leaf(w), g.leaf(b), 1, 1, 1), pr);
        });
    });
    suite.item("conv2d.stride2", [](Rng& rng) {
        auto x = rand_tensor(rng, {1, 2, 6, 6});
        auto w = rand_tensor(rng, {3, 2, 3, 3}, -0.6, 0.6);
        auto b = rand_tensor(rng, {3}, -0.5, 0.5);
        return run_one({&x, &w, &b}, [&](Graph<double>& g) {
            Rng pr(7);
            return probe(g, conv2d(g.leaf(x), g.leaf(w), g.leaf(b), 2, 1, 1), pr);
        });
    });
    suite.item("conv2d.depthwise", [](Rng& rng) {
        auto x = rand_tensor(rng, {1, 3, 5, 5});
        auto w = rand_tensor(rng, {3, 1, 3, 3}, -0.6, 0.6);
        auto b = rand_tensor(rng, {3}, -0.5, 0.5);
        return run_one({&x, &w, &b}, [&](Graph<double>& g) {
            Rng pr(7);
            return probe(g, conv2d(g.leaf(x), g.leaf(w), g.leaf(b), 1, 1, 3), pr);
        });
    });
    suite.item("conv2d.grouped", [](Rng& rng) {
        auto x = rand_tensor(rng, {1, 4, 5, 5});
        auto w = rand_tensor(rng, {4, 2, 3, 3}, -0.6, 0.6);
        auto b = rand_tensor(rng, {4}, -0.5, 0.5);
        return run_one({&x, &w, &b}, [&](Graph<double>& g) {
            Rng pr(7);
            return probe(g, conv2d(g.leaf(x), g.leaf(w), g.leaf(b), 1, 1, 2), pr);
        });
    });
    suite.item("adaptive_avg_pool", [](Rng& rng) {
        auto x = rand_tensor(rng, {1, 2, 8, 8});
        return run_one({&x}, [&](Graph<double>& g) {
            Rng pr(7);
            return probe(g, adaptive_avg_pool(g.leaf(x), 3, 3), pr);
        });
    });
    suite.item("bilinear_upsample", [](Rng& rng) {
        auto x = rand_tensor(rng, {1, 2, 2, 3});
        return run_one({&x}, [&](Graph<double>& g) {
            Rng pr(7);
            return probe(g, bilinear_upsample(g.leaf(x), 5, 7), pr);
        });
    });
    suite.item("layernorm.nchw", [](Rng& rng) {
        auto x = rand_tensor(rng, {2, 4, 3, 3});
        auto gm = rand_tensor(rng, {4}, 0.8, 1.2);
        auto bt = rand_tensor(rng, {4}, -0.3, 0.3);
        return run_one({&x, &gm, &bt}, [&](Graph<double>& g) {
            Rng pr(7);
            return probe(g, layernorm_channels(g.leaf(x), g.leaf(gm), g.leaf(bt)), pr);
        });
    });
    suite.item("layernorm.2d", [](Rng& rng) {
        auto x = rand_tensor(rng, {3, 6});
        auto gm = rand_tensor(rng, {6}, 0.8, 1.2);
        auto bt = rand_tensor(rng, {6}, -0.3, 0.3);
        return run_one({&x, &gm, &bt}, [&](Graph<double>& g) {
            Rng pr(7);
            return probe(g, layernorm_channels(g.leaf(x), g.leaf(gm), g.leaf(bt)), pr);
        });
    });

    // --- losses ---
    suite.item("weighted_ce", [](Rng& rng) {
        auto logits = rand_tensor(rng, {2, 3, 4});
        std::vector<std::int32_t> labels(8);
        for (auto& l : labels) l = rng.uniform_int(0, 2);
        labels[3] = kIgnoreLabel;
        std::vector<double> w{0.5, 1.2, 2.0};
        return run_one({&logits}, [&](Graph<double>& g) {
            return weighted_ce(g.leaf(logits), labels, w);
        });
    });
    suite.item("dice_loss", [](Rng& rng) {
        auto logits = rand_tensor(rng, {1, 3, 4, 4});
        std::vector<std::int32_t> labels(16);
        for (auto& l : labels) l = rng.uniform_int(0, 2);
        labels[0] = kIgnoreLabel;
        return run_one({&logits}, [&](Graph<double>& g) {
            return dice_loss(g.leaf(logits), labels);
        });
    });
    suite.item("total_loss.1x3x8x8", [](Rng& rng) {
        auto logits = rand_tensor(rng, {1, 3, 8, 8});
        std::vector<std::int32_t> labels(64);
        for (auto& l : labels) l = rng.uniform_int(0, 2);
        labels[5] = kIgnoreLabel;
        std::vector<double> w{1.1, 0.7, 1.6};
        return run_one({&logits}, [&](Graph<double>& g) {
            return total_loss(g.leaf(logits), labels, w);
        });
    });

    if (!include_modules) return suite.results;

    // --- fusion submodules ---
    auto module_inputs = [](ParamRegistry<double>& reg) {
        std::vector<Tensor<double>*> ptrs;
        for (auto& kv : reg) ptrs.push_back(&kv.second);
        return ptrs;
    };

    suite.item("module.rgb_rgb_local", [&](Rng& rng) {
        ParamRegistry<double> reg;
        create_layer_params(reg, "m.gate", LayerSpec::linear(6, 6));
        create_layer_params(reg, "m.value", LayerSpec::linear(6, 6));
        create_layer_params(reg, "m.dw", LayerSpec::dwconv(6));
        randomize_params(reg, rng);
        auto f_r = rand_tensor(rng, {1, 6, 5, 5});
        auto inputs = module_inputs(reg);
        inputs.push_back(&f_r);
        return run_one(inputs, [&](Graph<double>& g) {
            Rng pr(7);
            return probe(g, rgb_rgb_local(g, reg, "m", g.leaf(f_r)), pr);
        });
    });

    for (bool rev : {false, true}) {
        suite.item(rev ? "module.rgbt_global.full_res_queries" : "module.rgbt_global",
                   [&, rev](Rng& rng) {
            const int ci = 8, ct = 4;
            ParamRegistry<double> reg;
            create_layer_params(reg, "m.key", LayerSpec::linear(ci, ci));
            create_layer_params(reg, "m.value", LayerSpec::linear(ci, ci));
            create_layer_params(reg, "m.query", LayerSpec::linear(ct + ci, ci));
            create_layer_params(reg, "m.merge", LayerSpec::linear(ci, ci));
            randomize_params(reg, rng);
            auto f_r = rand_tensor(rng, {1, ci, 5, 5});
            auto f_t = rand_tensor(rng, {1, ct, 5, 5});
            auto inputs = module_inputs(reg);
            inputs.push_back(&f_r);
            inputs.push_back(&f_t);
            return run_one(inputs, [&](Graph<double>& g) {
                Rng pr(7);
                return probe(g, rgbt_global(g, reg, "m", g.leaf(f_r), g.leaf(f_t), 2, 3, rev),
                             pr);
            });
        });
    }

    suite.item("module.rgbt_local", [&](Rng& rng) {
        const int ci = 8, ct = 4, ch = ci / 2;
        ParamRegistry<double> reg;
        create_layer_params(reg, "m.proj_r", LayerSpec::linear(ci, ch));
        create_layer_params(reg, "m.proj_t", LayerSpec::linear(ct, ch));
        create_layer_params(reg, "m.dw_c", LayerSpec::dwconv(ch));
        create_layer_params(reg, "m.dw_d", LayerSpec::dwconv(ch));
        create_layer_params(reg, "m.se", LayerSpec::se(ci, 4));
        create_layer_params(reg, "m.merge", LayerSpec::linear(ci, ci));
        randomize_params(reg, rng);
        auto f_r = rand_tensor(rng, {1, ci, 5, 5});
        auto f_t = rand_tensor(rng, {1, ct, 5, 5});
        auto inputs = module_inputs(reg);
        inputs.push_back(&f_r);
        inputs.push_back(&f_t);
        return run_one(inputs, [&](Graph<double>& g) {
            Rng pr(7);
            return probe(g, rgbt_local(g, reg, "m", g.leaf(f_r), g.leaf(f_t)), pr);
        });
    });

    suite.item("module.dformer_local", [&](Rng& rng) {
        const int ci = 6, ct = 3;
        ParamRegistry<double> reg;
        create_layer_params(reg, "m.proj_r", LayerSpec::linear(ci, ci));
        create_layer_params(reg, "m.proj_t", LayerSpec::linear(ct, ci));
        create_layer_params(reg, "m.merge", LayerSpec::linear(ci, ci));
        randomize_params(reg, rng);
        auto f_r = rand_tensor(rng, {1, ci, 4, 4});
        auto f_t = rand_tensor(rng, {1, ct, 4, 4});
        auto inputs = module_inputs(reg);
        inputs.push_back(&f_r);
        inputs.push_back(&f_t);
        return run_one(inputs, [&](Graph<double>& g) {
            Rng pr(7);
            return probe(g, dformer_local(g, reg, "m", g.leaf(f_r), g.leaf(f_t)), pr);
        });
    });

    suite.item("module.encoder_block.1x8x8x8", [&](Rng& rng) {
        ModelConfig cfg;
        cfg.rgb_channels = {8, 16, 32, 64};
        cfg.heads = {2, 2, 4, 8};
        cfg.pool_size = 3;
        ParamRegistry<double> reg;
        for_each_block_layer(cfg, 0, "encoder.stage1.block0",
                             [&](const std::string& n, const LayerSpec& s) {
                                 create_layer_params(reg, n, s);
                             });
        randomize_params(reg, rng);
        auto f_r = rand_tensor(rng, {1, 8, 8, 8}, -1.0, 1.0);
        auto f_t = rand_tensor(rng, {1, 4, 8, 8}, -1.0, 1.0);
        auto inputs = module_inputs(reg);
        inputs.push_back(&f_r);
        inputs.push_back(&f_t);
        return run_one(inputs, [&](Graph<double>& g) {
            Rng pr(7);
            auto pair = encoder_block(g, reg, cfg, 0, 0, g.leaf(f_r), g.leaf(f_t));
            Rng pr2(9);
            return add(probe(g, pair.f_r, pr), probe(g, pair.f_t, pr2));
        });
    });

    suite.item("module.mlp_decoder", [&](Rng& rng) {
        ModelConfig cfg;
        cfg.rgb_channels = {8, 16, 32, 64};
        cfg.decoder_dim = 8;
        cfg.num_classes = 3;
        ParamRegistry<double> reg;
        for_each_decoder_layer(cfg, [&](const std::string& n, const LayerSpec& s) {
            create_layer_params(reg, n, s);
        });
        randomize_params(reg, rng);
        auto r1 = rand_tensor(rng, {1, 8, 4, 4}, -1.0, 1.0);
        auto r2 = rand_tensor(rng, {1, 16, 2, 2}, -1.0, 1.0);
        auto r3 = rand_tensor(rng, {1, 32, 1, 1}, -1.0, 1.0);
        auto r4 = rand_tensor(rng, {1, 64, 1, 1}, -1.0, 1.0);
        auto inputs = module_inputs(reg);
        for (auto* p : {&r1, &r2, &r3, &r4}) inputs.push_back(p);
        return run_one(inputs, [&](Graph<double>& g) {
            EncoderOutVals<double> enc;
            enc.rgb = {g.leaf(r1), g.leaf(r2), g.leaf(r3), g.leaf(r4)};
            Rng pr(7);
            return probe(g, mlp_decode(g, reg, cfg, enc), pr);
        });
    });

    return suite.results;
}

inline bool all_passed(const std::vector<CheckOutcome>& results) {
    for (const auto& r : results)
        if (!r.pass) return false;
    return true;
}

} // namespace tuni
