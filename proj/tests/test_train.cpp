#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "tuni/train.hpp"

using namespace tuni;

namespace {

std::filesystem::path tmp_dir(const std::string& leaf) {
    auto p = std::filesystem::temp_directory_path() / "tuni_train_test" / leaf;
    std::filesystem::create_directories(p);
    return p;
}

TrainConfig tiny_train_config(const std::string& out) {
    TrainConfig cfg;
    cfg.mode = TrainMode::Finetune;
    cfg.base_lr = 1e-3;
    cfg.max_iter = 8;
    cfg.batch_size = 2;
    cfg.data_n = 4;
    cfg.data_h = 32;
    cfg.data_w = 32;
    cfg.model.depths = {1, 1, 1, 1};
    cfg.model.rgb_channels = {8, 16, 32, 64};
    cfg.model.heads = {1, 2, 4, 8};
    cfg.model.num_classes = 4;
    cfg.model.decoder_dim = 8;
    cfg.eval_interval = 4;
    cfg.eval_split = "train";
    cfg.out_dir = tmp_dir(out).string();
    cfg.finalize();
    return cfg;
}

std::vector<std::uint8_t> file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

} // namespace

TEST(Train, ZeroIterationsKeepInitialization) {
    TrainConfig cfg = tiny_train_config("noop");
    cfg.max_iter = 0;
    const auto data = gen_synthetic(cfg.seed, cfg.data_n, 32, 32, DataMode::Seg, 4, 0.5);
    const auto res = train(cfg, data, data);

    ParamRegistry<float> expect;
    build_seg_registry(cfg.model, expect);
    init_params(expect, cfg.seed);
    ParamRegistry<float> got;
    build_seg_registry(cfg.model, got);
    load_checkpoint(res.final_ckpt, got, LoadMode::Strict);
    for (std::size_t i = 0; i < expect.size(); ++i)
        EXPECT_EQ(got.item(i).second.data, expect.item(i).second.data)
            << got.item(i).first;
}

TEST(Train, IdenticalRunsAreBitIdentical) {
    TrainConfig a = tiny_train_config("det_a");
    TrainConfig b = tiny_train_config("det_b");
    const auto data = gen_synthetic(a.seed, a.data_n, 32, 32, DataMode::Seg, 4, 0.5);
    const auto ra = train(a, data, data);
    const auto rb = train(b, data, data);
    ASSERT_EQ(ra.log_lines.size(), rb.log_lines.size());
    for (std::size_t i = 0; i < ra.log_lines.size(); ++i)
        EXPECT_EQ(ra.log_lines[i], rb.log_lines[i]);
    EXPECT_EQ(file_bytes(ra.final_ckpt), file_bytes(rb.final_ckpt));
}

TEST(Train, SeedChangesTrajectory) {
    TrainConfig a = tiny_train_config("seed_a");
    TrainConfig b = tiny_train_config("seed_b");
    b.seed = a.seed + 1;
    const auto data = gen_synthetic(a.seed, a.data_n, 32, 32, DataMode::Seg, 4, 0.5);
    const auto ra = train(a, data, data);
    const auto rb = train(b, data, data);
    EXPECT_NE(file_bytes(ra.final_ckpt), file_bytes(rb.final_ckpt));
}

TEST(Train, AugmentedRunStillDeterministic) {
    TrainConfig a = tiny_train_config("aug_a");
    a.augment = true;
    TrainConfig b = tiny_train_config("aug_b");
    b.augment = true;
    const auto data = gen_synthetic(a.seed, a.data_n, 32, 32, DataMode::Seg, 4, 0.5);
    const auto ra = train(a, data, data);
    const auto rb = train(b, data, data);
    EXPECT_EQ(ra.log_lines, rb.log_lines);
    EXPECT_EQ(file_bytes(ra.final_ckpt), file_bytes(rb.final_ckpt));
}

TEST(Train, PretrainClsModeRunsAndLogsAccuracy) {
    TrainConfig cfg = tiny_train_config("cls");
    cfg.mode = TrainMode::Pretrain;
    cfg.base_lr = 0.0;      // re-resolve mode defaults
    cfg.weight_decay = -1.0;
    cfg.finalize();
    EXPECT_EQ(cfg.base_lr, 1e-3);
    EXPECT_EQ(cfg.weight_decay, 5e-2);
    const auto data = gen_synthetic(cfg.seed, cfg.data_n, 32, 32, DataMode::Cls, 4, 0.5);
    const auto res = train(cfg, data, data);
    bool has_acc = false;
    for (const auto& l : res.log_lines) has_acc = has_acc || l.find("eval_acc=") != std::string::npos;
    EXPECT_TRUE(has_acc);
    EXPECT_EQ(int(res.losses.size()), cfg.max_iter);
}

TEST(Train, EncoderPrefixBridgeReproducesActivations) {
    // pretrain briefly, bridge into the segmentation model, compare encoders
    TrainConfig pre = tiny_train_config("bridge_pre");
    pre.mode = TrainMode::Pretrain;
    pre.max_iter = 4;
    const auto cls_data = gen_synthetic(pre.seed, pre.data_n, 32, 32, DataMode::Cls, 4, 0.5);
    const auto pres = train(pre, cls_data, cls_data);

    ParamRegistry<float> pre_reg;
    build_cls_registry(pre.model, pre_reg);
    load_checkpoint(pres.final_ckpt, pre_reg, LoadMode::Strict);

    ParamRegistry<float> seg_reg;
    build_seg_registry(pre.model, seg_reg);
    init_params(seg_reg, 999);
    load_checkpoint(pres.final_ckpt, seg_reg, LoadMode::EncoderPrefix);

    Rng rng(5);
    Tensor<float> rgb({1, 3, 32, 32});
    Tensor<float> thermal({1, 1, 32, 32});
    for (auto& v : rgb.data) v = float(rng.uniform(0, 1));
    for (auto& v : thermal.data) v = float(rng.uniform(0, 1));

    Graph<float> g1, g2;
    auto e1 = encoder_forward(g1, pre_reg, pre.model, g1.leaf(rgb), g1.leaf(thermal));
    auto e2 = encoder_forward(g2, seg_reg, pre.model, g2.leaf(rgb), g2.leaf(thermal));
    for (int s = 0; s < 4; ++s) {
        const auto& a = g1.value(e1.rgb[std::size_t(s)]).data;
        const auto& b = g2.value(e2.rgb[std::size_t(s)]).data;
        ASSERT_EQ(a.size(), b.size());
        for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6f);
    }
}

TEST(Train, StrictLoadRejectsMismatchedArchitecture) {
    TrainConfig cfg = tiny_train_config("mismatch");
    cfg.max_iter = 1;
    const auto data = gen_synthetic(cfg.seed, cfg.data_n, 32, 32, DataMode::Seg, 4, 0.5);
    const auto res = train(cfg, data, data);

    ModelConfig other = cfg.model;
    other.rgb_channels = {16, 32, 64, 128};
    ParamRegistry<float> reg;
    build_seg_registry(other, reg);
    EXPECT_THROW(load_checkpoint(res.final_ckpt, reg, LoadMode::Strict), CheckpointError);
}

TEST(Evaluate, ThreadCountDoesNotChangeMiou) {
    TrainConfig cfg = tiny_train_config("threads");
    ParamRegistry<float> reg;
    build_seg_registry(cfg.model, reg);
    init_params(reg, 21);
    const auto data = gen_synthetic(3, 6, 32, 32, DataMode::Seg, 4, 0.5);

    setenv("TUNI_THREADS", "1", 1);
    const auto serial = evaluate_seg(reg, cfg.model, data);
    setenv("TUNI_THREADS", "4", 1);
    const auto parallel = evaluate_seg(reg, cfg.model, data);
    unsetenv("TUNI_THREADS");
    EXPECT_EQ(serial.miou, parallel.miou);
    EXPECT_EQ(serial.per_class, parallel.per_class);
}

TEST(Evaluate, ZeroThermalChangesPredictionPath) {
    TrainConfig cfg = tiny_train_config("zt");
    ParamRegistry<float> reg;
    build_seg_registry(cfg.model, reg);
    init_params(reg, 23);
    const auto data = gen_synthetic(5, 4, 32, 32, DataMode::Seg, 4, 1.0);
    const auto with_t = evaluate_seg(reg, cfg.model, data, false);
    const auto without_t = evaluate_seg(reg, cfg.model, data, true);
    // untrained net: values differ, both valid results
    EXPECT_GE(with_t.miou, 0.0);
    EXPECT_GE(without_t.miou, 0.0);
}

TEST(Pipeline, FullResolutionRestoredFor96x128) {
    ModelConfig cfg;
    cfg.depths = {1, 1, 1, 1};
    cfg.rgb_channels = {8, 16, 32, 64};
    cfg.heads = {1, 2, 4, 8};
    cfg.num_classes = 5;
    cfg.decoder_dim = 8;
    ParamRegistry<float> reg;
    build_seg_registry(cfg, reg);
    init_params(reg, 27);
    Graph<float> g;
    Tensor<float> rgb({1, 3, 96, 128}, 0.4f);
    Tensor<float> thermal({1, 1, 96, 128}, 0.6f);
    auto enc = encoder_forward(g, reg, cfg, g.leaf(rgb), g.leaf(thermal));
    EXPECT_EQ(g.value(enc.rgb[0]).shape, (Shape{1, 8, 24, 32}));
    EXPECT_EQ(g.value(enc.rgb[3]).shape, (Shape{1, 64, 3, 4}));
    auto logits = mlp_decode(g, reg, cfg, enc);
    EXPECT_EQ(g.value(logits).shape, (Shape{1, 5, 96, 128}));
}
