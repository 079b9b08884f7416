// Command-line front end: synthetic data generation, two-phase training,
// evaluation, prediction, cost reports, and the gradient verification suite.
#include <CLI11.hpp>

#include <iostream>
#include <string>

#include "tuni/cost.hpp"
#include "tuni/train.hpp"
#include "tuni/verify.hpp"

namespace {

using namespace tuni;

ModelConfig load_model_config(const std::string& path) {
    if (path.empty()) return ModelConfig{}; // desk defaults
    return model_config_from_kv(parse_kv_file(path));
}

TrainConfig load_train_config(const std::string& path, TrainMode mode) {
    TrainConfig cfg = train_config_from_kv(parse_kv_file(path), path);
    if (cfg.mode != mode)
        throw ConfigError(path + ": config mode does not match the subcommand");
    return cfg;
}

bool parse_hw(const std::string& s, int& h, int& w) {
    const auto x = s.find('x');
    if (x == std::string::npos) return false;
    try {
        h = std::stoi(s.substr(0, x));
        w = std::stoi(s.substr(x + 1));
    } catch (...) {
        return false;
    }
    return h > 0 && w > 0;
}

int run_training(const TrainConfig& cfg) {
    const DataMode mode = cfg.mode == TrainMode::Pretrain ? DataMode::Cls : DataMode::Seg;
    const auto train_data = gen_synthetic(cfg.seed, cfg.data_n, cfg.data_h, cfg.data_w, mode,
                                          cfg.model.num_classes, cfg.lowlight_fraction);
    const auto eval_data = gen_synthetic(derive_seed(cfg.seed, 0xEVAL_SPLIT), cfg.eval_n,
                                         cfg.data_h, cfg.data_w, mode, cfg.model.num_classes,
                                         cfg.lowlight_fraction);
    const auto res = train(cfg, train_data, eval_data);
    for (const auto& line : res.log_lines) std::cout << line << "\n";
    std::cout << "final checkpoint: " << res.final_ckpt << "\n";
    std::cout << "best checkpoint:  " << res.best_ckpt << " (metric " << res.best_metric
              << " at iter " << res.best_iter << ")\n";
    return 0;
}

/// Edge-replicating pad up to the next multiple of 32.
Tensor<float> pad_to_32(const Tensor<float>& img, int& orig_h, int& orig_w) {
    const int C = img.shape[0], H = img.shape[1], W = img.shape[2];
    orig_h = H;
    orig_w = W;
    const int ph = (H + 31) / 32 * 32;
    const int pw = (W + 31) / 32 * 32;
    if (ph == H && pw == W) return img;
    Tensor<float> out({C, ph, pw});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < ph; ++y)
            for (int x = 0; x < pw; ++x)
                out.data[std::size_t((c * ph + y) * pw + x)] =
                    img.data[std::size_t((c * H + std::min(y, H - 1)) * W + std::min(x, W - 1))];
    return out;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"TUNI: unified RGB-thermal segmentation encoder-decoder"};
    app.require_subcommand(1);

    std::string config_path, init_ckpt;
    auto* cmd_pretrain = app.add_subcommand("pretrain", "classification pre-training phase");
    cmd_pretrain->add_option("--config", config_path, "key=value config file")->required();

    auto* cmd_train = app.add_subcommand("train", "segmentation fine-tuning phase");
    cmd_train->add_option("--config", config_path, "key=value config file")->required();
    cmd_train->add_option("--init", init_ckpt, "checkpoint for encoder-prefix initialization");

    std::string ckpt_path, data_dir, eval_config;
    bool zero_thermal = false;
    auto* cmd_eval = app.add_subcommand("eval", "per-class IoU and mIoU on a dataset directory");
    cmd_eval->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    cmd_eval->add_option("--data", data_dir, "dataset directory from `gen`")->required();
    cmd_eval->add_option("--config", eval_config, "model config (desk default when omitted)");
    cmd_eval->add_flag("--zero-thermal", zero_thermal, "zero the thermal input at test time");

    std::string rgb_path, thermal_path, out_path, predict_config;
    auto* cmd_predict = app.add_subcommand("predict", "segment one RGB-T pair");
    cmd_predict->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    cmd_predict->add_option("--rgb", rgb_path, "P6 input image")->required();
    cmd_predict->add_option("--thermal", thermal_path, "P5 input image")->required();
    cmd_predict->add_option("--out", out_path, "P5 class-id output")->required();
    cmd_predict->add_option("--config", predict_config, "model config (desk default when omitted)");

    std::string cost_config, variant_str = "full", hw_str = "64x64";
    bool cost_json = false;
    auto* cmd_cost = app.add_subcommand("cost", "analytical params/FLOPs report");
    cmd_cost->add_option("--config", cost_config, "model config (desk default when omitted)");
    cmd_cost->add_option("--variant", variant_str, "full|no_rrl|no_rtg|no_rtl|dformer_local");
    cmd_cost->add_option("--hw", hw_str, "input resolution HxW (divisible by 32)");
    cmd_cost->add_flag("--json", cost_json, "emit JSON instead of aligned text");

    std::uint64_t seed = 42;
    auto* cmd_gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    cmd_gradcheck->add_option("--seed", seed, "base seed");

    std::string gen_out;
    int gen_n = 16, gen_classes = 4;
    std::string gen_hw = "64x64", gen_mode = "seg";
    double gen_lowlight = 0.5;
    auto* cmd_gen = app.add_subcommand("gen", "write a synthetic RGB-T dataset");
    cmd_gen->add_option("--seed", seed, "dataset seed")->required();
    cmd_gen->add_option("--out", gen_out, "output directory")->required();
    cmd_gen->add_option("--n", gen_n, "number of samples");
    cmd_gen->add_option("--hw", gen_hw, "sample resolution HxW");
    cmd_gen->add_option("--classes", gen_classes, "number of classes");
    cmd_gen->add_option("--mode", gen_mode, "seg|cls");
    cmd_gen->add_option("--lowlight", gen_lowlight, "low-light sample fraction");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e); // --help
        app.exit(e);
        return 1;
    }

    try {
        if (cmd_pretrain->parsed()) {
            return run_training(load_train_config(config_path, TrainMode::Pretrain));
        }
        if (cmd_train->parsed()) {
            TrainConfig cfg = load_train_config(config_path, TrainMode::Finetune);
            if (!init_ckpt.empty()) cfg.init_ckpt = init_ckpt;
            return run_training(cfg);
        }
        if (cmd_eval->parsed()) {
            const ModelConfig cfg = load_model_config(eval_config);
            ParamRegistry<float> reg;
            build_seg_registry(cfg, reg);
            load_checkpoint(ckpt_path, reg, LoadMode::Strict);
            const auto data = read_dataset(data_dir);
            const auto res = evaluate_seg(reg, cfg, data, zero_thermal);
            for (std::size_t c = 0; c < res.per_class.size(); ++c) {
                std::cout << "class " << c << " IoU: ";
                if (res.per_class[c] < 0) std::cout << "n/a (zero union)\n";
                else std::cout << res.per_class[c] << "\n";
            }
            std::cout << "mIoU: " << res.miou << "\n";
            return 0;
        }
        if (cmd_predict->parsed()) {
            const ModelConfig cfg = load_model_config(predict_config);
            ParamRegistry<float> reg;
            build_seg_registry(cfg, reg);
            load_checkpoint(ckpt_path, reg, LoadMode::Strict);
            int oh = 0, ow = 0, th = 0, tw = 0;
            const auto rgb = pad_to_32(image_to_tensor(read_pnm(rgb_path)), oh, ow);
            const auto thermal = pad_to_32(image_to_tensor(read_pnm(thermal_path)), th, tw);
            if (rgb.shape[0] != 3 || thermal.shape[0] != 1 || oh != th || ow != tw)
                throw ContractError("predict: need an aligned P6 rgb / P5 thermal pair");
            Graph<float> g;
            Tensor<float> rgb_b({1, 3, rgb.shape[1], rgb.shape[2]});
            rgb_b.data = rgb.data;
            Tensor<float> th_b({1, 1, thermal.shape[1], thermal.shape[2]});
            th_b.data = thermal.data;
            auto enc = encoder_forward(g, reg, cfg, g.constant(std::move(rgb_b)),
                                       g.constant(std::move(th_b)));
            const auto& logits = g.value(mlp_decode(g, reg, cfg, enc));
            const auto pred = argmax_channels(logits);
            // crop the prediction back to the original (pre-padding) size
            std::vector<std::int32_t> cropped(std::size_t(oh) * std::size_t(ow));
            const int pw = logits.shape[3];
            for (int y = 0; y < oh; ++y)
                for (int x = 0; x < ow; ++x)
                    cropped[std::size_t(y) * std::size_t(ow) + std::size_t(x)] =
                        pred[std::size_t(y) * std::size_t(pw) + std::size_t(x)];
            write_pnm(out_path, labels_to_image(cropped, oh, ow));
            std::cout << "wrote " << out_path << " (" << ow << "x" << oh << ")\n";
            return 0;
        }
        if (cmd_cost->parsed()) {
            ModelConfig cfg = load_model_config(cost_config);
            cfg = build_variant(cfg, parse_variant(variant_str));
            int h = 0, w = 0;
            if (!parse_hw(hw_str, h, w)) throw ConfigError("--hw expects HxW");
            const auto rep = cost_report(cfg, h, w);
            std::cout << (cost_json ? emit_json(rep) : emit_text(rep));
            return 0;
        }
        if (cmd_gradcheck->parsed()) {
            const auto results = run_gradcheck_suite(seed, 5, &std::cout);
            std::cout << (all_passed(results) ? "ALL PASS" : "FAILURES PRESENT") << " ("
                      << results.size() << " checks)\n";
            return all_passed(results) ? 0 : 2;
        }
        if (cmd_gen->parsed()) {
            int h = 0, w = 0;
            if (!parse_hw(gen_hw, h, w)) throw ConfigError("--hw expects HxW");
            const DataMode mode = gen_mode == "cls" ? DataMode::Cls : DataMode::Seg;
            if (gen_mode != "cls" && gen_mode != "seg")
                throw ConfigError("--mode expects seg|cls");
            const auto data =
                gen_synthetic(seed, gen_n, h, w, mode, gen_classes, gen_lowlight);
            write_dataset(gen_out, data);
            std::cout << "wrote " << data.size() << " samples to " << gen_out << "\n";
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
