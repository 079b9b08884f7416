#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "tuni/encoder.hpp"

namespace tuni {

using KvMap = std::map<std::string, std::string>;

/// Plain-text key=value files: one key per line, '#' starts a comment,
/// blank lines ignored.
inline KvMap parse_kv_text(const std::string& text, const std::string& origin = "<text>") {
    KvMap kv;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    auto trim = [](std::string s) {
        const char* ws = " \t\r";
        const auto b = s.find_first_not_of(ws);
        if (b == std::string::npos) return std::string();
        const auto e = s.find_last_not_of(ws);
        return s.substr(b, e - b + 1);
    };
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty())
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
        kv[key] = value;
    }
    return kv;
}

inline KvMap parse_kv_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("config '" + path + "': cannot open");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_kv_text(ss.str(), path);
}

namespace detail {

struct KvReader {
    const KvMap& kv;
    mutable std::set<std::string> seen;

    bool has(const std::string& k) const {
        const bool h = kv.count(k) > 0;
        if (h) seen.insert(k);
        return h;
    }
    std::string str(const std::string& k, const std::string& def) const {
        return has(k) ? kv.at(k) : def;
    }
    int integer(const std::string& k, int def) const {
        if (!has(k)) return def;
        try {
            return std::stoi(kv.at(k));
        } catch (...) {
            throw ConfigError("config key '" + k + "': not an integer: " + kv.at(k));
        }
    }
    double real(const std::string& k, double def) const {
        if (!has(k)) return def;
        try {
            return std::stod(kv.at(k));
        } catch (...) {
            throw ConfigError("config key '" + k + "': not a number: " + kv.at(k));
        }
    }
    bool boolean(const std::string& k, bool def) const {
        if (!has(k)) return def;
        const std::string& v = kv.at(k);
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw ConfigError("config key '" + k + "': not a boolean: " + v);
    }
    std::uint64_t u64(const std::string& k, std::uint64_t def) const {
        if (!has(k)) return def;
        try {
            return std::stoull(kv.at(k));
        } catch (...) {
            throw ConfigError("config key '" + k + "': not an unsigned integer: " + kv.at(k));
        }
    }
    std::array<int, 4> int4(const std::string& k, std::array<int, 4> def) const {
        if (!has(k)) return def;
        std::array<int, 4> out{};
        std::istringstream ss(kv.at(k));
        std::string tok;
        int i = 0;
        while (std::getline(ss, tok, ',')) {
            if (i >= 4) throw ConfigError("config key '" + k + "': expected 4 values");
            try {
                out[std::size_t(i++)] = std::stoi(tok);
            } catch (...) {
                throw ConfigError("config key '" + k + "': bad list entry: " + tok);
            }
        }
        if (i != 4) throw ConfigError("config key '" + k + "': expected 4 values");
        return out;
    }
    void reject_unknown(const std::string& origin) const {
        for (const auto& p : kv)
            if (!seen.count(p.first))
                throw ConfigError(origin + ": unknown key '" + p.first + "'");
    }
};

} // namespace detail

inline ModelConfig model_config_from(const detail::KvReader& r) {
    ModelConfig m;
    m.depths = r.int4("depths", m.depths);
    m.rgb_channels = r.int4("channels", m.rgb_channels);
    m.thermal_ratio = r.real("thermal_ratio", m.thermal_ratio);
    m.heads = r.int4("heads", m.heads);
    m.pool_size = r.integer("pool_size", m.pool_size);
    m.variant = parse_variant(r.str("variant", "full"));
    m.num_classes = r.integer("num_classes", m.num_classes);
    m.decoder_dim = r.integer("decoder_dim", m.decoder_dim);
    m.se_reduction = r.integer("se_reduction", m.se_reduction);
    m.attn_full_res_queries = r.boolean("attn_full_res_queries", false);
    m.validate();
    return m;
}

inline ModelConfig model_config_from_kv(const KvMap& kv, bool strict = false,
                                        const std::string& origin = "config") {
    detail::KvReader r{kv, {}};
    ModelConfig m = model_config_from(r);
    if (strict) r.reject_unknown(origin);
    return m;
}

enum class TrainMode { Pretrain, Finetune };

/// Everything a training run needs; fully determines the run together with
/// the generated data.
struct TrainConfig {
    TrainMode mode = TrainMode::Finetune;
    double base_lr = 0.0;      // 0 -> mode default (1e-3 pretrain, 1e-4 finetune)
    double weight_decay = -1.0; // <0 -> mode default (5e-2 pretrain, 5e-4 finetune)
    double power = 0.9;
    int max_iter = 500;
    int batch_size = 4;
    std::uint64_t seed = 1;
    ModelConfig model;
    std::string class_weight_source = "data"; // data | uniform
    int data_n = 64;
    int data_h = 64;
    int data_w = 64;
    double lowlight_fraction = 0.5;
    int eval_n = 16;
    int eval_interval = 50;
    std::string eval_split = "holdout"; // holdout | train
    double target_metric = 0.0;         // early-stop threshold when > 0
    bool augment = false;
    std::string out_dir = "out";
    std::string init_ckpt;

    void finalize() {
        if (base_lr == 0.0) base_lr = mode == TrainMode::Pretrain ? 1e-3 : 1e-4;
        if (weight_decay < 0.0) weight_decay = mode == TrainMode::Pretrain ? 5e-2 : 5e-4;
        validate();
    }
    void validate() const {
        if (base_lr <= 0.0) throw ConfigError("base_lr must be > 0");
        if (power <= 0.0 || power > 1.0) throw ConfigError("power must be in (0, 1]");
        if (max_iter < 0) throw ConfigError("max_iter must be >= 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (data_n < 1 || eval_n < 1) throw ConfigError("dataset sizes must be >= 1");
        if (data_h % 32 != 0 || data_w % 32 != 0)
            throw ConfigError("data dims must be divisible by 32");
        if (eval_interval < 1) throw ConfigError("eval_interval must be >= 1");
        if (class_weight_source != "data" && class_weight_source != "uniform")
            throw ConfigError("class_weight_source must be data|uniform");
        if (eval_split != "holdout" && eval_split != "train")
            throw ConfigError("eval_split must be holdout|train");
        model.validate();
    }
};

inline TrainConfig train_config_from_kv(const KvMap& kv, const std::string& origin = "config") {
    detail::KvReader r{kv, {}};
    TrainConfig t;
    const std::string mode = r.str("mode", "finetune");
    if (mode == "pretrain") t.mode = TrainMode::Pretrain;
    else if (mode == "finetune") t.mode = TrainMode::Finetune;
    else throw ConfigError("mode must be pretrain|finetune");
    t.base_lr = r.real("base_lr", 0.0);
    t.weight_decay = r.real("weight_decay", -1.0);
    t.power = r.real("power", t.power);
    t.max_iter = r.integer("max_iter", t.max_iter);
    t.batch_size = r.integer("batch_size", t.batch_size);
    t.seed = r.u64("seed", t.seed);
    t.class_weight_source = r.str("class_weights", t.class_weight_source);
    t.data_n = r.integer("data_n", t.data_n);
    t.data_h = r.integer("data_h", t.data_h);
    t.data_w = r.integer("data_w", t.data_w);
    t.lowlight_fraction = r.real("lowlight_fraction", t.lowlight_fraction);
    t.eval_n = r.integer("eval_n", t.eval_n);
    t.eval_interval = r.integer("eval_interval", t.eval_interval);
    t.eval_split = r.str("eval_split", t.eval_split);
    t.target_metric = r.real("target_metric", t.target_metric);
    t.augment = r.boolean("augment", t.augment);
    t.out_dir = r.str("out_dir", t.out_dir);
    t.init_ckpt = r.str("init_ckpt", t.init_ckpt);
    t.model = model_config_from(r);
    r.reject_unknown(origin);
    t.finalize();
    return t;
}

} // namespace tuni
