#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tuni/loss.hpp"
#include "tuni/pnm.hpp"
#include "tuni/rng.hpp"
#include "tuni/tensor.hpp"

namespace tuni {

enum class DataMode { Seg, Cls };

/// One aligned RGB / thermal / label triple. `label` carries IGNORE (255) on
/// a border frame in seg mode; `class_map` keeps the raw class of every pixel
/// (thermal rendering needs it). Values live in [0,1].
struct SegSample {
    Tensor<float> rgb;     // [3,H,W]
    Tensor<float> thermal; // [1,H,W]
    std::vector<std::int32_t> label;
    std::vector<std::int32_t> class_map;
    int cls_label = 0;
    bool lowlight = false;
    std::uint64_t seed = 0;
};

namespace detail {

inline double frac(double x) { return x - std::floor(x); }

/// Per-class emissivity constant, golden-ratio spaced in [0.2, 0.8].
inline float emissivity(int cls) {
    return float(0.2 + 0.6 * frac(0.6180339887498949 * (cls + 1)));
}

inline void class_color(int cls, float& r, float& g, float& b) {
    r = float(0.15 + 0.75 * frac(0.6180339887498949 * (cls + 1) + 0.13));
    g = float(0.15 + 0.75 * frac(0.6180339887498949 * (cls + 1) + 0.47));
    b = float(0.15 + 0.75 * frac(0.6180339887498949 * (cls + 1) + 0.81));
}

inline float luminance(float r, float g, float b) {
    return 0.299f * r + 0.587f * g + 0.114f * b;
}

struct ShapeDef {
    int kind; // 0 disc, 1 rect, 2 triangle
    int cls;
    double p[6];
};

inline bool shape_covers(const ShapeDef& s, double x, double y) {
    switch (s.kind) {
        case 0: {
            const double dx = x - s.p[0], dy = y - s.p[1];
            return dx * dx + dy * dy <= s.p[2] * s.p[2];
        }
        case 1:
            return x >= s.p[0] && x <= s.p[2] && y >= s.p[1] && y <= s.p[3];
        default: {
            // sign test against the three edges
            auto side = [&](double ax, double ay, double bx, double by) {
                return (bx - ax) * (y - ay) - (by - ay) * (x - ax);
            };
            const double d0 = side(s.p[0], s.p[1], s.p[2], s.p[3]);
            const double d1 = side(s.p[2], s.p[3], s.p[4], s.p[5]);
            const double d2 = side(s.p[4], s.p[5], s.p[0], s.p[1]);
            const bool has_neg = d0 < 0 || d1 < 0 || d2 < 0;
            const bool has_pos = d0 > 0 || d1 > 0 || d2 > 0;
            return !(has_neg && has_pos);
        }
    }
}

} // namespace detail

/// 5x5 box filter; border windows average only the in-bounds pixels, so a
/// constant map stays constant.
inline Tensor<float> box_blur5(const Tensor<float>& x) {
    if (x.rank() != 3) throw DimensionError("box_blur5 expects [C,H,W]");
    const int C = x.shape[0], H = x.shape[1], W = x.shape[2];
    Tensor<float> out({C, H, W});
    for (int c = 0; c < C; ++c) {
        const float* xp = x.data.data() + std::size_t(c) * H * W;
        float* op = out.data.data() + std::size_t(c) * H * W;
        for (int y = 0; y < H; ++y) {
            const int y0 = std::max(0, y - 2), y1 = std::min(H - 1, y + 2);
            for (int xx = 0; xx < W; ++xx) {
                const int x0 = std::max(0, xx - 2), x1 = std::min(W - 1, xx + 2);
                float acc = 0.0f;
                for (int yy = y0; yy <= y1; ++yy)
                    for (int xi = x0; xi <= x1; ++xi) acc += xp[yy * W + xi];
                op[y * W + xx] = acc / float((y1 - y0 + 1) * (x1 - x0 + 1));
            }
        }
    }
    return out;
}

/// Deterministic stand-in for a learned RGB->thermal translation: per-class
/// emissivity plus 0.2 x luminance, box-blurred, plus seeded Gaussian noise,
/// clamped to [0,1].
inline Tensor<float> pseudo_thermal(const Tensor<float>& rgb,
                                    const std::vector<std::int32_t>& class_map,
                                    std::uint64_t seed, double sigma = 0.02) {
    if (rgb.rank() != 3 || rgb.shape[0] != 3)
        throw DimensionError("pseudo_thermal expects rgb [3,H,W]");
    const int H = rgb.shape[1], W = rgb.shape[2];
    if (class_map.size() != std::size_t(H) * std::size_t(W))
        throw DimensionError("pseudo_thermal: class map size mismatch");
    Tensor<float> t({1, H, W});
    const float* r = rgb.data.data();
    const float* g = r + std::size_t(H) * W;
    const float* b = g + std::size_t(H) * W;
    for (std::size_t i = 0; i < t.data.size(); ++i)
        t.data[i] = detail::emissivity(class_map[i]) +
                    0.2f * detail::luminance(r[i], g[i], b[i]);
    t = box_blur5(t);
    Rng rng(derive_seed(seed, 0x7EA1ULL));
    for (auto& v : t.data) {
        if (sigma > 0.0) v += float(rng.normal(0.0, sigma));
        v = std::clamp(v, 0.0f, 1.0f);
    }
    return t;
}

/// Seeded procedural scene: background luminance gradient plus 2-5 shapes.
/// In seg mode shapes carry classes 1..K-1 over background class 0, and the
/// first shape's class cycles with the sample index so every class id is
/// guaranteed to appear in any dataset of at least K-1 samples. In cls mode
/// shapes carry classes 0..K-1 and the target is the dominant (most pixels)
/// shape class. Low-light samples get RGB contrast scaled by 0.15 plus noise;
/// the thermal map is rendered from the clean RGB first.
inline SegSample gen_sample(std::uint64_t dataset_seed, std::uint64_t index, int h, int w,
                            DataMode mode, int num_classes, double lowlight_fraction) {
    if (num_classes < 2) throw ContractError("gen_sample: need at least 2 classes");
    const std::uint64_t sample_seed = derive_seed(dataset_seed, index);
    Rng rng(sample_seed);

    SegSample s;
    s.seed = sample_seed;
    s.rgb = Tensor<float>({3, h, w});
    s.class_map.assign(std::size_t(h) * std::size_t(w), 0);

    // background
    const float g0 = float(rng.uniform(0.35, 0.65));
    const float gx = float(rng.uniform(-0.3, 0.3));
    const float gy = float(rng.uniform(-0.3, 0.3));
    float bg_r = float(rng.uniform(0.3, 0.9));
    float bg_g = float(rng.uniform(0.3, 0.9));
    float bg_b = float(rng.uniform(0.3, 0.9));

    const int nshapes = rng.uniform_int(2, 5);
    std::vector<detail::ShapeDef> shapes;
    const int shape_class_lo = mode == DataMode::Seg ? 1 : 0;
    const int shape_class_n = mode == DataMode::Seg ? num_classes - 1 : num_classes;
    for (int i = 0; i < nshapes; ++i) {
        detail::ShapeDef sd;
        sd.kind = rng.uniform_int(0, 2);
        sd.cls = i == 0 ? shape_class_lo + int(index % std::uint64_t(shape_class_n))
                        : rng.uniform_int(shape_class_lo, shape_class_lo + shape_class_n - 1);
        const double cx = rng.uniform(0.2, 0.8) * w;
        const double cy = rng.uniform(0.2, 0.8) * h;
        const double rr = rng.uniform(0.14, 0.30) * std::min(h, w);
        switch (sd.kind) {
            case 0:
                sd.p[0] = cx; sd.p[1] = cy; sd.p[2] = rr;
                break;
            case 1:
                sd.p[0] = cx - rr; sd.p[1] = cy - rr * rng.uniform(0.6, 1.2);
                sd.p[2] = cx + rr; sd.p[3] = cy + rr * rng.uniform(0.6, 1.2);
                if (sd.p[1] > sd.p[3]) std::swap(sd.p[1], sd.p[3]);
                break;
            default: {
                // vertices near 120 degrees apart; keeps triangles from
                // collapsing into slivers
                const double base = rng.uniform(0.0, 6.283185307179586);
                for (int v = 0; v < 3; ++v) {
                    const double ang = base + v * 2.0943951023931953 + rng.uniform(-0.5, 0.5);
                    const double rv = rr * rng.uniform(0.8, 1.2);
                    sd.p[2 * v] = cx + rv * std::cos(ang);
                    sd.p[2 * v + 1] = cy + rv * std::sin(ang);
                }
                break;
            }
        }
        shapes.push_back(sd);
    }

    float* pr = s.rgb.data.data();
    float* pg = pr + std::size_t(h) * w;
    float* pb = pg + std::size_t(h) * w;
    std::vector<std::int64_t> shape_pixels(shapes.size(), 0);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const std::size_t i = std::size_t(y) * w + std::size_t(x);
            const float lum = std::clamp(
                g0 + gx * (float(x) / w - 0.5f) + gy * (float(y) / h - 0.5f), 0.05f, 1.0f);
            float r = bg_r * lum, g = bg_g * lum, b = bg_b * lum;
            int top = -1;
            for (std::size_t si = 0; si < shapes.size(); ++si)
                if (detail::shape_covers(shapes[si], x + 0.5, y + 0.5)) top = int(si);
            if (top >= 0) {
                shape_pixels[std::size_t(top)] += 1;
                float cr, cg, cb;
                detail::class_color(shapes[std::size_t(top)].cls, cr, cg, cb);
                r = std::clamp(cr * lum * 1.4f, 0.0f, 1.0f);
                g = std::clamp(cg * lum * 1.4f, 0.0f, 1.0f);
                b = std::clamp(cb * lum * 1.4f, 0.0f, 1.0f);
                s.class_map[i] = mode == DataMode::Seg
                                     ? shapes[std::size_t(top)].cls
                                     : shapes[std::size_t(top)].cls + 1;
            }
            pr[i] = r;
            pg[i] = g;
            pb[i] = b;
        }
    }

    // dominant shape class by pixel count; ties resolve to the smaller id
    std::vector<std::int64_t> cls_pixels(std::size_t(shape_class_lo + shape_class_n), 0);
    for (std::size_t si = 0; si < shapes.size(); ++si)
        cls_pixels[std::size_t(shapes[si].cls)] += shape_pixels[si];
    int dominant = shape_class_lo;
    for (int c = shape_class_lo; c < shape_class_lo + shape_class_n; ++c)
        if (cls_pixels[std::size_t(c)] > cls_pixels[std::size_t(dominant)]) dominant = c;
    s.cls_label = dominant - shape_class_lo;

    s.thermal = pseudo_thermal(s.rgb, s.class_map, sample_seed);

    s.lowlight = rng.uniform() < lowlight_fraction;
    if (s.lowlight) {
        Rng noise(derive_seed(sample_seed, 0x10ULL));
        for (auto& v : s.rgb.data)
            v = std::clamp(v * 0.15f + float(noise.normal(0.0, 0.02)), 0.0f, 1.0f);
    }

    // seg labels: class map with a 2px IGNORE border
    s.label = s.class_map;
    if (mode == DataMode::Seg) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                if (y < 2 || x < 2 || y >= h - 2 || x >= w - 2)
                    s.label[std::size_t(y) * w + std::size_t(x)] = kIgnoreLabel;
    }
    return s;
}

inline std::vector<SegSample> gen_synthetic(std::uint64_t seed, int n, int h, int w,
                                            DataMode mode, int num_classes,
                                            double lowlight_fraction = 0.5) {
    if (h % 32 != 0 || w % 32 != 0)
        throw ContractError("gen_synthetic: dims must be divisible by 32");
    if (n < 1) throw ContractError("gen_synthetic: n must be >= 1");
    std::vector<SegSample> out;
    out.reserve(std::size_t(n));
    for (int i = 0; i < n; ++i)
        out.push_back(gen_sample(seed, std::uint64_t(i), h, w, mode, num_classes,
                                 lowlight_fraction));
    return out;
}

/// Pixel histogram over non-ignored labels; feeds class_weights().
inline std::vector<std::int64_t> label_histogram(const std::vector<SegSample>& data,
                                                 int num_classes) {
    std::vector<std::int64_t> hist(std::size_t(num_classes), 0);
    for (const auto& s : data)
        for (auto l : s.label)
            if (l != kIgnoreLabel) hist[std::size_t(l)] += 1;
    return hist;
}

// ---------------------------------------------------------------------------
// Dataset directory layout: NNNNN.rgb.ppm / NNNNN.thermal.pgm / NNNNN.label.pgm
// ---------------------------------------------------------------------------

inline std::string sample_stem(int index) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%05d", index);
    return buf;
}

inline void write_dataset(const std::string& dir, const std::vector<SegSample>& data) {
    std::filesystem::create_directories(dir);
    for (std::size_t i = 0; i < data.size(); ++i) {
        const std::string stem = dir + "/" + sample_stem(int(i));
        write_pnm(stem + ".rgb.ppm", tensor_to_image(data[i].rgb));
        write_pnm(stem + ".thermal.pgm", tensor_to_image(data[i].thermal));
        write_pnm(stem + ".label.pgm",
                  labels_to_image(data[i].label, data[i].rgb.shape[1], data[i].rgb.shape[2]));
    }
}

inline std::vector<SegSample> read_dataset(const std::string& dir) {
    std::vector<SegSample> out;
    for (int i = 0;; ++i) {
        const std::string stem = dir + "/" + sample_stem(i);
        if (!std::filesystem::exists(stem + ".rgb.ppm")) break;
        SegSample s;
        s.rgb = image_to_tensor(read_pnm(stem + ".rgb.ppm"));
        s.thermal = image_to_tensor(read_pnm(stem + ".thermal.pgm"));
        s.label = image_to_labels(read_pnm(stem + ".label.pgm"));
        s.class_map = s.label;
        out.push_back(std::move(s));
    }
    if (out.empty()) throw IoError("dataset '" + dir + "': no samples found");
    return out;
}

} // namespace tuni
