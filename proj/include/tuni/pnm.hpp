#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "tuni/errors.hpp"
#include "tuni/tensor.hpp"

namespace tuni {

/// Raw 8-bit PNM payload: P6 when channels == 3, P5 when channels == 1.
struct PnmImage {
    int width = 0;
    int height = 0;
    int channels = 1;
    std::vector<std::uint8_t> bytes; // row-major, interleaved channels
};

namespace detail {

inline void pnm_fail(const std::string& path, std::int64_t offset, const std::string& what) {
    throw IoError("pnm '" + path + "': " + what + " (byte offset " +
                  std::to_string(offset) + ")");
}

// PNM whitespace separator; '#' starts a comment to end of line.
inline void skip_pnm_space(std::istream& in, std::int64_t& off) {
    for (;;) {
        const int c = in.peek();
        if (c == '#') {
            while (in.peek() != '\n' && in.peek() != EOF) { in.get(); ++off; }
        } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
            in.get();
            ++off;
        } else {
            return;
        }
    }
}

inline int read_pnm_int(std::istream& in, std::int64_t& off, const std::string& path) {
    skip_pnm_space(in, off);
    int value = 0;
    bool any = false;
    while (std::isdigit(in.peek())) {
        value = value * 10 + (in.get() - '0');
        ++off;
        any = true;
    }
    if (!any) pnm_fail(path, off, "expected integer in header");
    return value;
}

} // namespace detail

inline PnmImage read_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("pnm '" + path + "': cannot open for reading");
    std::int64_t off = 0;
    char m0 = 0, m1 = 0;
    in.get(m0);
    in.get(m1);
    off += 2;
    PnmImage img;
    if (m0 == 'P' && m1 == '6') img.channels = 3;
    else if (m0 == 'P' && m1 == '5') img.channels = 1;
    else detail::pnm_fail(path, 0, "bad magic; expected P5 or P6");
    img.width = detail::read_pnm_int(in, off, path);
    img.height = detail::read_pnm_int(in, off, path);
    const int maxval = detail::read_pnm_int(in, off, path);
    if (maxval != 255) detail::pnm_fail(path, off, "maxval must be 255");
    if (img.width <= 0 || img.height <= 0) detail::pnm_fail(path, off, "non-positive dimensions");
    const int sep = in.get();
    ++off;
    if (sep != ' ' && sep != '\t' && sep != '\r' && sep != '\n')
        detail::pnm_fail(path, off, "expected single whitespace after maxval");
    const std::size_t n = std::size_t(img.width) * std::size_t(img.height) *
                          std::size_t(img.channels);
    img.bytes.resize(n);
    in.read(reinterpret_cast<char*>(img.bytes.data()), std::streamsize(n));
    if (std::size_t(in.gcount()) != n)
        detail::pnm_fail(path, off + in.gcount(), "truncated payload; expected " +
                                                      std::to_string(n) + " bytes");
    return img;
}

inline void write_pnm(const std::string& path, const PnmImage& img) {
    if (img.channels != 1 && img.channels != 3)
        throw ContractError("pnm: channels must be 1 or 3");
    if (img.bytes.size() != std::size_t(img.width) * std::size_t(img.height) *
                                std::size_t(img.channels))
        throw DimensionError("pnm: payload size mismatch");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("pnm '" + path + "': cannot open for writing");
    out << (img.channels == 3 ? "P6" : "P5") << '\n'
        << img.width << ' ' << img.height << '\n'
        << "255" << '\n';
    out.write(reinterpret_cast<const char*>(img.bytes.data()), std::streamsize(img.bytes.size()));
    if (!out) throw IoError("pnm '" + path + "': write failed");
}

/// [C,H,W] in [0,1] from raw bytes (v / 255).
inline Tensor<float> image_to_tensor(const PnmImage& img) {
    Tensor<float> t({img.channels, img.height, img.width});
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c)
                t.data[std::size_t((c * img.height + y) * img.width + x)] =
                    float(img.bytes[std::size_t((y * img.width + x) * img.channels + c)]) / 255.0f;
    return t;
}

/// Quantizes [0,1] to bytes, rounding half away from zero and clamping.
inline PnmImage tensor_to_image(const Tensor<float>& t) {
    if (t.rank() != 3 || (t.shape[0] != 1 && t.shape[0] != 3))
        throw DimensionError("tensor_to_image expects [1|3,H,W]");
    PnmImage img;
    img.channels = t.shape[0];
    img.height = t.shape[1];
    img.width = t.shape[2];
    img.bytes.resize(t.data.size());
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c) {
                const float v = t.data[std::size_t((c * img.height + y) * img.width + x)];
                const long q = std::lround(double(v) * 255.0); // half away from zero
                img.bytes[std::size_t((y * img.width + x) * img.channels + c)] =
                    std::uint8_t(std::min(255L, std::max(0L, q)));
            }
    return img;
}

/// Label maps travel as P5 with raw class ids (255 = IGNORE), not scaled.
inline PnmImage labels_to_image(const std::vector<std::int32_t>& labels, int h, int w) {
    if (labels.size() != std::size_t(h) * std::size_t(w))
        throw DimensionError("labels_to_image: size mismatch");
    PnmImage img;
    img.channels = 1;
    img.height = h;
    img.width = w;
    img.bytes.resize(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] > 255)
            throw ContractError("labels_to_image: id out of byte range");
        img.bytes[i] = std::uint8_t(labels[i]);
    }
    return img;
}

inline std::vector<std::int32_t> image_to_labels(const PnmImage& img) {
    if (img.channels != 1) throw DimensionError("image_to_labels expects P5");
    std::vector<std::int32_t> out(img.bytes.size());
    for (std::size_t i = 0; i < img.bytes.size(); ++i) out[i] = img.bytes[i];
    return out;
}

} // namespace tuni
