#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <png.h>

#include "error.hpp"
#include "param_schema.hpp"

namespace t2p {

/// Square RGB image, channel values in [0,1], row-major HWC.
struct RasterImage {
    int width = 0;
    int height = 0;
    std::vector<double> data;

    RasterImage() = default;
    RasterImage(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(w) * h * 3, 0.0) {}

    double& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    double at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }

    double mean() const {
        double s = 0.0;
        for (double v : data) s += v;
        return data.empty() ? 0.0 : s / static_cast<double>(data.size());
    }

    bool operator==(const RasterImage&) const = default;
};

inline std::uint8_t quantize(double v) {
    // Round half up.
    const double q = std::floor(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
    return static_cast<std::uint8_t>(q);
}

inline std::vector<std::uint8_t> to_bytes(const RasterImage& img) {
    std::vector<std::uint8_t> out(img.data.size());
    for (std::size_t i = 0; i < img.data.size(); ++i) out[i] = quantize(img.data[i]);
    return out;
}

/// FNV-1a over the raw doubles; equal hashes for bit-identical images.
inline std::uint64_t image_hash(const RasterImage& img) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](std::uint64_t x) {
        for (int i = 0; i < 8; ++i) {
            h ^= (x >> (8 * i)) & 0xff;
            h *= 0x100000001b3ULL;
        }
    };
    feed(static_cast<std::uint64_t>(img.width));
    feed(static_cast<std::uint64_t>(img.height));
    for (double v : img.data) feed(std::bit_cast<std::uint64_t>(v));
    return h;
}

inline double max_abs_diff(const RasterImage& a, const RasterImage& b) {
    if (a.data.size() != b.data.size()) throw ShapeError("image size mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

inline double mean_abs_diff(const RasterImage& a, const RasterImage& b) {
    if (a.data.size() != b.data.size()) throw ShapeError("image size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) s += std::abs(a.data[i] - b.data[i]);
    return a.data.empty() ? 0.0 : s / static_cast<double>(a.data.size());
}

// Binary PPM (P6, maxval 255).

inline std::string encode_ppm(const RasterImage& img) {
    std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    const auto bytes = to_bytes(img);
    out.append(reinterpret_cast<const char*>(bytes.data()), bytes.size());
    return out;
}

inline RasterImage decode_ppm(std::string_view bytes) {
    std::size_t pos = 0;
    auto skip_ws = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto read_int = [&]() -> int {
        skip_ws();
        const std::size_t start = pos;
        long v = 0;
        while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
            v = v * 10 + (bytes[pos] - '0');
            if (v > 1 << 20) throw ParseError("ppm: header value too large");
            ++pos;
        }
        if (pos == start) throw ParseError("ppm: expected integer in header");
        return static_cast<int>(v);
    };
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw ParseError("ppm: missing P6 magic");
    pos = 2;
    const int w = read_int();
    const int h = read_int();
    const int maxval = read_int();
    if (maxval != 255) throw ParseError("ppm: only maxval 255 supported");
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
        throw ParseError("ppm: malformed header");
    ++pos;
    const std::size_t n = static_cast<std::size_t>(w) * h * 3;
    if (bytes.size() - pos < n) throw ParseError("ppm: truncated pixel data");
    RasterImage img(w, h);
    for (std::size_t i = 0; i < n; ++i)
        img.data[i] = static_cast<double>(static_cast<std::uint8_t>(bytes[pos + i])) / 255.0;
    return img;
}

inline void save_ppm(const std::filesystem::path& path, const RasterImage& img) {
    write_text_file(path, encode_ppm(img));
}

inline RasterImage load_ppm(const std::filesystem::path& path) { return decode_ppm(read_text_file(path)); }

// PNG via libpng's simplified API, always 8-bit RGB.

inline std::string encode_png(const RasterImage& img) {
    const auto bytes = to_bytes(img);
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    png.width = static_cast<png_uint_32>(img.width);
    png.height = static_cast<png_uint_32>(img.height);
    png.format = PNG_FORMAT_RGB;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&png, nullptr, &size, 0, bytes.data(), 0, nullptr))
        throw Error(std::string("png: ") + png.message);
    std::string out(size, '\0');
    if (!png_image_write_to_memory(&png, out.data(), &size, 0, bytes.data(), 0, nullptr))
        throw Error(std::string("png: ") + png.message);
    out.resize(size);
    return out;
}

inline RasterImage decode_png(std::string_view bytes) {
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&png, bytes.data(), bytes.size()))
        throw ParseError(std::string("png: ") + png.message);
    png.format = PNG_FORMAT_RGB;
    std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(png));
    if (!png_image_finish_read(&png, nullptr, buf.data(), 0, nullptr)) {
        png_image_free(&png);
        throw ParseError(std::string("png: ") + png.message);
    }
    RasterImage img(static_cast<int>(png.width), static_cast<int>(png.height));
    for (std::size_t i = 0; i < buf.size(); ++i) img.data[i] = static_cast<double>(buf[i]) / 255.0;
    return img;
}

/// Image quantized to 8 bits and back, i.e. what a PPM round trip yields.
inline RasterImage quantized(const RasterImage& img) {
    RasterImage out(img.width, img.height);
    for (std::size_t i = 0; i < img.data.size(); ++i) out.data[i] = static_cast<double>(quantize(img.data[i])) / 255.0;
    return out;
}

}  // namespace t2p
