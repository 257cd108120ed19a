#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "acam/tensor.hpp"

namespace acam {

// Single-channel image, pixel values in [0,1], row-major.
struct GrayImage {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> pixels;
    std::string id;
    std::optional<int> label;
    std::optional<std::string> patient_id;

    float at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
    float& at(std::size_t y, std::size_t x) { return pixels[y * width + x]; }

    template <typename T = float>
    Tensor<T> to_tensor() const {
        std::vector<T> d(pixels.begin(), pixels.end());
        return Tensor<T>::from_data({1, height, width}, std::move(d));
    }
};

// Binary PGM (P5, maxval 255). Values are clamped to [0,1] and scaled to
// 0..255 on write; loads normalize back to [0,1]. Round-tripping 8-bit
// content is bit-exact.
inline void write_pgm(const std::string& path, const float* data,
                      std::size_t h, std::size_t w) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f << "P5\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> row(w);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            float v = data[y * w + x];
            v = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
            row[x] = static_cast<unsigned char>(std::lround(v * 255.f));
        }
        f.write(reinterpret_cast<const char*>(row.data()),
                static_cast<std::streamsize>(w));
    }
    if (!f) throw std::runtime_error("write failed: " + path);
}

inline void write_pgm(const std::string& path, const GrayImage& img) {
    write_pgm(path, img.pixels.data(), img.height, img.width);
}

inline GrayImage read_pgm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open image: " + path);
    std::string magic;
    f >> magic;
    if (magic != "P5") throw std::runtime_error(path + ": not a binary PGM (P5)");
    auto next_token = [&f, &path]() -> long {
        // Skips whitespace and '#' comment lines per the PGM grammar.
        for (;;) {
            int c = f.peek();
            if (c == '#') {
                std::string line;
                std::getline(f, line);
            } else if (std::isspace(c)) {
                f.get();
            } else {
                break;
            }
        }
        long v;
        if (!(f >> v)) throw std::runtime_error(path + ": truncated PGM header");
        return v;
    };
    long w = next_token(), h = next_token(), maxval = next_token();
    if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255)
        throw std::runtime_error(path + ": unsupported PGM header");
    f.get(); // single whitespace after maxval
    GrayImage img;
    img.width = static_cast<std::size_t>(w);
    img.height = static_cast<std::size_t>(h);
    img.pixels.resize(img.width * img.height);
    std::vector<unsigned char> raw(img.pixels.size());
    f.read(reinterpret_cast<char*>(raw.data()),
           static_cast<std::streamsize>(raw.size()));
    if (f.gcount() != static_cast<std::streamsize>(raw.size()))
        throw std::runtime_error(path + ": truncated PGM payload");
    for (std::size_t i = 0; i < raw.size(); ++i)
        img.pixels[i] = static_cast<float>(raw[i]) / static_cast<float>(maxval);
    return img;
}

} // namespace acam
