#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "mmdit/errors.hpp"

namespace mmdit {

// Square RGB image, row-major HWC floats. Generated images live in [0, 1];
// latents share the layout but are unbounded.
struct Image {
    std::size_t side = 0;
    std::vector<float> data;

    Image() = default;
    explicit Image(std::size_t s, float fill = 0.f) : side(s), data(s * s * 3, fill) {}

    float& at(std::size_t y, std::size_t x, std::size_t c) noexcept { return data[(y * side + x) * 3 + c]; }
    float at(std::size_t y, std::size_t x, std::size_t c) const noexcept {
        return data[(y * side + x) * 3 + c];
    }

    friend bool operator==(const Image&, const Image&) = default;
};

inline Image clamp01(Image img) {
    for (auto& v : img.data) v = std::clamp(v, 0.f, 1.f);
    return img;
}

inline std::uint8_t to_byte(float v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.f, 1.f) * 255.f));
}

// Binary PPM (P6, maxval 255).
inline void write_ppm(const Image& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot open '" + path + "' for writing");
    out << "P6\n" << img.side << ' ' << img.side << "\n255\n";
    std::vector<char> bytes(img.data.size());
    std::transform(img.data.begin(), img.data.end(), bytes.begin(),
                   [](float v) { return static_cast<char>(to_byte(v)); });
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw InputError("failed writing '" + path + "'");
}

inline Image read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open '" + path + "'");
    std::string magic;
    std::size_t w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    if (magic != "P6" || w != h || maxval != 255) throw ParseError(path + ": unsupported PPM header");
    in.get();
    std::vector<char> bytes(w * h * 3);
    in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!in) throw ParseError(path + ": truncated PPM data");
    Image img(w);
    for (std::size_t i = 0; i < bytes.size(); ++i)
        img.data[i] = static_cast<std::uint8_t>(bytes[i]) / 255.f;
    return img;
}

}  // namespace mmdit
