#pragma once

// Shared fixtures: small configs and weights with every tensor randomized
// (the AdaLN-zero initialization makes a fresh model an exact identity).

#include <cstdint>
#include <filesystem>
#include <string>

#include "mmdit/model.hpp"

namespace mmdit::testing {

inline ModelConfig tiny_config(std::size_t depth = 2, std::size_t width = 16, std::size_t side = 8) {
    ModelConfig c;
    c.depth = depth;
    c.width = width;
    c.heads = 2;
    c.image_side = side;
    c.patch = 4;
    c.mlp_ratio = 2;
    c.vocab = 16;
    return c;
}

template <class T = float>
BasicWeights<T> random_weights(const ModelConfig& cfg, std::uint64_t seed, double scale = 0.3) {
    BasicWeights<T> w = zero_weights<T>(cfg);
    Rng rng(seed);
    for_each_tensor(w, [&](const std::string&, BasicMatrix<T>& m, unsigned) {
        const double s = scale / std::sqrt(double(std::max<std::size_t>(m.rows(), 1)));
        for (auto& v : m.data()) v = T(double(rng.next_normal()) * (m.rows() > 1 ? s : scale * 0.3));
    });
    return w;
}

inline TokenIds some_tokens(const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    TokenIds t(cfg.text_len);
    for (auto& v : t) v = TokenId(rng.next_below(cfg.vocab));
    return t;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("mmdit_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace mmdit::testing
