#pragma once

#include <cstddef>
#include <string>

#include <json.hpp>

#include "mmdit/errors.hpp"
#include "mmdit/tokens.hpp"

namespace mmdit {

// Architecture hyperparameters. Defaults are the desk-scale model.
struct ModelConfig {
    std::size_t depth = 12;       // L
    std::size_t width = 64;       // D
    std::size_t heads = 4;        // H
    std::size_t text_len = 8;     // N_c
    std::size_t image_side = 32;  // pixels
    std::size_t patch = 4;        // pixels per patch side
    std::size_t vocab = 48;
    std::size_t mlp_ratio = 4;

    std::size_t head_dim() const noexcept { return width / heads; }
    std::size_t patches_per_side() const noexcept { return image_side / patch; }
    std::size_t image_len() const noexcept { return patches_per_side() * patches_per_side(); }
    std::size_t patch_dim() const noexcept { return patch * patch * 3; }
    std::size_t tokens() const noexcept { return text_len + image_len(); }
    std::size_t mlp_width() const noexcept { return width * mlp_ratio; }

    void validate() const {
        auto fail = [](const std::string& m) { throw InputError("model config: " + m); };
        if (!depth || !width || !heads || !text_len || !image_side || !patch || !vocab || !mlp_ratio)
            fail("all fields must be positive");
        if (width % heads) fail("width must be divisible by heads");
        if (image_side % patch) fail("image_side must be divisible by patch");
        if (vocab < kGrammarVocab) fail("vocab smaller than grammar size " + std::to_string(kGrammarVocab));
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

namespace detail {
template <class F>
void for_each_config_field(ModelConfig& c, F&& f) {
    f("depth", c.depth);
    f("width", c.width);
    f("heads", c.heads);
    f("text_len", c.text_len);
    f("image_side", c.image_side);
    f("patch", c.patch);
    f("vocab", c.vocab);
    f("mlp_ratio", c.mlp_ratio);
}
}  // namespace detail

inline nlohmann::json config_to_json(ModelConfig c) {
    nlohmann::json j = nlohmann::json::object();
    detail::for_each_config_field(c, [&](const char* k, std::size_t& v) { j[k] = v; });
    return j;
}

// Missing keys keep their defaults; unknown keys are rejected.
inline ModelConfig config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw InputError("model config must be an object");
    ModelConfig c;
    std::size_t seen = 0;
    detail::for_each_config_field(c, [&](const char* k, std::size_t& v) {
        if (auto it = j.find(k); it != j.end()) {
            if (!it->is_number_unsigned() && !(it->is_number_integer() && it->get<long long>() > 0))
                throw InputError(std::string("model config: '") + k + "' must be a positive integer");
            v = it->get<std::size_t>();
            ++seen;
        }
    });
    if (seen != j.size()) {
        for (const auto& [k, _] : j.items()) {
            bool known = false;
            detail::for_each_config_field(c, [&](const char* name, std::size_t&) { known |= (k == name); });
            if (!known) throw InputError("model config: unknown key '" + k + "'");
        }
    }
    c.validate();
    return c;
}

}  // namespace mmdit
