#pragma once

// Synthetic attribute grammar: prompts with slots
//   [COUNT][COLOR][SHAPE][REL][COLOR2][SHAPE2][PAD][PAD]
// and scenes of 6×6 objects centred in the cells of a 4×4 grid of 8×8 cells.
// Count prompts ("three blue circle none") place COUNT identical objects;
// relation prompts ("one red square left-of green circle") place exactly two.

#include <algorithm>
#include <array>
#include <cstddef>
#include <sstream>
#include <string>
#include <vector>

#include "mmdit/config.hpp"
#include "mmdit/errors.hpp"
#include "mmdit/image.hpp"
#include "mmdit/numerics.hpp"
#include "mmdit/tokens.hpp"

namespace mmdit {

enum class Color { red, green, blue, yellow };
enum class Shape { square, circle };
enum class Relation { none, left_of, right_of, above, below };

inline constexpr std::size_t kGridCells = 4;   // per side
inline constexpr std::size_t kCellPixels = 8;
inline constexpr std::size_t kObjectPixels = 6;
inline constexpr std::size_t kSceneSide = kGridCells * kCellPixels;
inline constexpr std::size_t kPromptLen = 8;

// Pure RGB primaries; index matches Color.
inline constexpr std::array<std::array<float, 3>, 4> kColorRgb = {{
    {1.f, 0.f, 0.f}, {0.f, 1.f, 0.f}, {0.f, 0.f, 1.f}, {1.f, 1.f, 0.f}}};

struct Prompt {
    std::size_t count = 1;  // 1..4; relation prompts always use 1
    Color color = Color::red;
    Shape shape = Shape::square;
    Relation rel = Relation::none;
    Color color2 = Color::red;  // relation prompts only
    Shape shape2 = Shape::square;

    // Objects the scene must contain.
    std::size_t object_count() const noexcept { return rel == Relation::none ? count : 2; }

    friend bool operator==(const Prompt&, const Prompt&) = default;
};

struct SceneObject {
    Color color;
    Shape shape;
    std::size_t cell;  // row-major over the 4×4 grid

    friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

struct Scene {
    std::vector<SceneObject> objects;
};

inline TokenId color_token(Color c) { return tok::red + static_cast<TokenId>(c); }
inline TokenId shape_token(Shape s) { return tok::square + static_cast<TokenId>(s); }
inline TokenId relation_token(Relation r) {
    switch (r) {
        case Relation::left_of: return tok::left_of;
        case Relation::right_of: return tok::right_of;
        case Relation::above: return tok::above;
        case Relation::below: return tok::below;
        case Relation::none: break;
    }
    return tok::none;
}

inline TokenIds tokenize(const Prompt& p) {
    TokenIds t(kPromptLen, tok::pad);
    t[0] = tok::one + static_cast<TokenId>(p.count - 1);
    t[1] = color_token(p.color);
    t[2] = shape_token(p.shape);
    t[3] = relation_token(p.rel);
    if (p.rel != Relation::none) {
        t[4] = color_token(p.color2);
        t[5] = shape_token(p.shape2);
    }
    return t;
}

// Inverse of tokenize; throws InputError for ungrammatical sequences.
inline Prompt parse_tokens(const TokenIds& t) {
    auto bad = [&](const std::string& why) -> InputError {
        std::string s;
        for (auto id : t) s += std::string(token_word(id)) + " ";
        return InputError("ungrammatical prompt '" + s + "': " + why);
    };
    if (t.size() != kPromptLen) throw bad("expected " + std::to_string(kPromptLen) + " tokens");
    auto in = [](TokenId v, TokenId lo, TokenId hi) { return v >= lo && v <= hi; };
    Prompt p;
    if (!in(t[0], tok::one, tok::four)) throw bad("slot 0 must be a count");
    if (!in(t[1], tok::red, tok::yellow)) throw bad("slot 1 must be a color");
    if (!in(t[2], tok::square, tok::circle)) throw bad("slot 2 must be a shape");
    p.count = t[0] - tok::one + 1;
    p.color = static_cast<Color>(t[1] - tok::red);
    p.shape = static_cast<Shape>(t[2] - tok::square);
    std::size_t tail = 4;
    if (t[3] == tok::none) {
        p.rel = Relation::none;
    } else if (in(t[3], tok::left_of, tok::below)) {
        p.rel = static_cast<Relation>(t[3] - tok::left_of + 1);
        if (p.count != 1) throw bad("relation prompts take count 'one'");
        if (!in(t[4], tok::red, tok::yellow) || !in(t[5], tok::square, tok::circle))
            throw bad("relation needs a second color and shape");
        p.color2 = static_cast<Color>(t[4] - tok::red);
        p.shape2 = static_cast<Shape>(t[5] - tok::square);
        tail = 6;
    } else {
        throw bad("slot 3 must be a relation or 'none'");
    }
    for (std::size_t i = tail; i < kPromptLen; ++i)
        if (t[i] != tok::pad) throw bad("trailing slots must be PAD");
    return p;
}

// Whitespace-separated words; a missing relation defaults to "none" and
// missing trailing slots to PAD ("two red square" is accepted).
inline TokenIds tokenize_text(const std::string& text) {
    std::istringstream in(text);
    TokenIds t;
    for (std::string w; in >> w;) {
        const auto id = token_from_word(w);
        if (!id) throw InputError("unknown prompt word '" + w + "'");
        t.push_back(*id);
    }
    if (t.size() == 3) t.push_back(tok::none);
    if (t.size() > kPromptLen) throw InputError("prompt longer than " + std::to_string(kPromptLen) + " tokens");
    t.resize(kPromptLen, tok::pad);
    parse_tokens(t);
    return t;
}

inline std::string prompt_text(const TokenIds& t) {
    std::string s;
    for (auto id : t) {
        if (id == tok::pad) continue;
        if (!s.empty()) s += ' ';
        s += token_word(id);
    }
    return s;
}

inline std::size_t cell_row(std::size_t cell) { return cell / kGridCells; }
inline std::size_t cell_col(std::size_t cell) { return cell % kGridCells; }

// Object footprint inside its cell: 6×6 square, or a disc over the same
// box keeping pixel centres with dx² + dy² ≤ 7 (24 pixels, fill ratio 2/3).
inline bool object_covers(Shape s, std::size_t dy, std::size_t dx) {
    if (dy >= kObjectPixels || dx >= kObjectPixels) return false;
    if (s == Shape::square) return true;
    const float cy = float(dy) + 0.5f - 3.f, cx = float(dx) + 0.5f - 3.f;
    return cy * cy + cx * cx <= 7.f;
}

inline Image render(const Scene& scene) {
    Image img(kSceneSide);
    const std::size_t off = (kCellPixels - kObjectPixels) / 2;
    for (const auto& o : scene.objects) {
        const std::size_t y0 = cell_row(o.cell) * kCellPixels + off, x0 = cell_col(o.cell) * kCellPixels + off;
        const auto& rgb = kColorRgb[static_cast<std::size_t>(o.color)];
        for (std::size_t dy = 0; dy < kObjectPixels; ++dy)
            for (std::size_t dx = 0; dx < kObjectPixels; ++dx)
                if (object_covers(o.shape, dy, dx))
                    for (std::size_t c = 0; c < 3; ++c) img.at(y0 + dy, x0 + dx, c) = rgb[c];
    }
    return img;
}

// True when cell a stands in relation r to cell b (at least one cell apart on
// the relevant axis; the other axis is free).
inline bool cells_satisfy(Relation r, std::size_t a, std::size_t b) {
    switch (r) {
        case Relation::left_of: return cell_col(a) < cell_col(b);
        case Relation::right_of: return cell_col(a) > cell_col(b);
        case Relation::above: return cell_row(a) < cell_row(b);
        case Relation::below: return cell_row(a) > cell_row(b);
        case Relation::none: return a != b;
    }
    return false;
}

inline Prompt random_prompt(Rng& rng) {
    Prompt p;
    const bool relational = rng.next_below(2) == 1;
    p.color = static_cast<Color>(rng.next_below(4));
    p.shape = static_cast<Shape>(rng.next_below(2));
    if (relational) {
        p.count = 1;
        p.rel = static_cast<Relation>(1 + rng.next_below(4));
        p.color2 = static_cast<Color>(rng.next_below(4));
        p.shape2 = static_cast<Shape>(rng.next_below(2));
    } else {
        p.count = 1 + rng.next_below(4);
    }
    return p;
}

// Uniform placement satisfying the prompt.
inline Scene random_scene(const Prompt& p, Rng& rng) {
    Scene s;
    if (p.rel == Relation::none) {
        std::array<std::size_t, kGridCells * kGridCells> cells{};
        for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = i;
        for (std::size_t i = 0; i < p.count; ++i) {
            const std::size_t j = i + rng.next_below(cells.size() - i);
            std::swap(cells[i], cells[j]);
            s.objects.push_back({p.color, p.shape, cells[i]});
        }
        return s;
    }
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t a = 0; a < kGridCells * kGridCells; ++a)
        for (std::size_t b = 0; b < kGridCells * kGridCells; ++b)
            if (cells_satisfy(p.rel, a, b)) pairs.emplace_back(a, b);
    const auto [a, b] = pairs[rng.next_below(pairs.size())];
    s.objects.push_back({p.color, p.shape, a});
    s.objects.push_back({p.color2, p.shape2, b});
    return s;
}

struct Sample {
    Scene scene;
    TokenIds tokens;
};

// n prompts drawn uniformly (count vs relation prompts with equal odds), each
// with a uniformly placed scene.
inline std::vector<Sample> gen_dataset(Rng& rng, std::size_t n) {
    if (n < 1) throw InputError("gen_dataset: n must be >= 1");
    std::vector<Sample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const Prompt p = random_prompt(rng);
        out.push_back({random_scene(p, rng), tokenize(p)});
    }
    return out;
}

}  // namespace mmdit
