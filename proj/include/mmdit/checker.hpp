#pragma once

// Deterministic pixel-space verifier for generated scenes, plus the
// MSE / cosine similarity used to compare against baseline images.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <utility>
#include <vector>

#include "mmdit/errors.hpp"
#include "mmdit/grammar.hpp"
#include "mmdit/image.hpp"

namespace mmdit {

inline constexpr std::size_t kMinComponentArea = 8;
inline constexpr double kSquareFill = 0.9;
inline constexpr double kRelationMargin = 2.0;  // pixels

struct Component {
    Color color = Color::red;
    Shape shape = Shape::square;
    std::size_t area = 0;
    double cy = 0, cx = 0;  // centroid, pixel-centre coordinates
    double fill = 0;        // area / bounding-box area
};

struct CheckResult {
    bool color_ok = false;
    bool shape_ok = false;
    bool object_ok = false;  // multiset of (color, shape) matches
    bool count_ok = false;
    bool spatial_ok = false;
    std::vector<Component> components;
};

// 0 = black, 1 + Color otherwise; nearest palette entry, ties to the lower index.
inline std::size_t quantize_pixel(float r, float g, float b) {
    static constexpr std::array<std::array<float, 3>, 5> palette = {{
        {0.f, 0.f, 0.f}, {1.f, 0.f, 0.f}, {0.f, 1.f, 0.f}, {0.f, 0.f, 1.f}, {1.f, 1.f, 0.f}}};
    std::size_t best = 0;
    float best_d = 1e30f;
    for (std::size_t i = 0; i < palette.size(); ++i) {
        const float dr = r - palette[i][0], dg = g - palette[i][1], db = b - palette[i][2];
        const float d = dr * dr + dg * dg + db * db;
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    return best;
}

// 4-connected components of non-black pixels with area >= 8, in raster order
// of their first pixel.
inline std::vector<Component> find_components(const Image& img) {
    const std::size_t n = img.side;
    std::vector<std::size_t> q(n * n);
    for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) q[y * n + x] = quantize_pixel(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2));
    std::vector<char> seen(n * n, 0);
    std::vector<Component> out;
    std::vector<std::size_t> stack;
    for (std::size_t start = 0; start < n * n; ++start) {
        if (q[start] == 0 || seen[start]) continue;
        std::array<std::size_t, 5> votes{};
        std::size_t area = 0, y0 = n, y1 = 0, x0 = n, x1 = 0;
        double sy = 0, sx = 0;
        stack.assign(1, start);
        seen[start] = 1;
        while (!stack.empty()) {
            const std::size_t p = stack.back();
            stack.pop_back();
            const std::size_t y = p / n, x = p % n;
            ++area;
            ++votes[q[p]];
            sy += double(y) + 0.5;
            sx += double(x) + 0.5;
            y0 = std::min(y0, y), y1 = std::max(y1, y), x0 = std::min(x0, x), x1 = std::max(x1, x);
            auto visit = [&](std::size_t np) {
                if (q[np] != 0 && !seen[np]) {
                    seen[np] = 1;
                    stack.push_back(np);
                }
            };
            if (y > 0) visit(p - n);
            if (y + 1 < n) visit(p + n);
            if (x > 0) visit(p - 1);
            if (x + 1 < n) visit(p + 1);
        }
        if (area < kMinComponentArea) continue;
        Component c;
        c.area = area;
        const std::size_t dominant = std::max_element(votes.begin() + 1, votes.end()) - votes.begin();
        c.color = static_cast<Color>(dominant - 1);
        c.fill = double(area) / double((y1 - y0 + 1) * (x1 - x0 + 1));
        c.shape = c.fill >= kSquareFill ? Shape::square : Shape::circle;
        c.cy = sy / double(area);
        c.cx = sx / double(area);
        out.push_back(c);
    }
    return out;
}

inline bool centroids_satisfy(Relation r, const Component& a, const Component& b) {
    switch (r) {
        case Relation::left_of: return b.cx - a.cx >= kRelationMargin;
        case Relation::right_of: return a.cx - b.cx >= kRelationMargin;
        case Relation::above: return b.cy - a.cy >= kRelationMargin;
        case Relation::below: return a.cy - b.cy >= kRelationMargin;
        case Relation::none: return true;
    }
    return false;
}

namespace detail {
template <class T>
bool same_multiset(std::vector<T> a, std::vector<T> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    return a == b;
}
}  // namespace detail

// Count check: number of components equals the prompt's object count.
// Spatial check: for relation prompts, exactly two components and an
// assignment to the two objects whose colors match and whose centroids obey
// the relation with a 2-pixel margin; for count prompts it reduces to a
// non-empty, correctly counted scene.
inline CheckResult check_image(const Image& img, const TokenIds& tokens) {
    const Prompt p = parse_tokens(tokens);
    CheckResult r;
    r.components = find_components(img);
    const auto& comps = r.components;

    std::vector<int> want_color, want_shape, got_color, got_shape;
    std::vector<std::pair<int, int>> want_obj, got_obj;
    auto want = [&](Color c, Shape s) {
        want_color.push_back(int(c));
        want_shape.push_back(int(s));
        want_obj.emplace_back(int(c), int(s));
    };
    if (p.rel == Relation::none) {
        for (std::size_t i = 0; i < p.count; ++i) want(p.color, p.shape);
    } else {
        want(p.color, p.shape);
        want(p.color2, p.shape2);
    }
    for (const auto& c : comps) {
        got_color.push_back(int(c.color));
        got_shape.push_back(int(c.shape));
        got_obj.emplace_back(int(c.color), int(c.shape));
    }
    r.color_ok = detail::same_multiset(want_color, got_color);
    r.shape_ok = detail::same_multiset(want_shape, got_shape);
    r.object_ok = detail::same_multiset(want_obj, got_obj);
    r.count_ok = comps.size() == p.object_count();
    if (p.rel == Relation::none) {
        r.spatial_ok = r.count_ok && !comps.empty();
    } else if (comps.size() == 2) {
        for (int order = 0; order < 2 && !r.spatial_ok; ++order) {
            const Component& a = comps[order];
            const Component& b = comps[1 - order];
            r.spatial_ok = a.color == p.color && b.color == p.color2 && centroids_satisfy(p.rel, a, b);
        }
    }
    return r;
}

struct Similarity {
    double mse = 0;
    double cosine = 0;
};

// Pixel MSE and cosine of the mean-centred flattened images (0 when either
// has zero variance).
inline Similarity similarity(const Image& a, const Image& b) {
    if (a.side != b.side || a.data.size() != b.data.size()) throw InputError("similarity: image shapes differ");
    const std::size_t n = a.data.size();
    if (n == 0) return {0, 0};
    double ma = 0, mb = 0, se = 0;
    for (std::size_t i = 0; i < n; ++i) {
        ma += a.data[i];
        mb += b.data[i];
        const double d = double(a.data[i]) - double(b.data[i]);
        se += d * d;
    }
    ma /= double(n);
    mb /= double(n);
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double x = a.data[i] - ma, y = b.data[i] - mb;
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    Similarity s;
    s.mse = se / double(n);
    s.cosine = (na > 0 && nb > 0) ? dot / std::sqrt(na * nb) : 0.0;
    return s;
}

}  // namespace mmdit
