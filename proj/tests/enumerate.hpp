#pragma once

// Every grammar prompt against every legal placement.

#include <functional>
#include <string>

#include "mmdit/checker.hpp"
#include "mmdit/grammar.hpp"

namespace mmdit::testing {

struct EnumerationResult {
    std::size_t cases = 0;
    std::size_t failures = 0;
    std::string first_failure;
};

inline void for_each_count_scene(std::size_t k, const std::function<void(const std::vector<std::size_t>&)>& f) {
    std::vector<std::size_t> cells;
    std::function<void(std::size_t)> rec = [&](std::size_t from) {
        if (cells.size() == k) return f(cells);
        for (std::size_t c = from; c < kGridCells * kGridCells; ++c) {
            cells.push_back(c);
            rec(c + 1);
            cells.pop_back();
        }
    };
    rec(0);
}

inline EnumerationResult enumerate_checker() {
    EnumerationResult r;
    auto check = [&](const Prompt& p, const Scene& s) {
        ++r.cases;
        const CheckResult c = check_image(render(s), tokenize(p));
        if (c.color_ok && c.shape_ok && c.object_ok && c.count_ok && c.spatial_ok) return;
        if (!r.failures++) {
            r.first_failure = prompt_text(tokenize(p)) + " at cells";
            for (const auto& o : s.objects) r.first_failure += " " + std::to_string(o.cell);
        }
    };
    for (int color = 0; color < 4; ++color)
        for (int shape = 0; shape < 2; ++shape) {
            Prompt p;
            p.color = Color(color);
            p.shape = Shape(shape);
            for (std::size_t k = 1; k <= 4; ++k) {
                p.count = k;
                for_each_count_scene(k, [&](const std::vector<std::size_t>& cells) {
                    Scene s;
                    for (auto c : cells) s.objects.push_back({p.color, p.shape, c});
                    check(p, s);
                });
            }
        }
    for (int rel = 1; rel <= 4; ++rel)
        for (int c1 = 0; c1 < 4; ++c1)
            for (int s1 = 0; s1 < 2; ++s1)
                for (int c2 = 0; c2 < 4; ++c2)
                    for (int s2 = 0; s2 < 2; ++s2) {
                        Prompt p;
                        p.rel = Relation(rel);
                        p.color = Color(c1), p.shape = Shape(s1), p.color2 = Color(c2), p.shape2 = Shape(s2);
                        for (std::size_t a = 0; a < 16; ++a)
                            for (std::size_t b = 0; b < 16; ++b)
                                if (cells_satisfy(p.rel, a, b))
                                    check(p, Scene{{{p.color, p.shape, a}, {p.color2, p.shape2, b}}});
                    }
    return r;
}

}  // namespace mmdit::testing
