#pragma once

// Block-skipping acceleration: closed-form FLOP model and a timing harness
// that also scores skip-set quality against unskipped images.

#include <algorithm>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "mmdit/checker.hpp"
#include "mmdit/diffusion.hpp"
#include "mmdit/errors.hpp"
#include "mmdit/probe.hpp"

namespace mmdit {

struct CostModel {
    std::uint64_t block = 0;  // F_blk = 24·N·D² + 4·N²·D
    std::uint64_t fixed = 0;  // patch embedding, head, time MLP, final modulation
    std::size_t depth = 0;

    std::uint64_t step(std::size_t skipped) const { return fixed + (depth - skipped) * block; }
};

inline CostModel cost_model(const ModelConfig& cfg) {
    const std::uint64_t N = cfg.tokens(), D = cfg.width, Nx = cfg.image_len(), P = cfg.patch_dim();
    CostModel m;
    m.depth = cfg.depth;
    m.block = 24 * N * D * D + 4 * N * N * D;
    m.fixed = 2 * Nx * P * D      // patch projection
              + 2 * Nx * D * P    // output head
              + 2 * 2 * D * D     // timestep MLP
              + 2 * D * 2 * D;    // final modulation
    return m;
}

inline std::size_t passes_per_step(const SamplerConfig& sc) { return sc.cfg_scale == 1.f ? 1 : 2; }

inline void check_skip(const std::vector<std::size_t>& skip, const ModelConfig& cfg) {
    std::set<std::size_t> seen;
    for (auto b : skip) {
        if (b >= cfg.depth) throw PlanError("block " + std::to_string(b) + ": skip index out of range");
        if (!seen.insert(b).second) throw PlanError("block " + std::to_string(b) + ": repeated in skip set");
    }
}

// FLOPs to generate one image.
inline std::uint64_t flops(const ModelConfig& cfg, const std::vector<std::size_t>& skip, const SamplerConfig& sc) {
    check_skip(skip, cfg);
    return std::uint64_t(sc.steps) * passes_per_step(sc) * cost_model(cfg).step(skip.size());
}

// Contiguous middle third ⌊L/3⌋ .. ⌊2L/3⌋ - 1.
inline std::vector<std::size_t> middle_third(std::size_t depth) {
    std::vector<std::size_t> s;
    for (std::size_t l = depth / 3; l < 2 * depth / 3; ++l) s.push_back(l);
    return s;
}

struct BenchResult {
    std::vector<std::size_t> skip;
    std::uint64_t flops = 0;
    double mean_s = 0;
    double min_s = 0;
    std::size_t reps = 0;
    double mse = 0;  // vs unskipped images, mean over prompts
    double cosine = 0;
    double accuracy = 0;
    std::vector<Image> images;
};

struct BenchPrompts {
    std::vector<ProbePrompt> prompts;
    std::uint64_t seed = 0;
};

namespace detail {
inline std::vector<Image> bench_generate(const ModelWeights& w, const BenchPrompts& bp, const SamplerConfig& sc,
                                         const InterventionSpec& plan) {
    return sample_prompts(w, bp.prompts, bp.seed, sc, [&](Attribute) { return plan; });
}
}  // namespace detail

// Times generation of every prompt under the skip set (1 warm-up, then
// `reps` timed runs on a monotonic clock) and scores the images against
// `baseline` (the same prompts generated without skipping).
inline BenchResult bench_skip(const ModelWeights& w, const BenchPrompts& bp, const std::vector<std::size_t>& skip,
                              const SamplerConfig& sc, std::size_t reps, const std::vector<Image>& baseline) {
    if (reps < 3) throw InputError("bench needs at least 3 timed repetitions");
    if (bp.prompts.empty()) throw InputError("bench needs at least one prompt");
    if (baseline.size() != bp.prompts.size()) throw InputError("bench baseline does not match the prompt list");
    check_skip(skip, w.config);
    check_sampler(sc);
    const InterventionSpec plan = InterventionSpec::skip_set(skip);
    BenchResult r;
    r.skip = skip;
    r.flops = flops(w.config, skip, sc);
    r.reps = reps;
    r.images = detail::bench_generate(w, bp, sc, plan);  // warm-up; its images are the ones scored
    double total = 0, best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < reps; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        auto imgs = detail::bench_generate(w, bp, sc, plan);
        const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        total += dt;
        best = std::min(best, dt);
        if (imgs != r.images) throw NumericError("non-deterministic generation during bench");
    }
    r.mean_s = total / double(reps);
    r.min_s = best;
    for (std::size_t i = 0; i < bp.prompts.size(); ++i) {
        const Similarity s = similarity(r.images[i], baseline[i]);
        r.mse += s.mse;
        r.cosine += s.cosine;
        r.accuracy +=
            attribute_correct(bp.prompts[i].attribute, check_image(r.images[i], bp.prompts[i].tokens)) ? 1 : 0;
    }
    const double n = double(bp.prompts.size());
    r.mse /= n;
    r.cosine /= n;
    r.accuracy /= n;
    return r;
}

// Baseline (empty skip set) first, then each requested set.
inline std::vector<BenchResult> bench(const ModelWeights& w, const BenchPrompts& bp,
                                      const std::vector<std::vector<std::size_t>>& skip_sets, const SamplerConfig& sc,
                                      std::size_t reps) {
    for (const auto& s : skip_sets) check_skip(s, w.config);
    const auto baseline = detail::bench_generate(w, bp, sc, InterventionSpec{});
    std::vector<BenchResult> out;
    out.push_back(bench_skip(w, bp, {}, sc, reps, baseline));
    for (const auto& s : skip_sets) out.push_back(bench_skip(w, bp, s, sc, reps, baseline));
    return out;
}

inline constexpr const char* kBenchHeader = "skip_set,flops,mean_s,min_s,mse,cos,accuracy";

// Skip sets are written as space-separated block indices ("4 5 6 7").
inline std::string bench_csv_row(const BenchResult& r) {
    std::string set;
    for (std::size_t i = 0; i < r.skip.size(); ++i) set += (i ? " " : "") + std::to_string(r.skip[i]);
    return set + "," + std::to_string(r.flops) + "," + format_number(r.mean_s) + "," + format_number(r.min_s) + "," +
           format_number(r.mse) + "," + format_number(r.cosine) + "," + format_number(r.accuracy);
}

// Appends rows, writing the header when the file is new or empty.
inline void append_bench_csv(const std::string& path, const std::vector<BenchResult>& rows) {
    bool fresh = true;
    {
        std::ifstream in(path, std::ios::binary | std::ios::ate);
        fresh = !in || in.tellg() == 0;
    }
    std::ofstream out(path, std::ios::binary | std::ios::app);
    if (!out) throw InputError("cannot open '" + path + "' for writing");
    if (fresh) out << kBenchHeader << "\n";
    for (const auto& r : rows) out << bench_csv_row(r) << "\n";
    if (!out) throw InputError("failed writing '" + path + "'");
}

}  // namespace mmdit
