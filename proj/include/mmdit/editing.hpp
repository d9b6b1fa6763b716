#pragma once

// Paired source/target generation with source K/V injection.
//
// Both branches start from the same noise. At every step the source branch
// runs unmodified and records the image-token K/V of the injection blocks;
// the target branch then runs with its text stream enhanced entering those
// blocks, and inside their joint attention its image-token K/V are replaced
// by the source's (text-token K/V stay the target's own, queries too).

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "mmdit/diffusion.hpp"
#include "mmdit/errors.hpp"
#include "mmdit/interventions.hpp"
#include "mmdit/model.hpp"

namespace mmdit {

struct EditSession {
    TokenIds src_tokens;
    TokenIds tgt_tokens;
    std::vector<std::size_t> injection_blocks;  // V
    float lambda = 1.5f;
    std::optional<std::vector<std::size_t>> mask;
    float tau = 1.f;  // fraction of steps, from the start, with injection on
    std::uint64_t seed = 0;
};

// K/V of the image tokens per (step, block); one pair per pass (cond, then
// null when guidance is on).
struct InjectionCache {
    std::map<std::pair<std::size_t, std::size_t>, std::vector<KvPair<float>>> entries;

    std::size_t size() const noexcept { return entries.size(); }
    bool empty() const noexcept { return entries.empty(); }

    const KvPair<float>* find(std::size_t step, std::size_t block, std::size_t pass) const {
        auto it = entries.find({step, block});
        if (it == entries.end() || pass >= it->second.size()) return nullptr;
        return &it->second[pass];
    }
};

struct EditResult {
    Image source;
    Image edited;
};

inline std::size_t injection_steps(float tau, std::size_t steps) {
    return static_cast<std::size_t>(std::ceil(double(tau) * double(steps)));
}

inline void validate(const EditSession& s, const ModelConfig& cfg) {
    check_tokens(s.src_tokens, cfg);
    check_tokens(s.tgt_tokens, cfg);
    if (!(s.tau > 0.f && s.tau <= 1.f)) throw PlanError("edit: tau " + std::to_string(s.tau) + " outside (0, 1]");
    std::set<std::size_t> seen;
    for (auto b : s.injection_blocks) {
        if (b >= cfg.depth) throw PlanError("edit: injection block " + std::to_string(b) + " out of range");
        if (!seen.insert(b).second) throw PlanError("edit: injection block " + std::to_string(b) + " repeated");
    }
    validate(InterventionSpec::enhance_blocks(s.injection_blocks, s.lambda, s.mask), cfg);
}

struct RecordedSource {
    Image image;
    InjectionCache cache;
};

// Samples `tokens` from `seed` and records image-token K/V at `blocks` for
// the first `active_steps` steps.
inline RecordedSource record_kv(const ModelWeights& w, const TokenIds& tokens, std::uint64_t seed,
                                const SamplerConfig& sc, const std::vector<std::size_t>& blocks,
                                std::size_t active_steps) {
    const std::set<std::size_t> wanted(blocks.begin(), blocks.end());
    const std::size_t Nc = w.config.text_len, Nx = w.config.image_len(), D = w.config.width;
    RecordedSource out;
    std::size_t current = 0;
    AttentionTap<float> tap;
    tap.observe = [&](std::size_t block, std::size_t item, const Matrix&, const Matrix& k, const Matrix& v) {
        if (!wanted.count(block)) return;
        auto& slot = out.cache.entries[{current, block}];
        if (slot.size() <= item) slot.resize(item + 1);
        KvPair<float>& kv = slot[item];
        kv.k = Matrix(Nx, D);
        kv.v = Matrix(Nx, D);
        std::copy_n(k.row(Nc).begin(), Nx * D, kv.k.ptr());
        std::copy_n(v.row(Nc).begin(), Nx * D, kv.v.ptr());
    };
    StepTapFn step_tap = [&](std::size_t step) -> const AttentionTap<float>* {
        current = step;
        return (step < active_steps && !wanted.empty()) ? &tap : nullptr;
    };
    out.image = sample_batch(w, std::span<const TokenIds>(&tokens, 1), std::span<const std::uint64_t>(&seed, 1), sc,
                             InterventionSpec{}, step_tap)
                    .front();
    return out;
}

inline EditResult edit(const ModelWeights& w, const EditSession& session, const SamplerConfig& sampler) {
    validate(session, w.config);
    check_sampler(sampler);
    const std::size_t active = injection_steps(session.tau, sampler.steps);
    RecordedSource src = record_kv(w, session.src_tokens, session.seed, sampler, session.injection_blocks, active);

    std::size_t current = 0;
    AttentionTap<float> tap;
    tap.inject = [&](std::size_t block, std::size_t item) { return src.cache.find(current, block, item); };
    StepTapFn step_tap = [&](std::size_t step) -> const AttentionTap<float>* {
        current = step;
        return step < active && !src.cache.empty() ? &tap : nullptr;
    };
    const InterventionSpec plan =
        InterventionSpec::enhance_blocks(session.injection_blocks, session.lambda, session.mask);
    Image edited = sample_batch(w, std::span<const TokenIds>(&session.tgt_tokens, 1),
                                std::span<const std::uint64_t>(&session.seed, 1), sampler, plan, step_tap)
                       .front();
    return {std::move(src.image), std::move(edited)};
}

}  // namespace mmdit
