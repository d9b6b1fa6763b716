#pragma once

// Training on the synthetic grammar with periodic held-out evaluation and an
// optional early stop once single-object accuracy reaches a target.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mmdit/checker.hpp"
#include "mmdit/diffusion.hpp"
#include "mmdit/grammar.hpp"
#include "mmdit/probe.hpp"

namespace mmdit {

inline BatchSource grammar_source() {
    return [](Rng& rng, std::size_t n) {
        std::vector<TrainItem> items;
        for (auto& s : gen_dataset(rng, n)) items.push_back({render(s.scene), std::move(s.tokens)});
        return items;
    };
}

// Salt of the held-out evaluation prompts; probe sets use salt 0.
inline constexpr std::uint64_t kHeldOutSalt = 0x5EEDF00D;

// Fraction of single-object prompts ("one C S") whose sample shows exactly
// one object of the right color and shape.
inline double single_object_accuracy(const ModelWeights& w, std::size_t n, const SamplerConfig& sc,
                                     std::uint64_t salt = kHeldOutSalt) {
    const auto prompts = attribute_prompts(Attribute::color, n, salt);
    const auto images = sample_prompts(w, prompts, derive_seed(salt, 1), sc, [](Attribute) { return InterventionSpec{}; });
    std::size_t ok = 0;
    for (std::size_t i = 0; i < prompts.size(); ++i) ok += check_image(images[i], prompts[i].tokens).object_ok;
    return double(ok) / double(n);
}

struct EvalSettings {
    std::size_t every = 250;     // steps between evaluations; 0 disables
    std::size_t prompts = 200;
    double target = 0.0;         // stop once accuracy >= target (0: never)
    SamplerConfig sampler{};
};

struct TrainLog {
    std::vector<double> losses;  // one per step
    std::vector<std::pair<std::size_t, double>> evals;  // (step, accuracy)
    std::size_t steps = 0;
    bool reached_target = false;
};

inline TrainLog train_on_grammar(ModelWeights& w, const TrainConfig& tc, const EvalSettings& ev,
                                 const std::function<void(const std::string&)>& log = {}) {
    TrainLog out;
    train(w, tc, grammar_source(), [&](std::size_t step, double loss) {
        out.losses.push_back(loss);
        out.steps = step + 1;
        if (log && (step + 1) % 50 == 0) {
            double mean = 0;
            for (std::size_t i = out.losses.size() - 50; i < out.losses.size(); ++i) mean += out.losses[i];
            log("step " + std::to_string(step + 1) + " mean loss " + format_number(mean / 50));
        }
        if (ev.every && (step + 1) % ev.every == 0) {
            const double acc = single_object_accuracy(w, ev.prompts, ev.sampler);
            out.evals.emplace_back(step + 1, acc);
            if (log) log("step " + std::to_string(step + 1) + " held-out single-object accuracy " + format_number(acc));
            if (ev.target > 0 && acc >= ev.target) {
                out.reached_target = true;
                return false;
            }
        }
        return true;
    });
    return out;
}

inline std::string loss_csv(const std::vector<double>& losses) {
    std::string s = "step,loss\n";
    for (std::size_t i = 0; i < losses.size(); ++i) s += std::to_string(i + 1) + "," + format_number(losses[i]) + "\n";
    return s;
}

}  // namespace mmdit
