#pragma once

// Noising processes, rectified-flow training and the guided Euler sampler.
//
// Latents live in pixel space: x_t = (1 - t)·x0 + t·ε with velocity target
// ε - x0. Sampling integrates x ← x - Δt·v from t = 1 down to 0 on a uniform
// grid, with classifier-free guidance against the all-PAD prompt.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mmdit/backward.hpp"
#include "mmdit/errors.hpp"
#include "mmdit/image.hpp"
#include "mmdit/interventions.hpp"
#include "mmdit/model.hpp"
#include "mmdit/numerics.hpp"

namespace mmdit {

struct NoiseSchedule {
    enum class Kind { ddpm, rectified_flow };
    Kind kind = Kind::rectified_flow;
    std::vector<float> alphas;  // ddpm only

    static NoiseSchedule rectified_flow() { return {}; }

    // α_t = 1 - β_t with β linearly spaced.
    static NoiseSchedule linear_ddpm(std::size_t steps, float beta_start = 1e-4f, float beta_end = 2e-2f) {
        NoiseSchedule s{Kind::ddpm, {}};
        for (std::size_t i = 0; i < steps; ++i) {
            const float f = steps > 1 ? float(i) / float(steps - 1) : 0.f;
            s.alphas.push_back(1.f - (beta_start + f * (beta_end - beta_start)));
        }
        return s;
    }

    // Interpolation weights (data, noise) at continuous t.
    static std::pair<float, float> rf_weights(float t) { return {1.f - t, t}; }
};

struct SamplerConfig {
    std::size_t steps = 16;
    float cfg_scale = 3.f;
    std::uint64_t seed = 0;
};

struct TrainConfig {
    std::size_t steps = 5000;
    std::size_t batch = 64;
    double lr = 3e-4;
    double cond_drop = 0.1;
    std::uint64_t seed = 0;
};

struct TrainItem {
    Image image;
    TokenIds tokens;
};

inline TokenIds null_prompt(const ModelConfig& cfg) { return TokenIds(cfg.text_len, tok::pad); }

// Independent stream id for (seed, index) pairs.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
    Rng r(seed ^ (0xD1B54A32D192ED03ULL * (index + 1)));
    return r.next_u64();
}

// sqrt(α)·x_prev + sqrt(1-α)·ε
inline std::vector<float> ddpm_noise_step(std::span<const float> x_prev, float alpha, std::span<const float> eps) {
    if (!(alpha >= 0.f && alpha <= 1.f)) throw InputError("alpha_t " + std::to_string(alpha) + " outside [0, 1]");
    if (x_prev.size() != eps.size()) throw ShapeError("ddpm_noise_step: shape mismatch");
    const float a = std::sqrt(alpha), b = std::sqrt(1.f - alpha);
    std::vector<float> out(x_prev.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x_prev[i] + b * eps[i];
    return out;
}

template <class T>
struct Interpolated {
    BasicMatrix<T> x_t;
    BasicMatrix<T> v_target;
};

// Per-row times: row r of x0 uses t[r / rows_per_item].
template <class T>
Interpolated<T> rf_interpolate_rows(const BasicMatrix<T>& x0, const BasicMatrix<T>& eps, std::span<const T> t,
                                    std::size_t rows_per_item) {
    if (x0.rows() != eps.rows() || x0.cols() != eps.cols()) throw ShapeError("rf_interpolate: shape mismatch");
    Interpolated<T> r{BasicMatrix<T>(x0.rows(), x0.cols()), BasicMatrix<T>(x0.rows(), x0.cols())};
    for (std::size_t row = 0; row < x0.rows(); ++row) {
        const T tt = t[row / rows_per_item];
        if (!(tt >= T(0) && tt <= T(1))) throw InputError("rf_interpolate: t outside [0, 1]");
        for (std::size_t c = 0; c < x0.cols(); ++c) {
            const T a = x0(row, c), e = eps(row, c);
            r.x_t(row, c) = (T(1) - tt) * a + tt * e;
            r.v_target(row, c) = e - a;
        }
    }
    return r;
}

inline std::pair<Image, Image> rf_interpolate(const Image& x0, const Image& eps, float t) {
    if (x0.data.size() != eps.data.size()) throw ShapeError("rf_interpolate: shape mismatch");
    if (!(t >= 0.f && t <= 1.f)) throw InputError("rf_interpolate: t outside [0, 1]");
    Image xt(x0.side), v(x0.side);
    for (std::size_t i = 0; i < x0.data.size(); ++i) {
        xt.data[i] = (1.f - t) * x0.data[i] + t * eps.data[i];
        v.data[i] = eps.data[i] - x0.data[i];
    }
    return {xt, v};
}

// Flow-matching loss for fixed (x0, ε, t, tokens); fills `grad` when given.
template <class T>
double flow_matching_loss(const BasicWeights<T>& w, std::span<const TokenIds> tokens, const BasicMatrix<T>& x0,
                          const BasicMatrix<T>& eps, std::span<const T> t, BasicWeights<T>* grad) {
    auto in = rf_interpolate_rows(x0, eps, t, w.config.image_len());
    ForwardCache<T> cache;
    ForwardOptions<T> opt;
    if (grad) opt.cache = &cache;
    BasicMatrix<T> pred = forward_batch(w, tokens, in.x_t, t, InterventionSpec{}, opt);
    BasicMatrix<T> d_pred;
    const double loss = mse_with_grad(pred, in.v_target, d_pred);
    if (!std::isfinite(loss)) throw TrainingError("non-finite flow-matching loss");
    if (grad) backward(w, cache, d_pred, *grad);
    return loss;
}

// One Adam step on a batch. Draws, in order per item: t, the cond-drop coin,
// then the noise image.
inline double train_step(ModelWeights& w, AdamState<float>& adam, std::span<const TrainItem> batch, Rng& rng,
                         double lr, double cond_drop) {
    if (!(lr >= 0.0)) throw InputError("learning rate must be non-negative");
    if (!(cond_drop >= 0.0 && cond_drop < 1.0)) throw InputError("cond_drop must be in [0, 1)");
    if (batch.empty()) throw InputError("empty training batch");
    const auto& cfg = w.config;
    const std::size_t nx = cfg.image_len();
    std::vector<TokenIds> tokens;
    std::vector<float> t;
    Matrix x0(batch.size() * nx, cfg.patch_dim());
    Matrix eps(batch.size() * nx, cfg.patch_dim());
    for (std::size_t b = 0; b < batch.size(); ++b) {
        t.push_back(static_cast<float>(rng.next_uniform()));
        const bool drop = rng.next_uniform() < cond_drop;
        tokens.push_back(drop ? null_prompt(cfg) : batch[b].tokens);
        Image noise(cfg.image_side);
        for (auto& v : noise.data) v = rng.next_normal();
        const Matrix px = extract_patches(batch[b].image, cfg);
        const Matrix pe = extract_patches(noise, cfg);
        std::copy(px.data().begin(), px.data().end(), x0.data().begin() + b * nx * cfg.patch_dim());
        std::copy(pe.data().begin(), pe.data().end(), eps.data().begin() + b * nx * cfg.patch_dim());
    }
    ModelWeights grad = zero_weights<float>(cfg);
    const double loss = flow_matching_loss<float>(w, tokens, x0, eps, t, &grad);
    if (!all_finite(grad)) throw TrainingError("non-finite gradient");
    adam_update(w, grad, adam, lr);
    return loss;
}

using BatchSource = std::function<std::vector<TrainItem>(Rng&, std::size_t)>;

// Runs cfg.steps Adam steps. `on_step(step, loss)` may return false to stop early.
inline void train(ModelWeights& w, const TrainConfig& tc, const BatchSource& source,
                  const std::function<bool(std::size_t, double)>& on_step = {}) {
    AdamState<float> adam(w.config);
    Rng data_rng(derive_seed(tc.seed, 1));
    Rng noise_rng(derive_seed(tc.seed, 2));
    for (std::size_t s = 0; s < tc.steps; ++s) {
        const auto batch = source(data_rng, tc.batch);
        const double loss = train_step(w, adam, batch, noise_rng, tc.lr, tc.cond_drop);
        if (on_step && !on_step(s, loss)) break;
    }
}

// Standard-normal latent for one generation, drawn in HWC pixel order.
inline Matrix initial_noise(const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    Image img(cfg.image_side);
    for (auto& v : img.data) v = rng.next_normal();
    return extract_patches(img, cfg);
}

// Guided velocity for B items sharing t. With cfg_scale == 1 only the
// conditional pass runs; otherwise the batch is [cond items; null items] and
// v = v_u + s·(v_c - v_u). Tap item indices follow that layout.
inline Matrix guided_velocity(const ModelWeights& w, std::span<const TokenIds> prompts, const Matrix& x, float t,
                              float cfg_scale, const InterventionSpec& plan, const AttentionTap<float>* tap = nullptr) {
    const std::size_t B = prompts.size();
    ForwardOptions<float> opt;
    opt.tap = tap;
    if (cfg_scale == 1.f) {
        std::vector<float> ts(B, t);
        return forward_batch<float>(w, prompts, x, ts, plan, opt);
    }
    std::vector<TokenIds> all(prompts.begin(), prompts.end());
    all.resize(2 * B, null_prompt(w.config));
    Matrix xx(2 * x.rows(), x.cols());
    std::copy(x.data().begin(), x.data().end(), xx.data().begin());
    std::copy(x.data().begin(), x.data().end(), xx.data().begin() + x.size());
    std::vector<float> ts(2 * B, t);
    const Matrix v = forward_batch<float>(w, all, xx, ts, plan, opt);
    Matrix out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const float vc = v.data()[i], vu = v.data()[x.size() + i];
        out.data()[i] = vu + cfg_scale * (vc - vu);
    }
    return out;
}

// Per-step hook used by editing: given the step index, returns the tap for
// that step's forward (or nullptr).
using StepTapFn = std::function<const AttentionTap<float>*(std::size_t step)>;

inline void check_sampler(const SamplerConfig& s) {
    if (s.steps < 1) throw InputError("sampler needs at least one step");
    if (!(s.cfg_scale >= 0.f) || !std::isfinite(s.cfg_scale)) throw InputError("cfg_scale must be finite and >= 0");
}

// Euler integration for a batch of prompts, one noise seed per item.
inline std::vector<Image> sample_batch(const ModelWeights& w, std::span<const TokenIds> prompts,
                                       std::span<const std::uint64_t> seeds, const SamplerConfig& sc,
                                       const InterventionSpec& plan, const StepTapFn& step_tap = {}) {
    check_sampler(sc);
    validate(plan, w.config);
    if (seeds.size() != prompts.size()) throw InputError("one seed per prompt required");
    for (const auto& p : prompts) check_tokens(p, w.config);
    const std::size_t nx = w.config.image_len(), pd = w.config.patch_dim();
    Matrix x(prompts.size() * nx, pd);
    for (std::size_t b = 0; b < prompts.size(); ++b) {
        const Matrix e = initial_noise(w.config, seeds[b]);
        std::copy(e.data().begin(), e.data().end(), x.data().begin() + b * nx * pd);
    }
    const float dt = 1.f / float(sc.steps);
    for (std::size_t k = 0; k < sc.steps; ++k) {
        const float t = float(1.0 - double(k) / double(sc.steps));
        const Matrix v =
            guided_velocity(w, prompts, x, t, sc.cfg_scale, plan, step_tap ? step_tap(k) : nullptr);
        for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] -= dt * v.data()[i];
    }
    std::vector<Image> out;
    for (std::size_t b = 0; b < prompts.size(); ++b) {
        Matrix m(nx, pd);
        std::copy_n(x.data().begin() + b * nx * pd, nx * pd, m.data().begin());
        out.push_back(clamp01(assemble_patches(m, w.config)));
    }
    return out;
}

inline Image sample(const ModelWeights& w, const TokenIds& tokens, const SamplerConfig& sc,
                    const InterventionSpec& plan) {
    const std::uint64_t seed = sc.seed;
    return sample_batch(w, std::span<const TokenIds>(&tokens, 1), std::span<const std::uint64_t>(&seed, 1), sc,
                        plan)
        .front();
}

}  // namespace mmdit
