#pragma once

// Two-stream MMDiT. Text tokens (c) and image patches (x) keep separate
// projections, MLPs and AdaLN modulation, and meet in one joint attention over
// the concatenation [c; x] in every block.
//
// The batched forward keeps B items stacked row-wise: the text stream is a
// (B·N_c)×D matrix and the image stream (B·N_x)×D. Every kernel treats rows
// independently (or per item for attention), so an item's result does not
// depend on what else is in the batch.

#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmdit/config.hpp"
#include "mmdit/errors.hpp"
#include "mmdit/image.hpp"
#include "mmdit/interventions.hpp"
#include "mmdit/numerics.hpp"
#include "mmdit/tokens.hpp"

namespace mmdit {

template <class T>
struct Linear {
    BasicMatrix<T> w;  // in × out
    BasicMatrix<T> b;  // 1 × out

    std::span<const T> bias() const noexcept { return b.row(0); }
};

// Modulation produces [shift1 | scale1 | gate1 | shift2 | scale2 | gate2].
template <class T>
struct StreamWeights {
    Linear<T> modulation;
    Linear<T> qkv;
    Linear<T> proj;
    Linear<T> mlp_in;
    Linear<T> mlp_out;
};

template <class T>
struct BlockWeights {
    StreamWeights<T> text;
    StreamWeights<T> image;
};

template <class T>
struct BasicWeights {
    ModelConfig config;
    BasicMatrix<T> token_embedding;  // vocab × D
    BasicMatrix<T> text_pos;         // N_c × D
    BasicMatrix<T> image_pos;        // N_x × D
    Linear<T> patch_embed;           // patch_dim → D
    Linear<T> time_in;               // D → D
    Linear<T> time_out;              // D → D
    std::vector<BlockWeights<T>> blocks;
    Linear<T> final_modulation;      // D → 2D: [shift | scale]
    Linear<T> head;                  // D → patch_dim
};

using ModelWeights = BasicWeights<float>;

// Visits every tensor in a fixed order: f(name, matrix, rank). Biases report
// rank 1. The order and names define the checkpoint layout.
template <class W, class F>
void for_each_tensor(W& w, F&& f) {
    auto lin = [&](const std::string& n, auto& l) {
        f(n + ".w", l.w, 2u);
        f(n + ".b", l.b, 1u);
    };
    f(std::string("token_embedding"), w.token_embedding, 2u);
    f(std::string("text_pos"), w.text_pos, 2u);
    f(std::string("image_pos"), w.image_pos, 2u);
    lin("patch_embed", w.patch_embed);
    lin("time_in", w.time_in);
    lin("time_out", w.time_out);
    for (std::size_t l = 0; l < w.blocks.size(); ++l) {
        for (int s = 0; s < 2; ++s) {
            auto& sw = s == 0 ? w.blocks[l].text : w.blocks[l].image;
            const std::string p = "blocks." + std::to_string(l) + (s == 0 ? ".text." : ".image.");
            lin(p + "modulation", sw.modulation);
            lin(p + "qkv", sw.qkv);
            lin(p + "proj", sw.proj);
            lin(p + "mlp_in", sw.mlp_in);
            lin(p + "mlp_out", sw.mlp_out);
        }
    }
    lin("final_modulation", w.final_modulation);
    lin("head", w.head);
}

template <class T>
BasicWeights<T> zero_weights(const ModelConfig& cfg) {
    cfg.validate();
    const std::size_t D = cfg.width;
    auto lin = [](std::size_t in, std::size_t out) { return Linear<T>{BasicMatrix<T>(in, out), BasicMatrix<T>(1, out)}; };
    BasicWeights<T> w;
    w.config = cfg;
    w.token_embedding = BasicMatrix<T>(cfg.vocab, D);
    w.text_pos = BasicMatrix<T>(cfg.text_len, D);
    w.image_pos = BasicMatrix<T>(cfg.image_len(), D);
    w.patch_embed = lin(cfg.patch_dim(), D);
    w.time_in = lin(D, D);
    w.time_out = lin(D, D);
    w.blocks.resize(cfg.depth);
    for (auto& b : w.blocks) {
        for (auto* s : {&b.text, &b.image}) {
            s->modulation = lin(D, 6 * D);
            s->qkv = lin(D, 3 * D);
            s->proj = lin(D, D);
            s->mlp_in = lin(D, cfg.mlp_width());
            s->mlp_out = lin(cfg.mlp_width(), D);
        }
    }
    w.final_modulation = lin(D, 2 * D);
    w.head = lin(D, cfg.patch_dim());
    return w;
}

template <class To, class From>
BasicWeights<To> weights_cast(const BasicWeights<From>& src) {
    BasicWeights<To> dst = zero_weights<To>(src.config);
    std::vector<const BasicMatrix<From>*> from;
    for_each_tensor(src, [&](const std::string&, const BasicMatrix<From>& m, unsigned) { from.push_back(&m); });
    std::size_t i = 0;
    for_each_tensor(dst, [&](const std::string&, BasicMatrix<To>& m, unsigned) { m = matrix_cast<To>(*from[i++]); });
    return dst;
}

template <class T>
std::size_t parameter_count(const BasicWeights<T>& w) {
    std::size_t n = 0;
    for_each_tensor(w, [&](const std::string&, const BasicMatrix<T>& m, unsigned) { n += m.size(); });
    return n;
}

template <class T>
bool all_finite(const BasicWeights<T>& w) {
    bool ok = true;
    for_each_tensor(w, [&](const std::string&, const BasicMatrix<T>& m, unsigned) { ok = ok && m.all_finite(); });
    return ok;
}

// Log-spaced frequencies from 1 to 1000 rad per unit t: [cos(ω t) | sin(ω t)].
template <class T>
std::vector<T> timestep_features(T t, std::size_t dims) {
    std::vector<T> f(dims, T(0));
    const std::size_t half = dims / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double frac = half > 1 ? double(i) / double(half - 1) : 0.0;
        const double omega = std::exp(std::log(1000.0) * frac);
        f[i] = T(std::cos(omega * double(t)));
        f[half + i] = T(std::sin(omega * double(t)));
    }
    return f;
}

// Fixed sinusoidal tables used to initialize the learned position embeddings.
inline Matrix sinusoid_table_1d(std::size_t n, std::size_t dims) {
    Matrix m(n, dims);
    for (std::size_t p = 0; p < n; ++p)
        for (std::size_t i = 0; i < dims / 2; ++i) {
            const double w = std::pow(100.0, -double(i) / double(dims / 2));
            m(p, 2 * i) = float(std::sin(p * w));
            m(p, 2 * i + 1) = float(std::cos(p * w));
        }
    return m;
}

inline Matrix sinusoid_table_2d(std::size_t side, std::size_t dims) {
    Matrix m(side * side, dims);
    const Matrix axis = sinusoid_table_1d(side, dims / 2);
    for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x)
            for (std::size_t i = 0; i < dims / 2; ++i) {
                m(y * side + x, i) = axis(y, i);
                m(y * side + x, dims / 2 + i) = axis(x, i);
            }
    return m;
}

// AdaLN-zero initialization: modulation producers and the output head start at
// zero, so every block is the identity and the prediction is zero.
inline ModelWeights init_weights(const ModelConfig& cfg, std::uint64_t seed) {
    ModelWeights w = zero_weights<float>(cfg);
    Rng rng(seed);
    auto normal = [&](Matrix& m, float stddev) {
        for (auto& v : m.data()) v = rng.next_normal() * stddev;
    };
    auto xavier = [&](Linear<float>& l) {
        normal(l.w, std::sqrt(2.f / float(l.w.rows() + l.w.cols())));
    };
    normal(w.token_embedding, 1.f);
    w.text_pos = sinusoid_table_1d(cfg.text_len, cfg.width);
    w.image_pos = sinusoid_table_2d(cfg.patches_per_side(), cfg.width);
    xavier(w.patch_embed);
    normal(w.time_in.w, 0.02f * std::sqrt(float(cfg.width)));
    normal(w.time_out.w, 0.02f * std::sqrt(float(cfg.width)));
    for (auto& b : w.blocks) {
        for (auto* s : {&b.text, &b.image}) {
            xavier(s->qkv);
            xavier(s->proj);
            xavier(s->mlp_in);
            xavier(s->mlp_out);
        }
    }
    return w;
}

template <class T>
struct TokenStreams {
    BasicMatrix<T> c;  // text, N_c × D per item
    BasicMatrix<T> x;  // image, N_x × D per item
};

template <class T>
struct KvPair {
    BasicMatrix<T> k;  // N_x × D, all heads side by side
    BasicMatrix<T> v;
};

// Observation / substitution point inside joint attention.
template <class T>
struct AttentionTap {
    // Natively computed Q, K, V for one item, rows ordered [text; image].
    std::function<void(std::size_t block, std::size_t item, const BasicMatrix<T>& q,
                       const BasicMatrix<T>& k, const BasicMatrix<T>& v)>
        observe;
    // Replacement image-token K/V for one item, or nullptr to keep native values.
    std::function<const KvPair<T>*(std::size_t block, std::size_t item)> inject;
};

template <class T>
struct BlockTraceEntry {
    bool executed = false;
    BasicMatrix<T> text_in;   // c entering the block (after any text intervention)
    BasicMatrix<T> image_in;  // x entering the block
    std::vector<T> text_attention_mass;  // per text token; mean over heads and image queries
};

template <class T>
struct BasicBlockTrace {
    std::vector<BlockTraceEntry<T>> blocks;
};

using BlockTrace = BasicBlockTrace<float>;

// Everything the backward pass needs from one stream of one block.
template <class T>
struct StreamCache {
    BasicMatrix<T> input;   // Z
    BasicMatrix<T> mod;     // B × 6D
    BasicMatrix<T> norm1;
    std::vector<T> rstd1;
    BasicMatrix<T> h1;
    BasicMatrix<T> qkv;
    BasicMatrix<T> attn;    // attention output rows of this stream, before proj
    BasicMatrix<T> proj;
    BasicMatrix<T> mid;     // after the attention residual
    BasicMatrix<T> norm2;
    std::vector<T> rstd2;
    BasicMatrix<T> h2;
    BasicMatrix<T> pre;     // MLP pre-activation
    BasicMatrix<T> act;
    BasicMatrix<T> mlp;
};

template <class T>
struct BlockCache {
    StreamCache<T> text;
    StreamCache<T> image;
    std::vector<T> probs;  // B × H × N × N
};

template <class T>
struct ForwardCache {
    std::vector<TokenIds> tokens;
    BasicMatrix<T> patches;
    BasicMatrix<T> time_feat;    // B × D
    BasicMatrix<T> time_pre;     // B × D
    BasicMatrix<T> time_hidden;  // gelu(time_pre)
    BasicMatrix<T> temb;         // B × D, feeds every modulation producer
    std::vector<BlockCache<T>> blocks;
    BasicMatrix<T> final_in;
    BasicMatrix<T> final_norm;
    std::vector<T> final_rstd;
    BasicMatrix<T> final_mod;    // B × 2D
    BasicMatrix<T> final_h;
};

template <class T>
struct ForwardOptions {
    const AttentionTap<T>* tap = nullptr;
    std::vector<BasicBlockTrace<T>>* traces = nullptr;  // one per item when set
    ForwardCache<T>* cache = nullptr;                   // filled for backprop
};

// ---------------------------------------------------------------------------
// patches

// Raster order over patches; within a patch (dy, dx, channel).
template <class T = float>
BasicMatrix<T> extract_patches(const Image& img, const ModelConfig& cfg) {
    if (img.side != cfg.image_side || img.data.size() != cfg.image_side * cfg.image_side * 3) {
        throw ShapeError("image is " + std::to_string(img.side) + " px, expected " +
                         std::to_string(cfg.image_side));
    }
    const std::size_t P = cfg.patch, pps = cfg.patches_per_side();
    BasicMatrix<T> m(cfg.image_len(), cfg.patch_dim());
    for (std::size_t py = 0; py < pps; ++py)
        for (std::size_t px = 0; px < pps; ++px) {
            auto row = m.row(py * pps + px);
            std::size_t k = 0;
            for (std::size_t dy = 0; dy < P; ++dy)
                for (std::size_t dx = 0; dx < P; ++dx)
                    for (std::size_t ch = 0; ch < 3; ++ch) row[k++] = T(img.at(py * P + dy, px * P + dx, ch));
        }
    return m;
}

template <class T = float>
Image assemble_patches(const BasicMatrix<T>& m, const ModelConfig& cfg) {
    if (m.rows() != cfg.image_len() || m.cols() != cfg.patch_dim()) {
        throw ShapeError("patch matrix is " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                         ", expected " + std::to_string(cfg.image_len()) + "x" + std::to_string(cfg.patch_dim()));
    }
    const std::size_t P = cfg.patch, pps = cfg.patches_per_side();
    Image img(cfg.image_side);
    for (std::size_t py = 0; py < pps; ++py)
        for (std::size_t px = 0; px < pps; ++px) {
            auto row = m.row(py * pps + px);
            std::size_t k = 0;
            for (std::size_t dy = 0; dy < P; ++dy)
                for (std::size_t dx = 0; dx < P; ++dx)
                    for (std::size_t ch = 0; ch < 3; ++ch) img.at(py * P + dy, px * P + dx, ch) = float(row[k++]);
        }
    return img;
}

// Patch rows (B·N_x × patch_dim) → image tokens with position embedding.
template <class T>
BasicMatrix<T> embed_patches(const BasicWeights<T>& w, const BasicMatrix<T>& patches) {
    const std::size_t nx = w.config.image_len();
    if (patches.cols() != w.config.patch_dim() || patches.rows() % nx)
        throw ShapeError("patch rows do not match the model's patch layout");
    BasicMatrix<T> x;
    affine_into(patches, w.patch_embed.w, w.patch_embed.bias(), x);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto row = x.row(r);
        auto pos = w.image_pos.row(r % nx);
        for (std::size_t d = 0; d < row.size(); ++d) row[d] += pos[d];
    }
    return x;
}

inline Matrix patchify(const ModelWeights& w, const Image& img) {
    return embed_patches(w, extract_patches(img, w.config));
}

// Output head applied to already-normalized image tokens, then inverse raster.
inline Image unpatchify(const ModelWeights& w, const Matrix& x_tokens) {
    if (x_tokens.rows() != w.config.image_len() || x_tokens.cols() != w.config.width)
        throw ShapeError("unpatchify expects " + std::to_string(w.config.image_len()) + " rows of width " +
                         std::to_string(w.config.width));
    Matrix out;
    affine_into(x_tokens, w.head.w, w.head.bias(), out);
    return assemble_patches(out, w.config);
}

// ---------------------------------------------------------------------------
// embeddings

inline void check_tokens(const TokenIds& tokens, const ModelConfig& cfg) {
    if (tokens.size() != cfg.text_len)
        throw InputError("prompt has " + std::to_string(tokens.size()) + " tokens, expected " +
                         std::to_string(cfg.text_len));
    for (auto id : tokens)
        if (id >= cfg.vocab) throw InputError("token id " + std::to_string(id) + " outside vocabulary");
}

template <class T>
BasicMatrix<T> embed_text_batch(const BasicWeights<T>& w, std::span<const TokenIds> tokens) {
    const auto& cfg = w.config;
    BasicMatrix<T> c(tokens.size() * cfg.text_len, cfg.width);
    for (std::size_t b = 0; b < tokens.size(); ++b) {
        check_tokens(tokens[b], cfg);
        for (std::size_t i = 0; i < cfg.text_len; ++i) {
            auto row = c.row(b * cfg.text_len + i);
            auto e = w.token_embedding.row(tokens[b][i]);
            auto p = w.text_pos.row(i);
            for (std::size_t d = 0; d < cfg.width; ++d) row[d] = e[d] + p[d];
        }
    }
    return c;
}

template <class T>
BasicMatrix<T> embed_text(const BasicWeights<T>& w, const TokenIds& tokens) {
    return embed_text_batch(w, std::span<const TokenIds>(&tokens, 1));
}

namespace detail {

template <class T>
void check_time(T t) {
    if (!(t >= T(0) && t <= T(1))) throw InputError("timestep " + std::to_string(double(t)) + " outside [0, 1]");
}

// temb = time_out(gelu(time_in(features(t)))) for every item.
template <class T>
void embed_times(const BasicWeights<T>& w, std::span<const T> t, ForwardCache<T>& fc) {
    const std::size_t D = w.config.width;
    fc.time_feat.resize(t.size(), D);
    for (std::size_t b = 0; b < t.size(); ++b) {
        check_time(t[b]);
        auto f = timestep_features<T>(t[b], D);
        std::copy(f.begin(), f.end(), fc.time_feat.row(b).begin());
    }
    affine_into(fc.time_feat, w.time_in.w, w.time_in.bias(), fc.time_pre);
    fc.time_hidden = fc.time_pre;
    for (auto& v : fc.time_hidden.data()) v = gelu(v);
    affine_into(fc.time_hidden, w.time_out.w, w.time_out.bias(), fc.temb);
}

}  // namespace detail

template <class T>
std::vector<T> embed_timestep(const BasicWeights<T>& w, T t) {
    ForwardCache<T> fc;
    detail::embed_times(w, std::span<const T>(&t, 1), fc);
    return std::vector<T>(fc.temb.data().begin(), fc.temb.data().end());
}

// ---------------------------------------------------------------------------
// block internals

namespace detail {

// Per-row layer norm without affine parameters.
template <class T>
void normalize_rows(const BasicMatrix<T>& in, BasicMatrix<T>& out, std::vector<T>& rstd) {
    out.resize(in.rows(), in.cols());
    rstd.resize(in.rows());
    for (std::size_t r = 0; r < in.rows(); ++r) rstd[r] = normalize_into<T>(in.row(r), out.row(r));
}

// out = normed ⊙ (1 + scale) + shift with per-item modulation rows.
template <class T>
void modulate(const BasicMatrix<T>& normed, const BasicMatrix<T>& mod, std::size_t shift_off,
              std::size_t scale_off, std::size_t rows_per_item, BasicMatrix<T>& out) {
    out.resize(normed.rows(), normed.cols());
    const std::size_t D = normed.cols();
    for (std::size_t r = 0; r < normed.rows(); ++r) {
        const auto m = mod.row(r / rows_per_item);
        const auto n = normed.row(r);
        auto o = out.row(r);
        for (std::size_t d = 0; d < D; ++d) o[d] = n[d] * (T(1) + m[scale_off + d]) + m[shift_off + d];
    }
}

// z += gate ⊙ delta with per-item gates.
template <class T>
void gated_add(BasicMatrix<T>& z, const BasicMatrix<T>& delta, const BasicMatrix<T>& mod, std::size_t gate_off,
               std::size_t rows_per_item) {
    const std::size_t D = z.cols();
    for (std::size_t r = 0; r < z.rows(); ++r) {
        const auto m = mod.row(r / rows_per_item);
        const auto dl = delta.row(r);
        auto o = z.row(r);
        for (std::size_t d = 0; d < D; ++d) o[d] += m[gate_off + d] * dl[d];
    }
}

// H-head attention over [text; image] for each item. qkv_* rows hold
// [q | k | v]; outputs are the per-stream attention results before the
// output projection.
template <class T>
void joint_attend(const BasicMatrix<T>& qkv_c, const BasicMatrix<T>& qkv_x, const ModelConfig& cfg,
                  std::size_t block, BasicMatrix<T>& out_c, BasicMatrix<T>& out_x, std::vector<T>* probs,
                  const AttentionTap<T>* tap, std::vector<BasicBlockTrace<T>>* traces) {
    const std::size_t Nc = cfg.text_len, Nx = cfg.image_len(), N = Nc + Nx;
    const std::size_t D = cfg.width, H = cfg.heads, dk = cfg.head_dim();
    const std::size_t B = qkv_c.rows() / Nc;
    const T scale = T(1) / std::sqrt(T(dk));
    out_c.resize(B * Nc, D);
    out_x.resize(B * Nx, D);
    if (probs) probs->assign(B * H * N * N, T(0));

    BasicMatrix<T> q(N, D), k(N, D), v(N, D);
    BasicMatrix<T> qh(N, dk), kht(dk, N), vh(N, dk), sc(N, N), oh(N, dk);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t i = 0; i < N; ++i) {
            auto src = i < Nc ? qkv_c.row(b * Nc + i) : qkv_x.row(b * Nx + (i - Nc));
            std::copy(src.begin(), src.begin() + D, q.row(i).begin());
            std::copy(src.begin() + D, src.begin() + 2 * D, k.row(i).begin());
            std::copy(src.begin() + 2 * D, src.end(), v.row(i).begin());
        }
        if (tap && tap->observe) tap->observe(block, b, q, k, v);
        if (tap && tap->inject) {
            if (const KvPair<T>* kv = tap->inject(block, b)) {
                if (kv->k.rows() != Nx || kv->k.cols() != D || kv->v.rows() != Nx || kv->v.cols() != D)
                    throw ShapeError("injected K/V must be N_x x D");
                for (std::size_t i = 0; i < Nx; ++i) {
                    std::copy(kv->k.row(i).begin(), kv->k.row(i).end(), k.row(Nc + i).begin());
                    std::copy(kv->v.row(i).begin(), kv->v.row(i).end(), v.row(Nc + i).begin());
                }
            }
        }
        std::vector<T> mass;
        if (traces) mass.assign(Nc, T(0));
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = 0; i < N; ++i)
                for (std::size_t d = 0; d < dk; ++d) {
                    qh(i, d) = q(i, h * dk + d);
                    kht(d, i) = k(i, h * dk + d);
                    vh(i, d) = v(i, h * dk + d);
                }
            matmul_into(qh, kht, sc);
            for (auto& x : sc.data()) x *= scale;
            for (std::size_t i = 0; i < N; ++i) softmax_inplace(sc.row(i));
            if (probs) std::copy(sc.data().begin(), sc.data().end(), probs->begin() + (b * H + h) * N * N);
            if (traces)
                for (std::size_t i = Nc; i < N; ++i)
                    for (std::size_t j = 0; j < Nc; ++j) mass[j] += sc(i, j);
            matmul_into(sc, vh, oh);
            for (std::size_t i = 0; i < N; ++i) {
                auto dst = i < Nc ? out_c.row(b * Nc + i) : out_x.row(b * Nx + (i - Nc));
                std::copy(oh.row(i).begin(), oh.row(i).end(), dst.begin() + h * dk);
            }
        }
        if (traces) {
            for (auto& m : mass) m /= T(H * Nx);
            (*traces)[b].blocks[block].text_attention_mass = std::move(mass);
        }
    }
}

template <class T>
void stream_pre_attention(const StreamWeights<T>& sw, const BasicMatrix<T>& temb, std::size_t rows_per_item,
                          StreamCache<T>& sc) {
    const std::size_t D = sc.input.cols();
    affine_into(temb, sw.modulation.w, sw.modulation.bias(), sc.mod);
    normalize_rows(sc.input, sc.norm1, sc.rstd1);
    modulate(sc.norm1, sc.mod, 0, D, rows_per_item, sc.h1);
    affine_into(sc.h1, sw.qkv.w, sw.qkv.bias(), sc.qkv);
}

template <class T>
BasicMatrix<T> stream_post_attention(const StreamWeights<T>& sw, std::size_t rows_per_item, StreamCache<T>& sc) {
    const std::size_t D = sc.input.cols();
    affine_into(sc.attn, sw.proj.w, sw.proj.bias(), sc.proj);
    sc.mid = sc.input;
    gated_add(sc.mid, sc.proj, sc.mod, 2 * D, rows_per_item);
    normalize_rows(sc.mid, sc.norm2, sc.rstd2);
    modulate(sc.norm2, sc.mod, 3 * D, 4 * D, rows_per_item, sc.h2);
    affine_into(sc.h2, sw.mlp_in.w, sw.mlp_in.bias(), sc.pre);
    sc.act = sc.pre;
    for (auto& v : sc.act.data()) v = gelu(v);
    affine_into(sc.act, sw.mlp_out.w, sw.mlp_out.bias(), sc.mlp);
    BasicMatrix<T> out = sc.mid;
    gated_add(out, sc.mlp, sc.mod, 5 * D, rows_per_item);
    return out;
}

template <class T>
TokenStreams<T> block_forward_batch(TokenStreams<T> in, const BasicMatrix<T>& temb, const BlockWeights<T>& bw,
                                    const ModelConfig& cfg, std::size_t block, BlockCache<T>& bc,
                                    bool keep_probs, const AttentionTap<T>* tap,
                                    std::vector<BasicBlockTrace<T>>* traces) {
    if (in.c.cols() != cfg.width || in.x.cols() != cfg.width) throw ShapeError("stream width != D");
    bc.text.input = std::move(in.c);
    bc.image.input = std::move(in.x);
    stream_pre_attention(bw.text, temb, cfg.text_len, bc.text);
    stream_pre_attention(bw.image, temb, cfg.image_len(), bc.image);
    joint_attend(bc.text.qkv, bc.image.qkv, cfg, block, bc.text.attn, bc.image.attn,
                 keep_probs ? &bc.probs : nullptr, tap, traces);
    TokenStreams<T> out;
    out.c = stream_post_attention(bw.text, cfg.text_len, bc.text);
    out.x = stream_post_attention(bw.image, cfg.image_len(), bc.image);
    return out;
}

}  // namespace detail

// Joint attention on already-normalized streams of one item; returns the
// additive deltas after each stream's output projection (residual and gating
// are the caller's job).
template <class T>
TokenStreams<T> joint_attention(const TokenStreams<T>& normed, const BlockWeights<T>& bw, const ModelConfig& cfg) {
    if (normed.c.cols() != cfg.width || normed.x.cols() != cfg.width) throw ShapeError("stream width != D");
    if (normed.c.rows() != cfg.text_len || normed.x.rows() != cfg.image_len())
        throw ShapeError("stream token counts do not match the config");
    BasicMatrix<T> qc, qx, oc, ox;
    affine_into(normed.c, bw.text.qkv.w, bw.text.qkv.bias(), qc);
    affine_into(normed.x, bw.image.qkv.w, bw.image.qkv.bias(), qx);
    detail::joint_attend<T>(qc, qx, cfg, 0, oc, ox, nullptr, nullptr, nullptr);
    TokenStreams<T> d;
    affine_into(oc, bw.text.proj.w, bw.text.proj.bias(), d.c);
    affine_into(ox, bw.image.proj.w, bw.image.proj.bias(), d.x);
    return d;
}

// One block for one item; `temb` is the conditioning vector fed to the
// modulation producers.
template <class T>
TokenStreams<T> block_forward(const TokenStreams<T>& streams, std::span<const T> temb, const BlockWeights<T>& bw,
                              const ModelConfig& cfg) {
    if (temb.size() != cfg.width) throw ShapeError("conditioning vector length != D");
    BasicMatrix<T> t(1, cfg.width, std::vector<T>(temb.begin(), temb.end()));
    BlockCache<T> bc;
    return detail::block_forward_batch<T>(streams, t, bw, cfg, 0, bc, false, nullptr, nullptr);
}

// Batched velocity prediction. Returns B·N_x rows of patch_dim values.
template <class T>
BasicMatrix<T> forward_batch(const BasicWeights<T>& w, std::span<const TokenIds> tokens, const BasicMatrix<T>& patches,
                             std::span<const T> t, const InterventionSpec& plan, const ForwardOptions<T>& opt = {}) {
    const auto& cfg = w.config;
    const std::size_t B = tokens.size();
    const std::size_t D = cfg.width;
    if (t.size() != B) throw ShapeError("timestep count != batch size");
    if (patches.rows() != B * cfg.image_len() || patches.cols() != cfg.patch_dim())
        throw ShapeError("latent patch matrix does not match batch size");
    const auto by_block = plan_by_block(plan, cfg);
    if (opt.cache && !plan.empty()) throw PlanError("backprop cache requires an empty plan");

    ForwardCache<T> local;
    ForwardCache<T>& fc = opt.cache ? *opt.cache : local;
    fc.tokens.assign(tokens.begin(), tokens.end());
    fc.patches = patches;
    detail::embed_times(w, t, fc);

    TokenStreams<T> s{embed_text_batch(w, tokens), embed_patches(w, patches)};
    if (opt.traces) {
        opt.traces->assign(B, {});
        for (auto& tr : *opt.traces) tr.blocks.resize(cfg.depth);
    }
    fc.blocks.resize(opt.cache ? cfg.depth : 1);

    for (std::size_t l = 0; l < cfg.depth; ++l) {
        const Action* act = by_block[l];
        if (act) {
            if (act->kind == ActionKind::disable_text) s.c.fill(T(0));
            else if (act->kind == ActionKind::enhance_text) enhance_rows(s.c, cfg.text_len, T(act->lambda), act->mask);
        }
        const bool bypass = act && act->bypasses_block();
        if (opt.traces) {
            for (std::size_t b = 0; b < B; ++b) {
                auto& e = (*opt.traces)[b].blocks[l];
                e.executed = !bypass;
                e.text_in = BasicMatrix<T>(cfg.text_len, D);
                e.image_in = BasicMatrix<T>(cfg.image_len(), D);
                std::copy_n(s.c.row(b * cfg.text_len).begin(), cfg.text_len * D, e.text_in.ptr());
                std::copy_n(s.x.row(b * cfg.image_len()).begin(), cfg.image_len() * D, e.image_in.ptr());
                if (bypass) e.text_attention_mass.assign(cfg.text_len, T(0));
            }
        }
        if (bypass) continue;  // Z_out^(l) = Z_out^(l-1) for both streams
        auto& bc = fc.blocks[opt.cache ? l : 0];
        s = detail::block_forward_batch(std::move(s), fc.temb, w.blocks[l], cfg, l, bc, opt.cache != nullptr, opt.tap,
                                        opt.traces);
    }

    affine_into(fc.temb, w.final_modulation.w, w.final_modulation.bias(), fc.final_mod);
    detail::normalize_rows(s.x, fc.final_norm, fc.final_rstd);
    detail::modulate(fc.final_norm, fc.final_mod, 0, D, cfg.image_len(), fc.final_h);
    fc.final_in = std::move(s.x);
    BasicMatrix<T> out;
    affine_into(fc.final_h, w.head.w, w.head.bias(), out);
    return out;
}

struct ForwardResult {
    Image velocity;
    std::optional<BlockTrace> trace;
};

inline ForwardResult forward(const ModelWeights& w, const TokenIds& tokens, const Image& x_t, float t,
                             const InterventionSpec& plan, bool trace = false) {
    std::vector<BlockTrace> traces;
    ForwardOptions<float> opt;
    if (trace) opt.traces = &traces;
    Matrix v = forward_batch<float>(w, std::span<const TokenIds>(&tokens, 1), extract_patches(x_t, w.config),
                                    std::span<const float>(&t, 1), plan, opt);
    ForwardResult r{assemble_patches(v, w.config), std::nullopt};
    if (trace) r.trace = std::move(traces.front());
    return r;
}

}  // namespace mmdit
