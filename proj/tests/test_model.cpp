#include <gtest/gtest.h>

#include <cmath>

#include "mmdit/diffusion.hpp"
#include "mmdit/model.hpp"
#include "support.hpp"

using namespace mmdit;
using mmdit::testing::random_weights;
using mmdit::testing::some_tokens;
using mmdit::testing::tiny_config;

namespace {

Image random_image(std::size_t side, std::uint64_t seed) {
    Rng rng(seed);
    Image img(side);
    for (auto& v : img.data) v = float(rng.next_uniform());
    return img;
}

// Explicit per-token, per-head attention in double with std::exp.
TokenStreams<double> oracle_joint_attention(const TokenStreams<double>& in, const BlockWeights<double>& bw,
                                            const ModelConfig& cfg) {
    const std::size_t Nc = in.c.rows(), Nx = in.x.rows(), N = Nc + Nx, D = cfg.width, H = cfg.heads;
    const std::size_t dk = D / H;
    auto project = [&](std::size_t i, const Linear<double>& l) {
        const auto& src = i < Nc ? in.c : in.x;
        const std::size_t r = i < Nc ? i : i - Nc;
        std::vector<double> out(l.w.cols());
        for (std::size_t o = 0; o < out.size(); ++o) {
            double s = l.b(0, o);
            for (std::size_t d = 0; d < D; ++d) s += src(r, d) * l.w(d, o);
            out[o] = s;
        }
        return out;
    };
    std::vector<std::vector<double>> qkv(N);
    for (std::size_t i = 0; i < N; ++i) qkv[i] = project(i, i < Nc ? bw.text.qkv : bw.image.qkv);
    std::vector<std::vector<double>> att(N, std::vector<double>(D, 0.0));
    for (std::size_t h = 0; h < H; ++h)
        for (std::size_t i = 0; i < N; ++i) {
            std::vector<double> logit(N);
            double mx = -1e300;
            for (std::size_t j = 0; j < N; ++j) {
                double s = 0;
                for (std::size_t d = 0; d < dk; ++d) s += qkv[i][h * dk + d] * qkv[j][D + h * dk + d];
                logit[j] = s / std::sqrt(double(dk));
                mx = std::max(mx, logit[j]);
            }
            double z = 0;
            for (auto& l : logit) z += (l = std::exp(l - mx));
            for (std::size_t j = 0; j < N; ++j)
                for (std::size_t d = 0; d < dk; ++d) att[i][h * dk + d] += logit[j] / z * qkv[j][2 * D + h * dk + d];
        }
    TokenStreams<double> out{BasicMatrix<double>(Nc, D), BasicMatrix<double>(Nx, D)};
    for (std::size_t i = 0; i < N; ++i) {
        const auto& p = i < Nc ? bw.text.proj : bw.image.proj;
        auto& dst = i < Nc ? out.c : out.x;
        const std::size_t r = i < Nc ? i : i - Nc;
        for (std::size_t o = 0; o < D; ++o) {
            double s = p.b(0, o);
            for (std::size_t d = 0; d < D; ++d) s += att[i][d] * p.w(d, o);
            dst(r, o) = s;
        }
    }
    return out;
}

template <class T>
BasicMatrix<T> random_stream(Rng& rng, std::size_t rows, std::size_t cols) {
    BasicMatrix<T> m(rows, cols);
    for (auto& v : m.data()) v = T(rng.next_normal());
    return m;
}

}  // namespace

TEST(Patches, CountAndRoundTrip) {
    const ModelConfig cfg = tiny_config(1, 16, 8);
    EXPECT_EQ(extract_patches(Image(8), cfg).rows(), 4u);
    const ModelConfig big = tiny_config(1, 16, 32);
    const Image img = random_image(32, 1);
    const Image back = assemble_patches(extract_patches(img, big), big);
    for (std::size_t i = 0; i < img.data.size(); ++i) EXPECT_LT(std::abs(back.data[i] - img.data[i]), 1e-5);
}

TEST(Patches, ZeroImageGivesPositions) {
    const ModelConfig cfg = tiny_config();
    ModelWeights w = random_weights(cfg, 3);
    w.patch_embed.b.fill(0.f);
    const Matrix x = patchify(w, Image(cfg.image_side));
    EXPECT_EQ(x, w.image_pos);
}

TEST(Patches, WrongSideThrows) {
    EXPECT_THROW(extract_patches(Image(12), tiny_config()), ShapeError);
}

TEST(Embedding, PadPromptAndDeterminism) {
    const ModelConfig cfg = tiny_config();
    const ModelWeights w = random_weights(cfg, 4);
    const Matrix c = embed_text(w, null_prompt(cfg));
    for (std::size_t i = 0; i < cfg.text_len; ++i)
        for (std::size_t d = 0; d < cfg.width; ++d)
            EXPECT_EQ(c(i, d), w.token_embedding(tok::pad, d) + w.text_pos(i, d));
    const TokenIds t = some_tokens(cfg, 9);
    EXPECT_EQ(embed_text(w, t), embed_text(w, t));
}

TEST(Embedding, OneHotTableIsLookup) {
    ModelConfig cfg = tiny_config();
    cfg.width = 16;
    ModelWeights w = zero_weights<float>(cfg);
    for (std::size_t v = 0; v < cfg.vocab; ++v) w.token_embedding(v, v) = 1.f;
    const TokenIds t{3, 1, 4, 1, 5, 9, 2, 6};
    const Matrix c = embed_text(w, t);
    for (std::size_t i = 0; i < t.size(); ++i)
        for (std::size_t d = 0; d < cfg.width; ++d) EXPECT_EQ(c(i, d), d == t[i] ? 1.f : 0.f);
}

TEST(Embedding, RejectsBadTokens) {
    const ModelConfig cfg = tiny_config();
    const ModelWeights w = random_weights(cfg, 4);
    EXPECT_THROW(embed_text(w, TokenIds(3, 0)), InputError);
    TokenIds t(cfg.text_len, 0);
    t[2] = TokenId(cfg.vocab);
    EXPECT_THROW(embed_text(w, t), InputError);
}

TEST(Timestep, FeaturesMatchClosedForm) {
    const std::size_t dims = 16, half = 8;
    for (double t : {0.0, 0.3, 1.0}) {
        const auto f = timestep_features<double>(t, dims);
        for (std::size_t i = 0; i < half; ++i) {
            const double omega = std::pow(1000.0, double(i) / double(half - 1));
            EXPECT_NEAR(f[i], std::cos(omega * t), 1e-6);
            EXPECT_NEAR(f[half + i], std::sin(omega * t), 1e-6);
        }
    }
    const auto f0 = timestep_features<float>(0.f, dims), f1 = timestep_features<float>(1.f, dims);
    EXPECT_GT(std::abs(f0[half] - f1[half]), 0.1);  // sin(1·t) term
}

TEST(Timestep, EmbeddingDeterministicAndRangeChecked) {
    const ModelWeights w = random_weights(tiny_config(), 5);
    EXPECT_EQ(embed_timestep(w, 0.f), embed_timestep(w, 0.f));
    EXPECT_THROW(embed_timestep(w, 1.5f), InputError);
}

TEST(Attention, ZeroValuesGiveZeroDeltas) {
    ModelConfig cfg = tiny_config(1, 8, 4);
    cfg.text_len = 1;
    BlockWeights<float> bw = random_weights(cfg, 6).blocks[0];
    const std::size_t D = cfg.width;
    for (auto* s : {&bw.text, &bw.image}) {
        for (std::size_t r = 0; r < D; ++r)
            for (std::size_t c = 2 * D; c < 3 * D; ++c) s->qkv.w(r, c) = 0.f;
        for (std::size_t c = 2 * D; c < 3 * D; ++c) s->qkv.b(0, c) = 0.f;
        s->proj.b.fill(0.f);
    }
    Rng rng(1);
    const auto d = joint_attention<float>({random_stream<float>(rng, 1, D), random_stream<float>(rng, 1, D)}, bw, cfg);
    for (float v : d.c.data()) EXPECT_EQ(v, 0.f);
    for (float v : d.x.data()) EXPECT_EQ(v, 0.f);
}

TEST(Attention, IdenticalKeysGiveUniformWeights) {
    const ModelConfig cfg = tiny_config(1, 8, 8);
    ModelWeights w = random_weights(cfg, 7);
    const std::size_t D = cfg.width;
    for (auto* s : {&w.blocks[0].text, &w.blocks[0].image})
        for (std::size_t r = 0; r < D; ++r)
            for (std::size_t c = D; c < 2 * D; ++c) s->qkv.w(r, c) = 0.f;  // K = bias only
    for (std::size_t c = D; c < 2 * D; ++c) w.blocks[0].image.qkv.b(0, c) = w.blocks[0].text.qkv.b(0, c);
    ForwardCache<float> cache;
    ForwardOptions<float> opt;
    opt.cache = &cache;
    const TokenIds t = some_tokens(cfg, 1);
    const float ts = 0.5f;
    forward_batch<float>(w, std::span<const TokenIds>(&t, 1), extract_patches(random_image(8, 2), cfg),
                         std::span<const float>(&ts, 1), {}, opt);
    const double u = 1.0 / double(cfg.tokens());
    for (float p : cache.blocks[0].probs) EXPECT_NEAR(p, u, 1e-6);
}

TEST(Attention, MatchesBruteForceOracle) {
    ModelConfig cfg = tiny_config(1, 4, 8);  // 4 image tokens
    cfg.heads = 1;
    cfg.text_len = 2;
    const auto wd = random_weights<double>(cfg, 8, 1.0);
    const auto wf = weights_cast<float>(wd);
    Rng rng(2);
    const TokenStreams<double> in{random_stream<double>(rng, 2, 4), random_stream<double>(rng, 4, 4)};
    const auto want = oracle_joint_attention(in, wd.blocks[0], cfg);
    const auto got = joint_attention<float>({matrix_cast<float>(in.c), matrix_cast<float>(in.x)}, wf.blocks[0], cfg);
    for (std::size_t i = 0; i < want.c.size(); ++i) EXPECT_NEAR(got.c.data()[i], want.c.data()[i], 1e-5);
    for (std::size_t i = 0; i < want.x.size(); ++i) EXPECT_NEAR(got.x.data()[i], want.x.data()[i], 1e-5);
    const auto gd = joint_attention<double>(in, wd.blocks[0], cfg);
    for (std::size_t i = 0; i < want.x.size(); ++i) EXPECT_NEAR(gd.x.data()[i], want.x.data()[i], 1e-12);
}

TEST(Attention, RowsSumToOneEverywhere) {
    const ModelConfig cfg = tiny_config(3, 16, 8);
    const ModelWeights w = random_weights(cfg, 10, 1.0);
    ForwardCache<float> cache;
    ForwardOptions<float> opt;
    opt.cache = &cache;
    std::vector<TokenIds> toks{some_tokens(cfg, 1), some_tokens(cfg, 2)};
    const std::vector<float> ts{0.2f, 0.9f};
    Matrix x(2 * cfg.image_len(), cfg.patch_dim());
    Rng rng(4);
    for (auto& v : x.data()) v = rng.next_normal();
    forward_batch<float>(w, toks, x, ts, {}, opt);
    const std::size_t N = cfg.tokens();
    for (const auto& bc : cache.blocks)
        for (std::size_t r = 0; r < bc.probs.size() / N; ++r) {
            double s = 0;
            for (std::size_t j = 0; j < N; ++j) s += bc.probs[r * N + j];
            EXPECT_NEAR(s, 1.0, 1e-6);
        }
}

TEST(Block, ZeroGatesAreIdentity) {
    const ModelConfig cfg = tiny_config(1, 16, 8);
    ModelWeights w = random_weights(cfg, 11);
    const std::size_t D = cfg.width;
    for (auto* s : {&w.blocks[0].text, &w.blocks[0].image})
        for (std::size_t off : {2 * D, 5 * D}) {
            for (std::size_t r = 0; r < D; ++r)
                for (std::size_t c = off; c < off + D; ++c) s->modulation.w(r, c) = 0.f;
            for (std::size_t c = off; c < off + D; ++c) s->modulation.b(0, c) = 0.f;
        }
    Rng rng(3);
    const TokenStreams<float> in{random_stream<float>(rng, cfg.text_len, D), random_stream<float>(rng, 4, D)};
    const auto temb = embed_timestep(w, 0.4f);
    const auto out = block_forward<float>(in, temb, w.blocks[0], cfg);
    EXPECT_EQ(out.c, in.c);
    EXPECT_EQ(out.x, in.x);
    EXPECT_EQ(block_forward<float>(in, temb, w.blocks[0], cfg).x, out.x);
}

TEST(Block, UnmodulatedBlockIsPreNormTransformer) {
    // Zero conditioning and modulation weights, gate bias 1: each stream is
    // z + attn(LN z), then + mlp(LN ·).
    ModelConfig cfg = tiny_config(1, 8, 8);
    cfg.text_len = 3;
    auto w = random_weights<double>(cfg, 12, 1.0);
    const std::size_t D = cfg.width;
    for (auto* s : {&w.blocks[0].text, &w.blocks[0].image}) {
        s->modulation.w.fill(0.0);
        s->modulation.b.fill(0.0);
        for (std::size_t off : {2 * D, 5 * D})
            for (std::size_t c = off; c < off + D; ++c) s->modulation.b(0, c) = 1.0;
    }
    Rng rng(5);
    const TokenStreams<double> in{random_stream<double>(rng, 3, D), random_stream<double>(rng, 4, D)};
    const std::vector<double> temb(D, 0.0);
    const auto got = block_forward<double>(in, temb, w.blocks[0], cfg);

    std::vector<double> ones(D, 1.0), zeros(D, 0.0);
    auto ln_rows = [&](const BasicMatrix<double>& m) {
        BasicMatrix<double> o(m.rows(), m.cols());
        for (std::size_t r = 0; r < m.rows(); ++r) {
            auto v = layer_norm<double>(m.row(r), ones, zeros);
            std::copy(v.begin(), v.end(), o.row(r).begin());
        }
        return o;
    };
    const auto d = oracle_joint_attention({ln_rows(in.c), ln_rows(in.x)}, w.blocks[0], cfg);
    auto finish = [&](const BasicMatrix<double>& z, const BasicMatrix<double>& delta, const StreamWeights<double>& sw) {
        BasicMatrix<double> mid = z;
        for (std::size_t i = 0; i < mid.size(); ++i) mid.data()[i] += delta.data()[i];
        const auto h = ln_rows(mid);
        BasicMatrix<double> out = mid;
        for (std::size_t r = 0; r < h.rows(); ++r)
            for (std::size_t o = 0; o < D; ++o) {
                double acc = sw.mlp_out.b(0, o);
                for (std::size_t k = 0; k < cfg.mlp_width(); ++k) {
                    double pre = sw.mlp_in.b(0, k);
                    for (std::size_t i = 0; i < D; ++i) pre += h(r, i) * sw.mlp_in.w(i, k);
                    const double g = 0.5 * pre * (1 + std::tanh(std::sqrt(2 / M_PI) * (pre + 0.044715 * pre * pre * pre)));
                    acc += g * sw.mlp_out.w(k, o);
                }
                out(r, o) += acc;
            }
        return out;
    };
    const auto want_c = finish(in.c, d.c, w.blocks[0].text);
    const auto want_x = finish(in.x, d.x, w.blocks[0].image);
    for (std::size_t i = 0; i < want_c.size(); ++i) EXPECT_NEAR(got.c.data()[i], want_c.data()[i], 1e-9);
    for (std::size_t i = 0; i < want_x.size(); ++i) EXPECT_NEAR(got.x.data()[i], want_x.data()[i], 1e-9);
}

TEST(Forward, TwoBlockModelMatchesComposition) {
    const ModelConfig cfg = tiny_config(2, 16, 8);
    const ModelWeights w = random_weights(cfg, 13, 1.0);
    const TokenIds t = some_tokens(cfg, 3);
    const Image x = random_image(8, 4);
    const float ts = 0.7f;
    const Image got = forward(w, t, x, ts, {}).velocity;

    const auto temb = embed_timestep(w, ts);
    TokenStreams<float> s{embed_text(w, t), patchify(w, x)};
    for (const auto& bw : w.blocks) s = block_forward<float>(s, temb, bw, cfg);
    const std::size_t D = cfg.width;
    std::vector<float> mod(2 * D);
    for (std::size_t o = 0; o < 2 * D; ++o) {
        double acc = w.final_modulation.b(0, o);
        for (std::size_t i = 0; i < D; ++i) acc += double(temb[i]) * w.final_modulation.w(i, o);
        mod[o] = float(acc);
    }
    Matrix h(s.x.rows(), D);
    for (std::size_t r = 0; r < s.x.rows(); ++r) {
        std::vector<float> n(D);
        normalize_into<float>(s.x.row(r), n);
        for (std::size_t d = 0; d < D; ++d) h(r, d) = n[d] * (1 + mod[D + d]) + mod[d];
    }
    const Image want = unpatchify(w, h);
    for (std::size_t i = 0; i < want.data.size(); ++i) EXPECT_NEAR(got.data[i], want.data[i], 1e-5);
}

TEST(Forward, FreshModelPredictsZero) {
    const ModelConfig cfg = tiny_config();
    const ModelWeights w = init_weights(cfg, 1);
    const Image v = forward(w, some_tokens(cfg, 1), random_image(8, 1), 0.5f, {}).velocity;
    for (float x : v.data) EXPECT_EQ(x, 0.f);
}

TEST(Forward, BatchedEqualsPerItem) {
    const ModelConfig cfg = tiny_config(2, 16, 8);
    const ModelWeights w = random_weights(cfg, 14);
    std::vector<TokenIds> toks{some_tokens(cfg, 1), some_tokens(cfg, 2), some_tokens(cfg, 3)};
    std::vector<float> ts{0.1f, 0.5f, 1.0f};
    std::vector<Image> imgs{random_image(8, 1), random_image(8, 2), random_image(8, 3)};
    Matrix x(0, 0);
    std::vector<float> all;
    for (auto& im : imgs) {
        const Matrix p = extract_patches(im, cfg);
        all.insert(all.end(), p.data().begin(), p.data().end());
    }
    x = Matrix(3 * cfg.image_len(), cfg.patch_dim(), all);
    const Matrix out = forward_batch<float>(w, toks, x, ts, {});
    for (std::size_t b = 0; b < 3; ++b) {
        const Matrix one = extract_patches(forward(w, toks[b], imgs[b], ts[b], {}).velocity, cfg);
        for (std::size_t i = 0; i < one.size(); ++i) EXPECT_EQ(out.data()[b * one.size() + i], one.data()[i]);
    }
}

TEST(Forward, TraceRecordsBlockInputs) {
    const ModelConfig cfg = tiny_config(3, 16, 8);
    const ModelWeights w = random_weights(cfg, 15);
    const auto r = forward(w, some_tokens(cfg, 1), random_image(8, 1), 0.5f,
                           InterventionSpec{}.add(1, Action::skip()), true);
    ASSERT_TRUE(r.trace);
    ASSERT_EQ(r.trace->blocks.size(), 3u);
    EXPECT_TRUE(r.trace->blocks[0].executed);
    EXPECT_FALSE(r.trace->blocks[1].executed);
    // a skipped block passes its input through unchanged
    EXPECT_EQ(r.trace->blocks[1].image_in, r.trace->blocks[2].image_in);
    double mass = 0;
    for (float m : r.trace->blocks[0].text_attention_mass) mass += m;
    EXPECT_GT(mass, 0.0);
    EXPECT_LT(mass, 1.0);
}
