#pragma once

// Reverse-mode gradients of the batched forward (empty plan only), plus the
// flow-matching MSE loss and Adam.

#include <cmath>
#include <cstddef>
#include <vector>

#include "mmdit/model.hpp"
#include "mmdit/numerics.hpp"

namespace mmdit {

namespace detail {

template <class T>
void add_into(BasicMatrix<T>& acc, const BasicMatrix<T>& m) {
    auto& a = acc.data();
    const auto& b = m.data();
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

// g += aᵀ b
template <class T>
void accumulate_tn(BasicMatrix<T>& g, const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
    matmul_tn_into(a, b, g, true);
}

template <class T>
void accumulate_colsum(BasicMatrix<T>& g, const BasicMatrix<T>& m) {
    auto acc = g.row(0);
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto row = m.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) acc[c] += row[c];
    }
}

template <class T>
void linear_backward(const Linear<T>& lin, Linear<T>& g, const BasicMatrix<T>& input, const BasicMatrix<T>& d_out,
                     BasicMatrix<T>* d_in) {
    accumulate_tn(g.w, input, d_out);
    accumulate_colsum(g.b, d_out);
    if (d_in) *d_in = matmul_nt(d_out, lin.w);
}

// d_in = rstd · (dn − mean(dn) − n · mean(dn ⊙ n)), added to `d_in`.
template <class T>
void normalize_backward_add(const BasicMatrix<T>& d_norm, const BasicMatrix<T>& norm, const std::vector<T>& rstd,
                            BasicMatrix<T>& d_in) {
    const std::size_t D = norm.cols();
    for (std::size_t r = 0; r < norm.rows(); ++r) {
        auto dn = d_norm.row(r);
        auto n = norm.row(r);
        T mean_dn = 0, mean_dnn = 0;
        for (std::size_t d = 0; d < D; ++d) {
            mean_dn += dn[d];
            mean_dnn += dn[d] * n[d];
        }
        mean_dn /= T(D);
        mean_dnn /= T(D);
        auto out = d_in.row(r);
        for (std::size_t d = 0; d < D; ++d) out[d] += rstd[r] * (dn[d] - mean_dn - n[d] * mean_dnn);
    }
}

// Backward through h = n ⊙ (1 + scale) + shift; returns dn and accumulates
// the modulation gradient.
template <class T>
BasicMatrix<T> modulate_backward(const BasicMatrix<T>& d_h, const BasicMatrix<T>& norm, const BasicMatrix<T>& mod,
                                 std::size_t shift_off, std::size_t scale_off, std::size_t rows_per_item,
                                 BasicMatrix<T>& d_mod) {
    const std::size_t D = norm.cols();
    BasicMatrix<T> d_n(norm.rows(), D);
    for (std::size_t r = 0; r < norm.rows(); ++r) {
        const std::size_t item = r / rows_per_item;
        auto m = mod.row(item);
        auto dm = d_mod.row(item);
        auto dh = d_h.row(r);
        auto n = norm.row(r);
        auto dn = d_n.row(r);
        for (std::size_t d = 0; d < D; ++d) {
            dm[shift_off + d] += dh[d];
            dm[scale_off + d] += dh[d] * n[d];
            dn[d] = dh[d] * (T(1) + m[scale_off + d]);
        }
    }
    return d_n;
}

// Backward through z_out = z + gate ⊙ delta: returns d_delta and accumulates d_gate.
template <class T>
BasicMatrix<T> gate_backward(const BasicMatrix<T>& d_z, const BasicMatrix<T>& delta, const BasicMatrix<T>& mod,
                             std::size_t gate_off, std::size_t rows_per_item, BasicMatrix<T>& d_mod) {
    const std::size_t D = delta.cols();
    BasicMatrix<T> d_delta(delta.rows(), D);
    for (std::size_t r = 0; r < delta.rows(); ++r) {
        const std::size_t item = r / rows_per_item;
        auto m = mod.row(item);
        auto dm = d_mod.row(item);
        auto dz = d_z.row(r);
        auto dl = delta.row(r);
        auto out = d_delta.row(r);
        for (std::size_t d = 0; d < D; ++d) {
            dm[gate_off + d] += dz[d] * dl[d];
            out[d] = dz[d] * m[gate_off + d];
        }
    }
    return d_delta;
}

// MLP half of a block; d_z holds dZ2 on entry and dZ1 on return. Returns the
// gradient with respect to the stream's attention output.
template <class T>
BasicMatrix<T> stream_backward_post(const StreamWeights<T>& sw, const StreamCache<T>& sc, std::size_t rows_per_item,
                                    StreamWeights<T>& g, BasicMatrix<T>& d_mod, BasicMatrix<T>& d_z) {
    const std::size_t D = sc.input.cols();
    BasicMatrix<T> d_mlp = gate_backward(d_z, sc.mlp, sc.mod, 5 * D, rows_per_item, d_mod);
    BasicMatrix<T> d_act;
    linear_backward(sw.mlp_out, g.mlp_out, sc.act, d_mlp, &d_act);
    auto& da = d_act.data();
    const auto& pre = sc.pre.data();
    for (std::size_t i = 0; i < da.size(); ++i) da[i] *= gelu_grad(pre[i]);
    BasicMatrix<T> d_h2;
    linear_backward(sw.mlp_in, g.mlp_in, sc.h2, d_act, &d_h2);
    BasicMatrix<T> d_n2 = modulate_backward(d_h2, sc.norm2, sc.mod, 3 * D, 4 * D, rows_per_item, d_mod);
    normalize_backward_add(d_n2, sc.norm2, sc.rstd2, d_z);

    BasicMatrix<T> d_proj = gate_backward(d_z, sc.proj, sc.mod, 2 * D, rows_per_item, d_mod);
    BasicMatrix<T> d_attn;
    linear_backward(sw.proj, g.proj, sc.attn, d_proj, &d_attn);
    return d_attn;
}

// Attention-input half; d_z holds dZ1 on entry and dZ on return.
template <class T>
void stream_backward_pre(const StreamWeights<T>& sw, const StreamCache<T>& sc, std::size_t rows_per_item,
                         const BasicMatrix<T>& d_qkv, const BasicMatrix<T>& temb, StreamWeights<T>& g,
                         BasicMatrix<T>& d_mod, BasicMatrix<T>& d_z, BasicMatrix<T>& d_temb) {
    const std::size_t D = sc.input.cols();
    BasicMatrix<T> d_h1;
    linear_backward(sw.qkv, g.qkv, sc.h1, d_qkv, &d_h1);
    BasicMatrix<T> d_n1 = modulate_backward(d_h1, sc.norm1, sc.mod, 0, D, rows_per_item, d_mod);
    normalize_backward_add(d_n1, sc.norm1, sc.rstd1, d_z);
    BasicMatrix<T> d_t;
    linear_backward(sw.modulation, g.modulation, temb, d_mod, &d_t);
    add_into(d_temb, d_t);
}

template <class T>
void joint_attend_backward(const BlockCache<T>& bc, const ModelConfig& cfg, const BasicMatrix<T>& d_attn_c,
                           const BasicMatrix<T>& d_attn_x, BasicMatrix<T>& d_qkv_c, BasicMatrix<T>& d_qkv_x) {
    const std::size_t Nc = cfg.text_len, Nx = cfg.image_len(), N = Nc + Nx;
    const std::size_t D = cfg.width, H = cfg.heads, dk = cfg.head_dim();
    const std::size_t B = bc.text.qkv.rows() / Nc;
    const T scale = T(1) / std::sqrt(T(dk));
    d_qkv_c = BasicMatrix<T>(B * Nc, 3 * D);
    d_qkv_x = BasicMatrix<T>(B * Nx, 3 * D);

    BasicMatrix<T> q(N, dk), k(N, dk), vt(dk, N), dout(N, dk), pt(N, N), dp, ds(N, N), dq, dkm, dv;
    BasicMatrix<T> p(N, N);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = 0; i < N; ++i) {
                auto src = i < Nc ? bc.text.qkv.row(b * Nc + i) : bc.image.qkv.row(b * Nx + (i - Nc));
                auto g = i < Nc ? d_attn_c.row(b * Nc + i) : d_attn_x.row(b * Nx + (i - Nc));
                for (std::size_t d = 0; d < dk; ++d) {
                    q(i, d) = src[h * dk + d];
                    k(i, d) = src[D + h * dk + d];
                    vt(d, i) = src[2 * D + h * dk + d];
                    dout(i, d) = g[h * dk + d];
                }
            }
            const T* P = bc.probs.data() + (b * H + h) * N * N;
            std::copy(P, P + N * N, p.data().begin());
            for (std::size_t i = 0; i < N; ++i)
                for (std::size_t j = 0; j < N; ++j) pt(j, i) = p(i, j);
            matmul_into(pt, dout, dv);   // dV = Pᵀ dO
            matmul_into(dout, vt, dp);   // dP = dO Vᵀ
            for (std::size_t i = 0; i < N; ++i) {
                T dot = 0;
                for (std::size_t j = 0; j < N; ++j) dot += p(i, j) * dp(i, j);
                for (std::size_t j = 0; j < N; ++j) ds(i, j) = p(i, j) * (dp(i, j) - dot) * scale;
            }
            matmul_into(ds, k, dq);      // dQ = dS K
            matmul_tn_into(ds, q, dkm);  // dK = dSᵀ Q
            for (std::size_t i = 0; i < N; ++i) {
                auto dst = i < Nc ? d_qkv_c.row(b * Nc + i) : d_qkv_x.row(b * Nx + (i - Nc));
                for (std::size_t d = 0; d < dk; ++d) {
                    dst[h * dk + d] = dq(i, d);
                    dst[D + h * dk + d] = dkm(i, d);
                    dst[2 * D + h * dk + d] = dv(i, d);
                }
            }
        }
    }
}

}  // namespace detail

// Accumulates into `g` the gradient of sum(d_out ⊙ prediction) through the
// cached forward. `g` must have the weights' shapes.
template <class T>
void backward(const BasicWeights<T>& w, const ForwardCache<T>& fc, const BasicMatrix<T>& d_out, BasicWeights<T>& g) {
    using namespace detail;
    const auto& cfg = w.config;
    const std::size_t D = cfg.width, Nc = cfg.text_len, Nx = cfg.image_len();
    const std::size_t B = fc.tokens.size();
    if (fc.blocks.size() != cfg.depth) throw InputError("backward needs a forward cache from a cached pass");

    BasicMatrix<T> d_temb(B, D);

    BasicMatrix<T> d_h;
    linear_backward(w.head, g.head, fc.final_h, d_out, &d_h);
    BasicMatrix<T> d_fmod(B, 2 * D);
    BasicMatrix<T> d_n = modulate_backward(d_h, fc.final_norm, fc.final_mod, 0, D, Nx, d_fmod);
    BasicMatrix<T> d_x(B * Nx, D);
    normalize_backward_add(d_n, fc.final_norm, fc.final_rstd, d_x);
    {
        BasicMatrix<T> d_t;
        linear_backward(w.final_modulation, g.final_modulation, fc.temb, d_fmod, &d_t);
        add_into(d_temb, d_t);
    }
    BasicMatrix<T> d_c(B * Nc, D);

    for (std::size_t l = cfg.depth; l-- > 0;) {
        const auto& bc = fc.blocks[l];
        const auto& bw = w.blocks[l];
        auto& gb = g.blocks[l];
        BasicMatrix<T> d_mod_c(B, 6 * D), d_mod_x(B, 6 * D);
        BasicMatrix<T> d_attn_c = stream_backward_post(bw.text, bc.text, Nc, gb.text, d_mod_c, d_c);
        BasicMatrix<T> d_attn_x = stream_backward_post(bw.image, bc.image, Nx, gb.image, d_mod_x, d_x);
        BasicMatrix<T> d_qkv_c, d_qkv_x;
        joint_attend_backward(bc, cfg, d_attn_c, d_attn_x, d_qkv_c, d_qkv_x);
        stream_backward_pre(bw.text, bc.text, Nc, d_qkv_c, fc.temb, gb.text, d_mod_c, d_c, d_temb);
        stream_backward_pre(bw.image, bc.image, Nx, d_qkv_x, fc.temb, gb.image, d_mod_x, d_x, d_temb);
    }

    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < Nc; ++i) {
            auto dr = d_c.row(b * Nc + i);
            auto te = g.token_embedding.row(fc.tokens[b][i]);
            auto tp = g.text_pos.row(i);
            for (std::size_t d = 0; d < D; ++d) {
                te[d] += dr[d];
                tp[d] += dr[d];
            }
        }
    for (std::size_t r = 0; r < d_x.rows(); ++r) {
        auto dr = d_x.row(r);
        auto ip = g.image_pos.row(r % Nx);
        for (std::size_t d = 0; d < D; ++d) ip[d] += dr[d];
    }
    linear_backward<T>(w.patch_embed, g.patch_embed, fc.patches, d_x, nullptr);

    BasicMatrix<T> d_hidden;
    linear_backward(w.time_out, g.time_out, fc.time_hidden, d_temb, &d_hidden);
    auto& dh = d_hidden.data();
    const auto& pre = fc.time_pre.data();
    for (std::size_t i = 0; i < dh.size(); ++i) dh[i] *= gelu_grad(pre[i]);
    linear_backward<T>(w.time_in, g.time_in, fc.time_feat, d_hidden, nullptr);
}

// Mean squared error over every element; writes dLoss/dPrediction.
template <class T>
double mse_with_grad(const BasicMatrix<T>& pred, const BasicMatrix<T>& target, BasicMatrix<T>& d_pred) {
    if (pred.rows() != target.rows() || pred.cols() != target.cols()) throw ShapeError("mse: shape mismatch");
    d_pred.resize(pred.rows(), pred.cols());
    const auto& p = pred.data();
    const auto& t = target.data();
    auto& d = d_pred.data();
    const T inv = T(1) / T(p.size());
    double sum = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const T diff = p[i] - t[i];
        sum += double(diff) * double(diff);
        d[i] = T(2) * diff * inv;
    }
    return sum / double(p.size());
}

template <class T>
struct AdamState {
    BasicWeights<T> m;
    BasicWeights<T> v;
    std::size_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    explicit AdamState(const ModelConfig& cfg) : m(zero_weights<T>(cfg)), v(zero_weights<T>(cfg)) {}
};

template <class T>
void adam_update(BasicWeights<T>& w, const BasicWeights<T>& g, AdamState<T>& st, double lr) {
    ++st.step;
    const double c1 = 1.0 - std::pow(st.beta1, double(st.step));
    const double c2 = 1.0 - std::pow(st.beta2, double(st.step));
    std::vector<BasicMatrix<T>*> ws, ms, vs;
    std::vector<const BasicMatrix<T>*> gs;
    for_each_tensor(w, [&](const std::string&, BasicMatrix<T>& m, unsigned) { ws.push_back(&m); });
    for_each_tensor(g, [&](const std::string&, const BasicMatrix<T>& m, unsigned) { gs.push_back(&m); });
    for_each_tensor(st.m, [&](const std::string&, BasicMatrix<T>& m, unsigned) { ms.push_back(&m); });
    for_each_tensor(st.v, [&](const std::string&, BasicMatrix<T>& m, unsigned) { vs.push_back(&m); });
    const T b1 = T(st.beta1), b2 = T(st.beta2), lr_t = T(lr), eps = T(st.eps);
    const T ic1 = T(1.0 / c1), ic2 = T(1.0 / c2);
    for (std::size_t t = 0; t < ws.size(); ++t) {
        auto& wd = ws[t]->data();
        const auto& gd = gs[t]->data();
        auto& md = ms[t]->data();
        auto& vd = vs[t]->data();
        for (std::size_t i = 0; i < wd.size(); ++i) {
            md[i] = b1 * md[i] + (T(1) - b1) * gd[i];
            vd[i] = b2 * vd[i] + (T(1) - b2) * gd[i] * gd[i];
            const T mhat = md[i] * ic1;
            const T vhat = vd[i] * ic2;
            wd[i] -= lr_t * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

}  // namespace mmdit
