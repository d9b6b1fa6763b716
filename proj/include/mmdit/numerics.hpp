#pragma once

// Dense row-major matrices, the handful of kernels the transformer needs,
// a seedable splitmix64 generator, and a central-difference gradient checker.
//
// Everything is templated on the scalar so the same model code can be
// instantiated in double precision for gradient checking; production code
// uses `Matrix` (float). Accumulation order is fixed: row-major output, inner
// loop over the shared dimension, k ascending.

#include <algorithm>
#include <bit>
#include <type_traits>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mmdit/errors.hpp"

namespace mmdit {

template <class T>
class BasicMatrix {
public:
    BasicMatrix() = default;
    BasicMatrix(std::size_t rows, std::size_t cols, T fill = T(0))
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    BasicMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw ShapeError("matrix data length " + std::to_string(data_.size()) + " != " +
                             std::to_string(rows_) + "x" + std::to_string(cols_));
        }
    }

    static BasicMatrix from_rows(std::initializer_list<std::initializer_list<T>> rows) {
        BasicMatrix m;
        m.rows_ = rows.size();
        m.cols_ = rows.size() ? rows.begin()->size() : 0;
        for (const auto& r : rows) {
            if (r.size() != m.cols_) throw ShapeError("ragged matrix literal");
            m.data_.insert(m.data_.end(), r.begin(), r.end());
        }
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    std::vector<T>& data() noexcept { return data_; }
    const std::vector<T>& data() const noexcept { return data_; }
    T* ptr() noexcept { return data_.data(); }
    const T* ptr() const noexcept { return data_.data(); }

    void resize(std::size_t rows, std::size_t cols) {
        rows_ = rows;
        cols_ = cols;
        data_.assign(rows * cols, T(0));
    }
    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    friend bool operator==(const BasicMatrix&, const BasicMatrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

using Matrix = BasicMatrix<float>;

template <class To, class From>
BasicMatrix<To> matrix_cast(const BasicMatrix<From>& m) {
    std::vector<To> d(m.data().begin(), m.data().end());
    return BasicMatrix<To>(m.rows(), m.cols(), std::move(d));
}

namespace detail {

// c[M×N] (+)= a[M×K] · b[K×N]. Register-blocked over 4 rows × 32 columns,
// but every product is still the sequential sum over k = 0..K-1 starting
// from zero (then added to c when accumulating), so results match the naive
// triple loop exactly.
template <bool Accumulate, class T>
void gemm(const T* a, const T* b, T* c, std::size_t M, std::size_t K, std::size_t N) {
    constexpr std::size_t RB = 4;
    constexpr std::size_t CB = 32;
    auto store = [](T* dst, T v) {
        if constexpr (Accumulate) *dst += v;
        else *dst = v;
    };
    std::size_t i = 0;
    for (; i + RB <= M; i += RB) {
        for (std::size_t j = 0; j < N; j += CB) {
            const std::size_t w = std::min(CB, N - j);
            T acc[RB][CB] = {};
            if (w == CB) {
                for (std::size_t k = 0; k < K; ++k) {
                    const T* br = b + k * N + j;
                    for (std::size_t r = 0; r < RB; ++r) {
                        const T av = a[(i + r) * K + k];
                        for (std::size_t q = 0; q < CB; ++q) acc[r][q] += av * br[q];
                    }
                }
            } else {
                for (std::size_t k = 0; k < K; ++k) {
                    const T* br = b + k * N + j;
                    for (std::size_t r = 0; r < RB; ++r) {
                        const T av = a[(i + r) * K + k];
                        for (std::size_t q = 0; q < w; ++q) acc[r][q] += av * br[q];
                    }
                }
            }
            for (std::size_t r = 0; r < RB; ++r)
                for (std::size_t q = 0; q < w; ++q) store(c + (i + r) * N + j + q, acc[r][q]);
        }
    }
    for (; i < M; ++i) {
        for (std::size_t j = 0; j < N; j += CB) {
            const std::size_t w = std::min(CB, N - j);
            T acc[CB] = {};
            for (std::size_t k = 0; k < K; ++k) {
                const T av = a[i * K + k];
                const T* br = b + k * N + j;
                for (std::size_t q = 0; q < w; ++q) acc[q] += av * br[q];
            }
            for (std::size_t q = 0; q < w; ++q) store(c + i * N + j + q, acc[q]);
        }
    }
}

}  // namespace detail

template <class T>
void matmul_into(const BasicMatrix<T>& a, const BasicMatrix<T>& b, BasicMatrix<T>& out) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                         " by " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
    }
    if (out.rows() != a.rows() || out.cols() != b.cols()) out.resize(a.rows(), b.cols());
    detail::gemm<false>(a.ptr(), b.ptr(), out.ptr(), a.rows(), a.cols(), b.cols());
}

template <class T>
BasicMatrix<T> matmul(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
    BasicMatrix<T> out;
    matmul_into(a, b, out);
    return out;
}

template <class T>
BasicMatrix<T> transpose(const BasicMatrix<T>& m) {
    constexpr std::size_t TB = 16;  // tiles keep both sides in cache
    BasicMatrix<T> t(m.cols(), m.rows());
    for (std::size_t r0 = 0; r0 < m.rows(); r0 += TB)
        for (std::size_t c0 = 0; c0 < m.cols(); c0 += TB) {
            const std::size_t r1 = std::min(r0 + TB, m.rows()), c1 = std::min(c0 + TB, m.cols());
            for (std::size_t r = r0; r < r1; ++r)
                for (std::size_t c = c0; c < c1; ++c) t(c, r) = m(r, c);
        }
    return t;
}

// a · bᵀ
template <class T>
BasicMatrix<T> matmul_nt(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
    return matmul(a, transpose(b));
}

// out (+)= aᵀ · b
template <class T>
void matmul_tn_into(const BasicMatrix<T>& a, const BasicMatrix<T>& b, BasicMatrix<T>& out, bool accumulate = false) {
    if (a.rows() != b.rows()) throw ShapeError("matmul_tn: row count mismatch");
    if (out.rows() != a.cols() || out.cols() != b.cols()) {
        if (accumulate) throw ShapeError("matmul_tn: accumulator shape mismatch");
        out.resize(a.cols(), b.cols());
    }
    // A transposed copy is cheaper than strided loads once a has many rows.
    const BasicMatrix<T> at = transpose(a);
    if (accumulate) detail::gemm<true>(at.ptr(), b.ptr(), out.ptr(), a.cols(), a.rows(), b.cols());
    else detail::gemm<false>(at.ptr(), b.ptr(), out.ptr(), a.cols(), a.rows(), b.cols());
}

template <class T>
BasicMatrix<T> matmul_tn(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
    BasicMatrix<T> out;
    matmul_tn_into(a, b, out);
    return out;
}

// out = x·w + bias (bias broadcast over rows)
template <class T>
void affine_into(const BasicMatrix<T>& x, const BasicMatrix<T>& w, std::span<const T> bias,
                 BasicMatrix<T>& out) {
    matmul_into(x, w, out);
    if (bias.size() != out.cols()) throw ShapeError("affine: bias length mismatch");
    for (std::size_t r = 0; r < out.rows(); ++r) {
        auto row = out.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) row[c] += bias[c];
    }
}

// exp for float: Cody–Waite reduction plus a degree-6 polynomial, branch
// free so loops over it vectorize. Relative error is a few ulp; double
// precision uses std::exp.
inline float exp_poly(float x) {
    x = x < -87.3f ? -87.3f : x;
    x = x > 88.3f ? 88.3f : x;
    // round-to-nearest via the 1.5·2^23 shifter; std::floor blocks vectorization
    const float n = (x * 1.44269504088896341f + 12582912.f) - 12582912.f;
    float r = x - n * 0.693359375f;
    r = r - n * -2.12194440e-4f;
    float p = 1.9875691500e-4f;
    p = p * r + 1.3981999507e-3f;
    p = p * r + 8.3334519073e-3f;
    p = p * r + 4.1665795894e-2f;
    p = p * r + 1.6666665459e-1f;
    p = p * r + 5.0000001201e-1f;
    const float y = p * r * r + r + 1.f;
    const std::int32_t bits = (static_cast<std::int32_t>(n) + 127) << 23;
    return y * std::bit_cast<float>(bits);
}

template <class T>
T fast_exp(T x) {
    if constexpr (std::is_same_v<T, float>) return exp_poly(x);
    else return std::exp(x);
}

template <class T>
T fast_tanh(T x) {
    x = x < T(-20) ? T(-20) : x;
    x = x > T(20) ? T(20) : x;
    return T(1) - T(2) / (fast_exp(T(2) * x) + T(1));
}

template <class T>
void softmax_inplace(std::span<T> row) {
    if (row.empty()) return;
    const T mx = *std::max_element(row.begin(), row.end());
    for (auto& v : row) v = fast_exp(v - mx);
    T sum = 0;
    for (auto v : row) sum += v;
    const T inv = T(1) / sum;
    for (auto& v : row) v *= inv;
}

template <class T>
BasicMatrix<T> softmax_rows(const BasicMatrix<T>& m) {
    BasicMatrix<T> out = m;
    for (std::size_t r = 0; r < out.rows(); ++r) softmax_inplace(out.row(r));
    return out;
}

inline constexpr float kNormEps = 1e-5f;

// Normalizes `v` to zero mean / unit variance and writes it to `out`; returns
// the reciprocal standard deviation (kept by the backward pass).
template <class T>
T normalize_into(std::span<const T> v, std::span<T> out, T eps = T(kNormEps)) {
    const std::size_t n = v.size();
    T mean = 0;
    for (T x : v) mean += x;
    mean /= T(n);
    T var = 0;
    for (T x : v) var += (x - mean) * (x - mean);
    var /= T(n);
    const T rstd = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < n; ++i) out[i] = (v[i] - mean) * rstd;
    return rstd;
}

template <class T>
std::vector<T> layer_norm(std::span<const T> v, std::span<const T> gain, std::span<const T> bias,
                          T eps = T(kNormEps)) {
    if (gain.size() != v.size() || bias.size() != v.size()) {
        throw ShapeError("layer_norm: length mismatch");
    }
    if (!(eps > T(0))) throw InputError("layer_norm: eps must be positive");
    std::vector<T> out(v.size());
    normalize_into<T>(v, out, eps);
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = out[i] * gain[i] + bias[i];
    return out;
}

template <class T>
std::vector<T> layer_norm(const std::vector<T>& v, const std::vector<T>& gain,
                          const std::vector<T>& bias, T eps = T(kNormEps)) {
    return layer_norm<T>(std::span<const T>(v), std::span<const T>(gain),
                         std::span<const T>(bias), eps);
}

// tanh-approximation GELU
template <class T>
T gelu(T x) {
    constexpr T k = T(0.7978845608028654);  // sqrt(2/pi)
    constexpr T c = T(0.044715);
    return T(0.5) * x * (T(1) + fast_tanh(k * (x + c * x * x * x)));
}

template <class T>
T gelu_grad(T x) {
    constexpr T k = T(0.7978845608028654);
    constexpr T c = T(0.044715);
    const T th = fast_tanh(k * (x + c * x * x * x));
    return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * k * (T(1) + T(3) * c * x * x);
}

template <class T>
std::vector<T> gelu(std::span<const T> v) {
    std::vector<T> out(v.size());
    std::transform(v.begin(), v.end(), out.begin(), [](T x) { return gelu(x); });
    return out;
}

template <class T>
std::vector<T> gelu(const std::vector<T>& v) {
    return gelu<T>(std::span<const T>(v));
}

// splitmix64 stream; normals via the cosine branch of Box–Muller so the whole
// generator state is the single 64-bit word.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) noexcept : state_(seed) {}

    std::uint64_t state() const noexcept { return state_; }

    std::uint64_t next_u64() noexcept {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1) with 53 random bits
    double next_uniform() noexcept { return double(next_u64() >> 11) * 0x1.0p-53; }

    // uniform integer in [0, n)
    std::uint64_t next_below(std::uint64_t n) noexcept {
        return static_cast<std::uint64_t>(next_uniform() * double(n));
    }

    float next_normal() noexcept {
        const double u1 = (double(next_u64() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
        const double u2 = next_uniform();
        return static_cast<float>(std::sqrt(-2.0 * std::log(u1)) *
                                  std::cos(2.0 * std::numbers::pi * u2));
    }

private:
    std::uint64_t state_;
};

inline float rng_next_normal(Rng& rng) { return rng.next_normal(); }

// Compares `analytic[i]` against the central difference of `loss` at each
// index; returns the max relative error with denominator
// max(|analytic|, |numeric|, 1e-8). `params` is restored on return.
template <class T>
double finite_diff_check(const std::function<double(std::span<const T>)>& loss,
                         std::vector<T>& params, std::span<const std::size_t> indices,
                         std::span<const double> analytic, double h) {
    if (!(h > 0)) throw InputError("finite_diff_check: h must be positive");
    if (analytic.size() != indices.size()) throw ShapeError("finite_diff_check: gradient count");
    double worst = 0;
    for (std::size_t n = 0; n < indices.size(); ++n) {
        const std::size_t i = indices[n];
        if (i >= params.size()) throw InputError("finite_diff_check: index out of range");
        const T saved = params[i];
        params[i] = saved + T(h);
        const double up = loss(params);
        params[i] = saved - T(h);
        const double down = loss(params);
        params[i] = saved;
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw NumericError("finite_diff_check: non-finite loss at index " + std::to_string(i));
        }
        const double numeric = (up - down) / (2.0 * h);
        const double denom = std::max({std::abs(analytic[n]), std::abs(numeric), 1e-8});
        worst = std::max(worst, std::abs(analytic[n] - numeric) / denom);
    }
    return worst;
}

}  // namespace mmdit
