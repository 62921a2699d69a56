#include "tsflow/attention.hpp"

#include <cmath>
#include <cstdlib>

#include "tsflow/ops.hpp"

namespace tsflow {

template <typename Real>
Tensor<Real> manhattan_bias_spatial(std::size_t n_h, std::size_t n_w) {
    const std::size_t S = n_h * n_w;
    Tensor<Real> m(Shape{S, S});
    for (std::size_t i = 0; i < S; ++i)
        for (std::size_t j = 0; j < S; ++j) {
            const auto ri = static_cast<long>(i / n_w), ci = static_cast<long>(i % n_w);
            const auto rj = static_cast<long>(j / n_w), cj = static_cast<long>(j % n_w);
            m[i * S + j] = -static_cast<Real>(std::labs(ri - rj) + std::labs(ci - cj));
        }
    return m;
}

template <typename Real>
Tensor<Real> manhattan_bias_temporal(std::size_t frames) {
    Tensor<Real> m(Shape{frames, frames});
    for (std::size_t i = 0; i < frames; ++i)
        for (std::size_t j = 0; j < frames; ++j)
            m[i * frames + j] = -static_cast<Real>(i > j ? i - j : j - i);
    return m;
}

template <typename Real>
Tensor<Real> downsample_aux(const Tensor<Real>& aux, PatchSize patch) {
    const auto& s = aux.shape();
    if (s.size() != 4) throw ShapeError("auxiliary frames must be [T, C, H, W], got " + shape_str(s));
    if (patch.h == 0 || patch.w == 0 || s[2] % patch.h || s[3] % patch.w)
        throw ShapeError("auxiliary frames " + shape_str(s) + " not divisible by the patch size");
    if (!aux.all_finite()) throw std::invalid_argument("auxiliary frames contain non-finite values");
    const std::size_t gh = s[2] / patch.h, gw = s[3] / patch.w;
    Tensor<Real> out(Shape{s[0], s[1], gh, gw});
    const Real inv = Real(1) / static_cast<Real>(patch.h * patch.w);
    for (std::size_t nc = 0; nc < s[0] * s[1]; ++nc)
        for (std::size_t y = 0; y < s[2]; ++y)
            for (std::size_t x = 0; x < s[3]; ++x)
                out[(nc * gh + y / patch.h) * gw + x / patch.w] += aux[(nc * s[2] + y) * s[3] + x] * inv;
    return out;
}

template <typename Real>
Tensor<Real> aux_bias_spatial(const Tensor<Real>& q) {
    if (q.rank() != 4) throw ShapeError("aux_bias_spatial expects [T, C, n_h, n_w], got " + shape_str(q.shape()));
    if (!q.all_finite()) throw std::invalid_argument("auxiliary prior contains non-finite values");
    const std::size_t T = q.dim(0), C = q.dim(1), S = q.dim(2) * q.dim(3);
    Tensor<Real> m(Shape{T, S, S});
    const Real inv_c = Real(1) / static_cast<Real>(C);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t i = 0; i < S; ++i)
            for (std::size_t j = i + 1; j < S; ++j) {
                Real acc = 0;
                for (std::size_t c = 0; c < C; ++c) acc += std::abs(q[(t * C + c) * S + i] - q[(t * C + c) * S + j]);
                m[(t * S + i) * S + j] = m[(t * S + j) * S + i] = -acc * inv_c;
            }
    return m;
}

template <typename Real>
Tensor<Real> aux_bias_temporal(const Tensor<Real>& q) {
    if (q.rank() != 4) throw ShapeError("aux_bias_temporal expects [T, C, n_h, n_w], got " + shape_str(q.shape()));
    if (!q.all_finite()) throw std::invalid_argument("auxiliary prior contains non-finite values");
    const std::size_t T = q.dim(0), C = q.dim(1), S = q.dim(2) * q.dim(3);
    Tensor<Real> m(Shape{S, T, T});
    const Real inv_c = Real(1) / static_cast<Real>(C);
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t a = 0; a < T; ++a)
            for (std::size_t b = a + 1; b < T; ++b) {
                Real acc = 0;
                for (std::size_t c = 0; c < C; ++c) acc += std::abs(q[(a * C + c) * S + s] - q[(b * C + c) * S + s]);
                m[(s * T + a) * T + b] = m[(s * T + b) * T + a] = -acc * inv_c;
            }
    return m;
}

template <typename Real>
Var<Real> stm_bias(const Var<Real>& w1, const Var<Real>& w2, const Tensor<Real>& m_pos, const Var<Real>& m_aux) {
    if (m_pos.rank() != 2 || m_pos.dim(0) != m_pos.dim(1)) throw ShapeError("positional prior must be square");
    const std::size_t L = m_pos.dim(0);
    auto pos = ops::mul(w1, ops::constant(m_pos.reshaped({1, L, L})));
    if (!m_aux.defined()) return pos;
    const auto& as = m_aux.shape();
    if (as.size() != 3 || as[1] != L || as[2] != L) throw_shape_mismatch("stm_bias", m_pos.shape(), as);
    return ops::add(pos, ops::mul(w2, m_aux));
}

namespace {

template <typename Real>
Var<Real> split_heads(const Var<Real>& x, std::size_t N, std::size_t L, std::size_t heads, std::size_t dk) {
    // [N, L, d] -> [N*heads, L, dk]
    auto y = ops::permute(ops::reshape(x, {N, L, heads, dk}), {0, 2, 1, 3});
    return ops::reshape(y, {N * heads, L, dk});
}

template <typename Real>
Var<Real> merge_heads(const Var<Real>& x, std::size_t N, std::size_t L, std::size_t heads, std::size_t dk) {
    auto y = ops::permute(ops::reshape(x, {N, heads, L, dk}), {0, 2, 1, 3});
    return ops::reshape(y, {N, L, heads * dk});
}

template <typename Real>
Var<Real> attention_probs(const Var<Real>& q, const Var<Real>& k, const Var<Real>& bias, std::size_t N, std::size_t heads,
                          std::size_t Lq, std::size_t Lk, std::size_t dk) {
    auto scores = ops::scale(ops::bmm(q, k, true), Real(1) / std::sqrt(static_cast<Real>(dk)));
    if (bias.defined()) {
        const auto& bs = bias.shape();
        if (bs.size() != 3 || (bs[0] != N && bs[0] != 1) || bs[1] != Lq || bs[2] != Lk)
            throw_shape_mismatch("attention bias", Shape{N, Lq, Lk}, bs);
        scores = ops::add(ops::reshape(scores, {N, heads, Lq, Lk}), ops::reshape(bias, {bs[0], 1, Lq, Lk}));
        scores = ops::reshape(scores, {N * heads, Lq, Lk});
    }
    return ops::softmax(scores);
}

template <typename Real>
void check_attention(const Shape& xs, std::size_t heads, const AttentionParams<Real>& p) {
    if (xs.size() != 3) throw ShapeError("attention expects [N, L, d], got " + shape_str(xs));
    const std::size_t d = xs[2];
    if (heads == 0 || d % heads != 0)
        throw ShapeError("attention width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
    if (p.qkv_weight.shape() != Shape{d, 3 * d}) throw_shape_mismatch("attention qkv weight", Shape{d, 3 * d}, p.qkv_weight.shape());
    if (p.out_weight.shape() != Shape{d, d}) throw_shape_mismatch("attention out weight", Shape{d, d}, p.out_weight.shape());
}

}  // namespace

template <typename Real>
Var<Real> biased_mhsa(const Var<Real>& x, const Var<Real>& bias, std::size_t heads, const AttentionParams<Real>& p) {
    check_attention(x.shape(), heads, p);
    const std::size_t N = x.shape()[0], L = x.shape()[1], d = x.shape()[2], dk = d / heads;
    auto qkv = ops::linear(x, p.qkv_weight, p.qkv_bias);
    auto q = split_heads(ops::slice(qkv, 2, 0, d), N, L, heads, dk);
    auto k = split_heads(ops::slice(qkv, 2, d, d), N, L, heads, dk);
    auto v = split_heads(ops::slice(qkv, 2, 2 * d, d), N, L, heads, dk);
    auto probs = attention_probs(q, k, bias, N, heads, L, L, dk);
    auto ctx = merge_heads(ops::bmm(probs, v), N, L, heads, dk);
    return ops::linear(ctx, p.out_weight, p.out_bias);
}

template <typename Real>
Tensor<Real> attention_weights(const Tensor<Real>& x, const Tensor<Real>* bias, std::size_t heads,
                               const AttentionParams<Real>& p) {
    NoGradGuard guard;
    check_attention(x.shape(), heads, p);
    const std::size_t N = x.dim(0), L = x.dim(1), d = x.dim(2), dk = d / heads;
    auto qkv = ops::linear(Var<Real>(x), p.qkv_weight, p.qkv_bias);
    auto q = split_heads(ops::slice(qkv, 2, 0, d), N, L, heads, dk);
    auto k = split_heads(ops::slice(qkv, 2, d, d), N, L, heads, dk);
    Var<Real> b;
    if (bias) b = Var<Real>(*bias);
    return attention_probs(q, k, b, N, heads, L, L, dk).value().reshaped({N, heads, L, L});
}

template <typename Real>
Var<Real> cross_mhsa(const Var<Real>& x, const Var<Real>& context, std::size_t heads, const AttentionParams<Real>& p) {
    check_attention(x.shape(), heads, p);
    const auto& cs = context.shape();
    const std::size_t N = x.shape()[0], L = x.shape()[1], d = x.shape()[2], dk = d / heads;
    if (cs.size() != 3 || cs[0] != N || cs[2] != d) throw_shape_mismatch("cross attention context", x.shape(), cs);
    const std::size_t Lc = cs[1];
    auto wq = ops::slice(p.qkv_weight, 1, 0, d);
    auto bq = ops::slice(p.qkv_bias, 0, 0, d);
    auto wkv = ops::slice(p.qkv_weight, 1, d, 2 * d);
    auto bkv = ops::slice(p.qkv_bias, 0, d, 2 * d);
    auto q = split_heads(ops::linear(x, wq, bq), N, L, heads, dk);
    auto kv = ops::linear(context, wkv, bkv);
    auto k = split_heads(ops::slice(kv, 2, 0, d), N, Lc, heads, dk);
    auto v = split_heads(ops::slice(kv, 2, d, d), N, Lc, heads, dk);
    auto probs = attention_probs(q, k, Var<Real>(), N, heads, L, Lc, dk);
    auto ctx = merge_heads(ops::bmm(probs, v), N, L, heads, dk);
    return ops::linear(ctx, p.out_weight, p.out_bias);
}

#define TSFLOW_INSTANTIATE_ATTN(R)                                                                                   \
    template Tensor<R> manhattan_bias_spatial(std::size_t, std::size_t);                                            \
    template Tensor<R> manhattan_bias_temporal(std::size_t);                                                        \
    template Tensor<R> downsample_aux(const Tensor<R>&, PatchSize);                                                 \
    template Tensor<R> aux_bias_spatial(const Tensor<R>&);                                                          \
    template Tensor<R> aux_bias_temporal(const Tensor<R>&);                                                         \
    template Var<R> stm_bias(const Var<R>&, const Var<R>&, const Tensor<R>&, const Var<R>&);                        \
    template Var<R> biased_mhsa(const Var<R>&, const Var<R>&, std::size_t, const AttentionParams<R>&);              \
    template Tensor<R> attention_weights(const Tensor<R>&, const Tensor<R>*, std::size_t, const AttentionParams<R>&); \
    template Var<R> cross_mhsa(const Var<R>&, const Var<R>&, std::size_t, const AttentionParams<R>&);

TSFLOW_INSTANTIATE_ATTN(float)
TSFLOW_INSTANTIATE_ATTN(double)

}  // namespace tsflow
