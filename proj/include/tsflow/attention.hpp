#pragma once

#include "tsflow/autograd.hpp"
#include "tsflow/embeddings.hpp"

// Multi-head self-attention with additive logit bias, and the STM bias
// construction (positional Manhattan priors + auxiliary feature differences).
namespace tsflow {

/// M[i, j] = -(|r_i - r_j| + |c_i - c_j|) over a row-major n_h x n_w grid.
template <typename Real>
Tensor<Real> manhattan_bias_spatial(std::size_t n_h, std::size_t n_w);

/// M[i, j] = -|i - j|.
template <typename Real>
Tensor<Real> manhattan_bias_temporal(std::size_t frames);

/// Mean-pools raw auxiliary frames [T, C, H, W] to the token grid [T, C, H/h, W/w].
template <typename Real>
Tensor<Real> downsample_aux(const Tensor<Real>& aux, PatchSize patch);

/// q [T, C, n_h, n_w] -> [T, S, S]: per frame, -mean_c |q_i - q_j| between patches.
template <typename Real>
Tensor<Real> aux_bias_spatial(const Tensor<Real>& q);

/// q [T, C, n_h, n_w] -> [S, T, T]: per location, -mean_c |q(a) - q(b)| between frames.
template <typename Real>
Tensor<Real> aux_bias_temporal(const Tensor<Real>& q);

/// M = w1 * M_pos + w2 * M_aux. w1, w2: [1]; m_pos: [L, L]; m_aux: [N, L, L] or undefined.
/// Returns [N or 1, L, L].
template <typename Real>
Var<Real> stm_bias(const Var<Real>& w1, const Var<Real>& w2, const Tensor<Real>& m_pos, const Var<Real>& m_aux);

template <typename Real>
struct AttentionParams {
    Var<Real> qkv_weight;  // [d, 3d]
    Var<Real> qkv_bias;    // [3d]
    Var<Real> out_weight;  // [d, d]
    Var<Real> out_bias;    // [d]
};

/// Per head: softmax(Q K^T / sqrt(d_k) + M) V, heads concatenated then projected.
/// x: [N, L, d]; bias: [N or 1, L, L] shared across heads, or undefined for none.
template <typename Real>
Var<Real> biased_mhsa(const Var<Real>& x, const Var<Real>& bias, std::size_t heads, const AttentionParams<Real>& p);

/// The attention probabilities [N, heads, L, L] that biased_mhsa would use.
template <typename Real>
Tensor<Real> attention_weights(const Tensor<Real>& x, const Tensor<Real>* bias, std::size_t heads,
                               const AttentionParams<Real>& p);

/// Queries from x [N, L, d], keys/values from context [N, Lc, d]. qkv_weight is [d, 3d]:
/// the first d columns project queries, the rest project the context.
template <typename Real>
Var<Real> cross_mhsa(const Var<Real>& x, const Var<Real>& context, std::size_t heads, const AttentionParams<Real>& p);

}  // namespace tsflow
