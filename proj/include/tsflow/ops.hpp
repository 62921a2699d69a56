#pragma once

#include <vector>

#include "tsflow/autograd.hpp"

// Differentiable array operations. Broadcasting follows numpy rules:
// shapes are right-aligned and a dimension of 1 (or a missing leading
// dimension) stretches to match.
namespace tsflow::ops {

template <typename Real>
Var<Real> constant(Tensor<Real> t) {
    return Var<Real>(std::move(t), false);
}

Shape broadcast_shape(const Shape& a, const Shape& b);

template <typename Real> Var<Real> add(const Var<Real>& a, const Var<Real>& b);
template <typename Real> Var<Real> sub(const Var<Real>& a, const Var<Real>& b);
template <typename Real> Var<Real> mul(const Var<Real>& a, const Var<Real>& b);

template <typename Real> Var<Real> scale(const Var<Real>& a, Real c);
template <typename Real> Var<Real> add_scalar(const Var<Real>& a, Real c);
template <typename Real> Var<Real> square(const Var<Real>& a);
/// tanh approximation
template <typename Real> Var<Real> gelu(const Var<Real>& a);

template <typename Real> Var<Real> sum(const Var<Real>& a);
template <typename Real> Var<Real> mean(const Var<Real>& a);
template <typename Real> Var<Real> mse(const Var<Real>& a, const Var<Real>& b);

/// x[..., in] @ w[in, out] (+ b[out]). Pass an undefined Var to skip the bias.
template <typename Real> Var<Real> linear(const Var<Real>& x, const Var<Real>& w, const Var<Real>& b);

/// Batched matmul over identical leading dims: a[..., m, k] @ b[..., k, n],
/// or a @ b^T with b[..., n, k] when transpose_b is set.
template <typename Real> Var<Real> bmm(const Var<Real>& a, const Var<Real>& b, bool transpose_b = false);

/// Along the last axis.
template <typename Real> Var<Real> softmax(const Var<Real>& a);
/// Along the last axis, no affine.
template <typename Real> Var<Real> layer_norm(const Var<Real>& a, Real eps = Real(1e-6));
/// x[N, L, C]: statistics per (n, group) over L positions and C/groups channels. No affine.
template <typename Real> Var<Real> group_norm(const Var<Real>& x, std::size_t groups, Real eps = Real(1e-5));

template <typename Real> Var<Real> reshape(const Var<Real>& a, Shape shape);
template <typename Real> Var<Real> permute(const Var<Real>& a, const std::vector<std::size_t>& perm);
template <typename Real> Var<Real> concat(const std::vector<Var<Real>>& parts, std::size_t axis);
template <typename Real> Var<Real> slice(const Var<Real>& a, std::size_t axis, std::size_t start, std::size_t len);

/// Channels-last 2D convolution, stride 1, zero "same" padding.
/// x[N, H, W, Cin], w[K, K, Cin, Cout], b[Cout] (optional); K odd.
template <typename Real> Var<Real> conv2d_same(const Var<Real>& x, const Var<Real>& w, const Var<Real>& b);
/// Channels-last 1D convolution. x[N, L, Cin], w[K, Cin, Cout], b[Cout] (optional); K odd.
template <typename Real> Var<Real> conv1d_same(const Var<Real>& x, const Var<Real>& w, const Var<Real>& b);
/// Channels-first mean pooling with kernel = stride = k. x[N, C, H, W].
template <typename Real> Var<Real> avg_pool2d(const Var<Real>& x, std::size_t k);

// Raw-tensor helpers shared with non-differentiable code.
template <typename Real> Tensor<Real> permute_tensor(const Tensor<Real>& a, const std::vector<std::size_t>& perm);
template <typename Real> Tensor<Real> avg_pool2d_tensor(const Tensor<Real>& x, std::size_t k);

}  // namespace tsflow::ops
