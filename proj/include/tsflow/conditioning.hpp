#pragma once

#include <utility>

#include "tsflow/autograd.hpp"

// ACor (adaptive condition injection) and AdaLN modulation. Token tensors are
// channels-last: [N, L, d] where N folds batch with the axis not attended over.
namespace tsflow {

inline constexpr std::size_t kNormGroups = 8;
inline constexpr std::size_t kAcorKernel = 3;

template <typename Real>
struct AcorParams {
    Var<Real> weight;  // spatial: [K, K, d, 2d]; temporal: [K, d, 2d]
    Var<Real> bias;    // [2d]
};

/// h_hat = gamma * GN(h) + beta + h with (gamma, beta) = split(conv2d(q)).
/// h, q: [N, n_h n_w, d] on an n_h x n_w grid.
template <typename Real>
Var<Real> acor_spatial(const Var<Real>& h, const Var<Real>& q, std::size_t n_h, std::size_t n_w, const AcorParams<Real>& p);

/// Same with a 1D convolution along the sequence. h, q: [N, T, d].
template <typename Real>
Var<Real> acor_temporal(const Var<Real>& h, const Var<Real>& q, const AcorParams<Real>& p);

template <typename Real>
struct AdaLnParams {
    Var<Real> weight;  // [d, 3d] -> (gamma, beta, alpha)
    Var<Real> bias;    // [3d]
};

template <typename Real>
struct Modulation {
    Var<Real> modulated;  // gamma * feature + beta, same shape as feature
    Var<Real> gate;       // alpha, broadcastable against feature
};

/// The caller supplies the layer-normalized feature. Accepted layouts:
///   feature [B, M, d]    with z_fm [B, d]     (one code per sample)
///   feature [B, R, L, d] with z_fm [B, d]
///   feature [B, R, L, d] with z_fm [B, L, d]  (one code per sequence position)
template <typename Real>
Modulation<Real> adaln_modulate(const Var<Real>& feature, const Var<Real>& z_fm, const AdaLnParams<Real>& p);

/// Zero weights, gamma bias 1, beta and alpha bias 0.
template <typename Real>
std::pair<Tensor<Real>, Tensor<Real>> adaln_init(std::size_t d, std::size_t chunks = 3);

}  // namespace tsflow
