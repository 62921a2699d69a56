#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "tsflow/autograd.hpp"

namespace tsflow {

/// Patch-token tensor in canonical T x d x n_h x n_w storage.
template <typename Real>
struct TokenGrid {
    Tensor<Real> tokens;

    std::size_t frames() const { return tokens.dim(0); }
    std::size_t width() const { return tokens.dim(1); }
    std::size_t grid_h() const { return tokens.dim(2); }
    std::size_t grid_w() const { return tokens.dim(3); }

    /// T x (n_h n_w) x d
    Tensor<Real> spatial_view() const;
    /// (n_h n_w) x T x d
    Tensor<Real> temporal_view() const;
    static TokenGrid from_spatial_view(const Tensor<Real>& view, std::size_t n_h, std::size_t n_w);
    static TokenGrid from_temporal_view(const Tensor<Real>& view, std::size_t n_h, std::size_t n_w);
};

struct PatchSize {
    std::size_t h = 4;
    std::size_t w = 4;
};

/// frames[N, C, H, W] -> [N, n_h n_w, h*w*C]; each patch vector is laid out (row, col, channel).
template <typename Real>
Var<Real> patchify(const Var<Real>& frames, PatchSize patch);

/// Inverse of patchify: tokens[N, n_h n_w, h*w*C] -> [N, C, n_h h, n_w w].
template <typename Real>
Var<Real> unpatchify(const Var<Real>& tokens, std::size_t n_h, std::size_t n_w, PatchSize patch, std::size_t channels);

/// Linear patch projection. weight[h*w*C, d], bias[d]; returns channels-last tokens [N, n_h n_w, d].
template <typename Real>
Var<Real> patch_embed_tokens(const Var<Real>& frames, PatchSize patch, const Var<Real>& weight, const Var<Real>& bias);

/// Single-sequence form: frames T x C x H x W -> TokenGrid T x d x n_h x n_w.
template <typename Real>
TokenGrid<Real> patch_embed(const Tensor<Real>& frames, PatchSize patch, const Tensor<Real>& weight, const Tensor<Real>& bias);

/// Single-sequence inverse: TokenGrid with h*w*C channels -> T x C x H x W.
template <typename Real>
Tensor<Real> unpatchify(const TokenGrid<Real>& grid, PatchSize patch, std::size_t channels);

/// Row p, channel pair k: angle = pos_p / 10000^(2k/d); channel 2k = sin, 2k+1 = cos.
template <typename Real>
Tensor<Real> sincos_1d(std::span<const double> positions, std::size_t d);
template <typename Real>
Tensor<Real> sincos_1d(std::size_t length, std::size_t d);

/// (n_h n_w) x d, row-major grid order; first d/2 channels encode the row index,
/// last d/2 the column index.
template <typename Real>
Tensor<Real> sincos_2d(std::size_t n_h, std::size_t n_w, std::size_t d);

/// Day-of-year encoding at absolute day positions. Values must lie in [1, 366].
template <typename Real>
Tensor<Real> embed_doy(std::span<const int> doy, std::size_t d);

struct LonLat {
    double lon = 0.0;
    double lat = 0.0;
};

/// Geographic embedding of length d (d % 4 == 0):
///   [0, d/4)      cos of d/4 seeded Gaussian projections of (lon, lat) in radians
///   [d/4, d/2)    sin of the same projections
///   [d/2, 3d/4)   sincos_1d of longitude in degrees
///   [3d/4, d)     sincos_1d of latitude in degrees
template <typename Real>
Tensor<Real> embed_lonlat(LonLat where, std::size_t d, std::uint64_t rff_seed);

/// RFF projection matrix used by embed_lonlat: (d/4) x 2, entries ~ N(0, 1).
Tensor<double> rff_frequencies(std::size_t d, std::uint64_t rff_seed);

/// Geographic embedding with caller-supplied projection matrix (d/4 x 2).
template <typename Real>
Tensor<Real> embed_lonlat_with(LonLat where, std::size_t d, const Tensor<double>& frequencies);

inline constexpr double kFlowTimeScale = 1000.0;
inline constexpr double kConditionTimeOffset = 1.0e6;

template <typename Real>
struct FlowTimeEmbeds {
    Tensor<Real> z_fm;                     // d
    Tensor<Real> z_fm_s;                   // (n_h n_w) x d
    Tensor<Real> z_fm_t;                   // T x d
    std::optional<Tensor<Real>> z_fm_con;  // T_his x d, forecasting only
};

/// sincos at position t * 1000, repeated over the spatial and temporal axes.
template <typename Real>
FlowTimeEmbeds<Real> embed_flow_time(double t, std::size_t d, std::size_t spatial, std::size_t frames,
                                     std::optional<std::size_t> history = std::nullopt);

/// Initial value of the forecasting condition-time code: positions 1e6 + i.
template <typename Real>
Tensor<Real> condition_time_embedding(std::size_t history, std::size_t d);

}  // namespace tsflow
