#include "tsflow/embeddings.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "tsflow/ops.hpp"
#include "tsflow/rng.hpp"

namespace tsflow {

template <typename Real>
Tensor<Real> TokenGrid<Real>::spatial_view() const {
    const Shape& s = tokens.shape();
    return ops::permute_tensor(tokens, {0, 2, 3, 1}).reshaped({s[0], s[2] * s[3], s[1]});
}

template <typename Real>
Tensor<Real> TokenGrid<Real>::temporal_view() const {
    const Shape& s = tokens.shape();
    return ops::permute_tensor(tokens.reshaped({s[0], s[1], s[2] * s[3]}), {2, 0, 1});
}

template <typename Real>
TokenGrid<Real> TokenGrid<Real>::from_spatial_view(const Tensor<Real>& view, std::size_t n_h, std::size_t n_w) {
    const Shape& s = view.shape();
    if (s.size() != 3 || s[1] != n_h * n_w) throw ShapeError("spatial view " + shape_str(s) + " does not match grid");
    return {ops::permute_tensor(view.reshaped({s[0], n_h, n_w, s[2]}), {0, 3, 1, 2})};
}

template <typename Real>
TokenGrid<Real> TokenGrid<Real>::from_temporal_view(const Tensor<Real>& view, std::size_t n_h, std::size_t n_w) {
    const Shape& s = view.shape();
    if (s.size() != 3 || s[0] != n_h * n_w) throw ShapeError("temporal view " + shape_str(s) + " does not match grid");
    return {ops::permute_tensor(view, {1, 2, 0}).reshaped({s[1], s[2], n_h, n_w})};
}

namespace {
void check_patch(const Shape& s, PatchSize patch) {
    if (s.size() != 4) throw ShapeError("expected frames [N, C, H, W], got " + shape_str(s));
    if (patch.h == 0 || patch.w == 0 || s[2] % patch.h != 0 || s[3] % patch.w != 0)
        throw ShapeError("frame size " + std::to_string(s[2]) + "x" + std::to_string(s[3]) +
                         " is not divisible by patch " + std::to_string(patch.h) + "x" + std::to_string(patch.w));
}
}  // namespace

template <typename Real>
Var<Real> patchify(const Var<Real>& frames, PatchSize patch) {
    const Shape s = frames.shape();
    check_patch(s, patch);
    const std::size_t N = s[0], C = s[1], nh = s[2] / patch.h, nw = s[3] / patch.w;
    auto x = ops::reshape(frames, {N, C, nh, patch.h, nw, patch.w});
    x = ops::permute(x, {0, 2, 4, 3, 5, 1});
    return ops::reshape(x, {N, nh * nw, patch.h * patch.w * C});
}

template <typename Real>
Var<Real> unpatchify(const Var<Real>& tokens, std::size_t n_h, std::size_t n_w, PatchSize patch, std::size_t channels) {
    const Shape s = tokens.shape();
    if (s.size() != 3 || s[1] != n_h * n_w || s[2] != patch.h * patch.w * channels)
        throw ShapeError("unpatchify: tokens " + shape_str(s) + " need " + std::to_string(patch.h * patch.w * channels) +
                         " channels (h*w*C) on a " + std::to_string(n_h) + "x" + std::to_string(n_w) + " grid");
    const std::size_t N = s[0];
    auto x = ops::reshape(tokens, {N, n_h, n_w, patch.h, patch.w, channels});
    x = ops::permute(x, {0, 5, 1, 3, 2, 4});
    return ops::reshape(x, {N, channels, n_h * patch.h, n_w * patch.w});
}

template <typename Real>
Var<Real> patch_embed_tokens(const Var<Real>& frames, PatchSize patch, const Var<Real>& weight, const Var<Real>& bias) {
    return ops::linear(patchify(frames, patch), weight, bias);
}

template <typename Real>
TokenGrid<Real> patch_embed(const Tensor<Real>& frames, PatchSize patch, const Tensor<Real>& weight, const Tensor<Real>& bias) {
    check_patch(frames.shape(), patch);
    NoGradGuard guard;
    const std::size_t nh = frames.dim(2) / patch.h, nw = frames.dim(3) / patch.w;
    auto tok = patch_embed_tokens(Var<Real>(frames), patch, Var<Real>(weight), Var<Real>(bias));
    return TokenGrid<Real>::from_spatial_view(tok.value(), nh, nw);
}

template <typename Real>
Tensor<Real> unpatchify(const TokenGrid<Real>& grid, PatchSize patch, std::size_t channels) {
    NoGradGuard guard;
    return unpatchify(Var<Real>(grid.spatial_view()), grid.grid_h(), grid.grid_w(), patch, channels).value();
}

template <typename Real>
Tensor<Real> sincos_1d(std::span<const double> positions, std::size_t d) {
    if (d == 0 || d % 2 != 0) throw std::invalid_argument("sincos_1d: width must be even, got " + std::to_string(d));
    if (positions.empty()) throw std::invalid_argument("sincos_1d: no positions");
    Tensor<Real> out(Shape{positions.size(), d});
    for (std::size_t p = 0; p < positions.size(); ++p)
        for (std::size_t k = 0; k < d / 2; ++k) {
            const double freq = std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(d));
            const double a = positions[p] * freq;
            out[p * d + 2 * k] = static_cast<Real>(std::sin(a));
            out[p * d + 2 * k + 1] = static_cast<Real>(std::cos(a));
        }
    return out;
}

template <typename Real>
Tensor<Real> sincos_1d(std::size_t length, std::size_t d) {
    std::vector<double> pos(length);
    for (std::size_t i = 0; i < length; ++i) pos[i] = static_cast<double>(i);
    return sincos_1d<Real>(pos, d);
}

template <typename Real>
Tensor<Real> sincos_2d(std::size_t n_h, std::size_t n_w, std::size_t d) {
    if (d == 0 || d % 4 != 0) throw std::invalid_argument("sincos_2d: width must be divisible by 4, got " + std::to_string(d));
    const auto rows = sincos_1d<Real>(n_h, d / 2);
    const auto cols = sincos_1d<Real>(n_w, d / 2);
    Tensor<Real> out(Shape{n_h * n_w, d});
    for (std::size_t r = 0; r < n_h; ++r)
        for (std::size_t c = 0; c < n_w; ++c) {
            Real* row = out.data().data() + (r * n_w + c) * d;
            std::copy_n(rows.data().data() + r * (d / 2), d / 2, row);
            std::copy_n(cols.data().data() + c * (d / 2), d / 2, row + d / 2);
        }
    return out;
}

template <typename Real>
Tensor<Real> embed_doy(std::span<const int> doy, std::size_t d) {
    std::vector<double> pos;
    pos.reserve(doy.size());
    for (int v : doy) {
        if (v < 1 || v > 366) throw std::invalid_argument("day of year " + std::to_string(v) + " outside [1, 366]");
        pos.push_back(static_cast<double>(v));
    }
    return sincos_1d<Real>(pos, d);
}

Tensor<double> rff_frequencies(std::size_t d, std::uint64_t rff_seed) {
    if (d == 0 || d % 4 != 0) throw std::invalid_argument("embed_lonlat: width must be divisible by 4");
    Rng rng(rff_seed);
    return rng.normal_tensor<double>({d / 4, 2});
}

template <typename Real>
Tensor<Real> embed_lonlat_with(LonLat where, std::size_t d, const Tensor<double>& freq) {
    if (!(where.lon >= -180.0 && where.lon <= 180.0) || !(where.lat >= -90.0 && where.lat <= 90.0))
        throw std::invalid_argument("coordinates (" + std::to_string(where.lon) + ", " + std::to_string(where.lat) +
                                    ") outside lon [-180, 180], lat [-90, 90]");
    if (d == 0 || d % 4 != 0) throw std::invalid_argument("embed_lonlat: width must be divisible by 4");
    const std::size_t q = d / 4;
    if (freq.shape() != Shape{q, 2}) throw_shape_mismatch("embed_lonlat frequencies", Shape{q, 2}, freq.shape());
    constexpr double deg = std::numbers::pi / 180.0;
    const double lon = where.lon * deg, lat = where.lat * deg;
    Tensor<Real> out(Shape{d});
    for (std::size_t j = 0; j < q; ++j) {
        const double proj = freq[2 * j] * lon + freq[2 * j + 1] * lat;
        out[j] = static_cast<Real>(std::cos(proj));
        out[q + j] = static_cast<Real>(std::sin(proj));
    }
    const double lon_pos[1] = {where.lon};
    const double lat_pos[1] = {where.lat};
    const auto e_lon = sincos_1d<Real>(lon_pos, q);
    const auto e_lat = sincos_1d<Real>(lat_pos, q);
    std::copy_n(e_lon.data().data(), q, out.data().data() + 2 * q);
    std::copy_n(e_lat.data().data(), q, out.data().data() + 3 * q);
    return out;
}

template <typename Real>
Tensor<Real> embed_lonlat(LonLat where, std::size_t d, std::uint64_t rff_seed) {
    return embed_lonlat_with<Real>(where, d, rff_frequencies(d, rff_seed));
}

template <typename Real>
Tensor<Real> condition_time_embedding(std::size_t history, std::size_t d) {
    std::vector<double> pos(history);
    for (std::size_t i = 0; i < history; ++i) pos[i] = kConditionTimeOffset + static_cast<double>(i);
    return sincos_1d<Real>(pos, d);
}

template <typename Real>
FlowTimeEmbeds<Real> embed_flow_time(double t, std::size_t d, std::size_t spatial, std::size_t frames,
                                     std::optional<std::size_t> history) {
    if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("flow time " + std::to_string(t) + " outside [0, 1]");
    const double pos[1] = {t * kFlowTimeScale};
    FlowTimeEmbeds<Real> e;
    e.z_fm = sincos_1d<Real>(pos, d).reshaped({d});
    e.z_fm_s = Tensor<Real>(Shape{spatial, d});
    e.z_fm_t = Tensor<Real>(Shape{frames, d});
    for (std::size_t i = 0; i < spatial; ++i) std::copy_n(e.z_fm.data().data(), d, e.z_fm_s.data().data() + i * d);
    for (std::size_t i = 0; i < frames; ++i) std::copy_n(e.z_fm.data().data(), d, e.z_fm_t.data().data() + i * d);
    if (history) e.z_fm_con = condition_time_embedding<Real>(*history, d);
    return e;
}

#define TSFLOW_INSTANTIATE_EMB(R)                                                                             \
    template struct TokenGrid<R>;                                                                             \
    template Var<R> patchify(const Var<R>&, PatchSize);                                                       \
    template Var<R> unpatchify(const Var<R>&, std::size_t, std::size_t, PatchSize, std::size_t);              \
    template Var<R> patch_embed_tokens(const Var<R>&, PatchSize, const Var<R>&, const Var<R>&);               \
    template TokenGrid<R> patch_embed(const Tensor<R>&, PatchSize, const Tensor<R>&, const Tensor<R>&);       \
    template Tensor<R> unpatchify(const TokenGrid<R>&, PatchSize, std::size_t);                               \
    template Tensor<R> sincos_1d(std::span<const double>, std::size_t);                                       \
    template Tensor<R> sincos_1d(std::size_t, std::size_t);                                                   \
    template Tensor<R> sincos_2d(std::size_t, std::size_t, std::size_t);                                      \
    template Tensor<R> embed_doy(std::span<const int>, std::size_t);                                          \
    template Tensor<R> embed_lonlat(LonLat, std::size_t, std::uint64_t);                                      \
    template Tensor<R> embed_lonlat_with(LonLat, std::size_t, const Tensor<double>&);                         \
    template Tensor<R> condition_time_embedding(std::size_t, std::size_t);                                    \
    template FlowTimeEmbeds<R> embed_flow_time(double, std::size_t, std::size_t, std::size_t, std::optional<std::size_t>);

TSFLOW_INSTANTIATE_EMB(float)
TSFLOW_INSTANTIATE_EMB(double)

}  // namespace tsflow
