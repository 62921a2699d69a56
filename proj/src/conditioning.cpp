#include "tsflow/conditioning.hpp"

#include "tsflow/ops.hpp"

namespace tsflow {

namespace {
template <typename Real>
Var<Real> apply_affine(const Var<Real>& h, const Var<Real>& gamma_beta) {
    const std::size_t d = h.shape().back();
    auto gamma = ops::slice(gamma_beta, 2, 0, d);
    auto beta = ops::slice(gamma_beta, 2, d, d);
    auto normed = ops::group_norm(h, kNormGroups);
    return ops::add(ops::add(ops::mul(gamma, normed), beta), h);
}

void check_pair(const Shape& h, const Shape& q) {
    if (h != q) throw_shape_mismatch("acor", h, q);
    if (h.size() != 3) throw ShapeError("acor expects [N, L, d], got " + shape_str(h));
}
}  // namespace

template <typename Real>
Var<Real> acor_spatial(const Var<Real>& h, const Var<Real>& q, std::size_t n_h, std::size_t n_w, const AcorParams<Real>& p) {
    check_pair(h.shape(), q.shape());
    const std::size_t N = h.shape()[0], S = h.shape()[1], d = h.shape()[2];
    if (S != n_h * n_w) throw ShapeError("acor_spatial: " + std::to_string(S) + " tokens do not form the grid");
    auto grid = ops::reshape(q, {N, n_h, n_w, d});
    auto conv = ops::conv2d_same(grid, p.weight, p.bias);
    return apply_affine(h, ops::reshape(conv, {N, S, 2 * d}));
}

template <typename Real>
Var<Real> acor_temporal(const Var<Real>& h, const Var<Real>& q, const AcorParams<Real>& p) {
    check_pair(h.shape(), q.shape());
    return apply_affine(h, ops::conv1d_same(q, p.weight, p.bias));
}

template <typename Real>
Modulation<Real> adaln_modulate(const Var<Real>& feature, const Var<Real>& z_fm, const AdaLnParams<Real>& p) {
    const auto& fs = feature.shape();
    const auto& zs = z_fm.shape();
    const bool rank_ok = fs.size() == 3 || fs.size() == 4;
    if (!rank_ok || zs.empty() || zs[0] != fs[0] || zs.back() != fs.back()) throw_shape_mismatch("adaln_modulate", fs, zs);
    const std::size_t B = fs[0], d = fs.back();
    Shape mod_shape;
    if (zs.size() == 2) {
        mod_shape = fs.size() == 3 ? Shape{B, 1, 3 * d} : Shape{B, 1, 1, 3 * d};
    } else if (zs.size() == 3 && fs.size() == 4 && zs[1] == fs[2]) {
        mod_shape = Shape{B, 1, zs[1], 3 * d};
    } else {
        throw_shape_mismatch("adaln_modulate", fs, zs);
    }
    auto mod = ops::reshape(ops::linear(z_fm, p.weight, p.bias), mod_shape);
    const std::size_t axis = mod_shape.size() - 1;
    auto gamma = ops::slice(mod, axis, 0, d);
    auto beta = ops::slice(mod, axis, d, d);
    auto alpha = ops::slice(mod, axis, 2 * d, d);
    return {ops::add(ops::mul(gamma, feature), beta), alpha};
}

template <typename Real>
std::pair<Tensor<Real>, Tensor<Real>> adaln_init(std::size_t d, std::size_t chunks) {
    Tensor<Real> w(Shape{d, chunks * d});
    Tensor<Real> b(Shape{chunks * d});
    for (std::size_t i = 0; i < d; ++i) b[i] = Real(1);
    return {std::move(w), std::move(b)};
}

#define TSFLOW_INSTANTIATE_COND(R)                                                                                       \
    template Var<R> acor_spatial(const Var<R>&, const Var<R>&, std::size_t, std::size_t, const AcorParams<R>&);         \
    template Var<R> acor_temporal(const Var<R>&, const Var<R>&, const AcorParams<R>&);                                  \
    template Modulation<R> adaln_modulate(const Var<R>&, const Var<R>&, const AdaLnParams<R>&);                         \
    template std::pair<Tensor<R>, Tensor<R>> adaln_init(std::size_t, std::size_t);

TSFLOW_INSTANTIATE_COND(float)
TSFLOW_INSTANTIATE_COND(double)

}  // namespace tsflow
