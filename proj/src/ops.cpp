#include "tsflow/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

namespace tsflow::ops {

namespace {

template <typename Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using MatMap = Eigen::Map<RowMat<Real>>;
template <typename Real>
using CMatMap = Eigen::Map<const RowMat<Real>>;

// Row-order column sums. Eigen's vectorized reductions peel by address, which
// makes the rounding depend on where the buffer happens to be allocated.
template <typename Real>
void column_sums(const Real* g, std::size_t rows, std::size_t cols, Real* out) {
    std::fill_n(out, cols, Real(0));
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[c] += g[r * cols + c];
}

std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
    std::vector<std::size_t> strides(out.size(), 0);
    std::size_t offset = out.size() - in.size();
    std::size_t s = 1;
    for (std::size_t k = in.size(); k-- > 0;) {
        strides[k + offset] = (in[k] == 1 && out[k + offset] != 1) ? 0 : s;
        s *= in[k];
    }
    return strides;
}

bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

// Calls fn(out_index, a_offset, b_offset) for every output element.
template <typename Fn>
void for_each_broadcast(const Shape& out, const Shape& as, const Shape& bs, Fn&& fn) {
    const std::size_t n = numel(out);
    if (as == out && bs == out) {
        for (std::size_t i = 0; i < n; ++i) fn(i, i, i);
        return;
    }
    if (as == out && is_suffix(bs, out)) {
        const std::size_t nb = numel(bs);
        for (std::size_t i = 0; i < n; ++i) fn(i, i, i % nb);
        return;
    }
    if (bs == out && is_suffix(as, out)) {
        const std::size_t na = numel(as);
        for (std::size_t i = 0; i < n; ++i) fn(i, i % na, i);
        return;
    }
    const auto sa = broadcast_strides(as, out);
    const auto sb = broadcast_strides(bs, out);
    const std::size_t r = out.size();
    std::vector<std::size_t> idx(r, 0);
    std::size_t oa = 0, ob = 0;
    for (std::size_t i = 0; i < n; ++i) {
        fn(i, oa, ob);
        for (std::size_t k = r; k-- > 0;) {
            if (++idx[k] < out[k]) {
                oa += sa[k];
                ob += sb[k];
                break;
            }
            oa -= sa[k] * (out[k] - 1);
            ob -= sb[k] * (out[k] - 1);
            idx[k] = 0;
        }
    }
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
    const std::size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (std::size_t k = 0; k < r; ++k) {
        const std::size_t da = k < r - a.size() ? 1 : a[k - (r - a.size())];
        const std::size_t db = k < r - b.size() ? 1 : b[k - (r - b.size())];
        if (da != db && da != 1 && db != 1) throw_shape_mismatch("broadcast", a, b);
        out[k] = std::max(da, db);
    }
    return out;
}

template <typename Real>
Var<Real> add(const Var<Real>& a, const Var<Real>& b) {
    const Shape out_shape = broadcast_shape(a.shape(), b.shape());
    Tensor<Real> out(out_shape);
    const auto& av = a.value();
    const auto& bv = b.value();
    for_each_broadcast(out_shape, av.shape(), bv.shape(),
                       [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = av[ia] + bv[ib]; });
    auto an = a.node();
    auto bn = b.node();
    return Var<Real>::make(std::move(out), {a, b}, [an, bn, out_shape](const Tensor<Real>& g) {
        const Shape as = an->value.shape(), bs = bn->value.shape();
        if (an->requires_grad) {
            if (as == out_shape) {
                an->accumulate(g);
            } else {
                Tensor<Real> ga(as);
                for_each_broadcast(out_shape, as, bs, [&](std::size_t i, std::size_t ia, std::size_t) { ga[ia] += g[i]; });
                an->accumulate(std::move(ga));
            }
        }
        if (bn->requires_grad) {
            if (bs == out_shape) {
                bn->accumulate(g);
            } else {
                Tensor<Real> gb(bs);
                for_each_broadcast(out_shape, as, bs, [&](std::size_t i, std::size_t, std::size_t ib) { gb[ib] += g[i]; });
                bn->accumulate(std::move(gb));
            }
        }
    });
}

template <typename Real>
Var<Real> sub(const Var<Real>& a, const Var<Real>& b) {
    return add(a, scale(b, Real(-1)));
}

template <typename Real>
Var<Real> mul(const Var<Real>& a, const Var<Real>& b) {
    const Shape out_shape = broadcast_shape(a.shape(), b.shape());
    Tensor<Real> out(out_shape);
    const auto& av = a.value();
    const auto& bv = b.value();
    for_each_broadcast(out_shape, av.shape(), bv.shape(),
                       [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = av[ia] * bv[ib]; });
    auto an = a.node();
    auto bn = b.node();
    return Var<Real>::make(std::move(out), {a, b}, [an, bn, out_shape](const Tensor<Real>& g) {
        const auto& av = an->value;
        const auto& bv = bn->value;
        if (an->requires_grad) {
            Tensor<Real> ga(av.shape());
            for_each_broadcast(out_shape, av.shape(), bv.shape(),
                               [&](std::size_t i, std::size_t ia, std::size_t ib) { ga[ia] += g[i] * bv[ib]; });
            an->accumulate(std::move(ga));
        }
        if (bn->requires_grad) {
            Tensor<Real> gb(bv.shape());
            for_each_broadcast(out_shape, av.shape(), bv.shape(),
                               [&](std::size_t i, std::size_t ia, std::size_t ib) { gb[ib] += g[i] * av[ia]; });
            bn->accumulate(std::move(gb));
        }
    });
}

template <typename Real>
Var<Real> scale(const Var<Real>& a, Real c) {
    Tensor<Real> out = a.value();
    for (auto& v : out.data()) v *= c;
    auto an = a.node();
    return Var<Real>::make(std::move(out), {a}, [an, c](const Tensor<Real>& g) {
        Tensor<Real> ga = g;
        for (auto& v : ga.data()) v *= c;
        an->accumulate(std::move(ga));
    });
}

template <typename Real>
Var<Real> add_scalar(const Var<Real>& a, Real c) {
    Tensor<Real> out = a.value();
    for (auto& v : out.data()) v += c;
    auto an = a.node();
    return Var<Real>::make(std::move(out), {a}, [an](const Tensor<Real>& g) { an->accumulate(g); });
}

template <typename Real>
Var<Real> square(const Var<Real>& a) {
    Tensor<Real> out = a.value();
    for (auto& v : out.data()) v *= v;
    auto an = a.node();
    return Var<Real>::make(std::move(out), {a}, [an](const Tensor<Real>& g) {
        Tensor<Real> ga = g;
        const auto& x = an->value;
        for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] *= Real(2) * x[i];
        an->accumulate(std::move(ga));
    });
}

template <typename Real>
Var<Real> gelu(const Var<Real>& a) {
    constexpr Real k0 = Real(0.7978845608028654);  // sqrt(2/pi)
    constexpr Real k1 = Real(0.044715);
    Tensor<Real> out = a.value();
    for (auto& v : out.data()) {
        const Real x = v;
        v = Real(0.5) * x * (Real(1) + std::tanh(k0 * (x + k1 * x * x * x)));
    }
    auto an = a.node();
    return Var<Real>::make(std::move(out), {a}, [an](const Tensor<Real>& g) {
        Tensor<Real> ga = g;
        const auto& xs = an->value;
        for (std::size_t i = 0; i < ga.numel(); ++i) {
            const Real x = xs[i];
            const Real u = k0 * (x + k1 * x * x * x);
            const Real th = std::tanh(u);
            const Real du = k0 * (Real(1) + Real(3) * k1 * x * x);
            ga[i] *= Real(0.5) * (Real(1) + th) + Real(0.5) * x * (Real(1) - th * th) * du;
        }
        an->accumulate(std::move(ga));
    });
}

template <typename Real>
Var<Real> sum(const Var<Real>& a) {
    Real s = 0;
    for (auto v : a.value().data()) s += v;
    auto an = a.node();
    return Var<Real>::make(Tensor<Real>::scalar(s), {a}, [an](const Tensor<Real>& g) {
        an->accumulate(Tensor<Real>(an->value.shape(), g[0]));
    });
}

template <typename Real>
Var<Real> mean(const Var<Real>& a) {
    return scale(sum(a), Real(1) / static_cast<Real>(a.numel()));
}

template <typename Real>
Var<Real> mse(const Var<Real>& a, const Var<Real>& b) {
    if (a.shape() != b.shape()) throw_shape_mismatch("mse", a.shape(), b.shape());
    return mean(square(sub(a, b)));
}

template <typename Real>
Var<Real> linear(const Var<Real>& x, const Var<Real>& w, const Var<Real>& b) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    if (ws.size() != 2 || xs.empty() || xs.back() != ws[0]) throw_shape_mismatch("linear", xs, ws);
    if (b.defined() && (b.shape().size() != 1 || b.shape()[0] != ws[1])) throw_shape_mismatch("linear bias", ws, b.shape());
    const std::size_t in = ws[0], outd = ws[1];
    const std::size_t rows = x.numel() / in;
    Shape out_shape = xs;
    out_shape.back() = outd;
    Tensor<Real> out(out_shape);
    {
        CMatMap<Real> X(x.value().data().data(), rows, in);
        CMatMap<Real> W(w.value().data().data(), in, outd);
        MatMap<Real> Y(out.data().data(), rows, outd);
        Y.noalias() = X * W;
        if (b.defined()) {
            Eigen::Map<const Eigen::Matrix<Real, 1, Eigen::Dynamic>> B(b.value().data().data(), outd);
            Y.rowwise() += B;
        }
    }
    std::vector<Var<Real>> inputs{x, w};
    if (b.defined()) inputs.push_back(b);
    auto xn = x.node(), wn = w.node();
    auto bn = b.defined() ? b.node() : nullptr;
    return Var<Real>::make(std::move(out), std::move(inputs), [xn, wn, bn, rows, in, outd](const Tensor<Real>& g) {
        CMatMap<Real> G(g.data().data(), rows, outd);
        if (xn->requires_grad) {
            Tensor<Real> gx(xn->value.shape());
            MatMap<Real> GX(gx.data().data(), rows, in);
            CMatMap<Real> W(wn->value.data().data(), in, outd);
            GX.noalias() = G * W.transpose();
            xn->accumulate(std::move(gx));
        }
        if (wn->requires_grad) {
            Tensor<Real> gw(wn->value.shape());
            MatMap<Real> GW(gw.data().data(), in, outd);
            CMatMap<Real> X(xn->value.data().data(), rows, in);
            GW.noalias() = X.transpose() * G;
            wn->accumulate(std::move(gw));
        }
        if (bn && bn->requires_grad) {
            Tensor<Real> gb(bn->value.shape());
            column_sums(g.data().data(), rows, outd, gb.data().data());
            bn->accumulate(std::move(gb));
        }
    });
}

template <typename Real>
Var<Real> bmm(const Var<Real>& a, const Var<Real>& b, bool transpose_b) {
    const auto& as = a.shape();
    const auto& bs = b.shape();
    if (as.size() < 2 || as.size() != bs.size()) throw_shape_mismatch("bmm", as, bs);
    if (!std::equal(as.begin(), as.end() - 2, bs.begin())) throw_shape_mismatch("bmm", as, bs);
    const std::size_t m = as[as.size() - 2], k = as.back();
    const std::size_t bk = transpose_b ? bs.back() : bs[bs.size() - 2];
    const std::size_t n = transpose_b ? bs[bs.size() - 2] : bs.back();
    if (bk != k) throw_shape_mismatch("bmm", as, bs);
    const std::size_t batch = a.numel() / (m * k);
    Shape out_shape(as.begin(), as.end() - 2);
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor<Real> out(out_shape);
    for (std::size_t i = 0; i < batch; ++i) {
        CMatMap<Real> A(a.value().data().data() + i * m * k, m, k);
        MatMap<Real> Y(out.data().data() + i * m * n, m, n);
        if (transpose_b) {
            CMatMap<Real> B(b.value().data().data() + i * n * k, n, k);
            Y.noalias() = A * B.transpose();
        } else {
            CMatMap<Real> B(b.value().data().data() + i * k * n, k, n);
            Y.noalias() = A * B;
        }
    }
    auto an = a.node(), bn = b.node();
    return Var<Real>::make(std::move(out), {a, b}, [an, bn, batch, m, k, n, transpose_b](const Tensor<Real>& g) {
        Tensor<Real> ga, gb;
        if (an->requires_grad) ga = Tensor<Real>(an->value.shape());
        if (bn->requires_grad) gb = Tensor<Real>(bn->value.shape());
        for (std::size_t i = 0; i < batch; ++i) {
            CMatMap<Real> G(g.data().data() + i * m * n, m, n);
            CMatMap<Real> A(an->value.data().data() + i * m * k, m, k);
            if (transpose_b) {
                CMatMap<Real> B(bn->value.data().data() + i * n * k, n, k);
                if (!ga.empty()) MatMap<Real>(ga.data().data() + i * m * k, m, k).noalias() = G * B;
                if (!gb.empty()) MatMap<Real>(gb.data().data() + i * n * k, n, k).noalias() = G.transpose() * A;
            } else {
                CMatMap<Real> B(bn->value.data().data() + i * k * n, k, n);
                if (!ga.empty()) MatMap<Real>(ga.data().data() + i * m * k, m, k).noalias() = G * B.transpose();
                if (!gb.empty()) MatMap<Real>(gb.data().data() + i * k * n, k, n).noalias() = A.transpose() * G;
            }
        }
        if (!ga.empty()) an->accumulate(std::move(ga));
        if (!gb.empty()) bn->accumulate(std::move(gb));
    });
}

template <typename Real>
Var<Real> softmax(const Var<Real>& a) {
    const std::size_t n = a.shape().back();
    const std::size_t rows = a.numel() / n;
    Tensor<Real> out = a.value();
    for (std::size_t r = 0; r < rows; ++r) {
        Real* row = out.data().data() + r * n;
        const Real mx = *std::max_element(row, row + n);
        Real s = 0;
        for (std::size_t j = 0; j < n; ++j) {
            row[j] = std::exp(row[j] - mx);
            s += row[j];
        }
        for (std::size_t j = 0; j < n; ++j) row[j] /= s;
    }
    auto an = a.node();
    auto y = std::make_shared<Tensor<Real>>(out);
    return Var<Real>::make(std::move(out), {a}, [an, y, n, rows](const Tensor<Real>& g) {
        Tensor<Real> ga(an->value.shape());
        for (std::size_t r = 0; r < rows; ++r) {
            const Real* yr = y->data().data() + r * n;
            const Real* gr = g.data().data() + r * n;
            Real dot = 0;
            for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
            Real* out = ga.data().data() + r * n;
            for (std::size_t j = 0; j < n; ++j) out[j] = yr[j] * (gr[j] - dot);
        }
        an->accumulate(std::move(ga));
    });
}

namespace {

// Normalizes each group of indices independently; groups are described by a
// callback that enumerates flat indices. Shared by layer_norm and group_norm.
template <typename Real, typename IndexFn>
Var<Real> normalize_groups(const Var<Real>& a, std::size_t num_groups, std::size_t group_size, Real eps, IndexFn index) {
    Tensor<Real> out(a.shape());
    auto inv_std = std::make_shared<std::vector<Real>>(num_groups);
    const auto& x = a.value();
    for (std::size_t gi = 0; gi < num_groups; ++gi) {
        Real mu = 0;
        for (std::size_t j = 0; j < group_size; ++j) mu += x[index(gi, j)];
        mu /= static_cast<Real>(group_size);
        Real var = 0;
        for (std::size_t j = 0; j < group_size; ++j) {
            const Real d = x[index(gi, j)] - mu;
            var += d * d;
        }
        var /= static_cast<Real>(group_size);
        const Real is = Real(1) / std::sqrt(var + eps);
        (*inv_std)[gi] = is;
        for (std::size_t j = 0; j < group_size; ++j) {
            const std::size_t f = index(gi, j);
            out[f] = (x[f] - mu) * is;
        }
    }
    auto y = std::make_shared<Tensor<Real>>(out);
    auto an = a.node();
    return Var<Real>::make(std::move(out), {a}, [an, y, inv_std, num_groups, group_size, index](const Tensor<Real>& g) {
        Tensor<Real> ga(an->value.shape());
        const Real inv_n = Real(1) / static_cast<Real>(group_size);
        for (std::size_t gi = 0; gi < num_groups; ++gi) {
            Real mg = 0, mgy = 0;
            for (std::size_t j = 0; j < group_size; ++j) {
                const std::size_t f = index(gi, j);
                mg += g[f];
                mgy += g[f] * (*y)[f];
            }
            mg *= inv_n;
            mgy *= inv_n;
            const Real is = (*inv_std)[gi];
            for (std::size_t j = 0; j < group_size; ++j) {
                const std::size_t f = index(gi, j);
                ga[f] = is * (g[f] - mg - (*y)[f] * mgy);
            }
        }
        an->accumulate(std::move(ga));
    });
}

}  // namespace

template <typename Real>
Var<Real> layer_norm(const Var<Real>& a, Real eps) {
    const std::size_t n = a.shape().back();
    return normalize_groups(a, a.numel() / n, n, eps, [n](std::size_t g, std::size_t j) { return g * n + j; });
}

template <typename Real>
Var<Real> group_norm(const Var<Real>& x, std::size_t groups, Real eps) {
    const auto& s = x.shape();
    if (s.size() != 3) throw ShapeError("group_norm expects [N, L, C], got " + shape_str(s));
    const std::size_t N = s[0], L = s[1], C = s[2];
    if (groups == 0 || C % groups != 0)
        throw ShapeError("group_norm: channels " + std::to_string(C) + " not divisible by groups " + std::to_string(groups));
    const std::size_t cg = C / groups;
    return normalize_groups(x, N * groups, L * cg, eps, [L, C, cg, groups](std::size_t g, std::size_t j) {
        const std::size_t n = g / groups, grp = g % groups;
        const std::size_t l = j / cg, c = j % cg;
        return (n * L + l) * C + grp * cg + c;
    });
}

template <typename Real>
Var<Real> reshape(const Var<Real>& a, Shape shape) {
    Tensor<Real> out = a.value().reshaped(std::move(shape));
    auto an = a.node();
    return Var<Real>::make(std::move(out), {a}, [an](const Tensor<Real>& g) {
        an->accumulate(g.reshaped(an->value.shape()));
    });
}

namespace {

// out[i] = in[src(i)] for the permutation; returns source offset per output element.
std::vector<std::size_t> permutation_map(const Shape& in, const std::vector<std::size_t>& perm) {
    const std::size_t r = in.size();
    if (perm.size() != r) throw ShapeError("permute: permutation rank mismatch for shape " + shape_str(in));
    std::vector<bool> used(r, false);
    for (auto p : perm) {
        if (p >= r || used[p]) throw ShapeError("permute: invalid permutation");
        used[p] = true;
    }
    std::vector<std::size_t> in_strides(r, 1);
    for (std::size_t k = r; k-- > 1;) in_strides[k - 1] = in_strides[k] * in[k];
    Shape out(r);
    std::vector<std::size_t> st(r);
    for (std::size_t k = 0; k < r; ++k) {
        out[k] = in[perm[k]];
        st[k] = in_strides[perm[k]];
    }
    const std::size_t n = numel(in);
    std::vector<std::size_t> map(n);
    std::vector<std::size_t> idx(r, 0);
    std::size_t off = 0;
    for (std::size_t i = 0; i < n; ++i) {
        map[i] = off;
        for (std::size_t k = r; k-- > 0;) {
            if (++idx[k] < out[k]) {
                off += st[k];
                break;
            }
            off -= st[k] * (out[k] - 1);
            idx[k] = 0;
        }
    }
    return map;
}

}  // namespace

template <typename Real>
Tensor<Real> permute_tensor(const Tensor<Real>& a, const std::vector<std::size_t>& perm) {
    const auto map = permutation_map(a.shape(), perm);
    Shape out_shape(perm.size());
    for (std::size_t k = 0; k < perm.size(); ++k) out_shape[k] = a.shape()[perm[k]];
    Tensor<Real> out(out_shape);
    for (std::size_t i = 0; i < map.size(); ++i) out[i] = a[map[i]];
    return out;
}

template <typename Real>
Var<Real> permute(const Var<Real>& a, const std::vector<std::size_t>& perm) {
    auto map = std::make_shared<std::vector<std::size_t>>(permutation_map(a.shape(), perm));
    Shape out_shape(perm.size());
    for (std::size_t k = 0; k < perm.size(); ++k) out_shape[k] = a.shape()[perm[k]];
    Tensor<Real> out(out_shape);
    const auto& av = a.value();
    for (std::size_t i = 0; i < map->size(); ++i) out[i] = av[(*map)[i]];
    auto an = a.node();
    return Var<Real>::make(std::move(out), {a}, [an, map](const Tensor<Real>& g) {
        Tensor<Real> ga(an->value.shape());
        for (std::size_t i = 0; i < map->size(); ++i) ga[(*map)[i]] = g[i];
        an->accumulate(std::move(ga));
    });
}

template <typename Real>
Var<Real> concat(const std::vector<Var<Real>>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size()) throw ShapeError("concat axis out of range for " + shape_str(s0));
    Shape out_shape = s0;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        const auto& s = p.shape();
        if (s.size() != s0.size()) throw_shape_mismatch("concat", s0, s);
        for (std::size_t k = 0; k < s.size(); ++k)
            if (k != axis && s[k] != s0[k]) throw_shape_mismatch("concat", s0, s);
        out_shape[axis] += s[axis];
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t k = 0; k < axis; ++k) outer *= s0[k];
    for (std::size_t k = axis + 1; k < s0.size(); ++k) inner *= s0[k];
    const std::size_t out_row = out_shape[axis] * inner;
    Tensor<Real> out(out_shape);
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        const std::size_t chunk = p.shape()[axis] * inner;
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(p.value().data().data() + o * chunk, chunk, out.data().data() + o * out_row + off);
        off += chunk;
    }
    std::vector<std::shared_ptr<Node<Real>>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    return Var<Real>::make(std::move(out), parts, [nodes, offsets, outer, inner, out_row, axis](const Tensor<Real>& g) {
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            if (!nodes[i]->requires_grad) continue;
            Tensor<Real> gp(nodes[i]->value.shape());
            const std::size_t chunk = gp.shape()[axis] * inner;
            for (std::size_t o = 0; o < outer; ++o)
                std::copy_n(g.data().data() + o * out_row + offsets[i], chunk, gp.data().data() + o * chunk);
            nodes[i]->accumulate(std::move(gp));
        }
    });
}

template <typename Real>
Var<Real> slice(const Var<Real>& a, std::size_t axis, std::size_t start, std::size_t len) {
    const Shape& s = a.shape();
    if (axis >= s.size() || len == 0 || start + len > s[axis])
        throw ShapeError("slice [" + std::to_string(start) + ", +" + std::to_string(len) + ") on axis " +
                         std::to_string(axis) + " out of range for " + shape_str(s));
    std::size_t outer = 1, inner = 1;
    for (std::size_t k = 0; k < axis; ++k) outer *= s[k];
    for (std::size_t k = axis + 1; k < s.size(); ++k) inner *= s[k];
    Shape out_shape = s;
    out_shape[axis] = len;
    Tensor<Real> out(out_shape);
    const std::size_t in_row = s[axis] * inner, chunk = len * inner, off = start * inner;
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(a.value().data().data() + o * in_row + off, chunk, out.data().data() + o * chunk);
    auto an = a.node();
    return Var<Real>::make(std::move(out), {a}, [an, outer, in_row, chunk, off](const Tensor<Real>& g) {
        Tensor<Real> ga(an->value.shape());
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(g.data().data() + o * chunk, chunk, ga.data().data() + o * in_row + off);
        an->accumulate(std::move(ga));
    });
}

template <typename Real>
Var<Real> conv2d_same(const Var<Real>& x, const Var<Real>& w, const Var<Real>& b) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    if (xs.size() != 4 || ws.size() != 4 || ws[0] != ws[1] || ws[2] != xs[3]) throw_shape_mismatch("conv2d", xs, ws);
    const std::size_t K = ws[0];
    if (K % 2 == 0) throw ShapeError("conv2d: kernel size must be odd for same padding");
    if (b.defined() && (b.shape().size() != 1 || b.shape()[0] != ws[3])) throw_shape_mismatch("conv2d bias", ws, b.shape());
    const std::size_t N = xs[0], H = xs[1], W = xs[2], Ci = xs[3], Co = ws[3];
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(K / 2);
    const std::size_t cols = K * K * Ci;
    const std::size_t rows = N * H * W;
    // im2col; zero entries realize the padding.
    auto col = std::make_shared<Tensor<Real>>(Shape{rows, cols});
    const auto& xv = x.value();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t xx = 0; xx < W; ++xx) {
                Real* dst = col->data().data() + ((n * H + y) * W + xx) * cols;
                for (std::size_t ky = 0; ky < K; ++ky) {
                    const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + static_cast<std::ptrdiff_t>(ky) - pad;
                    if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
                    for (std::size_t kx = 0; kx < K; ++kx) {
                        const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx) + static_cast<std::ptrdiff_t>(kx) - pad;
                        if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(W)) continue;
                        const Real* src = xv.data().data() + ((n * H + sy) * W + sx) * Ci;
                        std::copy_n(src, Ci, dst + (ky * K + kx) * Ci);
                    }
                }
            }
    Tensor<Real> out(Shape{N, H, W, Co});
    {
        CMatMap<Real> Cm(col->data().data(), rows, cols);
        CMatMap<Real> Wm(w.value().data().data(), cols, Co);
        MatMap<Real> Y(out.data().data(), rows, Co);
        Y.noalias() = Cm * Wm;
        if (b.defined()) Y.rowwise() += Eigen::Map<const Eigen::Matrix<Real, 1, Eigen::Dynamic>>(b.value().data().data(), Co);
    }
    std::vector<Var<Real>> inputs{x, w};
    if (b.defined()) inputs.push_back(b);
    auto xn = x.node(), wn = w.node();
    auto bn = b.defined() ? b.node() : nullptr;
    return Var<Real>::make(std::move(out), std::move(inputs),
                           [xn, wn, bn, col, N, H, W, Ci, Co, K, pad, rows, cols](const Tensor<Real>& g) {
        CMatMap<Real> G(g.data().data(), rows, Co);
        if (wn->requires_grad) {
            Tensor<Real> gw(wn->value.shape());
            MatMap<Real>(gw.data().data(), cols, Co).noalias() = CMatMap<Real>(col->data().data(), rows, cols).transpose() * G;
            wn->accumulate(std::move(gw));
        }
        if (bn && bn->requires_grad) {
            Tensor<Real> gb(bn->value.shape());
            column_sums(g.data().data(), rows, Co, gb.data().data());
            bn->accumulate(std::move(gb));
        }
        if (xn->requires_grad) {
            RowMat<Real> dcol = G * CMatMap<Real>(wn->value.data().data(), cols, Co).transpose();
            Tensor<Real> gx(xn->value.shape());
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t y = 0; y < H; ++y)
                    for (std::size_t xx = 0; xx < W; ++xx) {
                        const Real* src = dcol.data() + ((n * H + y) * W + xx) * cols;
                        for (std::size_t ky = 0; ky < K; ++ky) {
                            const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + static_cast<std::ptrdiff_t>(ky) - pad;
                            if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
                            for (std::size_t kx = 0; kx < K; ++kx) {
                                const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx) + static_cast<std::ptrdiff_t>(kx) - pad;
                                if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(W)) continue;
                                Real* dst = gx.data().data() + ((n * H + sy) * W + sx) * Ci;
                                const Real* s = src + (ky * K + kx) * Ci;
                                for (std::size_t c = 0; c < Ci; ++c) dst[c] += s[c];
                            }
                        }
                    }
            xn->accumulate(std::move(gx));
        }
    });
}

template <typename Real>
Var<Real> conv1d_same(const Var<Real>& x, const Var<Real>& w, const Var<Real>& b) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    if (xs.size() != 3 || ws.size() != 3 || ws[1] != xs[2]) throw_shape_mismatch("conv1d", xs, ws);
    const std::size_t N = xs[0], L = xs[1], Ci = xs[2], K = ws[0], Co = ws[2];
    if (K % 2 == 0) throw ShapeError("conv1d: kernel size must be odd for same padding");
    if (b.defined() && (b.shape().size() != 1 || b.shape()[0] != Co)) throw_shape_mismatch("conv1d bias", ws, b.shape());
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(K / 2);
    const std::size_t cols = K * Ci, rows = N * L;
    auto col = std::make_shared<Tensor<Real>>(Shape{rows, cols});
    const auto& xv = x.value();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t l = 0; l < L; ++l) {
            Real* dst = col->data().data() + (n * L + l) * cols;
            for (std::size_t k = 0; k < K; ++k) {
                const std::ptrdiff_t sl = static_cast<std::ptrdiff_t>(l) + static_cast<std::ptrdiff_t>(k) - pad;
                if (sl < 0 || sl >= static_cast<std::ptrdiff_t>(L)) continue;
                std::copy_n(xv.data().data() + (n * L + sl) * Ci, Ci, dst + k * Ci);
            }
        }
    Tensor<Real> out(Shape{N, L, Co});
    {
        MatMap<Real> Y(out.data().data(), rows, Co);
        Y.noalias() = CMatMap<Real>(col->data().data(), rows, cols) * CMatMap<Real>(w.value().data().data(), cols, Co);
        if (b.defined()) Y.rowwise() += Eigen::Map<const Eigen::Matrix<Real, 1, Eigen::Dynamic>>(b.value().data().data(), Co);
    }
    std::vector<Var<Real>> inputs{x, w};
    if (b.defined()) inputs.push_back(b);
    auto xn = x.node(), wn = w.node();
    auto bn = b.defined() ? b.node() : nullptr;
    return Var<Real>::make(std::move(out), std::move(inputs),
                           [xn, wn, bn, col, N, L, Ci, Co, K, pad, rows, cols](const Tensor<Real>& g) {
        CMatMap<Real> G(g.data().data(), rows, Co);
        if (wn->requires_grad) {
            Tensor<Real> gw(wn->value.shape());
            MatMap<Real>(gw.data().data(), cols, Co).noalias() = CMatMap<Real>(col->data().data(), rows, cols).transpose() * G;
            wn->accumulate(std::move(gw));
        }
        if (bn && bn->requires_grad) {
            Tensor<Real> gb(bn->value.shape());
            column_sums(g.data().data(), rows, Co, gb.data().data());
            bn->accumulate(std::move(gb));
        }
        if (xn->requires_grad) {
            RowMat<Real> dcol = G * CMatMap<Real>(wn->value.data().data(), cols, Co).transpose();
            Tensor<Real> gx(xn->value.shape());
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t l = 0; l < L; ++l) {
                    const Real* src = dcol.data() + (n * L + l) * cols;
                    for (std::size_t k = 0; k < K; ++k) {
                        const std::ptrdiff_t sl = static_cast<std::ptrdiff_t>(l) + static_cast<std::ptrdiff_t>(k) - pad;
                        if (sl < 0 || sl >= static_cast<std::ptrdiff_t>(L)) continue;
                        Real* dst = gx.data().data() + (n * L + sl) * Ci;
                        for (std::size_t c = 0; c < Ci; ++c) dst[c] += src[k * Ci + c];
                    }
                }
            xn->accumulate(std::move(gx));
        }
    });
}

template <typename Real>
Tensor<Real> avg_pool2d_tensor(const Tensor<Real>& x, std::size_t k) {
    const auto& s = x.shape();
    if (s.size() != 4 || k == 0 || s[2] % k || s[3] % k)
        throw ShapeError("avg_pool2d: input " + shape_str(s) + " not divisible by kernel " + std::to_string(k));
    const std::size_t N = s[0], C = s[1], H = s[2], W = s[3], h = H / k, w = W / k;
    Tensor<Real> out(Shape{N, C, h, w});
    const Real inv = Real(1) / static_cast<Real>(k * k);
    for (std::size_t nc = 0; nc < N * C; ++nc)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t xx = 0; xx < W; ++xx)
                out[(nc * h + y / k) * w + xx / k] += x[(nc * H + y) * W + xx] * inv;
    return out;
}

template <typename Real>
Var<Real> avg_pool2d(const Var<Real>& x, std::size_t k) {
    Tensor<Real> out = avg_pool2d_tensor(x.value(), k);
    auto xn = x.node();
    return Var<Real>::make(std::move(out), {x}, [xn, k](const Tensor<Real>& g) {
        const auto& s = xn->value.shape();
        const std::size_t N = s[0], C = s[1], H = s[2], W = s[3], h = H / k, w = W / k;
        const Real inv = Real(1) / static_cast<Real>(k * k);
        Tensor<Real> gx(s);
        for (std::size_t nc = 0; nc < N * C; ++nc)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t xx = 0; xx < W; ++xx) gx[(nc * H + y) * W + xx] = g[(nc * h + y / k) * w + xx / k] * inv;
        xn->accumulate(std::move(gx));
    });
}

#define TSFLOW_INSTANTIATE_OPS(R)                                                                    \
    template Var<R> add(const Var<R>&, const Var<R>&);                                               \
    template Var<R> sub(const Var<R>&, const Var<R>&);                                               \
    template Var<R> mul(const Var<R>&, const Var<R>&);                                               \
    template Var<R> scale(const Var<R>&, R);                                                         \
    template Var<R> add_scalar(const Var<R>&, R);                                                    \
    template Var<R> square(const Var<R>&);                                                           \
    template Var<R> gelu(const Var<R>&);                                                             \
    template Var<R> sum(const Var<R>&);                                                              \
    template Var<R> mean(const Var<R>&);                                                             \
    template Var<R> mse(const Var<R>&, const Var<R>&);                                               \
    template Var<R> linear(const Var<R>&, const Var<R>&, const Var<R>&);                             \
    template Var<R> bmm(const Var<R>&, const Var<R>&, bool);                                         \
    template Var<R> softmax(const Var<R>&);                                                          \
    template Var<R> layer_norm(const Var<R>&, R);                                                    \
    template Var<R> group_norm(const Var<R>&, std::size_t, R);                                       \
    template Var<R> reshape(const Var<R>&, Shape);                                                   \
    template Var<R> permute(const Var<R>&, const std::vector<std::size_t>&);                         \
    template Var<R> concat(const std::vector<Var<R>>&, std::size_t);                                 \
    template Var<R> slice(const Var<R>&, std::size_t, std::size_t, std::size_t);                     \
    template Var<R> conv2d_same(const Var<R>&, const Var<R>&, const Var<R>&);                        \
    template Var<R> conv1d_same(const Var<R>&, const Var<R>&, const Var<R>&);                        \
    template Var<R> avg_pool2d(const Var<R>&, std::size_t);                                          \
    template Tensor<R> permute_tensor(const Tensor<R>&, const std::vector<std::size_t>&);            \
    template Tensor<R> avg_pool2d_tensor(const Tensor<R>&, std::size_t);

TSFLOW_INSTANTIATE_OPS(float)
TSFLOW_INSTANTIATE_OPS(double)

}  // namespace tsflow::ops
