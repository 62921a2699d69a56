#include "tsflow/flow_matching.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "tsflow/ops.hpp"

namespace tsflow {

template <typename Real>
Tensor<Real> interpolate(const Tensor<Real>& x0, const Tensor<Real>& x1, double t) {
    if (x0.shape() != x1.shape()) throw_shape_mismatch("interpolate", x0.shape(), x1.shape());
    if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("flow time " + std::to_string(t) + " outside [0, 1]");
    Tensor<Real> out(x0.shape());
    const Real a = static_cast<Real>(1.0 - t), b = static_cast<Real>(t);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a * x0[i] + b * x1[i];
    return out;
}

template <typename Real>
Tensor<Real> velocity_target(const Tensor<Real>& x0, const Tensor<Real>& x1) {
    if (x0.shape() != x1.shape()) throw_shape_mismatch("velocity_target", x0.shape(), x1.shape());
    Tensor<Real> out(x0.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x1[i] - x0[i];
    return out;
}

std::string to_string(SolverMethod m) {
    switch (m) {
        case SolverMethod::euler: return "euler";
        case SolverMethod::rk4: return "rk4";
        case SolverMethod::dopri5: return "dopri5";
    }
    return "?";
}

SolverMethod solver_from_string(const std::string& s) {
    if (s == "euler") return SolverMethod::euler;
    if (s == "rk4") return SolverMethod::rk4;
    if (s == "dopri5") return SolverMethod::dopri5;
    throw std::invalid_argument("unknown solver '" + s + "' (expected euler|rk4|dopri5)");
}

void SolverConfig::validate() const {
    if (steps < 1) throw std::invalid_argument("solver steps must be >= 1");
    if (!(rtol > 0.0) || !(atol > 0.0)) throw std::invalid_argument("solver tolerances must be > 0");
    if (adaptive && method != SolverMethod::dopri5) throw std::invalid_argument("adaptive stepping needs dopri5");
    if (!(initial_step > 0.0)) throw std::invalid_argument("initial step must be > 0");
}

namespace {

// y + sum_i c_i k_i
template <typename Real>
Tensor<Real> combine(const Tensor<Real>& y, double h, std::initializer_list<std::pair<double, const Tensor<Real>*>> terms) {
    Tensor<Real> out = y;
    for (const auto& [c, k] : terms) {
        if (c == 0.0) continue;
        const Real s = static_cast<Real>(h * c);
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] += s * (*k)[i];
    }
    return out;
}

// Dormand-Prince 5(4) tableau.
constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
constexpr double a21 = 1.0 / 5;
constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176, a65 = -5103.0 / 18656;
constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784, b6 = 11.0 / 84;
constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200, e6 = 22.0 / 525,
                 e7 = -1.0 / 40;

template <typename Real>
struct DopriStep {
    Tensor<Real> y;
    Tensor<Real> k7;  // f(t + h, y), reused as k1 of the next step
    double err = 0.0;
};

template <typename Real>
DopriStep<Real> dopri_step(const VelocityField<Real>& f, const Tensor<Real>& y, const Tensor<Real>& k1, double t, double h,
                           const SolverConfig& cfg, SolveStats& st) {
    auto k2 = f(combine(y, h, {{a21, &k1}}), t + c2 * h);
    auto k3 = f(combine(y, h, {{a31, &k1}, {a32, &k2}}), t + c3 * h);
    auto k4 = f(combine(y, h, {{a41, &k1}, {a42, &k2}, {a43, &k3}}), t + c4 * h);
    auto k5 = f(combine(y, h, {{a51, &k1}, {a52, &k2}, {a53, &k3}, {a54, &k4}}), t + c5 * h);
    auto k6 = f(combine(y, h, {{a61, &k1}, {a62, &k2}, {a63, &k3}, {a64, &k4}, {a65, &k5}}), std::min(t + h, 1.0));
    DopriStep<Real> s;
    s.y = combine(y, h, {{b1, &k1}, {b3, &k3}, {b4, &k4}, {b5, &k5}, {b6, &k6}});
    s.k7 = f(s.y, std::min(t + h, 1.0));
    st.evaluations += 6;
    if (cfg.adaptive) {
        double acc = 0.0;
        for (std::size_t i = 0; i < y.numel(); ++i) {
            const double e = h * (e1 * k1[i] + e3 * k3[i] + e4 * k4[i] + e5 * k5[i] + e6 * k6[i] + e7 * s.k7[i]);
            const double scale = cfg.atol + cfg.rtol * std::max(std::abs(double(y[i])), std::abs(double(s.y[i])));
            acc += (e / scale) * (e / scale);
        }
        s.err = std::sqrt(acc / static_cast<double>(std::max<std::size_t>(1, y.numel())));
    }
    return s;
}

}  // namespace

template <typename Real>
Tensor<Real> integrate(const VelocityField<Real>& f, Tensor<Real> x, const SolverConfig& cfg, SolveStats* stats) {
    cfg.validate();
    SolveStats st;
    if (cfg.method == SolverMethod::euler || cfg.method == SolverMethod::rk4 ||
        (cfg.method == SolverMethod::dopri5 && !cfg.adaptive)) {
        const double h = 1.0 / static_cast<double>(cfg.steps);
        Tensor<Real> k1;
        for (std::size_t n = 0; n < cfg.steps; ++n) {
            const double t = static_cast<double>(n) * h;
            const double t_next = n + 1 == cfg.steps ? 1.0 : static_cast<double>(n + 1) * h;
            if (cfg.method == SolverMethod::euler) {
                auto k = f(x, t);
                x = combine(x, h, {{1.0, &k}});
                st.evaluations += 1;
            } else if (cfg.method == SolverMethod::rk4) {
                auto q1 = f(x, t);
                auto q2 = f(combine(x, h, {{0.5, &q1}}), t + 0.5 * h);
                auto q3 = f(combine(x, h, {{0.5, &q2}}), t + 0.5 * h);
                auto q4 = f(combine(x, h, {{1.0, &q3}}), t_next);
                x = combine(x, h, {{1.0 / 6, &q1}, {2.0 / 6, &q2}, {2.0 / 6, &q3}, {1.0 / 6, &q4}});
                st.evaluations += 4;
            } else {
                if (n == 0) {
                    k1 = f(x, 0.0);
                    st.evaluations += 1;
                }
                auto s = dopri_step(f, x, k1, t, h, cfg, st);
                x = std::move(s.y);
                k1 = std::move(s.k7);
            }
            ++st.accepted;
        }
        if (stats) *stats = st;
        return x;
    }

    // Adaptive Dormand-Prince with FSAL and a standard I-controller.
    double t = 0.0;
    double h = std::min(cfg.initial_step, 1.0);
    auto k1 = f(x, 0.0);
    st.evaluations = 1;
    while (t < 1.0) {
        if (st.accepted + st.rejected >= cfg.max_steps) {
            std::ostringstream msg;
            msg << "adaptive solver exceeded " << cfg.max_steps << " steps (t=" << t << ", h=" << h
                << ", accepted=" << st.accepted << ", rejected=" << st.rejected << ", rtol=" << cfg.rtol
                << ", atol=" << cfg.atol << ")";
            throw SolverError(msg.str());
        }
        h = std::min(h, 1.0 - t);
        auto s = dopri_step(f, x, k1, t, h, cfg, st);
        if (!std::isfinite(s.err)) {
            ++st.rejected;
            h *= 0.2;
            continue;
        }
        const double factor = s.err == 0.0 ? 10.0 : std::clamp(0.9 * std::pow(s.err, -0.2), 0.2, 10.0);
        if (s.err <= 1.0) {
            t = (1.0 - t - h) <= 1e-12 ? 1.0 : t + h;
            x = std::move(s.y);
            k1 = std::move(s.k7);
            ++st.accepted;
        } else {
            ++st.rejected;
        }
        h *= factor;
    }
    if (stats) *stats = st;
    return x;
}

template <typename Real>
VelocityField<Real> model_field(const FlowTransformer<Real>& model, const typename FlowTransformer<Real>::Context& ctx) {
    return [&model, &ctx](const Tensor<Real>& x, double t) {
        NoGradGuard guard;
        const std::vector<double> ts(ctx.batch, std::clamp(t, 0.0, 1.0));
        auto out = model.forward(ctx, Var<Real>(x), ts).value();
        const auto& cfg = model.config();
        if (!cfg.forecast) return out;
        return ops::slice(Var<Real>(out), 1, cfg.history, cfg.frames).value();
    };
}

template <typename Real>
Tensor<Real> fm_target(const ModelConfig& cfg, const Tensor<Real>& x0, const Tensor<Real>& x1, const Tensor<Real>& history) {
    auto v = velocity_target(x0, x1);
    if (!cfg.forecast) return v;
    if (history.rank() != 5 || history.dim(1) != cfg.history)
        throw_shape_mismatch("forecast history", Shape{x0.dim(0), cfg.history, cfg.channels, cfg.image_h, cfg.image_w},
                             history.shape());
    return ops::concat<Real>({Var<Real>(history), Var<Real>(v)}, 1).value();
}

template <typename Real>
Var<Real> fm_loss(const FlowTransformer<Real>& model, const typename FlowTransformer<Real>::Context& ctx,
                  const Tensor<Real>& x0, const Tensor<Real>& x1, const Tensor<Real>& history, Rng& rng, std::size_t step,
                  std::vector<double>* t_out) {
    if (x0.shape() != x1.shape()) throw_shape_mismatch("fm_loss", x0.shape(), x1.shape());
    const std::size_t B = x0.dim(0);
    const std::size_t per = x0.numel() / B;
    std::vector<double> t(B);
    for (auto& v : t) v = rng.uniform();
    Tensor<Real> xt(x0.shape());
    for (std::size_t b = 0; b < B; ++b) {
        const Real a = static_cast<Real>(1.0 - t[b]), c = static_cast<Real>(t[b]);
        for (std::size_t i = b * per; i < (b + 1) * per; ++i) xt[i] = a * x0[i] + c * x1[i];
    }
    auto pred = model.forward(ctx, Var<Real>(std::move(xt)), t);
    if (!pred.value().all_finite()) throw TrainingFault("non-finite model output", step);
    if (t_out) *t_out = t;
    return ops::mse(pred, ops::constant(fm_target(model.config(), x0, x1, history)));
}

template <typename Real>
Tensor<Real> sample(const FlowTransformer<Real>& model, const ConditionInput<Real>& cond, const SolverConfig& solver,
                    std::uint64_t seed, SolveStats* stats) {
    const auto& cfg = model.config();
    const auto ctx = model.prepare(cond);
    Rng rng(seed);
    auto x0 = rng.normal_tensor<Real>({ctx.batch, cfg.frames, cfg.channels, cfg.image_h, cfg.image_w});
    return integrate<Real>(model_field(model, ctx), std::move(x0), solver, stats);
}

#define TSFLOW_INSTANTIATE_FM(R)                                                                                            \
    template Tensor<R> interpolate(const Tensor<R>&, const Tensor<R>&, double);                                             \
    template Tensor<R> velocity_target(const Tensor<R>&, const Tensor<R>&);                                                 \
    template Tensor<R> integrate(const VelocityField<R>&, Tensor<R>, const SolverConfig&, SolveStats*);                     \
    template VelocityField<R> model_field(const FlowTransformer<R>&, const FlowTransformer<R>::Context&);                   \
    template Tensor<R> fm_target(const ModelConfig&, const Tensor<R>&, const Tensor<R>&, const Tensor<R>&);                 \
    template Var<R> fm_loss(const FlowTransformer<R>&, const FlowTransformer<R>::Context&, const Tensor<R>&,                \
                            const Tensor<R>&, const Tensor<R>&, Rng&, std::size_t, std::vector<double>*);                   \
    template Tensor<R> sample(const FlowTransformer<R>&, const ConditionInput<R>&, const SolverConfig&, std::uint64_t,      \
                              SolveStats*);

TSFLOW_INSTANTIATE_FM(float)
TSFLOW_INSTANTIATE_FM(double)

}  // namespace tsflow
