#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

#include "tsflow/model.hpp"
#include "tsflow/rng.hpp"

namespace tsflow {

/// x_t = (1 - t) x0 + t x1
template <typename Real>
Tensor<Real> interpolate(const Tensor<Real>& x0, const Tensor<Real>& x1, double t);

/// x1 - x0
template <typename Real>
Tensor<Real> velocity_target(const Tensor<Real>& x0, const Tensor<Real>& x1);

enum class SolverMethod { euler, rk4, dopri5 };

std::string to_string(SolverMethod m);
SolverMethod solver_from_string(const std::string& s);

struct SolverConfig {
    SolverMethod method = SolverMethod::dopri5;
    std::size_t steps = 10;  // fixed-step budget, h = 1 / steps
    bool adaptive = false;   // dopri5 only: error-controlled steps using rtol/atol
    double rtol = 1e-6;
    double atol = 1e-6;
    double initial_step = 0.1;
    std::size_t max_steps = 1000;

    void validate() const;
};

struct SolveStats {
    std::size_t accepted = 0;
    std::size_t rejected = 0;
    std::size_t evaluations = 0;
};

/// Raised when the adaptive controller exceeds max_steps.
class SolverError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised when a training forward pass produces non-finite values.
class TrainingFault : public std::runtime_error {
public:
    TrainingFault(const std::string& what, std::size_t step)
        : std::runtime_error(what + " at step " + std::to_string(step)), step(step) {}
    std::size_t step;
};

template <typename Real>
using VelocityField = std::function<Tensor<Real>(const Tensor<Real>& x, double t)>;

/// Integrates dx/dt = f(x, t) from t = 0 to t = 1.
template <typename Real>
Tensor<Real> integrate(const VelocityField<Real>& f, Tensor<Real> x, const SolverConfig& cfg, SolveStats* stats = nullptr);

/// Velocity field of a model on a prepared condition; for forecasting models
/// only the future frames of the joint prediction drive the state.
template <typename Real>
VelocityField<Real> model_field(const FlowTransformer<Real>& model, const typename FlowTransformer<Real>::Context& ctx);

/// Regression target for one batch: x1 - x0 on the state frames, preceded by
/// the clean history frames when forecasting (joint prediction).
template <typename Real>
Tensor<Real> fm_target(const ModelConfig& cfg, const Tensor<Real>& x0, const Tensor<Real>& x1, const Tensor<Real>& history);

/// Mean squared error between f(x_t, t | cond) and the target with one
/// t ~ U[0, 1] per batch element. x0, x1: [B, T, C, H, W]. `history` is the
/// clean condition stream [B, T_his, C, H, W] for forecasting, else empty.
template <typename Real>
Var<Real> fm_loss(const FlowTransformer<Real>& model, const typename FlowTransformer<Real>::Context& ctx,
                  const Tensor<Real>& x0, const Tensor<Real>& x1, const Tensor<Real>& history, Rng& rng,
                  std::size_t step = 0, std::vector<double>* t_out = nullptr);

/// Draws x0 ~ N(0, I) from `seed` and integrates the model field to t = 1.
template <typename Real>
Tensor<Real> sample(const FlowTransformer<Real>& model, const ConditionInput<Real>& cond, const SolverConfig& solver,
                    std::uint64_t seed, SolveStats* stats = nullptr);

}  // namespace tsflow
