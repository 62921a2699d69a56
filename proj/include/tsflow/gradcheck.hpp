#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "tsflow/autograd.hpp"

namespace tsflow {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_param = 0;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t coordinates_checked = 0;
};

class NonFiniteError : public std::runtime_error {
public:
    NonFiniteError(std::size_t param, std::size_t index)
        : std::runtime_error("non-finite objective when perturbing parameter " + std::to_string(param) +
                             " coordinate " + std::to_string(index)),
          param(param), index(index) {}
    std::size_t param;
    std::size_t index;
};

/// Compares reverse-mode gradients of a scalar objective against central
/// differences, error_i = |analytic - numeric| / (|analytic| + 1e-8).
///
/// `objective` must rebuild the graph from the current parameter values on
/// every call. When `max_coords_per_param` is set, a seeded random subset of
/// coordinates is checked for tensors larger than that.
GradCheckResult finite_difference_check(const std::function<Var<double>()>& objective,
                                        std::vector<Var<double>>& params, double h = 1e-4,
                                        std::optional<std::size_t> max_coords_per_param = std::nullopt,
                                        std::uint64_t seed = 0);

/// Single-tensor convenience form: f maps p to a scalar.
GradCheckResult finite_difference_check(const std::function<Var<double>(const Var<double>&)>& f,
                                        const Tensor<double>& p, double h = 1e-4);

}  // namespace tsflow
