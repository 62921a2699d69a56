#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tsflow/gradcheck.hpp"

namespace tsflow {

struct LayerCheck {
    std::string layer;
    std::string shape;  // human-readable description of the case
    GradCheckResult result;
};

/// Layers covered by run_layer_checks, in report order.
std::vector<std::string> checked_layers();

/// Finite-difference checks in 64-bit for every differentiable layer on
/// `cases` random shapes each, with randomized (non-zero) parameters so gates
/// and zero-initialized projections do not hide gradient paths.
std::vector<LayerCheck> run_layer_checks(std::uint64_t seed = 0, std::size_t cases = 3,
                                         const std::vector<std::string>& only = {});

}  // namespace tsflow
