#pragma once

#include <cstdint>
#include <random>

#include "tsflow/tensor.hpp"

namespace tsflow {

/// SplitMix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    return mix_seed(seed ^ mix_seed(stream + 0x632be59bd9b4e019ULL));
}

/// Mersenne Twister (mt19937_64) stream. All stochastic code takes one of these.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
    double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
    double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }
    /// Uniform integer in [lo, hi].
    std::int64_t integer(std::int64_t lo, std::int64_t hi) {
        return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
    }
    bool bernoulli(double p) { return uniform() < p; }

    template <typename Real>
    Tensor<Real> normal_tensor(const Shape& shape, double stddev = 1.0) {
        Tensor<Real> t(shape);
        for (auto& v : t.data()) v = static_cast<Real>(normal() * stddev);
        return t;
    }
    template <typename Real>
    Tensor<Real> uniform_tensor(const Shape& shape, double lo, double hi) {
        Tensor<Real> t(shape);
        for (auto& v : t.data()) v = static_cast<Real>(uniform(lo, hi));
        return t;
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace tsflow
