#pragma once

#include <cstdint>
#include <random>

#include "jemb/tensor.hpp"

namespace jemb {

/// Seeded random source. All randomness in the library flows through one of
/// these so that runs are reproducible from a single seed.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    /// Independent stream for (seed, index) pairs, e.g. one per generated sample.
    static Rng derive(std::uint64_t seed, std::uint64_t index) {
        std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                          static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
        Rng r(0);
        r.engine_.seed(seq);
        return r;
    }

    double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
    double normal(double mean = 0.0, double stddev = 1.0) {
        return std::normal_distribution<double>(mean, stddev)(engine_);
    }
    /// Uniform integer in [0, n).
    std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }
    std::uint64_t next() { return engine_(); }

    std::mt19937_64& engine() { return engine_; }

    Tensor normal_tensor(Shape shape, double stddev = 1.0) {
        Tensor t(std::move(shape));
        for (double& v : t.mutable_data()) v = normal(0.0, stddev);
        return t;
    }
    Tensor uniform_tensor(Shape shape, double lo, double hi) {
        Tensor t(std::move(shape));
        for (double& v : t.mutable_data()) v = uniform(lo, hi);
        return t;
    }

  private:
    std::mt19937_64 engine_;
};

}  // namespace jemb
