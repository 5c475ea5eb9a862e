#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <sstream>
#include <string>

#include "autoq/errors.hpp"

namespace autoq::agent {

/// Deterministic RNG used across the agents and the search loop. Gaussian
/// draws use an explicit stateless Box-Muller so a saved engine state resumes
/// byte-identically (std::normal_distribution caches a spare value).
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    /// uniform double in [0,1)
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal(double mean = 0.0, double stddev = 1.0) {
        const double u1 = 1.0 - uniform();   // (0,1], keeps log finite
        const double u2 = uniform();
        const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
        return mean + stddev * z;
    }

    /// integer in [0, n)
    std::uint64_t integer(std::uint64_t n) {
        if (n == 0) throw ValidationError("Rng::integer: n must be positive");
        return engine_() % n;
    }

    std::string save_state() const {
        std::ostringstream ss;
        ss << engine_;
        return ss.str();
    }

    void load_state(const std::string& state) {
        std::istringstream ss(state);
        ss >> engine_;
        if (!ss) throw ParseError("Rng: malformed engine state");
    }

    bool operator==(const Rng& other) const { return engine_ == other.engine_; }

private:
    std::mt19937_64 engine_;
};

} // namespace autoq::agent
