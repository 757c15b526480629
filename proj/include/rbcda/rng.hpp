#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace rbcda {

/// Reproducible random stream: std::mt19937_64 (fully specified by the standard) with
/// hand-written transforms so that draws do not depend on the standard library's
/// distribution implementations.
///
///   uniform01() = (next() >> 11) * 2^-53                      in [0, 1)
///   normal()    = Box-Muller on two consecutive uniforms u1, u2:
///                   r = sqrt(-2 ln(1 - u1)), z0 = r cos(2 pi u2), z1 = r sin(2 pi u2)
///                 z0 is returned first and z1 is cached for the following call.
class RandomStream {
public:
    explicit RandomStream(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform on [-amplitude, amplitude).
    double symmetric(double amplitude) { return amplitude * (2.0 * uniform01() - 1.0); }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = uniform01();
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(1.0 - u1));
        const double angle = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(angle);
        has_spare_ = true;
        return r * std::cos(angle);
    }

    double normal(double sigma) { return sigma * normal(); }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace rbcda
