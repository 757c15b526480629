#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "rbcda/config.hpp"
#include "rbcda/field.hpp"
#include "rbcda/rng.hpp"
#include "rbcda/solver.hpp"

namespace rbcda::testing {

inline RunConfig small_config(std::size_t nx = 24, std::size_t ny = 8, double dt = 1e-3) {
    RunConfig c;
    c.grid.nx = nx;
    c.grid.ny = ny;
    c.time.dt = dt;
    c.time.t_final = 10 * dt;
    c.seed = 7;
    return c;
}

inline Field2D random_field(std::size_t nx, std::size_t ny, RandomStream& rng, double a = 1.0) {
    Field2D f(nx, ny);
    for (double& x : f.values()) x = rng.symmetric(a);
    return f;
}

inline FieldState random_state(const GridSpec& g, std::uint64_t seed) {
    RandomStream rng(seed);
    FieldState s(g);
    s.u = random_field(g.nx, g.ny, rng);
    s.v = random_field(g.nx, g.ny, rng);
    s.temperature = random_field(g.nx, g.ny, rng);
    s.pressure = random_field(g.nx, g.ny, rng);
    return s;
}

inline double max_abs_diff(const Field2D& a, const Field2D& b) {
    double m = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a.data()[k] - b.data()[k]));
    return m;
}

inline double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

} // namespace rbcda::testing
