#pragma once

#include <cmath>
#include <numbers>

#include "rbcda/solver.hpp"
#include "support.hpp"

namespace rbcda::testing {

struct MmsErrors {
    double du, dv, dT;
};

// u = sin(ax) sin(pi y), v = cos(ax) sin(pi y), T = cos(ax) sin(pi y) with a = 2 pi / lx.
// Exact tendencies of the conservative-form equations, derived by hand.
MmsErrors manufactured_errors(std::size_t nx, std::size_t ny) {
    const GridSpec g{nx, ny, 3.0, 1.0};
    const PhysicalParams p{100.0, 0.7};
    constexpr double pi = std::numbers::pi;
    const double a = 2.0 * pi / g.lx, nu = p.viscosity(), kappa = p.diffusivity();
    const double k2 = a * a + pi * pi;
    FieldState s(g);
    Field2D du(nx, ny), dv(nx, ny), dT(nx, ny);
    for (std::size_t j = 0; j < ny; ++j) {
        for (std::size_t i = 0; i < nx; ++i) {
            {  // u face
                const double x = i * g.dx(), y = (j + 0.5) * g.dy();
                const double S = std::sin(a * x), C = std::cos(a * x);
                const double sy = std::sin(pi * y), cy = std::cos(pi * y);
                s.u(i, j) = S * sy;
                du(i, j) = -2.0 * a * S * C * sy * sy - 2.0 * pi * S * C * sy * cy - nu * k2 * S * sy;
            }
            {  // v face
                const double x = (i + 0.5) * g.dx(), y = j * g.dy();
                const double S = std::sin(a * x), C = std::cos(a * x);
                const double sy = std::sin(pi * y), cy = std::cos(pi * y);
                s.v(i, j) = C * sy;
                dv(i, j) = -a * (C * C - S * S) * sy * sy - 2.0 * pi * C * C * sy * cy -
                           nu * k2 * C * sy + p.prandtl * C * sy;
            }
            {  // cell centre
                const double x = (i + 0.5) * g.dx(), y = (j + 0.5) * g.dy();
                const double S = std::sin(a * x), C = std::cos(a * x);
                const double sy = std::sin(pi * y), cy = std::cos(pi * y);
                s.temperature(i, j) = C * sy;
                dT(i, j) = -a * (C * C - S * S) * sy * sy - 2.0 * pi * C * C * sy * cy -
                           kappa * k2 * C * sy + C * sy;
            }
        }
    }
    const Tendency t = rhs(s, p, g);
    return {max_abs_diff(t.du, du), max_abs_diff(t.dv, dv), max_abs_diff(t.dT, dT)};
}

} // namespace rbcda::testing
