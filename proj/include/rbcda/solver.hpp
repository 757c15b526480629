#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "rbcda/config.hpp"
#include "rbcda/error.hpp"
#include "rbcda/field.hpp"
#include "rbcda/poisson.hpp"
#include "rbcda/rng.hpp"

namespace rbcda {

/// Snapshot of the flow on the MAC grid. Every array is nx x ny:
///   u(i, j)           at x = i dx,       y = (j + 1/2) dy   (vertical faces, periodic in i)
///   v(i, j)           at x = (i + 1/2) dx, y = j dy         (horizontal faces; row 0 is the
///                                                           bottom wall, the top wall face
///                                                           j = ny is implicit and zero)
///   temperature(i, j) at cell centres
///   pressure(i, j)    at cell centres
struct FieldState {
    Field2D u, v, temperature, pressure;
    double time = 0.0;

    FieldState() = default;
    explicit FieldState(const GridSpec& g)
        : u(g.nx, g.ny), v(g.nx, g.ny), temperature(g.nx, g.ny), pressure(g.nx, g.ny) {}

    std::size_t nx() const { return u.nx(); }
    std::size_t ny() const { return u.ny(); }

    friend bool operator==(const FieldState&, const FieldState&) = default;
};

enum class Variable : std::uint8_t { u = 0, v = 1, temperature = 2, pressure = 3 };
inline constexpr std::array<Variable, 4> kAllVariables{Variable::u, Variable::v,
                                                       Variable::temperature, Variable::pressure};

inline const char* variable_name(Variable var) {
    switch (var) {
    case Variable::u: return "u";
    case Variable::v: return "v";
    case Variable::temperature: return "T";
    case Variable::pressure: return "p";
    }
    return "?";
}

inline const Field2D& get(const FieldState& s, Variable var) {
    switch (var) {
    case Variable::u: return s.u;
    case Variable::v: return s.v;
    case Variable::temperature: return s.temperature;
    case Variable::pressure: break;
    }
    return s.pressure;
}

inline Field2D& get(FieldState& s, Variable var) {
    return const_cast<Field2D&>(get(static_cast<const FieldState&>(s), var));
}

/// Tendencies of u, v and T (the pressure gradient is applied by the projection).
struct Tendency {
    Field2D du, dv, dT;

    Tendency() = default;
    explicit Tendency(const GridSpec& g) : du(g.nx, g.ny), dv(g.nx, g.ny), dT(g.nx, g.ny) {}
};

/// Time-ordered snapshots with the configuration that produced them.
struct Trajectory {
    RunConfig config;
    std::size_t save_every = 1; ///< fine steps between consecutive snapshots
    std::uint64_t provenance_hash = 0;
    std::vector<FieldState> snapshots;

    friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

namespace detail {

inline void periodic_neighbours(std::size_t nx, std::vector<std::size_t>& west,
                                std::vector<std::size_t>& east) {
    west.resize(nx);
    east.resize(nx);
    for (std::size_t i = 0; i < nx; ++i) {
        west[i] = (i + nx - 1) % nx;
        east[i] = (i + 1) % nx;
    }
}

} // namespace detail

/// Advective, diffusive and buoyancy tendencies on the MAC grid, second-order central
/// differences, advection in divergence form. Walls: u ghost = -u (no slip), v = 0 on the
/// wall faces, T ghost = -T (T = 0 on the walls). The energy equation carries the
/// vertical-advection source +v of the linear background profile.
inline void compute_rhs(const FieldState& s, const PhysicalParams& params, const GridSpec& grid,
                        Tendency& out) {
    const std::size_t nx = grid.nx, ny = grid.ny;
    const double dx = grid.dx(), dy = grid.dy();
    const double idx = 1.0 / dx, idy = 1.0 / dy;
    const double idx2 = idx * idx, idy2 = idy * idy;
    const double nu = params.viscosity();
    const double kappa = params.diffusivity();
    const double pr = params.prandtl;

    thread_local std::vector<std::size_t> west, east;
    if (west.size() != nx) detail::periodic_neighbours(nx, west, east);

    const Field2D& U = s.u;
    const Field2D& V = s.v;
    const Field2D& T = s.temperature;

    for (std::size_t j = 0; j < ny; ++j) {
        const bool bottom = j == 0;
        const bool top = j + 1 == ny;
        const double* u0 = U.row(j);
        const double* um = bottom ? nullptr : U.row(j - 1);
        const double* up = top ? nullptr : U.row(j + 1);
        const double* v0 = V.row(j);
        const double* vp = top ? nullptr : V.row(j + 1);
        const double* vm = bottom ? nullptr : V.row(j - 1);
        const double* t0 = T.row(j);
        const double* tm = bottom ? nullptr : T.row(j - 1);
        const double* tp = top ? nullptr : T.row(j + 1);
        double* du = out.du.row(j);
        double* dv = out.dv.row(j);
        double* dT = out.dT.row(j);

        for (std::size_t i = 0; i < nx; ++i) {
            const std::size_t w = west[i], e = east[i];

            // u-momentum at face (i, j).
            {
                const double uc = u0[i];
                const double us = bottom ? -uc : um[i];
                const double un = top ? -uc : up[i];
                const double ur = 0.5 * (uc + u0[e]);
                const double ul = 0.5 * (u0[w] + uc);
                const double vn = top ? 0.0 : 0.5 * (vp[w] + vp[i]);
                const double vs = 0.5 * (v0[w] + v0[i]);
                const double flux_n = 0.5 * (uc + un) * vn;
                const double flux_s = 0.5 * (us + uc) * vs;
                const double lap = (u0[w] - 2.0 * uc + u0[e]) * idx2 + (us - 2.0 * uc + un) * idy2;
                du[i] = -(ur * ur - ul * ul) * idx - (flux_n - flux_s) * idy + nu * lap;
            }

            // v-momentum at face (i, j); the wall row stays at rest.
            if (bottom) {
                dv[i] = 0.0;
            } else {
                const double vc = v0[i];
                const double vn = top ? 0.0 : vp[i];
                const double vs = vm[i];
                const double ue = 0.5 * (um[e] + u0[e]);
                const double uw = 0.5 * (um[i] + u0[i]);
                const double flux_e = ue * 0.5 * (vc + v0[e]);
                const double flux_w = uw * 0.5 * (v0[w] + vc);
                const double cn = 0.5 * (vc + vn);
                const double cs = 0.5 * (vs + vc);
                const double lap = (v0[w] - 2.0 * vc + v0[e]) * idx2 + (vs - 2.0 * vc + vn) * idy2;
                dv[i] = -(flux_e - flux_w) * idx - (cn * cn - cs * cs) * idy + nu * lap +
                        pr * 0.5 * (tm[i] + t0[i]);
            }

            // Energy at cell centre (i, j).
            {
                const double tc = t0[i];
                const double ts = bottom ? -tc : tm[i];
                const double tn = top ? -tc : tp[i];
                const double vn = top ? 0.0 : vp[i];
                const double vs = v0[i]; // zero on the bottom wall row
                const double fe = u0[e] * 0.5 * (tc + t0[e]);
                const double fw = u0[i] * 0.5 * (t0[w] + tc);
                const double fn = vn * 0.5 * (tc + tn);
                const double fs = vs * 0.5 * (ts + tc);
                const double lap = (t0[w] - 2.0 * tc + t0[e]) * idx2 + (ts - 2.0 * tc + tn) * idy2;
                dT[i] = -(fe - fw) * idx - (fn - fs) * idy + kappa * lap + 0.5 * (vs + vn);
            }
        }
    }
}

inline Tendency rhs(const FieldState& s, const PhysicalParams& params, const GridSpec& grid) {
    Tendency t(grid);
    compute_rhs(s, params, grid, t);
    return t;
}

/// Discrete divergence of the face velocities at each cell centre.
inline void divergence(const Field2D& u, const Field2D& v, const GridSpec& grid, Field2D& out) {
    const std::size_t nx = grid.nx, ny = grid.ny;
    const double idx = 1.0 / grid.dx(), idy = 1.0 / grid.dy();
    for (std::size_t j = 0; j < ny; ++j) {
        const double* u0 = u.row(j);
        const double* v0 = v.row(j);
        const double* vp = j + 1 < ny ? v.row(j + 1) : nullptr;
        double* d = out.row(j);
        for (std::size_t i = 0; i < nx; ++i) {
            const double vn = vp ? vp[i] : 0.0;
            const double ue = u0[i + 1 < nx ? i + 1 : 0];
            d[i] = (ue - u0[i]) * idx + (vn - v0[i]) * idy;
        }
    }
}

/// max |div u| / max(|u|, |v|, 1).
inline double relative_divergence(const FieldState& s, const GridSpec& grid) {
    Field2D d(grid.nx, grid.ny);
    divergence(s.u, s.v, grid, d);
    return d.max_abs() / std::max({s.u.max_abs(), s.v.max_abs(), 1.0});
}

/// Per-instance scratch: AB3 history, Poisson solver and work arrays. Not shareable
/// between concurrently advancing states.
class SolverWorkspace {
public:
    explicit SolverWorkspace(const GridSpec& grid)
        : grid_(grid), poisson_(std::make_unique<PoissonSolver>(grid)),
          history_{Tendency(grid), Tendency(grid), Tendency(grid)}, scratch_(grid.nx, grid.ny) {}

    const GridSpec& grid() const { return grid_; }
    /// Number of stored right-hand sides, saturating at 3.
    std::size_t history_length() const { return std::min<std::size_t>(count_, 3); }
    std::size_t steps_taken() const { return count_; }
    void reset() { count_ = 0; }

    /// Slot for the newest tendency; valid until commit().
    Tendency& next_slot() { return history_[count_ % 3]; }
    const Tendency& previous(std::size_t lag) const { return history_[(count_ - lag) % 3]; }
    void commit() { ++count_; }

    PoissonSolver& poisson() { return *poisson_; }
    Field2D& scratch() { return scratch_; }

    /// Stage storage for the Runge-Kutta start, allocated on first use.
    FieldState& stage_state() {
        if (!stage_) stage_ = std::make_unique<Stage>(grid_);
        return stage_->state;
    }
    Tendency& stage_tendency() {
        if (!stage_) stage_ = std::make_unique<Stage>(grid_);
        return stage_->tendency;
    }

private:
    struct Stage {
        explicit Stage(const GridSpec& g) : state(g), tendency(g) {}
        FieldState state;
        Tendency tendency;
    };

    GridSpec grid_;
    std::unique_ptr<PoissonSolver> poisson_;
    std::array<Tendency, 3> history_;
    Field2D scratch_;
    std::unique_ptr<Stage> stage_;
    std::size_t count_ = 0;
};

/// Removes the gradient part of (u, v) in place so that the discrete divergence vanishes.
/// Returns phi with L phi = div(u*) / dt and u = u* - dt grad(phi); pass dt = 1 to get the
/// plain potential.
inline void project_in_place(Field2D& u, Field2D& v, Field2D& phi, SolverWorkspace& ws,
                             double dt) {
    const GridSpec& g = ws.grid();
    const std::size_t nx = g.nx, ny = g.ny;
    divergence(u, v, g, phi);
    const double inv_dt = 1.0 / dt;
    for (double& x : phi.values()) x *= inv_dt;
    ws.poisson().solve(phi);
    const double cx = dt / g.dx(), cy = dt / g.dy();
    for (std::size_t j = 0; j < ny; ++j) {
        const double* p0 = phi.row(j);
        double* u0 = u.row(j);
        u0[0] -= cx * (p0[0] - p0[nx - 1]);
        for (std::size_t i = 1; i < nx; ++i) u0[i] -= cx * (p0[i] - p0[i - 1]);
        if (j > 0) {
            const double* pm = phi.row(j - 1);
            double* v0 = v.row(j);
            for (std::size_t i = 0; i < nx; ++i) v0[i] -= cy * (p0[i] - pm[i]);
        }
    }
}

struct Projection {
    Field2D u, v, pressure_increment;
};

inline Projection project(Field2D u_star, Field2D v_star, SolverWorkspace& ws, double dt = 1.0) {
    Projection p{std::move(u_star), std::move(v_star), Field2D(ws.grid().nx, ws.grid().ny)};
    project_in_place(p.u, p.v, p.pressure_increment, ws, dt);
    return p;
}

inline constexpr double kBlowUpThreshold = 1e6;

inline bool fields_healthy(const FieldState& s) {
    for (const Field2D* f : {&s.u, &s.v, &s.temperature}) {
        for (double x : f->values())
            if (!(std::abs(x) <= kBlowUpThreshold)) return false;
    }
    return true;
}

/// AB3 weights for the newest, previous and oldest tendency.
inline constexpr std::array<double, 3> kAdamsBashforth3{23.0 / 12.0, -16.0 / 12.0, 5.0 / 12.0};

/// Steps taken with SSP-RK3 before the AB3 history is full. Their tendencies at the step
/// start fill the history, so the multistep phase starts from third-order values.
inline constexpr std::size_t kStartupSteps = 2;

/// SSP-RK3 (Shu-Osher) stage coefficients: y_k = a y_0 + b (y_{k-1} + dt f(y_{k-1})).
inline constexpr std::array<std::array<double, 2>, 3> kRungeKutta3{
    {{0.0, 1.0}, {0.75, 0.25}, {1.0 / 3.0, 2.0 / 3.0}}};

/// Scalar counterpart of the time integrator for y' = f(y): the same start and weights.
template <class F>
double integrate_scalar(F&& f, double y, double dt, std::size_t steps) {
    std::array<double, 3> hist{};
    for (std::size_t n = 0; n < steps; ++n) {
        hist = {f(y), hist[0], hist[1]};
        if (n < kStartupSteps) {
            double stage = y;
            for (std::size_t k = 0; k < kRungeKutta3.size(); ++k) {
                const auto [a, b] = kRungeKutta3[k];
                stage = a * y + b * (stage + dt * (k == 0 ? hist[0] : f(stage)));
            }
            y = stage;
        } else {
            y += dt * (kAdamsBashforth3[0] * hist[0] + kAdamsBashforth3[1] * hist[1] +
                       kAdamsBashforth3[2] * hist[2]);
        }
    }
    return y;
}

/// Extra tendency hook: called after the physical tendency is computed, before time
/// integration. The no-op default leaves the bit pattern of the physical step untouched.
struct NoForcing {
    void operator()(const FieldState&, Tendency&) const {}
};

namespace detail {

inline void zero_wall_row(Field2D& v) {
    double* row = v.row(0);
    std::fill(row, row + v.nx(), 0.0);
}

/// out = a * y0 + b * (y + dt * f) for u, v and T.
inline void combine(FieldState& out, const FieldState& y0, const FieldState& y, const Tendency& f,
                    double a, double b, double dt) {
    auto one = [&](Field2D& o, const Field2D& x0, const Field2D& x, const Field2D& fx) {
        double* po = o.data();
        const double *p0 = x0.data(), *px = x.data(), *pf = fx.data();
        for (std::size_t k = 0; k < o.size(); ++k) po[k] = a * p0[k] + b * (px[k] + dt * pf[k]);
    };
    one(out.u, y0.u, y.u, f.du);
    one(out.v, y0.v, y.v, f.dv);
    one(out.temperature, y0.temperature, y.temperature, f.dT);
}

} // namespace detail

/// Advances `state` by one step in place: tendency, time update, wall conditions, projection.
/// The first kStartupSteps steps use SSP-RK3, later steps AB3 on the stored tendencies.
/// Throws BlowUpError (with `step_index`) when a field becomes non-finite or exceeds 1e6.
template <class Forcing = NoForcing>
void advance(FieldState& state, SolverWorkspace& ws, const PhysicalParams& params, double dt,
             Forcing&& forcing = {}, std::size_t step_index = 0) {
    const GridSpec& g = ws.grid();
    Tendency& newest = ws.next_slot();
    compute_rhs(state, params, g, newest);
    forcing(static_cast<const FieldState&>(state), newest);
    ws.commit();

    if (ws.steps_taken() <= kStartupSteps) {
        FieldState& stage = ws.stage_state();
        Tendency& f = ws.stage_tendency();
        detail::combine(stage, state, state, newest, 0.0, 1.0, dt);
        for (std::size_t k = 1; k < kRungeKutta3.size(); ++k) {
            detail::zero_wall_row(stage.v);
            project_in_place(stage.u, stage.v, ws.scratch(), ws, dt);
            compute_rhs(stage, params, g, f);
            forcing(static_cast<const FieldState&>(stage), f);
            const auto [a, b] = kRungeKutta3[k];
            detail::combine(stage, state, stage, f, a, b, dt);
        }
        std::swap(state.u, stage.u);
        std::swap(state.v, stage.v);
        std::swap(state.temperature, stage.temperature);
    } else {
        const auto& w = kAdamsBashforth3;
        const std::size_t n = g.nx * g.ny;
        auto update = [&](Field2D& fld, Field2D Tendency::*member) {
            double* x = fld.data();
            const double* f0 = (ws.previous(1).*member).data();
            const double* f1 = (ws.previous(2).*member).data();
            const double* f2 = (ws.previous(3).*member).data();
            for (std::size_t k = 0; k < n; ++k)
                x[k] += dt * (w[0] * f0[k] + w[1] * f1[k] + w[2] * f2[k]);
        };
        update(state.u, &Tendency::du);
        update(state.v, &Tendency::dv);
        update(state.temperature, &Tendency::dT);
    }
    detail::zero_wall_row(state.v);

    project_in_place(state.u, state.v, state.pressure, ws, dt);
    state.time += dt;
    if (!fields_healthy(state)) throw BlowUpError("solution blew up", step_index);
}

/// Value-returning form of advance().
inline FieldState step(FieldState state, SolverWorkspace& ws, const PhysicalParams& params,
                       double dt) {
    advance(state, ws, params, dt, NoForcing{}, ws.steps_taken() + 1);
    return state;
}

/// Random initial condition: u, v, T i.i.d. uniform on (-a, a), v zero on the wall row, then
/// projected to be divergence free with zero pressure. Draw order: all of u, v rows
/// 1..ny-1, all of T, each row-major.
inline FieldState init_random(const RunConfig& config) {
    const GridSpec& g = config.grid;
    FieldState s(g);
    RandomStream rng(config.seed);
    const double a = config.init_amplitude;
    for (double& x : s.u.values()) x = rng.symmetric(a);
    for (std::size_t j = 1; j < g.ny; ++j)
        for (std::size_t i = 0; i < g.nx; ++i) s.v(i, j) = rng.symmetric(a);
    for (double& x : s.temperature.values()) x = rng.symmetric(a);
    if (a > 0.0) {
        SolverWorkspace ws(g);
        Field2D phi(g.nx, g.ny);
        project_in_place(s.u, s.v, phi, ws, 1.0);
    }
    return s;
}

/// Called with every state reached, including the initial one (step 0).
using StepObserver = std::function<void(const FieldState&, std::size_t step)>;

/// Integrates `steps` steps from `initial`, calling `observer` after each.
inline FieldState integrate(FieldState initial, const RunConfig& config, std::size_t steps,
                            const StepObserver& observer) {
    SolverWorkspace ws(config.grid);
    if (observer) observer(initial, 0);
    for (std::size_t n = 1; n <= steps; ++n) {
        advance(initial, ws, config.physical, config.time.dt, NoForcing{}, n);
        if (observer) observer(initial, n);
    }
    return initial;
}

/// Runs the configuration from its random initial condition to t_final and keeps every
/// save_every-th state.
inline Trajectory simulate(const RunConfig& config) {
    validate(config);
    Trajectory traj;
    traj.config = config;
    traj.save_every = config.time.save_every;
    traj.provenance_hash = config_hash(config);
    integrate(init_random(config), config, config.time.steps(),
              [&](const FieldState& s, std::size_t n) {
                  if (n % config.time.save_every == 0) traj.snapshots.push_back(s);
              });
    return traj;
}

inline double kinetic_energy(const FieldState& s, const GridSpec& g) {
    double e = 0.0;
    for (double x : s.u.values()) e += x * x;
    for (double x : s.v.values()) e += x * x;
    return 0.5 * e * g.cell_area();
}

/// max(|u| dt/dx, |v| dt/dy).
inline double cfl_number(const FieldState& s, const GridSpec& g, double dt) {
    return std::max(s.u.max_abs() * dt / g.dx(), s.v.max_abs() * dt / g.dy());
}

} // namespace rbcda
