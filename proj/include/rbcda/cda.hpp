#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rbcda/config.hpp"
#include "rbcda/error.hpp"
#include "rbcda/field.hpp"
#include "rbcda/noise.hpp"
#include "rbcda/solver.hpp"

namespace rbcda {

/// Piecewise-constant interpolant over square patches of `factor` x `factor` fine points.
/// Patch Q_k samples the field at its lower-left fine index, which coincides with the
/// observation node of a coarse grid anchored at index 0. Each array variable is handled in
/// its own index space, so the same operator serves u, v, T and p.
class InterpolationOperator {
public:
    enum class Kind { piecewise_constant };

    InterpolationOperator(const GridSpec& fine, std::size_t factor) : grid_(fine), factor_(factor) {
        check_divisible(fine, factor);
        const std::size_t nx = fine.nx, ny = fine.ny;
        sample_.resize(nx * ny);
        patch_.resize(nx * ny);
        const std::size_t cnx = nx / factor;
        for (std::size_t j = 0; j < ny; ++j) {
            for (std::size_t i = 0; i < nx; ++i) {
                const std::size_t ci = i / factor, cj = j / factor;
                sample_[j * nx + i] = static_cast<std::uint32_t>(cj * factor * nx + ci * factor);
                patch_[j * nx + i] = static_cast<std::uint32_t>(cj * cnx + ci);
            }
        }
    }

    Kind kind() const { return Kind::piecewise_constant; }
    std::size_t factor() const { return factor_; }
    const GridSpec& grid() const { return grid_; }
    std::size_t patch_count() const { return (grid_.nx / factor_) * (grid_.ny / factor_); }
    /// Observation spacing h: the patch diagonal bounds diam(Q_k).
    double observation_spacing() const {
        return static_cast<double>(factor_) * std::hypot(grid_.dx(), grid_.dy());
    }

    /// Index of the patch containing fine point k (row-major).
    std::uint32_t patch_of(std::size_t k) const { return patch_[k]; }
    /// Flat fine index of the sample point of the patch containing fine point k.
    std::uint32_t sample_of(std::size_t k) const { return sample_[k]; }
    std::span<const std::uint32_t> samples() const { return sample_; }

    /// I_h(f): each patch filled with f at its sample point.
    Field2D apply(const Field2D& field) const {
        check_shape(field);
        Field2D out(field.nx(), field.ny());
        const double* in = field.data();
        double* o = out.data();
        for (std::size_t k = 0; k < sample_.size(); ++k) o[k] = in[sample_[k]];
        return out;
    }

    /// Fills each patch with the matching value of a coarse (nx/factor x ny/factor) array.
    Field2D lift(const Field2D& coarse) const {
        if (coarse.nx() * factor_ != grid_.nx || coarse.ny() * factor_ != grid_.ny)
            throw ConfigError("coarse array does not tile the fine grid");
        Field2D out(grid_.nx, grid_.ny);
        const double* in = coarse.data();
        double* o = out.data();
        for (std::size_t k = 0; k < patch_.size(); ++k) o[k] = in[patch_[k]];
        return out;
    }

private:
    void check_shape(const Field2D& f) const {
        if (f.nx() != grid_.nx || f.ny() != grid_.ny)
            throw ConfigError("field shape does not match the interpolation grid");
    }

    GridSpec grid_;
    std::size_t factor_;
    std::vector<std::uint32_t> sample_;
    std::vector<std::uint32_t> patch_;
};

inline Field2D interpolate(const InterpolationOperator& op, const Field2D& field) {
    return op.apply(field);
}

struct NudgingParams {
    double mu_u = 0.0;
    double mu_t = 0.0;
    bool velocity_only = false;

    /// mu_T = mu_u = mu.
    static NudgingParams uniform(double mu) { return {mu, mu, false}; }
    static NudgingParams velocity(double mu) { return {mu, 0.0, true}; }

    bool active() const { return mu_u != 0.0 || mu_t != 0.0; }

    void validate() const {
        if (!(mu_u >= 0.0) || !(mu_t >= 0.0) || !std::isfinite(mu_u) || !std::isfinite(mu_t))
            throw ConfigError("nudging parameters must be nonnegative and finite");
        if (!(mu_u > 0.0 || mu_t > 0.0))
            throw ConfigError("at least one nudging parameter must be positive");
        if (velocity_only && mu_t != 0.0)
            throw ConfigError("velocity-only nudging requires mu_t = 0");
    }

    friend bool operator==(const NudgingParams&, const NudgingParams&) = default;
};

/// Downscaled state (w, Psi, rho); same layout and invariants as FieldState.
using CdaState = FieldState;

/// Interpolated observations I_h(u_obs), I_h(v_obs), I_h(T_obs) on the fine grid.
struct ObservedFields {
    Field2D u, v, temperature;
};

inline ObservedFields lift_observation(const InterpolationOperator& op, const FieldState& coarse) {
    return {op.lift(coarse.u), op.lift(coarse.v), op.lift(coarse.temperature)};
}

/// Adds mu_u (I(u_obs) - I(w)) to the momentum tendencies and mu_T (I(T_obs) - I(Psi)) to the
/// energy tendency. The v wall row is left alone.
class NudgingForcing {
public:
    NudgingForcing(const ObservedFields& obs, const NudgingParams& nudging,
                   const InterpolationOperator& op)
        : obs_(obs), nudging_(nudging), op_(op) {}

    void operator()(const FieldState& s, Tendency& t) const {
        const std::size_t n = s.u.size();
        const std::size_t nx = s.nx();
        const auto sample = op_.samples();
        if (nudging_.mu_u != 0.0) {
            add(t.du.data(), obs_.u.data(), s.u.data(), sample, 0, n, nudging_.mu_u);
            add(t.dv.data(), obs_.v.data(), s.v.data(), sample, nx, n, nudging_.mu_u);
        }
        if (nudging_.mu_t != 0.0)
            add(t.dT.data(), obs_.temperature.data(), s.temperature.data(), sample, 0, n,
                nudging_.mu_t);
    }

private:
    static void add(double* tendency, const double* observed, const double* state,
                    std::span<const std::uint32_t> sample, std::size_t begin, std::size_t end,
                    double mu) {
        for (std::size_t k = begin; k < end; ++k)
            tendency[k] += mu * (observed[k] - state[sample[k]]);
    }

    const ObservedFields& obs_;
    const NudgingParams& nudging_;
    const InterpolationOperator& op_;
};

/// One step of the nudged system in place. With both coefficients zero this is exactly
/// advance() without forcing.
inline void cda_advance(CdaState& state, const ObservedFields& obs, const PhysicalParams& params,
                        const NudgingParams& nudging, const InterpolationOperator& op,
                        SolverWorkspace& ws, double dt, std::size_t step_index = 0) {
    if (!nudging.active()) {
        advance(state, ws, params, dt, NoForcing{}, step_index);
        return;
    }
    advance(state, ws, params, dt, NudgingForcing(obs, nudging, op), step_index);
}

inline CdaState cda_step(CdaState state, const ObservedFields& obs, const PhysicalParams& params,
                         const NudgingParams& nudging, const InterpolationOperator& op,
                         SolverWorkspace& ws, double dt) {
    cda_advance(state, obs, params, nudging, op, ws, dt, ws.steps_taken() + 1);
    return state;
}

/// Fine steps between observation refreshes, derived from snapshot times when available.
inline std::size_t observation_cadence(const CoarseObservation& obs, double dt) {
    if (obs.snapshots.size() < 2) return obs.steps_per_snapshot;
    const double ratio = (obs.snapshots[1].time - obs.snapshots[0].time) / dt;
    const double rounded = std::round(ratio);
    if (rounded < 1.0 || std::abs(ratio - rounded) > 1e-6 * std::max(1.0, ratio))
        throw ConfigError("observation cadence is not a whole number of time steps");
    return static_cast<std::size_t>(rounded);
}

/// Called with the downscaled state after each fine step n (and at n = 0), together with the
/// observation index in force at that step.
using CdaObserver = std::function<void(const CdaState&, std::size_t step)>;

/// Runs the nudged system from zero fields at the time of the first observation for
/// round(t_window / dt) steps. Observations are held constant between refreshes.
inline CdaState run_cda(const CoarseObservation& obs, const RunConfig& config,
                        const NudgingParams& nudging, const InterpolationOperator& op,
                        double t_window, const CdaObserver& observer) {
    if (obs.snapshots.empty()) throw ConfigError("observation has no snapshots");
    if (op.factor() != obs.s_factor || !(op.grid() == config.grid))
        throw ConfigError("interpolation operator does not match observation and grid");
    if (config.grid.nx != obs.snapshots[0].nx() * obs.s_factor ||
        config.grid.ny != obs.snapshots[0].ny() * obs.s_factor)
        throw ConfigError("fine grid is not s_factor times the observation grid");
    const double dt = config.time.dt;
    const std::size_t cadence = observation_cadence(obs, dt);
    const std::size_t steps = static_cast<std::size_t>(std::llround(t_window / dt));
    if (steps > 0 && (steps - 1) / cadence >= obs.snapshots.size())
        throw ConfigError("observations do not cover the assimilation window");

    SolverWorkspace ws(config.grid);
    CdaState state(config.grid);
    state.time = obs.snapshots[0].time;
    if (observer) observer(state, 0);
    std::size_t current = std::numeric_limits<std::size_t>::max();
    ObservedFields lifted;
    for (std::size_t n = 0; n < steps; ++n) {
        const std::size_t k = n / cadence;
        if (k != current) {
            lifted = lift_observation(op, obs.snapshots[k]);
            current = k;
        }
        cda_advance(state, lifted, config.physical, nudging, op, ws, dt, n + 1);
        if (observer) observer(state, n + 1);
    }
    return state;
}

/// Downscaled trajectory keeping every config.time.save_every-th state.
inline Trajectory downscale(const CoarseObservation& obs, const RunConfig& config,
                            const NudgingParams& nudging, const InterpolationOperator& op,
                            double t_window) {
    Trajectory traj;
    traj.config = config;
    traj.save_every = config.time.save_every;
    traj.provenance_hash = detail::fnv1a(std::to_string(obs.source_hash), config_hash(config));
    run_cda(obs, config, nudging, op, t_window, [&](const CdaState& s, std::size_t n) {
        if (n % config.time.save_every == 0) traj.snapshots.push_back(s);
    });
    return traj;
}

/// Relative observation-space misfit ||I(obs) - I(state)|| / ||I(obs)|| over u, v and T.
inline double observation_misfit(const ObservedFields& obs, const CdaState& s,
                                 const InterpolationOperator& op) {
    double num = 0.0, den = 0.0;
    const auto sample = op.samples();
    auto acc = [&](const Field2D& o, const Field2D& f) {
        const double* od = o.data();
        const double* fd = f.data();
        for (std::size_t k = 0; k < o.size(); ++k) {
            const double d = od[k] - fd[sample[k]];
            num += d * d;
            den += od[k] * od[k];
        }
    };
    acc(obs.u, s.u);
    acc(obs.v, s.v);
    acc(obs.temperature, s.temperature);
    return den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
}

struct TuneOptions {
    double t_window = 2.0;
    /// Misfit level that counts as having reached the plateau.
    double tolerance = 1e-3;
    bool velocity_only = false;
};

struct TuneCandidate {
    double mu = 0.0;
    bool converged = false;
    bool blew_up = false;
    double time_to_plateau = std::numeric_limits<double>::infinity();
    double final_misfit = std::numeric_limits<double>::quiet_NaN();
};

struct TuneResult {
    NudgingParams nudging;
    bool converged = false; ///< false: no candidate reached the tolerance; smallest misfit chosen
    std::vector<TuneCandidate> candidates;
};

/// Chooses mu (mu_T = mu_u, or mu_T = 0 in velocity-only mode) minimising the time after
/// which the observation-space misfit of a cold-start run stays below the tolerance up to
/// the end of the window. Ties go to the smaller mu. When none converges, the candidate with
/// the smallest final misfit is chosen; throws when every candidate blows up.
inline TuneResult tune_mu(const CoarseObservation& obs, const RunConfig& config,
                          const InterpolationOperator& op, std::span<const double> candidates,
                          const TuneOptions& options = {}) {
    if (candidates.empty()) throw ConfigError("mu candidate grid is empty");
    TuneResult result;
    const double dt = config.time.dt;
    const std::size_t cadence = observation_cadence(obs, dt);
    for (double mu : candidates) {
        TuneCandidate c;
        c.mu = mu;
        const NudgingParams nudging =
            options.velocity_only ? NudgingParams::velocity(mu) : NudgingParams::uniform(mu);
        try {
            nudging.validate();
            std::size_t last_above = 0;
            run_cda(obs, config, nudging, op, options.t_window,
                    [&](const CdaState& s, std::size_t n) {
                        // Only at refresh steps do state and observation share a time.
                        const std::size_t k = n / cadence;
                        if (n == 0 || n % cadence != 0 || k >= obs.snapshots.size()) return;
                        const double misfit =
                            observation_misfit(lift_observation(op, obs.snapshots[k]), s, op);
                        c.final_misfit = misfit;
                        if (!(misfit <= options.tolerance)) last_above = n;
                    });
            c.converged = c.final_misfit <= options.tolerance;
            if (c.converged) c.time_to_plateau = static_cast<double>(last_above + cadence) * dt;
        } catch (const BlowUpError&) {
            c.blew_up = true;
            c.converged = false;
        } catch (const ConfigError&) {
            c.converged = false;
        }
        result.candidates.push_back(c);
    }
    const TuneCandidate* best = nullptr;
    for (const auto& c : result.candidates) {
        if (!c.converged) continue;
        if (!best || c.time_to_plateau < best->time_to_plateau ||
            (c.time_to_plateau == best->time_to_plateau && c.mu < best->mu))
            best = &c;
    }
    if (!best) {
        for (const auto& c : result.candidates)
            if (std::isfinite(c.final_misfit) && (!best || c.final_misfit < best->final_misfit))
                best = &c;
    }
    if (!best) throw ConfigError("every mu candidate failed");
    result.converged = best->converged;
    result.nudging = options.velocity_only ? NudgingParams::velocity(best->mu)
                                           : NudgingParams::uniform(best->mu);
    return result;
}

} // namespace rbcda
