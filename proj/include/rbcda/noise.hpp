#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "rbcda/config.hpp"
#include "rbcda/error.hpp"
#include "rbcda/rng.hpp"
#include "rbcda/solver.hpp"

namespace rbcda {

/// Subsampled (and possibly noisy) copy of a fine trajectory. Snapshots hold coarse arrays
/// of shape (nx / s, ny / s); `source` describes the fine run they came from.
struct CoarseObservation {
    RunConfig source;
    std::size_t s_factor = 1;
    std::size_t t_factor = 1;
    std::size_t steps_per_snapshot = 1; ///< fine steps between consecutive snapshots
    double sigma_obs = 0.0;
    std::uint64_t noise_seed = 0;
    std::uint64_t source_hash = 0;
    std::vector<FieldState> snapshots;

    GridSpec coarse_grid() const {
        GridSpec g = source.grid;
        g.nx /= s_factor;
        g.ny /= s_factor;
        return g;
    }

    friend bool operator==(const CoarseObservation&, const CoarseObservation&) = default;
};

inline void check_divisible(const GridSpec& g, std::size_t s) {
    if (s == 0) throw ConfigError("spatial factor must be positive");
    if (g.nx % s != 0 || g.ny % s != 0)
        throw ConfigError("spatial factor " + std::to_string(s) + " does not divide grid " +
                          std::to_string(g.nx) + "x" + std::to_string(g.ny));
}

/// Strided subsample of one snapshot, anchored at index 0 in each direction.
inline FieldState subsample(const FieldState& fine, std::size_t s) {
    const std::size_t cnx = fine.nx() / s, cny = fine.ny() / s;
    FieldState out;
    out.time = fine.time;
    for (Variable var : kAllVariables) {
        const Field2D& src = get(fine, var);
        Field2D dst(cnx, cny);
        for (std::size_t j = 0; j < cny; ++j)
            for (std::size_t i = 0; i < cnx; ++i) dst(i, j) = src(i * s, j * s);
        get(out, var) = std::move(dst);
    }
    return out;
}

/// Noise-free observation of a trajectory: every t-th snapshot, every s-th point.
inline CoarseObservation coarsen(const Trajectory& traj, std::size_t s, std::size_t t) {
    check_divisible(traj.config.grid, s);
    if (t == 0) throw ConfigError("temporal factor must be positive");
    CoarseObservation obs;
    obs.source = traj.config;
    obs.s_factor = s;
    obs.t_factor = t;
    obs.steps_per_snapshot = traj.save_every * t;
    obs.source_hash = traj.provenance_hash;
    for (std::size_t k = 0; k < traj.snapshots.size(); k += t)
        obs.snapshots.push_back(subsample(traj.snapshots[k], s));
    return obs;
}

/// Streaming counterpart of coarsen() for use as a StepObserver on a run that visits every
/// fine step: keeps every t-th visited state starting at `first_step`.
class ObservationRecorder {
public:
    ObservationRecorder(const RunConfig& source, std::size_t s, std::size_t t,
                        std::size_t first_step = 0)
        : first_step_(first_step) {
        check_divisible(source.grid, s);
        if (t == 0) throw ConfigError("temporal factor must be positive");
        obs_.source = source;
        obs_.s_factor = s;
        obs_.t_factor = t;
        obs_.steps_per_snapshot = t;
        obs_.source_hash = config_hash(source);
    }

    void operator()(const FieldState& state, std::size_t step) {
        if (step < first_step_ || (step - first_step_) % obs_.t_factor != 0) return;
        obs_.snapshots.push_back(subsample(state, obs_.s_factor));
    }

    const CoarseObservation& observation() const { return obs_; }
    CoarseObservation take() { return std::move(obs_); }

private:
    std::size_t first_step_;
    CoarseObservation obs_;
};

/// Adds i.i.d. N(0, sigma^2) to every entry of u, v, T and p. Draws come from one
/// RandomStream(seed) in the order: snapshot, then variable (u, v, T, p), then row-major.
inline CoarseObservation add_obs_noise(CoarseObservation obs, double sigma_obs,
                                       std::uint64_t seed) {
    if (!(sigma_obs >= 0.0) || !std::isfinite(sigma_obs))
        throw ConfigError("sigma_obs must be nonnegative and finite");
    obs.sigma_obs = sigma_obs;
    obs.noise_seed = seed;
    if (sigma_obs == 0.0) return obs;
    RandomStream rng(seed);
    for (FieldState& snap : obs.snapshots)
        for (Variable var : kAllVariables)
            for (double& x : get(snap, var).values()) x += rng.normal(sigma_obs);
    return obs;
}

/// Member m is add_obs_noise(clean, sigma, base_seed + m).
inline std::vector<CoarseObservation> make_ensemble(const CoarseObservation& clean,
                                                    double sigma_obs, std::size_t n_members,
                                                    std::uint64_t base_seed) {
    if (n_members == 0) throw ConfigError("ensemble needs at least one member");
    std::vector<CoarseObservation> members;
    members.reserve(n_members);
    for (std::size_t m = 0; m < n_members; ++m)
        members.push_back(add_obs_noise(clean, sigma_obs, base_seed + m));
    return members;
}

/// Model-noise recipe. For the CDA side the model error is a wrong Rayleigh number; the
/// surrogate side perturbs network weights and is handled outside this library.
struct ModelNoiseSpec {
    enum class Target { cda_rayleigh, surrogate_weights };
    double sigma_mod = 0.0;
    Target target = Target::cda_rayleigh;
    std::optional<double> ra_assumed;
};

/// CDA model noise with a relative Rayleigh-number error: ra_assumed = ra * (1 + sigma_mod).
inline ModelNoiseSpec relative_rayleigh_error(double ra, double sigma_mod) {
    return ModelNoiseSpec{sigma_mod, ModelNoiseSpec::Target::cda_rayleigh, ra * (1.0 + sigma_mod)};
}

inline PhysicalParams perturb_cda_model(PhysicalParams params, const ModelNoiseSpec& spec) {
    if (spec.target != ModelNoiseSpec::Target::cda_rayleigh)
        throw ConfigError("wrong target: model noise spec does not target the CDA Rayleigh number");
    if (!spec.ra_assumed) throw ConfigError("model noise spec is missing ra_assumed");
    if (!(*spec.ra_assumed > 0.0) || !std::isfinite(*spec.ra_assumed))
        throw ConfigError("ra_assumed must be positive and finite");
    params.rayleigh = *spec.ra_assumed;
    return params;
}

} // namespace rbcda
