#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "rbcda/cda.hpp"
#include "rbcda/config.hpp"
#include "rbcda/metrics.hpp"
#include "rbcda/noise.hpp"
#include "rbcda/solver.hpp"
#include "rbcda/trajectory_io.hpp"

namespace rbcda {

// ---------------------------------------------------------------------------------------
// Experiment plan

enum class Scenario {
    cda_obs_noise,
    cda_model_noise,
    cda_combined,
    ensemble_size_study,
    ra_sensitivity,
    st_sensitivity,
    scenario3_datagen,
    surrogate_eval
};

inline const char* scenario_name(Scenario s) {
    switch (s) {
    case Scenario::cda_obs_noise: return "cda_obs_noise";
    case Scenario::cda_model_noise: return "cda_model_noise";
    case Scenario::cda_combined: return "cda_combined";
    case Scenario::ensemble_size_study: return "ensemble_size_study";
    case Scenario::ra_sensitivity: return "ra_sensitivity";
    case Scenario::st_sensitivity: return "st_sensitivity";
    case Scenario::scenario3_datagen: return "scenario3_datagen";
    case Scenario::surrogate_eval: return "surrogate_eval";
    }
    return "?";
}

inline Scenario parse_scenario(const std::string& name) {
    for (int k = 0; k <= static_cast<int>(Scenario::surrogate_eval); ++k) {
        const auto s = static_cast<Scenario>(k);
        if (name == scenario_name(s)) return s;
    }
    throw ConfigError("unknown scenario '" + name + "'");
}

struct ExperimentPlan {
    Scenario scenario = Scenario::cda_obs_noise;
    std::vector<double> sigma_obs_grid{0.0};
    std::vector<double> sigma_mod_grid{0.0};
    std::vector<std::size_t> s_factors{4};
    std::vector<std::size_t> t_factors{4};
    std::size_t n_members = 1;
    std::vector<std::size_t> ensemble_sizes;
    std::vector<double> ra_values; ///< empty: use the config's Rayleigh number
    std::string output_dir = "out";

    double spinup_time = 40.0;   ///< reference time discarded before the window
    double window_time = 3.0;    ///< assimilation window length
    std::size_t metric_every = 100;
    double mu = 0.0;             ///< 0: tune over mu_candidates
    std::vector<double> mu_candidates{3.0, 10.0, 30.0, 100.0};
    bool velocity_only = false;
    std::uint64_t base_seed = 1000;
    std::size_t workers = 1;
    std::size_t n_trajectories = 2;   ///< scenario-3 reference count
    double ra_assumed_factor = 1.3;   ///< scenario-3 Rayleigh-number error
};

namespace detail {

template <class T>
std::vector<T> parse_list(const std::string& text, std::string_view key) {
    std::vector<T> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.find_first_not_of(" \t\r") == std::string::npos) continue;
        out.push_back(parse_number<T>(item, key));
    }
    return out;
}

template <class T>
std::string format_list(const std::vector<T>& v) {
    std::string s;
    for (std::size_t k = 0; k < v.size(); ++k) {
        if (k) s += ", ";
        if constexpr (std::is_floating_point_v<T>) s += format_double(v[k]);
        else s += std::to_string(v[k]);
    }
    return s;
}

} // namespace detail

inline void validate(const ExperimentPlan& p) {
    if (p.n_members == 0) throw ConfigError("n_members must be at least 1");
    if (p.s_factors.empty() || p.t_factors.empty())
        throw ConfigError("s_factors and t_factors must be nonempty");
    for (auto t : p.t_factors)
        if (t == 0) throw ConfigError("temporal factor must be positive");
    auto nonneg = [](const std::vector<double>& g, const char* name) {
        if (g.empty()) throw ConfigError(std::string(name) + " must be nonempty");
        for (double x : g)
            if (!(x >= 0.0) || !std::isfinite(x))
                throw ConfigError(std::string(name) + " entries must be nonnegative");
    };
    nonneg(p.sigma_obs_grid, "sigma_obs_grid");
    nonneg(p.sigma_mod_grid, "sigma_mod_grid");
    for (double ra : p.ra_values)
        if (!(ra > 0.0)) throw ConfigError("ra_values entries must be positive");
    if (p.scenario == Scenario::ra_sensitivity && p.ra_values.empty())
        throw ConfigError("ra_sensitivity needs ra_values");
    if (p.scenario == Scenario::ensemble_size_study && p.ensemble_sizes.empty())
        throw ConfigError("ensemble_size_study needs ensemble_sizes");
    for (auto n : p.ensemble_sizes)
        if (n == 0 || n > p.n_members)
            throw ConfigError("ensemble_sizes entries must lie in [1, n_members]");
    if (!(p.window_time > 0.0) || !(p.spinup_time >= 0.0))
        throw ConfigError("window_time must be positive and spinup_time nonnegative");
    if (p.metric_every == 0) throw ConfigError("metric_every must be positive");
    if (p.mu < 0.0) throw ConfigError("mu must be nonnegative");
    if (p.mu == 0.0 && p.mu_candidates.empty()) throw ConfigError("mu_candidates is empty");
    if (p.workers == 0) throw ConfigError("workers must be positive");
    if (!(p.ra_assumed_factor > 0.0)) throw ConfigError("ra_assumed_factor must be positive");
}

inline constexpr std::string_view kPlanSection = "harness";

inline ExperimentPlan parse_plan(const std::string& text) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    std::istringstream is(text);
    try {
        pt::read_ini(is, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(std::string("plan syntax error: ") + e.what());
    }
    ExperimentPlan p;
    if (tree.empty()) return p;
    const auto section = tree.get_child_optional(std::string(kPlanSection));
    if (!section) throw ConfigError("missing [harness] section");
    using detail::parse_list;
    using detail::parse_number;
    for (const auto& [key, node] : *section) {
        const std::string& v = node.data();
        if (key == "scenario") p.scenario = parse_scenario(v);
        else if (key == "sigma_obs_grid") p.sigma_obs_grid = parse_list<double>(v, key);
        else if (key == "sigma_mod_grid") p.sigma_mod_grid = parse_list<double>(v, key);
        else if (key == "s_factors") p.s_factors = parse_list<std::size_t>(v, key);
        else if (key == "t_factors") p.t_factors = parse_list<std::size_t>(v, key);
        else if (key == "n_members") p.n_members = parse_number<std::size_t>(v, key);
        else if (key == "ensemble_sizes") p.ensemble_sizes = parse_list<std::size_t>(v, key);
        else if (key == "ra_values") p.ra_values = parse_list<double>(v, key);
        else if (key == "output_dir") p.output_dir = v;
        else if (key == "spinup_time") p.spinup_time = parse_number<double>(v, key);
        else if (key == "window_time") p.window_time = parse_number<double>(v, key);
        else if (key == "metric_every") p.metric_every = parse_number<std::size_t>(v, key);
        else if (key == "mu") p.mu = parse_number<double>(v, key);
        else if (key == "mu_candidates") p.mu_candidates = parse_list<double>(v, key);
        else if (key == "velocity_only") p.velocity_only = v == "true" || v == "1";
        else if (key == "base_seed") p.base_seed = parse_number<std::uint64_t>(v, key);
        else if (key == "workers") p.workers = parse_number<std::size_t>(v, key);
        else if (key == "n_trajectories") p.n_trajectories = parse_number<std::size_t>(v, key);
        else if (key == "ra_assumed_factor") p.ra_assumed_factor = parse_number<double>(v, key);
        else throw ConfigError("unknown plan key '" + key + "'");
    }
    validate(p);
    return p;
}

inline ExperimentPlan load_plan(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open plan file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_plan(ss.str());
}

inline std::string serialize(const ExperimentPlan& p) {
    using detail::format_double;
    using detail::format_list;
    std::ostringstream os;
    os << '[' << kPlanSection << "]\n"
       << "scenario = " << scenario_name(p.scenario) << '\n'
       << "sigma_obs_grid = " << format_list(p.sigma_obs_grid) << '\n'
       << "sigma_mod_grid = " << format_list(p.sigma_mod_grid) << '\n'
       << "s_factors = " << format_list(p.s_factors) << '\n'
       << "t_factors = " << format_list(p.t_factors) << '\n'
       << "n_members = " << p.n_members << '\n'
       << "ensemble_sizes = " << format_list(p.ensemble_sizes) << '\n'
       << "ra_values = " << format_list(p.ra_values) << '\n'
       << "output_dir = " << p.output_dir << '\n'
       << "spinup_time = " << format_double(p.spinup_time) << '\n'
       << "window_time = " << format_double(p.window_time) << '\n'
       << "metric_every = " << p.metric_every << '\n'
       << "mu = " << format_double(p.mu) << '\n'
       << "mu_candidates = " << format_list(p.mu_candidates) << '\n'
       << "velocity_only = " << (p.velocity_only ? "true" : "false") << '\n'
       << "base_seed = " << p.base_seed << '\n'
       << "workers = " << p.workers << '\n'
       << "n_trajectories = " << p.n_trajectories << '\n'
       << "ra_assumed_factor = " << format_double(p.ra_assumed_factor) << '\n';
    return os.str();
}

// ---------------------------------------------------------------------------------------
// Worker pool

/// Runs task(k) for k in [0, count) on `workers` threads. Tasks are statically partitioned
/// into contiguous blocks; each task must only write its own output slot. The first
/// exception, in block order, is rethrown after all threads have joined.
inline void parallel_for(std::size_t count, std::size_t workers,
                         const std::function<void(std::size_t)>& task) {
    workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(count, 1));
    if (workers == 1) {
        for (std::size_t k = 0; k < count; ++k) task(k);
        return;
    }
    std::vector<std::exception_ptr> errors(workers);
    {
        std::vector<std::jthread> pool;
        pool.reserve(workers);
        const std::size_t block = (count + workers - 1) / workers;
        for (std::size_t w = 0; w < workers; ++w) {
            const std::size_t begin = w * block, end = std::min(count, begin + block);
            if (begin >= end) break;
            pool.emplace_back([&task, &errors, w, begin, end] {
                try {
                    for (std::size_t k = begin; k < end; ++k) task(k);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
    }
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------------------
// Reference generation

struct ObservationKey {
    std::size_t s = 4;
    std::size_t t = 4;
    friend auto operator<=>(const ObservationKey&, const ObservationKey&) = default;
};

/// Fine reference over the assimilation window plus noise-free observations for each
/// requested (S, T). The fine trajectory keeps every `metric_every`-th step of the window;
/// observations are taken from every fine step, so T counts fine steps.
struct ReferenceData {
    Trajectory fine;
    std::map<ObservationKey, CoarseObservation> observations;
    double max_relative_divergence = 0.0;
    double max_cfl = 0.0;
};

inline ReferenceData generate_reference(RunConfig config, double spinup_time, double window_time,
                                        const std::vector<ObservationKey>& keys,
                                        std::size_t metric_every) {
    const double dt = config.time.dt;
    const auto spin = static_cast<std::size_t>(std::llround(spinup_time / dt));
    const auto window = static_cast<std::size_t>(std::llround(window_time / dt));
    config.time.t_final = static_cast<double>(spin + window) * dt;
    config.time.save_every = metric_every;
    std::vector<std::size_t> s_factors;
    for (const auto& k : keys) s_factors.push_back(k.s);
    validate(config, s_factors);

    ReferenceData ref;
    ref.fine.config = config;
    ref.fine.save_every = metric_every;
    ref.fine.provenance_hash = config_hash(config);
    std::vector<std::pair<ObservationKey, ObservationRecorder>> recorders;
    for (const auto& k : keys) recorders.emplace_back(k, ObservationRecorder(config, k.s, k.t, spin));
    Field2D div(config.grid.nx, config.grid.ny);
    integrate(init_random(config), config, spin + window,
              [&](const FieldState& s, std::size_t n) {
                  ref.max_cfl = std::max(ref.max_cfl, cfl_number(s, config.grid, dt));
                  if (n < spin) return;
                  for (auto& [k, rec] : recorders) rec(s, n);
                  if ((n - spin) % metric_every == 0) {
                      ref.max_relative_divergence =
                          std::max(ref.max_relative_divergence, relative_divergence(s, config.grid));
                      ref.fine.snapshots.push_back(s);
                  }
              });
    for (auto& [k, rec] : recorders) {
        CoarseObservation obs = rec.take();
        obs.source_hash = ref.fine.provenance_hash;
        ref.observations.emplace(k, std::move(obs));
    }
    return ref;
}

// ---------------------------------------------------------------------------------------
// Ensembles of CDA runs

struct EnsembleSpec {
    double sigma_obs = 0.0;
    double sigma_mod = 0.0; ///< relative Rayleigh-number error of the CDA model
    std::size_t n_members = 1;
    std::uint64_t base_seed = 0;
    NudgingParams nudging = NudgingParams::uniform(10.0);
    std::size_t workers = 1;
    double t_window = 0.0; ///< 0: the whole reference window
    /// Window steps (multiples of the reference cadence) at which member fields are kept.
    /// Empty: up to four evenly spaced steps in the final quarter of the window.
    std::vector<std::size_t> keep_steps;
};

struct MemberResult {
    std::size_t index = 0;
    std::uint64_t seed = 0;
    bool failed = false;
    std::string error;
    std::array<MetricSeries, 4> metrics;
    std::vector<FieldState> kept;
};

struct EnsembleResult {
    EnsembleSpec spec;
    PhysicalParams cda_params;
    ObservationKey key;
    std::vector<double> times;
    std::vector<std::size_t> keep_steps;
    std::vector<MemberResult> members;
    std::array<std::vector<double>, 4> lambda; ///< Lambda(t) per variable
    std::array<MetricSeries, 4> mean_field;    ///< metrics of the ensemble-mean field at keep_steps
    std::array<SummaryStats, 4> plateau;       ///< plateau RRMSE over successful members

    std::size_t failed_count() const {
        return static_cast<std::size_t>(
            std::count_if(members.begin(), members.end(), [](const auto& m) { return m.failed; }));
    }
    bool complete() const { return failed_count() == 0; }

    std::vector<double> plateau_rrmse(Variable var, std::size_t first_n = SIZE_MAX) const {
        std::vector<double> out;
        for (const auto& m : members) {
            if (m.index >= first_n) break;
            if (!m.failed) out.push_back(rbcda::plateau_rrmse(m.metrics[static_cast<int>(var)]));
        }
        return out;
    }

    double plateau_lambda(Variable var) const { return tail_mean(lambda[static_cast<int>(var)]); }

    std::vector<Field2D> kept_fields(Variable var, std::size_t keep_index) const {
        std::vector<Field2D> out;
        for (const auto& m : members)
            if (!m.failed) out.push_back(get(m.kept.at(keep_index), var));
        return out;
    }
};

inline std::vector<std::size_t> default_keep_steps(std::size_t window_steps, std::size_t every) {
    const std::size_t last = window_steps / every;
    if (last == 0) return {0};
    const std::size_t first = last - (last + 3) / 4 + 1;
    const std::size_t span = last - first + 1;
    const std::size_t stride = std::max<std::size_t>(1, (span + 3) / 4);
    std::vector<std::size_t> out;
    for (std::size_t k = last + 1; k-- > first;) {
        if ((last - k) % stride == 0) out.push_back(k * every);
    }
    std::reverse(out.begin(), out.end());
    return out;
}

/// Downscales `n_members` noisy realisations of `clean` (member m uses seed base_seed + m)
/// and scores each against `reference`, whose snapshots must start at the first observation
/// and be `reference.save_every` fine steps apart. Members run in parallel; a failing member
/// is recorded and does not stop the others.
inline EnsembleResult run_ensemble(const CoarseObservation& clean, const Trajectory& reference,
                                   const EnsembleSpec& spec) {
    if (spec.n_members == 0) throw ConfigError("ensemble needs at least one member");
    if (reference.snapshots.empty()) throw ConfigError("empty reference trajectory");
    if (clean.snapshots.empty() || clean.snapshots[0].time != reference.snapshots[0].time)
        throw ConfigError("observation and reference windows do not start together");
    spec.nudging.validate();

    RunConfig cda_config = reference.config;
    if (spec.sigma_mod > 0.0)
        cda_config.physical = perturb_cda_model(
            cda_config.physical, relative_rayleigh_error(cda_config.physical.rayleigh, spec.sigma_mod));
    const std::size_t every = reference.save_every;
    std::size_t window_steps = (reference.snapshots.size() - 1) * every;
    if (spec.t_window > 0.0) {
        const auto requested =
            static_cast<std::size_t>(std::llround(spec.t_window / cda_config.time.dt));
        if (requested > window_steps) throw ConfigError("t_window exceeds the reference window");
        window_steps = requested - requested % every;
    }
    const double t_window = static_cast<double>(window_steps) * cda_config.time.dt;
    const InterpolationOperator op(cda_config.grid, clean.s_factor);
    const double cell_area = cda_config.grid.cell_area();

    EnsembleResult result;
    result.spec = spec;
    result.cda_params = cda_config.physical;
    result.key = {clean.s_factor, clean.t_factor};
    result.keep_steps = spec.keep_steps.empty() ? default_keep_steps(window_steps, every)
                                                : spec.keep_steps;
    for (auto k : result.keep_steps)
        if (k % every != 0 || k > window_steps)
            throw ConfigError("keep step is not a scored step of the window");
    for (std::size_t k = 0; k <= window_steps / every; ++k)
        result.times.push_back(reference.snapshots[k].time);
    result.members.resize(spec.n_members);

    parallel_for(spec.n_members, spec.workers, [&](std::size_t m) {
        MemberResult& out = result.members[m];
        out.index = m;
        out.seed = spec.base_seed + m;
        for (Variable var : kAllVariables) out.metrics[static_cast<int>(var)].variable = var;
        try {
            const CoarseObservation noisy = add_obs_noise(clean, spec.sigma_obs, out.seed);
            std::size_t next_keep = 0;
            run_cda(noisy, cda_config, spec.nudging, op, t_window,
                    [&](const CdaState& s, std::size_t n) {
                        if (n % every != 0) return;
                        const FieldState& ref = reference.snapshots[n / every];
                        for (Variable var : kAllVariables)
                            out.metrics[static_cast<int>(var)].append(s.time, get(ref, var),
                                                                      get(s, var), cell_area);
                        if (next_keep < result.keep_steps.size() &&
                            result.keep_steps[next_keep] == n) {
                            out.kept.push_back(s);
                            ++next_keep;
                        }
                    });
        } catch (const std::exception& e) {
            out.failed = true;
            out.error = e.what();
            out.kept.clear();
        }
    });

    // Aggregation happens after the joins, in member order.
    std::vector<const MemberResult*> ok;
    for (const auto& m : result.members)
        if (!m.failed) ok.push_back(&m);
    for (Variable var : kAllVariables) {
        const int v = static_cast<int>(var);
        result.mean_field[v].variable = var;
        if (ok.empty()) continue;
        auto& lam = result.lambda[v];
        lam.assign(result.times.size(), 0.0);
        for (const auto* m : ok)
            for (std::size_t k = 0; k < lam.size(); ++k) lam[k] += m->metrics[v].sq_error_integral[k];
        for (double& x : lam) x /= static_cast<double>(ok.size());
        std::vector<double> plateaus;
        for (const auto* m : ok) plateaus.push_back(rbcda::plateau_rrmse(m->metrics[v]));
        result.plateau[v] = summarize(plateaus);
        for (std::size_t k = 0; k < result.keep_steps.size(); ++k) {
            std::vector<Field2D> fields;
            for (const auto* m : ok) fields.push_back(get(m->kept[k], var));
            const std::size_t step = result.keep_steps[k];
            result.mean_field[v].append(reference.snapshots[step / every].time,
                                        get(reference.snapshots[step / every], var),
                                        ensemble_mean(fields), cell_area);
        }
    }
    return result;
}

/// Ensemble-mean improvement of one variable: plateau RRMSE of the mean field (averaged over
/// the kept steps) against the best member's plateau RRMSE.
inline MeanImprovement ensemble_mean_improvement(const EnsembleResult& r, Variable var) {
    const auto members = r.plateau_rrmse(var);
    const auto& mf = r.mean_field[static_cast<int>(var)].rrmse;
    return ensemble_mean_improvement(members, tail_mean(mf, 1.0));
}

// ---------------------------------------------------------------------------------------
// CSV reports. Every row repeats the cell's full parameter tuple and seeds.

struct CellParams {
    std::string scenario;
    double ra = 0.0;
    double ra_model = 0.0;
    double pr = 0.0;
    std::size_t s = 0, t = 0;
    double sigma_obs = 0.0, sigma_mod = 0.0;
    double mu_u = 0.0, mu_t = 0.0;
    std::size_t n_members = 0;
    std::uint64_t ref_seed = 0, base_seed = 0;
    std::size_t nx = 0, ny = 0;
    double dt = 0.0;
    double t_start = 0.0, t_window = 0.0;
};

inline CellParams cell_params(const std::string& scenario, const RunConfig& ref_config,
                              const EnsembleResult& r) {
    return CellParams{scenario,
                      ref_config.physical.rayleigh,
                      r.cda_params.rayleigh,
                      ref_config.physical.prandtl,
                      r.key.s,
                      r.key.t,
                      r.spec.sigma_obs,
                      r.spec.sigma_mod,
                      r.spec.nudging.mu_u,
                      r.spec.nudging.mu_t,
                      r.spec.n_members,
                      ref_config.seed,
                      r.spec.base_seed,
                      ref_config.grid.nx,
                      ref_config.grid.ny,
                      ref_config.time.dt,
                      r.times.front(),
                      r.times.back() - r.times.front()};
}

inline constexpr const char* kCellHeader =
    "scenario,ra,ra_model,pr,s,t,sigma_obs,sigma_mod,mu_u,mu_t,n_members,ref_seed,base_seed,nx,ny,"
    "dt,t_start,t_window";

inline std::ostream& operator<<(std::ostream& os, const CellParams& c) {
    using detail::format_double;
    return os << c.scenario << ',' << format_double(c.ra) << ',' << format_double(c.ra_model)
              << ',' << format_double(c.pr) << ',' << c.s << ',' << c.t << ','
              << format_double(c.sigma_obs) << ',' << format_double(c.sigma_mod) << ','
              << format_double(c.mu_u) << ',' << format_double(c.mu_t) << ',' << c.n_members
              << ',' << c.ref_seed << ',' << c.base_seed << ',' << c.nx << ',' << c.ny << ','
              << format_double(c.dt) << ',' << format_double(c.t_start) << ','
              << format_double(c.t_window);
}

inline void write_member_metrics_header(std::ostream& os) {
    os << kCellHeader << ",member,member_seed,failed,variable,time,mae,rmse,rrmse\n";
}

inline void write_member_metrics(std::ostream& os, const CellParams& cell,
                                 const EnsembleResult& r) {
    using detail::format_double;
    for (const auto& m : r.members) {
        if (m.failed) {
            os << cell << ',' << m.index << ',' << m.seed << ",1,,,,,\n";
            continue;
        }
        for (const auto& series : m.metrics)
            for (std::size_t k = 0; k < series.size(); ++k)
                os << cell << ',' << m.index << ',' << m.seed << ",0,"
                   << variable_name(series.variable) << ',' << format_double(series.times[k])
                   << ',' << format_double(series.mae[k]) << ',' << format_double(series.rmse[k])
                   << ',' << format_double(series.rrmse[k]) << '\n';
    }
}

inline void write_summary_header(std::ostream& os) {
    os << kCellHeader
       << ",n_failed,complete,variable,plateau_rrmse_mean,plateau_rrmse_std,plateau_rrmse_min,"
          "plateau_rrmse_q1,plateau_rrmse_median,plateau_rrmse_q3,plateau_rrmse_max,"
          "plateau_lambda,mean_field_rrmse,improvement_factor\n";
}

inline void write_summary(std::ostream& os, const CellParams& cell, const EnsembleResult& r) {
    using detail::format_double;
    for (Variable var : kAllVariables) {
        const int v = static_cast<int>(var);
        os << cell << ',' << r.failed_count() << ',' << (r.complete() ? 1 : 0) << ','
           << variable_name(var);
        if (r.failed_count() == r.members.size()) {
            os << ",,,,,,,,,,\n";
            continue;
        }
        const auto& p = r.plateau[v];
        const auto imp = ensemble_mean_improvement(r, var);
        os << ',' << format_double(p.mean) << ',' << format_double(p.stddev) << ','
           << format_double(p.min) << ',' << format_double(p.q1) << ',' << format_double(p.median)
           << ',' << format_double(p.q3) << ',' << format_double(p.max) << ','
           << format_double(r.plateau_lambda(var)) << ','
           << format_double(imp.mean_field_rrmse) << ',' << format_double(imp.factor) << '\n';
    }
}

inline void write_lambda_header(std::ostream& os) {
    os << kCellHeader << ",variable,time,lambda\n";
}

inline void write_lambda(std::ostream& os, const CellParams& cell, const EnsembleResult& r) {
    using detail::format_double;
    for (Variable var : kAllVariables) {
        const auto& lam = r.lambda[static_cast<int>(var)];
        for (std::size_t k = 0; k < lam.size(); ++k)
            os << cell << ',' << variable_name(var) << ',' << format_double(r.times[k]) << ','
               << format_double(lam[k]) << '\n';
    }
}

inline void write_ks_header(std::ostream& os) {
    os << kCellHeader << ",variable,line,time,point,statistic,p_value,degenerate\n";
}

inline void write_ks(std::ostream& os, const CellParams& cell, const EnsembleResult& r,
                     Variable var, SampleLine line, std::size_t keep_index) {
    using detail::format_double;
    const auto fields = r.kept_fields(var, keep_index);
    const auto results = ks_normality(line_samples(fields, line));
    const double time = r.members.front().kept.at(keep_index).time;
    for (std::size_t p = 0; p < results.size(); ++p)
        os << cell << ',' << variable_name(var) << ','
           << (line == SampleLine::horizontal_midline ? "midline" : "centerline") << ','
           << format_double(time) << ',' << p << ','
           << format_double(results[p].statistic) << ',' << format_double(results[p].p_value)
           << ',' << (results[p].degenerate ? 1 : 0) << '\n';
}

struct PowerLawRow {
    std::string scenario;
    double ra = 0.0;
    std::size_t s = 0, t = 0;
    std::string swept;   ///< "sigma_obs" or "sigma_mod"
    double fixed = 0.0;  ///< value of the other noise level
    Variable variable = Variable::temperature;
    PowerLawFit fit;
    std::size_t n_members = 0;
    std::uint64_t ref_seed = 0, base_seed = 0;
};

inline void write_power_law_header(std::ostream& os) {
    os << "scenario,ra,s,t,swept,fixed_sigma,variable,exponent,prefactor,r_squared,points,"
          "n_members,ref_seed,base_seed\n";
}

inline void write_power_law(std::ostream& os, const PowerLawRow& row) {
    using detail::format_double;
    os << row.scenario << ',' << format_double(row.ra) << ',' << row.s << ',' << row.t << ','
       << row.swept << ',' << format_double(row.fixed) << ',' << variable_name(row.variable)
       << ',' << format_double(row.fit.exponent) << ',' << format_double(row.fit.prefactor) << ','
       << format_double(row.fit.r_squared) << ',' << row.fit.points_used << ',' << row.n_members
       << ',' << row.ref_seed << ',' << row.base_seed << '\n';
}

// ---------------------------------------------------------------------------------------
// Orchestration

inline std::vector<ObservationKey> observation_keys(const ExperimentPlan& plan) {
    std::vector<ObservationKey> keys;
    for (auto s : plan.s_factors)
        for (auto t : plan.t_factors) keys.push_back({s, t});
    return keys;
}

inline std::vector<double> rayleigh_values(const ExperimentPlan& plan, const RunConfig& config) {
    return plan.ra_values.empty() ? std::vector<double>{config.physical.rayleigh} : plan.ra_values;
}

inline RunConfig with_rayleigh(RunConfig c, double ra) {
    c.physical.rayleigh = ra;
    return c;
}

inline std::string ra_tag(double ra) {
    std::ostringstream os;
    os << std::setprecision(6) << ra;
    return os.str();
}

inline std::string reference_path(const std::string& dir, double ra) {
    return (std::filesystem::path(dir) / ("reference_Ra" + ra_tag(ra) + ".traj")).string();
}

inline std::string observation_path(const std::string& dir, double ra, ObservationKey k) {
    return (std::filesystem::path(dir) / ("obs_Ra" + ra_tag(ra) + "_S" + std::to_string(k.s) +
                                          "_T" + std::to_string(k.t) + ".obs"))
        .string();
}

/// Generates and persists the reference trajectory and noise-free observations for every
/// Rayleigh number of the plan. Returns the written paths.
inline std::vector<std::string> run_reference(const ExperimentPlan& plan, const RunConfig& config) {
    validate(plan);
    std::vector<std::string> paths;
    std::filesystem::create_directories(plan.output_dir);
    for (double ra : rayleigh_values(plan, config)) {
        const RunConfig c = with_rayleigh(config, ra);
        const ReferenceData ref = generate_reference(c, plan.spinup_time, plan.window_time,
                                                     observation_keys(plan), plan.metric_every);
        paths.push_back(reference_path(plan.output_dir, ra));
        write_trajectory(ref.fine, paths.back());
        for (const auto& [k, obs] : ref.observations) {
            paths.push_back(observation_path(plan.output_dir, ra, k));
            write_observation(obs, paths.back());
        }
    }
    return paths;
}

struct SweepReport {
    std::vector<EnsembleResult> cells;
    std::vector<CellParams> params;
    std::vector<PowerLawRow> fits;
    std::map<std::pair<double, ObservationKey>, TuneResult> tuning;
};

/// Runs every (Ra, S, T, sigma_obs, sigma_mod) cell of the plan and writes the CSV reports
/// into plan.output_dir. References are read from the output directory when present and
/// generated otherwise.
inline SweepReport run_cda_sweep(const ExperimentPlan& plan, const RunConfig& config,
                                 std::ostream* log = nullptr) {
    validate(plan);
    std::filesystem::create_directories(plan.output_dir);
    SweepReport report;
    const std::string scen = scenario_name(plan.scenario);
    const auto keys = observation_keys(plan);
    std::vector<double> sobs = plan.sigma_obs_grid, smod = plan.sigma_mod_grid;
    if (plan.scenario == Scenario::cda_model_noise) sobs = {0.0};
    if (plan.scenario == Scenario::cda_obs_noise || plan.scenario == Scenario::ensemble_size_study ||
        plan.scenario == Scenario::st_sensitivity || plan.scenario == Scenario::ra_sensitivity)
        smod = {0.0};

    for (double ra : rayleigh_values(plan, config)) {
        const RunConfig c = with_rayleigh(config, ra);
        ReferenceData ref;
        const auto rpath = reference_path(plan.output_dir, ra);
        bool have_files = std::filesystem::exists(rpath);
        for (const auto& k : keys)
            have_files = have_files && std::filesystem::exists(observation_path(plan.output_dir, ra, k));
        if (have_files) {
            ref.fine = read_trajectory(rpath);
            for (const auto& k : keys)
                ref.observations.emplace(k, read_observation(observation_path(plan.output_dir, ra, k)));
        } else {
            ref = generate_reference(c, plan.spinup_time, plan.window_time, keys, plan.metric_every);
        }
        for (const auto& k : keys) {
            const CoarseObservation& clean = ref.observations.at(k);
            NudgingParams nudging = plan.velocity_only ? NudgingParams::velocity(plan.mu)
                                                       : NudgingParams::uniform(plan.mu);
            if (plan.mu == 0.0) {
                TuneOptions opt;
                opt.t_window = plan.window_time;
                opt.velocity_only = plan.velocity_only;
                auto tuned = tune_mu(clean, ref.fine.config, InterpolationOperator(ref.fine.config.grid, k.s),
                                     plan.mu_candidates, opt);
                nudging = tuned.nudging;
                if (log)
                    *log << "tuned mu_u=" << nudging.mu_u << " mu_t=" << nudging.mu_t << " for Ra=" << ra
                         << " S=" << k.s << " T=" << k.t
                         << (tuned.converged ? "" : " (no candidate reached the tolerance)") << '\n';
                report.tuning.emplace(std::make_pair(ra, k), std::move(tuned));
            }
            for (double so : sobs) {
                for (double sm : smod) {
                    EnsembleSpec spec;
                    spec.sigma_obs = so;
                    spec.sigma_mod = sm;
                    spec.n_members = plan.n_members;
                    spec.base_seed = plan.base_seed;
                    spec.nudging = nudging;
                    spec.workers = plan.workers;
                    report.cells.push_back(run_ensemble(clean, ref.fine, spec));
                    report.params.push_back(cell_params(scen, ref.fine.config, report.cells.back()));
                    if (log)
                        *log << "cell Ra=" << ra << " S=" << k.s << " T=" << k.t << " sigma_obs=" << so
                             << " sigma_mod=" << sm << " failed=" << report.cells.back().failed_count()
                             << '\n';
                }
            }
            // Power-law fits of the temperature plateau Lambda against each noise level.
            auto fit_group = [&](bool over_obs) {
                const auto& outer = over_obs ? smod : sobs;
                for (double fixed : outer) {
                    std::vector<double> xs, ys;
                    for (std::size_t ci = 0; ci < report.cells.size(); ++ci) {
                        const auto& cell = report.cells[ci];
                        const auto& p = report.params[ci];
                        if (p.ra != ra || cell.key != k || cell.failed_count() == cell.members.size())
                            continue;
                        const double other = over_obs ? cell.spec.sigma_mod : cell.spec.sigma_obs;
                        const double x = over_obs ? cell.spec.sigma_obs : cell.spec.sigma_mod;
                        if (other != fixed || !(x > 0.0)) continue;
                        xs.push_back(x);
                        ys.push_back(cell.plateau_lambda(Variable::temperature));
                    }
                    if (xs.size() < 3) continue;
                    report.fits.push_back({scen, ra, k.s, k.t, over_obs ? "sigma_obs" : "sigma_mod",
                                           fixed, Variable::temperature, fit_power_law(xs, ys),
                                           plan.n_members, ref.fine.config.seed, plan.base_seed});
                }
            };
            fit_group(true);
            fit_group(false);
        }
    }

    const std::filesystem::path dir(plan.output_dir);
    std::ofstream members(dir / "member_metrics.csv"), summary(dir / "ensemble_summary.csv"),
        lambda_csv(dir / "lambda.csv"), fits(dir / "power_law.csv"), ks(dir / "ks_normality.csv");
    write_member_metrics_header(members);
    write_summary_header(summary);
    write_lambda_header(lambda_csv);
    write_power_law_header(fits);
    write_ks_header(ks);
    for (std::size_t ci = 0; ci < report.cells.size(); ++ci) {
        const auto& cell = report.cells[ci];
        const auto& p = report.params[ci];
        write_member_metrics(members, p, cell);
        write_summary(summary, p, cell);
        write_lambda(lambda_csv, p, cell);
        if (cell.members.size() - cell.failed_count() >= kKsMinMembers && !cell.keep_steps.empty()) {
            const std::size_t last = cell.keep_steps.size() - 1;
            write_ks(ks, p, cell, Variable::temperature, SampleLine::horizontal_midline, last);
            write_ks(ks, p, cell, Variable::temperature, SampleLine::vertical_centerline, last);
        }
    }
    for (const auto& row : report.fits) write_power_law(fits, row);

    if (plan.scenario == Scenario::ensemble_size_study) {
        std::ofstream sizes(dir / "ensemble_size.csv");
        sizes << kCellHeader
              << ",ensemble_size,variable,plateau_rrmse_mean,plateau_rrmse_std,plateau_rrmse_median,"
                 "relative_change_vs_largest\n";
        for (std::size_t ci = 0; ci < report.cells.size(); ++ci) {
            const auto& cell = report.cells[ci];
            const auto full = cell.plateau_rrmse(Variable::temperature);
            if (full.empty()) continue;
            const double ref_mean = summarize(full).mean;
            for (auto n : plan.ensemble_sizes) {
                const auto sub = cell.plateau_rrmse(Variable::temperature, n);
                if (sub.empty()) continue;
                const auto st = summarize(sub);
                using detail::format_double;
                sizes << report.params[ci] << ',' << n << ",T," << format_double(st.mean) << ','
                      << format_double(st.stddev) << ',' << format_double(st.median) << ','
                      << format_double(std::abs(st.mean - ref_mean) / ref_mean) << '\n';
            }
        }
    }
    return report;
}

// ---------------------------------------------------------------------------------------
// Imperfect training data

struct Scenario3Pair {
    std::size_t index = 0;
    std::uint64_t seed = 0;
    double ra_true = 0.0;
    double ra_assumed = 0.0;
    double plateau_rrmse_t = 0.0;
    std::string reference_path, observation_path, downscaled_path;
};

/// Reference trajectories at the true Rayleigh number (seed config.seed + k) paired with CDA
/// downscaled counterparts computed with Ra * ra_assumed_factor. Uses the first (S, T) of the
/// plan. Writes the pair files and scenario3.csv when `write` is set.
inline std::vector<Scenario3Pair> generate_scenario3_data(const ExperimentPlan& plan,
                                                          const RunConfig& config,
                                                          bool write = true) {
    validate(plan);
    if (plan.n_trajectories == 0) throw ConfigError("n_trajectories must be positive");
    const ObservationKey key{plan.s_factors.front(), plan.t_factors.front()};
    const double ra = rayleigh_values(plan, config).front();
    const double mu = plan.mu > 0.0 ? plan.mu : 10.0;
    const NudgingParams nudging =
        plan.velocity_only ? NudgingParams::velocity(mu) : NudgingParams::uniform(mu);
    std::vector<Scenario3Pair> pairs(plan.n_trajectories);
    const std::filesystem::path dir(plan.output_dir);
    if (write) std::filesystem::create_directories(dir);

    parallel_for(plan.n_trajectories, plan.workers, [&](std::size_t k) {
        RunConfig c = with_rayleigh(config, ra);
        c.seed = config.seed + k;
        const ReferenceData ref =
            generate_reference(c, plan.spinup_time, plan.window_time, {key}, plan.metric_every);
        const CoarseObservation& obs = ref.observations.at(key);
        RunConfig cda = ref.fine.config;
        cda.physical = perturb_cda_model(
            cda.physical, ModelNoiseSpec{plan.ra_assumed_factor - 1.0,
                                         ModelNoiseSpec::Target::cda_rayleigh,
                                         ra * plan.ra_assumed_factor});
        const InterpolationOperator op(cda.grid, key.s);
        const Trajectory down = downscale(obs, cda, nudging, op, plan.window_time);
        MetricSeries m;
        for (std::size_t n = 0; n < down.snapshots.size() && n < ref.fine.snapshots.size(); ++n)
            m.append(down.snapshots[n].time, ref.fine.snapshots[n].temperature,
                     down.snapshots[n].temperature, cda.grid.cell_area());
        Scenario3Pair& p = pairs[k];
        p.index = k;
        p.seed = c.seed;
        p.ra_true = ra;
        p.ra_assumed = cda.physical.rayleigh;
        p.plateau_rrmse_t = plateau_rrmse(m);
        if (write) {
            const std::string stem = "scenario3_" + std::to_string(k);
            p.reference_path = (dir / (stem + "_reference.traj")).string();
            p.observation_path = (dir / (stem + "_obs.obs")).string();
            p.downscaled_path = (dir / (stem + "_downscaled.traj")).string();
            write_trajectory(ref.fine, p.reference_path);
            write_observation(obs, p.observation_path);
            write_trajectory(down, p.downscaled_path);
        }
    });
    if (write) {
        std::ofstream csv(dir / "scenario3.csv");
        csv << "index,seed,ra_true,ra_assumed,s,t,mu_u,mu_t,plateau_rrmse_T,reference,observation,"
               "downscaled\n";
        using detail::format_double;
        for (const auto& p : pairs)
            csv << p.index << ',' << p.seed << ',' << format_double(p.ra_true) << ','
                << format_double(p.ra_assumed) << ',' << key.s << ',' << key.t << ','
                << format_double(nudging.mu_u) << ',' << format_double(nudging.mu_t) << ','
                << format_double(p.plateau_rrmse_t) << ',' << p.reference_path << ','
                << p.observation_path << ',' << p.downscaled_path << '\n';
    }
    return pairs;
}

} // namespace rbcda
