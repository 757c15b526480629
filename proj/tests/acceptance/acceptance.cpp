// Desk-scale acceptance run: prints one PASS/FAIL line per criterion and exits nonzero
// when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "manufactured.hpp"
#include "rbcda/harness.hpp"
#include "support.hpp"

using namespace rbcda;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

struct Settings {
    std::size_t workers = 1;
    double spinup = 40.0;
    double window = 6.0;
    double ensemble_window = 3.0;
    std::size_t metric_every = 100;
    std::uint64_t seed = 1;
    bool verbose = false;
};

// ---------------------------------------------------------------------------------------
// 1, 2: invariants of a plain run

struct PlainRun {
    std::size_t snapshots = 0;
    double max_divergence = 0.0;
    double max_cfl = 0.0;
};

const PlainRun& plain_run(const Settings& s) {
    static std::optional<PlainRun> run;
    if (!run) {
        RunConfig c = desk_config();
        c.seed = s.seed;
        c.time.save_every = 100;
        PlainRun r;
        integrate(init_random(c), c, 20000, [&](const FieldState& st, std::size_t n) {
            r.max_cfl = std::max(r.max_cfl, cfl_number(st, c.grid, c.time.dt));
            if (n % c.time.save_every == 0) {
                ++r.snapshots;
                r.max_divergence = std::max(r.max_divergence, relative_divergence(st, c.grid));
            }
        });
        run = r;
    }
    return *run;
}

Outcome divergence_free(const Settings& s) {
    const PlainRun& r = plain_run(s);
    return {r.max_divergence <= 1e-10 && r.snapshots == 201,
            fmt("max relative divergence %.3e over %zu snapshots of 20000 steps", r.max_divergence,
                r.snapshots)};
}

Outcome cfl_bound(const Settings& s) {
    const PlainRun& r = plain_run(s);
    return {r.max_cfl < 0.15, fmt("max CFL %.4f over 20000 steps", r.max_cfl)};
}

// ---------------------------------------------------------------------------------------
// 3, 4: convergence orders

Outcome temporal_order(const Settings&) {
    auto solve = [](double dt) {
        return integrate_scalar([](double y) { return -y; }, 1.0, dt,
                                static_cast<std::size_t>(std::llround(1.0 / dt)));
    };
    const double y1 = solve(1e-2), y2 = solve(5e-3), y3 = solve(2.5e-3);
    const double order = std::log2((y1 - y2) / (y2 - y3));
    return {order >= 2.8, fmt("observed order %.3f (y(1) = %.12f)", order, y3)};
}

Outcome spatial_order(const Settings&) {
    const auto e1 = rbcda::testing::manufactured_errors(48, 16);
    const auto e2 = rbcda::testing::manufactured_errors(96, 32);
    const auto e3 = rbcda::testing::manufactured_errors(192, 64);
    const double orders[] = {std::log2(e1.du / e2.du), std::log2(e2.du / e3.du),
                             std::log2(e1.dv / e2.dv), std::log2(e2.dv / e3.dv),
                             std::log2(e1.dT / e2.dT), std::log2(e2.dT / e3.dT)};
    const double worst = *std::min_element(std::begin(orders), std::end(orders));
    return {worst >= 1.8, fmt("orders u %.2f/%.2f v %.2f/%.2f T %.2f/%.2f, min %.3f", orders[0],
                              orders[1], orders[2], orders[3], orders[4], orders[5], worst)};
}

// ---------------------------------------------------------------------------------------
// 5-10: twin experiment at S = T = 4

struct Twin {
    ReferenceData ref;
    TuneResult tuning;
    const CoarseObservation& obs() const { return ref.observations.begin()->second; }
};

const Twin& twin(const Settings& s) {
    static std::optional<Twin> t;
    if (!t) {
        RunConfig c = desk_config();
        c.seed = s.seed;
        Twin tw;
        tw.ref = generate_reference(c, s.spinup, s.window, {{4, 4}}, s.metric_every);
        TuneOptions opt;
        opt.t_window = 5.0;
        const std::vector<double> grid{3.0, 10.0, 30.0, 100.0};
        tw.tuning = tune_mu(tw.obs(), tw.ref.fine.config,
                            InterpolationOperator(tw.ref.fine.config.grid, 4), grid, opt);
        if (s.verbose) {
            for (const auto& cand : tw.tuning.candidates)
                std::cerr << "  mu " << cand.mu << ": converged " << cand.converged << " plateau at t+"
                          << cand.time_to_plateau << " final misfit " << cand.final_misfit << '\n';
        }
        t = std::move(tw);
    }
    return *t;
}

Outcome noise_free_convergence(const Settings& s) {
    const Twin& tw = twin(s);
    const RunConfig& c = tw.ref.fine.config;
    const InterpolationOperator op(c.grid, 4);
    const std::size_t every = tw.ref.fine.save_every;
    std::vector<double> times, err;
    run_cda(tw.obs(), c, tw.tuning.nudging, op, s.window, [&](const CdaState& st, std::size_t n) {
        if (n % every != 0) return;
        const FieldState& r = tw.ref.fine.snapshots[n / every];
        times.push_back(st.time - tw.obs().snapshots[0].time);
        err.push_back(*rrmse(r.temperature.values(), st.temperature.values()));
    });
    const double plateau = tail_mean(err);
    const double orders = std::log10(err.front() / plateau);
    // Decay window: from the cold start until the error first comes within 10x the plateau.
    std::size_t end = 0;
    while (end < err.size() && err[end] > 10.0 * plateau) ++end;
    std::vector<double> t_fit(times.begin(), times.begin() + end), log_err;
    for (std::size_t k = 0; k < end; ++k) log_err.push_back(std::log(err[k]));
    if (end < 3) return {false, fmt("decay window has only %zu samples", end)};
    const LinearFit fit = fit_line(t_fit, log_err);
    return {orders >= 3.0 && fit.r_squared >= 0.9,
            fmt("mu %.0f (%s), T-RRMSE %.3e -> plateau %.3e (%.2f orders), decay rate %.3f over "
                "t in [0, %.2f], r^2 %.4f",
                tw.tuning.nudging.mu_u, tw.tuning.converged ? "tuned" : "untuned fallback",
                err.front(), plateau, orders, -fit.slope, t_fit.back(), fit.r_squared)};
}

EnsembleResult ensemble(const Settings& s, double sigma, std::size_t members) {
    const Twin& tw = twin(s);
    EnsembleSpec spec;
    spec.sigma_obs = sigma;
    spec.n_members = members;
    spec.base_seed = 1000;
    spec.nudging = tw.tuning.nudging;
    spec.workers = s.workers;
    spec.t_window = s.ensemble_window;
    return run_ensemble(tw.obs(), tw.ref.fine, spec);
}

Outcome lambda_scaling(const Settings& s) {
    const std::vector<double> sigmas{1e-3, 3e-3, 1e-2, 3e-2, 1e-1};
    std::vector<double> lam_t, lam_u, lam_v;
    std::size_t failed = 0;
    for (double sigma : sigmas) {
        const EnsembleResult r = ensemble(s, sigma, 20);
        failed += r.failed_count();
        if (r.failed_count() == r.members.size()) return {false, fmt("every member failed at sigma %g", sigma)};
        lam_t.push_back(r.plateau_lambda(Variable::temperature));
        lam_u.push_back(r.plateau_lambda(Variable::u));
        lam_v.push_back(r.plateau_lambda(Variable::v));
    }
    const PowerLawFit ft = fit_power_law(sigmas, lam_t);
    const PowerLawFit fu = fit_power_law(sigmas, lam_u);
    const PowerLawFit fv = fit_power_law(sigmas, lam_v);
    return {std::abs(ft.exponent - 2.0) <= 0.3 && failed == 0,
            fmt("Lambda_T exponent %.3f (r^2 %.4f, prefactor %.3e); u %.3f, v %.3f; %zu failed members",
                ft.exponent, ft.r_squared, ft.prefactor, fu.exponent, fv.exponent, failed)};
}

const EnsembleResult& big_ensemble(const Settings& s) {
    static std::optional<EnsembleResult> r;
    if (!r) r = ensemble(s, 0.01, 100);
    return *r;
}

Outcome ensemble_mean_beats_members(const Settings& s) {
    const EnsembleResult& r = big_ensemble(s);
    constexpr std::size_t n = 50;
    const auto plateaus = r.plateau_rrmse(Variable::temperature, n);
    if (plateaus.size() != n) return {false, fmt("%zu of %zu members succeeded", plateaus.size(), n)};
    double mean_rrmse = 0.0;
    for (std::size_t k = 0; k < r.keep_steps.size(); ++k) {
        std::vector<Field2D> fields;
        for (const auto& m : r.members)
            if (m.index < n) fields.push_back(m.kept.at(k).temperature);
        const auto& truth = twin(s).ref.fine.snapshots[r.keep_steps[k] / twin(s).ref.fine.save_every];
        mean_rrmse += *rrmse(truth.temperature.values(), ensemble_mean(fields).values());
    }
    mean_rrmse /= static_cast<double>(r.keep_steps.size());
    const MeanImprovement imp = ensemble_mean_improvement(plateaus, mean_rrmse);
    return {mean_rrmse < imp.min_member_rrmse,
            fmt("ensemble-mean T-RRMSE %.4e vs best member %.4e, factor %.2f", mean_rrmse,
                imp.min_member_rrmse, imp.factor)};
}

Outcome ensemble_size_stability(const Settings& s) {
    const EnsembleResult& r = big_ensemble(s);
    const auto all = r.plateau_rrmse(Variable::temperature);
    const auto first = r.plateau_rrmse(Variable::temperature, 20);
    if (all.size() != 100 || first.size() != 20)
        return {false, fmt("%zu of 100 members succeeded", all.size())};
    const double m100 = summarize(all).mean, m20 = summarize(first).mean;
    const double change = std::abs(m20 - m100) / m100;
    return {change < 0.03, fmt("mean plateau T-RRMSE 20 members %.5e, 100 members %.5e, change %.3f%%",
                               m20, m100, 100.0 * change)};
}

Outcome noise_flatness(const Settings& s) {
    const EnsembleResult& r = big_ensemble(s);
    const SummaryStats st = summarize(r.plateau_rrmse(Variable::temperature));
    const double ratio = st.stddev / st.mean;
    return {ratio < 0.05 && st.count == 100,
            fmt("plateau T-RRMSE mean %.5e, std %.3e, std/mean %.3f%% over %zu members", st.mean,
                st.stddev, 100.0 * ratio, st.count)};
}

Outcome ks_normality_midline(const Settings& s) {
    const EnsembleResult& r = big_ensemble(s);
    std::vector<Field2D> fields;
    for (const auto& m : r.members)
        if (m.index < 50 && !m.failed) fields.push_back(m.kept.back().temperature);
    if (fields.size() != 50) return {false, fmt("%zu of 50 members succeeded", fields.size())};
    const auto results = ks_normality(line_samples(fields, SampleLine::horizontal_midline));
    const auto kept = std::count_if(results.begin(), results.end(),
                                    [](const KsResult& k) { return !k.degenerate && k.p_value >= 0.05; });
    const double frac = static_cast<double>(kept) / static_cast<double>(results.size());
    return {frac >= 0.9, fmt("%ld of %zu midline points not rejected at alpha 0.05 (%.1f%%)",
                             static_cast<long>(kept), results.size(), 100.0 * frac)};
}

// ---------------------------------------------------------------------------------------
// 11: metric oracles and byte-exact I/O

Outcome oracles_and_io(const Settings&) {
    RandomStream rng(2024);
    const GridSpec g{8, 8, 3.0, 1.0};
    double worst = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        const Field2D ref = rbcda::testing::random_field(8, 8, rng, 2.0);
        std::vector<Field2D> members;
        for (int m = 0; m < 5; ++m) members.push_back(rbcda::testing::random_field(8, 8, rng, 2.0));
        double abs_sum = 0.0, sq = 0.0, ref_sq = 0.0, lam = 0.0;
        for (std::size_t j = 0; j < 8; ++j) {
            for (std::size_t i = 0; i < 8; ++i) {
                const double e = members[0](i, j) - ref(i, j);
                abs_sum += std::abs(e);
                sq += e * e;
                ref_sq += ref(i, j) * ref(i, j);
            }
        }
        for (const auto& m : members)
            for (std::size_t j = 0; j < 8; ++j)
                for (std::size_t i = 0; i < 8; ++i)
                    lam += (m(i, j) - ref(i, j)) * (m(i, j) - ref(i, j)) * g.dx() * g.dy();
        lam /= 5.0;
        const double got[] = {mae(ref.values(), members[0].values()), rmse(ref.values(), members[0].values()),
                              *rrmse(ref.values(), members[0].values()), lambda(members, ref, g.cell_area())};
        const double want[] = {abs_sum / 64.0, std::sqrt(sq / 64.0), std::sqrt(sq / ref_sq), lam};
        for (int k = 0; k < 4; ++k) worst = std::max(worst, std::abs(got[k] - want[k]));
    }

    const auto dir = std::filesystem::temp_directory_path() / "rbcda_acceptance_io";
    std::filesystem::create_directories(dir);
    Trajectory t;
    t.config.grid = {16, 8, 3.0, 1.0};
    t.config.seed = 5;
    t.save_every = 7;
    t.provenance_hash = 0xfeedfacecafebeefull;
    for (std::uint64_t k = 0; k < 4; ++k) {
        t.snapshots.push_back(rbcda::testing::random_state(t.config.grid, k));
        t.snapshots.back().time = 0.1 * static_cast<double>(k);
    }
    t.snapshots[0].u(1, 1) = -0.0;
    const auto traj_path = (dir / "a.traj").string(), copy_path = (dir / "b.traj").string();
    write_trajectory(t, traj_path);
    const Trajectory back = read_trajectory(traj_path);
    write_trajectory(back, copy_path);
    auto bytes = [](const std::string& p) {
        std::ifstream in(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(in), {});
    };
    bool bitwise = back.snapshots.size() == t.snapshots.size() && bytes(traj_path) == bytes(copy_path);
    for (std::size_t k = 0; bitwise && k < t.snapshots.size(); ++k)
        for (Variable var : kAllVariables)
            bitwise = bitwise && std::memcmp(get(t.snapshots[k], var).data(), get(back.snapshots[k], var).data(),
                                             get(t.snapshots[k], var).size() * sizeof(double)) == 0;
    const CoarseObservation obs = add_obs_noise(coarsen(t, 2, 1), 0.1, 3);
    write_observation(obs, (dir / "o.obs").string());
    bitwise = bitwise && read_observation((dir / "o.obs").string()) == obs;
    std::filesystem::remove_all(dir);
    return {worst <= 1e-12 && bitwise,
            fmt("max |metric - oracle| %.2e over 200 random 8x8 cases; I/O round trip %s", worst,
                bitwise ? "bitwise" : "NOT bitwise")};
}

struct Criterion {
    int id;
    const char* name;
    std::function<Outcome(const Settings&)> run;
};

} // namespace

int main(int argc, char** argv) {
    Settings s;
    s.workers = std::max(1u, std::thread::hardware_concurrency());
    std::vector<int> only;
    CLI::App app{"desk-scale acceptance criteria"};
    app.add_option("--only", only, "criterion numbers to run (default: all)");
    app.add_option("--workers", s.workers, "threads for ensemble members");
    app.add_flag("--verbose", s.verbose, "print tuning details");
    CLI11_PARSE(app, argc, argv);

    const std::vector<Criterion> criteria{
        {1, "divergence-free", divergence_free},
        {2, "cfl-bound", cfl_bound},
        {3, "ab3-temporal-order", temporal_order},
        {4, "spatial-order", spatial_order},
        {5, "cda-noise-free-convergence", noise_free_convergence},
        {6, "lambda-sigma-quadratic", lambda_scaling},
        {7, "ensemble-mean-improvement", ensemble_mean_beats_members},
        {8, "ensemble-size-stability", ensemble_size_stability},
        {9, "observation-noise-flatness", noise_flatness},
        {10, "ks-normality", ks_normality_midline},
        {11, "metric-oracles-and-io", oracles_and_io},
    };
    const std::set<int> selected(only.begin(), only.end());
    int failures = 0;
    for (const auto& c : criteria) {
        if (!selected.empty() && !selected.count(c.id)) continue;
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run(s);
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        failures += !o.pass;
        std::printf("criterion %2d %-28s %s  %s [%.1f s]\n", c.id, c.name, o.pass ? "PASS" : "FAIL",
                    o.detail.c_str(), secs);
        std::fflush(stdout);
    }
    std::printf("%d criterion(s) failed\n", failures);
    return failures == 0 ? 0 : 1;
}
