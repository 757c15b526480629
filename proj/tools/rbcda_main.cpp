// Command-line front end: reference generation, observation noise, CDA sweeps,
// imperfect training data and trajectory scoring.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "rbcda/harness.hpp"

namespace {

using namespace rbcda;

struct Common {
    std::string config_path;
    std::string plan_path;
    std::string out;
    std::size_t workers = 0;
    std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c, bool needs_plan) {
    cmd->add_option("--config", c.config_path, "run configuration file")->check(CLI::ExistingFile);
    auto* plan = cmd->add_option("--plan", c.plan_path, "experiment plan file")->check(CLI::ExistingFile);
    if (needs_plan) plan->required();
    cmd->add_option("--out", c.out, "output directory (overrides the plan)");
    cmd->add_option("--workers", c.workers, "worker threads (overrides the plan)");
    cmd->add_option("--seed", c.seed, "base noise seed (overrides the plan)");
}

RunConfig load_run_config(const Common& c) {
    RunConfig config = c.config_path.empty() ? desk_config() : load_config(c.config_path);
    for (const auto& d : validate(config)) std::cerr << "warning: " << d.message << '\n';
    if (const double dn = diffusion_number(config); dn > 6.0 / 11.0)
        std::cerr << "warning: explicit diffusion number " << dn
                  << " exceeds the AB3 limit 6/11; expect blow-up\n";
    return config;
}

ExperimentPlan load_plan_with_overrides(const Common& c) {
    ExperimentPlan plan = load_plan(c.plan_path);
    if (!c.out.empty()) plan.output_dir = c.out;
    if (c.workers > 0) plan.workers = c.workers;
    if (c.seed) plan.base_seed = *c.seed;
    validate(plan);
    return plan;
}

int run_observe(const std::string& input, std::size_t s, std::size_t t, double sigma,
                std::size_t members, std::uint64_t seed, const std::string& out) {
    CoarseObservation clean;
    if (peek_kind(input) == ContainerKind::observation) {
        clean = read_observation(input);
    } else {
        clean = coarsen(read_trajectory(input), s, t);
    }
    std::filesystem::create_directories(out);
    const auto ensemble = make_ensemble(clean, sigma, members, seed);
    const std::string stem = std::filesystem::path(input).stem().string();
    for (std::size_t m = 0; m < ensemble.size(); ++m) {
        const auto path = std::filesystem::path(out) /
                          (stem + "_sigma" + ra_tag(sigma) + "_m" + std::to_string(m) + ".obs");
        write_observation(ensemble[m], path.string());
        std::cout << path.string() << '\n';
    }
    return 0;
}

int run_report(const std::string& reference, const std::vector<std::string>& predictions,
               const std::string& out) {
    const Trajectory ref = read_trajectory(reference);
    std::ofstream file;
    if (!out.empty()) file.open(out);
    std::ostream& os = out.empty() ? std::cout : file;
    os << "reference,prediction,ra,ref_seed,variable,time,mae,rmse,rrmse,sq_error_integral\n";
    std::vector<Trajectory> preds;
    for (const auto& p : predictions) preds.push_back(read_trajectory(p));
    const double area = ref.config.grid.cell_area();
    using detail::format_double;
    for (std::size_t k = 0; k < preds.size(); ++k) {
        const Trajectory& pred = preds[k];
        if (!(pred.config.grid == ref.config.grid))
            throw ConfigError("prediction grid differs from reference grid");
        for (const auto& snap : pred.snapshots) {
            const auto match = std::find_if(ref.snapshots.begin(), ref.snapshots.end(),
                                            [&](const FieldState& r) {
                                                return std::abs(r.time - snap.time) <
                                                       1e-9 * std::max(1.0, std::abs(r.time));
                                            });
            if (match == ref.snapshots.end()) continue;
            for (Variable var : kAllVariables) {
                MetricSeries m;
                m.append(snap.time, get(*match, var), get(snap, var), area);
                os << reference << ',' << predictions[k] << ','
                   << format_double(ref.config.physical.rayleigh) << ',' << ref.config.seed << ','
                   << variable_name(var) << ',' << format_double(snap.time) << ','
                   << format_double(m.mae[0]) << ',' << format_double(m.rmse[0]) << ','
                   << format_double(m.rrmse[0]) << ',' << format_double(m.sq_error_integral[0])
                   << '\n';
            }
        }
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Rayleigh-Benard convection with continuous data assimilation"};
    app.require_subcommand(1);

    Common common;

    auto* check = app.add_subcommand("check", "validate a configuration and print diagnostics");
    check->add_option("--config", common.config_path)->check(CLI::ExistingFile);

    auto* reference = app.add_subcommand("reference", "generate reference and clean observations");
    add_common(reference, common, true);

    std::string input;
    std::size_t s = 4, t = 4, members = 1;
    double sigma = 0.0;
    std::uint64_t obs_seed = 0;
    std::string obs_out = ".";
    auto* observe = app.add_subcommand("observe", "draw noisy observation realisations");
    observe->add_option("--input", input, "trajectory or observation file")
        ->required()
        ->check(CLI::ExistingFile);
    observe->add_option("--s", s, "spatial factor when coarsening a trajectory");
    observe->add_option("--t", t, "temporal factor when coarsening a trajectory");
    observe->add_option("--sigma", sigma, "observation noise standard deviation");
    observe->add_option("--members", members, "number of realisations");
    observe->add_option("--seed", obs_seed, "base seed; member m uses seed + m");
    observe->add_option("--out", obs_out, "output directory");

    auto* sweep = app.add_subcommand("cda-sweep", "run the plan's CDA ensemble sweep");
    add_common(sweep, common, true);

    auto* gen = app.add_subcommand("scenario3-gen", "reference / imperfect-CDA training pairs");
    add_common(gen, common, true);

    std::string ref_path, report_out;
    std::vector<std::string> predictions;
    auto* report = app.add_subcommand("report", "score trajectories against a reference");
    report->add_option("--reference", ref_path)->required()->check(CLI::ExistingFile);
    report->add_option("--prediction", predictions)->required()->check(CLI::ExistingFile);
    report->add_option("--out", report_out, "CSV path (default stdout)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*check) {
            const RunConfig c = load_run_config(common);
            std::cout << serialize(c) << "steps = " << c.time.steps()
                      << "\nestimated_cfl = " << estimated_cfl(c)
                      << "\nestimated_grid_reynolds = " << estimated_grid_reynolds(c)
                      << "\ndiffusion_number = " << diffusion_number(c) << '\n';
        } else if (*reference) {
            const RunConfig c = load_run_config(common);
            for (const auto& p : run_reference(load_plan_with_overrides(common), c))
                std::cout << p << '\n';
        } else if (*observe) {
            return run_observe(input, s, t, sigma, members, obs_seed, obs_out);
        } else if (*sweep) {
            const RunConfig c = load_run_config(common);
            const auto plan = load_plan_with_overrides(common);
            const auto r = run_cda_sweep(plan, c, &std::clog);
            std::size_t failed = 0;
            for (const auto& cell : r.cells) failed += cell.failed_count();
            std::cout << r.cells.size() << " cells written to " << plan.output_dir << '\n';
            if (failed) std::cout << failed << " member runs failed; see member_metrics.csv\n";
        } else if (*gen) {
            const RunConfig c = load_run_config(common);
            const auto plan = load_plan_with_overrides(common);
            for (const auto& p : generate_scenario3_data(plan, c))
                std::cout << p.downscaled_path << " plateau T rrmse " << p.plateau_rrmse_t << '\n';
        } else if (*report) {
            return run_report(ref_path, predictions, report_out);
        }
    } catch (const BlowUpError& e) {
        std::cerr << "error: " << e.what() << " (step " << e.step() << ")\n";
        return 3;
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
