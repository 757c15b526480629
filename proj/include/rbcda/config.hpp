#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "rbcda/error.hpp"

namespace rbcda {

/// Non-dimensional parameters of the Boussinesq system.
struct PhysicalParams {
    double rayleigh = 1e5;
    double prandtl = 0.7;

    /// Momentum diffusivity Pr / sqrt(Ra).
    double viscosity() const { return prandtl / std::sqrt(rayleigh); }
    /// Thermal diffusivity 1 / sqrt(Ra).
    double diffusivity() const { return 1.0 / std::sqrt(rayleigh); }

    friend bool operator==(const PhysicalParams&, const PhysicalParams&) = default;
};

/// Uniform grid on [0, lx] x [0, ly]; lx is the aspect ratio Lx/Ly and ly is 1.
struct GridSpec {
    std::size_t nx = 192;
    std::size_t ny = 64;
    double lx = 3.0;
    double ly = 1.0;

    double dx() const { return lx / static_cast<double>(nx); }
    double dy() const { return ly / static_cast<double>(ny); }
    double cell_area() const { return dx() * dy(); }
    double area() const { return lx * ly; }

    friend bool operator==(const GridSpec&, const GridSpec&) = default;
};

struct TimeSpec {
    double dt = 5e-4;
    double t_final = 1.0;
    std::size_t save_every = 1;

    /// Number of whole steps covering [0, t_final].
    std::size_t steps() const {
        return static_cast<std::size_t>(std::llround(t_final / dt));
    }

    friend bool operator==(const TimeSpec&, const TimeSpec&) = default;
};

struct RunConfig {
    PhysicalParams physical;
    GridSpec grid;
    TimeSpec time;
    std::uint64_t seed = 0;
    double init_amplitude = 0.1;

    friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

/// Desk-scale defaults: a 4x reduction of the 768 x 256 production grid.
inline RunConfig desk_config() { return RunConfig{}; }

struct Diagnostic {
    enum class Kind { cfl, grid_reynolds };
    Kind kind;
    std::string message;
};

/// Free-fall velocity scale sqrt(Pr * dT * Ly) with unit temperature difference and height.
inline double velocity_scale_estimate(const PhysicalParams& p) { return std::sqrt(p.prandtl); }

/// Advective Courant number estimate from the free-fall velocity scale.
inline double estimated_cfl(const RunConfig& c) {
    const double u = velocity_scale_estimate(c.physical);
    return u * c.time.dt / std::min(c.grid.dx(), c.grid.dy());
}

inline double estimated_grid_reynolds(const RunConfig& c) {
    const double u = velocity_scale_estimate(c.physical);
    return u * std::max(c.grid.dx(), c.grid.dy()) / c.physical.viscosity();
}

/// Explicit-diffusion number max(nu, kappa) * dt * (4/dx^2 + 4/dy^2). The AB3 real-axis
/// stability limit is 6/11; validate() does not report it.
inline double diffusion_number(const RunConfig& c) {
    const double d = std::max(c.physical.viscosity(), c.physical.diffusivity());
    const double dx = c.grid.dx(), dy = c.grid.dy();
    return d * c.time.dt * (4.0 / (dx * dx) + 4.0 / (dy * dy));
}

inline constexpr double kCflLimit = 0.15;
inline constexpr double kGridReynoldsLimit = 10.0;

/// Checks a configuration. Throws ConfigError on malformed input; returns warnings for
/// violated a-priori stability heuristics. `s_factors` are the spatial coarsening factors
/// of an attached experiment plan (empty when there is none).
inline std::vector<Diagnostic> validate(const RunConfig& c,
                                        std::span<const std::size_t> s_factors = {}) {
    auto positive = [](double x) { return std::isfinite(x) && x > 0.0; };
    if (c.grid.nx == 0 || c.grid.ny == 0) throw ConfigError("grid size must be positive");
    if (!positive(c.grid.lx) || !positive(c.grid.ly))
        throw ConfigError("domain lengths must be positive and finite");
    if (!positive(c.physical.rayleigh)) throw ConfigError("rayleigh must be positive and finite");
    if (!positive(c.physical.prandtl)) throw ConfigError("prandtl must be positive and finite");
    if (!positive(c.time.dt)) throw ConfigError("dt must be positive and finite");
    if (!std::isfinite(c.time.t_final) || c.time.t_final < 0.0)
        throw ConfigError("t_final must be nonnegative and finite");
    if (c.time.save_every == 0) throw ConfigError("save_every must be positive");
    if (!std::isfinite(c.init_amplitude) || c.init_amplitude < 0.0)
        throw ConfigError("init_amplitude must be nonnegative and finite");
    const double steps = c.time.t_final / c.time.dt;
    if (std::abs(steps - std::round(steps)) > 1e-6 * std::max(1.0, steps))
        throw ConfigError("t_final is not a whole number of time steps");
    for (std::size_t s : s_factors) {
        if (s == 0) throw ConfigError("spatial factor must be positive");
        if (c.grid.nx % s != 0 || c.grid.ny % s != 0)
            throw ConfigError("spatial factor " + std::to_string(s) + " does not divide grid " +
                              std::to_string(c.grid.nx) + "x" + std::to_string(c.grid.ny));
    }

    std::vector<Diagnostic> out;
    if (const double cfl = estimated_cfl(c); cfl > kCflLimit) {
        out.push_back({Diagnostic::Kind::cfl,
                       "estimated CFL " + std::to_string(cfl) + " exceeds " +
                           std::to_string(kCflLimit)});
    }
    if (const double re = estimated_grid_reynolds(c); re > kGridReynoldsLimit) {
        out.push_back({Diagnostic::Kind::grid_reynolds,
                       "estimated grid Reynolds number " + std::to_string(re) + " exceeds " +
                           std::to_string(kGridReynoldsLimit)});
    }
    return out;
}

namespace detail {

inline std::string format_double(double x) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, end);
}

template <class T>
T parse_number(const std::string& text, std::string_view key) {
    T value{};
    const char* first = text.data();
    const char* last = text.data() + text.size();
    while (first < last && (*first == ' ' || *first == '\t')) ++first;
    while (last > first && (last[-1] == ' ' || last[-1] == '\t' || last[-1] == '\r')) --last;
    auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc() || ptr != last)
        throw ConfigError("invalid value for '" + std::string(key) + "': '" + text + "'");
    return value;
}

inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace detail

inline constexpr std::string_view kConfigSection = "grid_config";

/// Writes the key-value text form. Doubles use shortest round-trip formatting.
inline std::string serialize(const RunConfig& c) {
    using detail::format_double;
    std::ostringstream os;
    os << '[' << kConfigSection << "]\n"
       << "rayleigh = " << format_double(c.physical.rayleigh) << '\n'
       << "prandtl = " << format_double(c.physical.prandtl) << '\n'
       << "nx = " << c.grid.nx << '\n'
       << "ny = " << c.grid.ny << '\n'
       << "lx = " << format_double(c.grid.lx) << '\n'
       << "ly = " << format_double(c.grid.ly) << '\n'
       << "dt = " << format_double(c.time.dt) << '\n'
       << "t_final = " << format_double(c.time.t_final) << '\n'
       << "save_every = " << c.time.save_every << '\n'
       << "seed = " << c.seed << '\n'
       << "init_amplitude = " << format_double(c.init_amplitude) << '\n';
    return os.str();
}

/// Parses the key-value text form. Missing keys keep their desk defaults; unknown keys
/// are rejected.
inline RunConfig parse_config(const std::string& text) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    std::istringstream is(text);
    try {
        pt::read_ini(is, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(std::string("config syntax error: ") + e.what());
    }
    RunConfig c = desk_config();
    const auto section = tree.get_child_optional(pt::ptree::path_type(std::string(kConfigSection), '\0'));
    if (!section) throw ConfigError("missing [grid_config] section");
    for (const auto& [key, node] : *section) {
        const std::string& v = node.data();
        using detail::parse_number;
        if (key == "rayleigh") c.physical.rayleigh = parse_number<double>(v, key);
        else if (key == "prandtl") c.physical.prandtl = parse_number<double>(v, key);
        else if (key == "nx") c.grid.nx = parse_number<std::size_t>(v, key);
        else if (key == "ny") c.grid.ny = parse_number<std::size_t>(v, key);
        else if (key == "lx") c.grid.lx = parse_number<double>(v, key);
        else if (key == "ly") c.grid.ly = parse_number<double>(v, key);
        else if (key == "dt") c.time.dt = parse_number<double>(v, key);
        else if (key == "t_final") c.time.t_final = parse_number<double>(v, key);
        else if (key == "save_every") c.time.save_every = parse_number<std::size_t>(v, key);
        else if (key == "seed") c.seed = parse_number<std::uint64_t>(v, key);
        else if (key == "init_amplitude") c.init_amplitude = parse_number<double>(v, key);
        else throw ConfigError("unknown config key '" + key + "'");
    }
    validate(c);
    return c;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

/// FNV-1a hash of the serialized configuration.
inline std::uint64_t config_hash(const RunConfig& c) { return detail::fnv1a(serialize(c)); }

} // namespace rbcda
