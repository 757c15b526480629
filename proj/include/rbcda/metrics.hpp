#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <mutex>
#include <numbers>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "rbcda/error.hpp"
#include "rbcda/field.hpp"
#include "rbcda/rng.hpp"
#include "rbcda/solver.hpp"

namespace rbcda {

namespace detail {

inline void require_same_size(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw Error("metric inputs have different shapes");
    if (a.empty()) throw Error("metric inputs are empty");
}

} // namespace detail

// Pointwise error metrics over all grid values. With e = predicted - reference and N points:
//   mae = sum|e| / N, rmse = sqrt(sum e^2 / N), rrmse = ||e||_2 / ||reference||_2.

inline double mae(std::span<const double> reference, std::span<const double> predicted) {
    detail::require_same_size(reference, predicted);
    double s = 0.0;
    for (std::size_t k = 0; k < reference.size(); ++k) s += std::abs(predicted[k] - reference[k]);
    return s / static_cast<double>(reference.size());
}

inline double sum_squared_error(std::span<const double> reference,
                                std::span<const double> predicted) {
    detail::require_same_size(reference, predicted);
    double s = 0.0;
    for (std::size_t k = 0; k < reference.size(); ++k) {
        const double e = predicted[k] - reference[k];
        s += e * e;
    }
    return s;
}

inline double rmse(std::span<const double> reference, std::span<const double> predicted) {
    return std::sqrt(sum_squared_error(reference, predicted) /
                     static_cast<double>(reference.size()));
}

/// Empty when the reference has zero norm.
inline std::optional<double> rrmse(std::span<const double> reference,
                                   std::span<const double> predicted) {
    const double num = sum_squared_error(reference, predicted);
    double den = 0.0;
    for (double x : reference) den += x * x;
    if (den == 0.0) return std::nullopt;
    return std::sqrt(num / den);
}

/// Midpoint-rule integral of the squared error over the domain.
inline double squared_error_integral(std::span<const double> reference,
                                     std::span<const double> predicted, double cell_area) {
    return sum_squared_error(reference, predicted) * cell_area;
}

/// Lambda = E[ integral (f - f_hat)^2 ]: ensemble average of the squared-error integrals.
inline double lambda(std::span<const Field2D> members, const Field2D& reference,
                     double cell_area) {
    if (members.empty()) throw Error("lambda needs at least one member");
    double s = 0.0;
    for (const Field2D& m : members)
        s += squared_error_integral(reference.values(), m.values(), cell_area);
    return s / static_cast<double>(members.size());
}

/// Error series of one variable. rrmse holds NaN where the reference norm is zero.
struct MetricSeries {
    Variable variable = Variable::temperature;
    std::vector<double> times;
    std::vector<double> mae;
    std::vector<double> rmse;
    std::vector<double> rrmse;
    std::vector<double> sq_error_integral;
    std::size_t degenerate_count = 0;

    std::size_t size() const { return times.size(); }

    void append(double t, const Field2D& reference, const Field2D& predicted, double cell_area) {
        times.push_back(t);
        const double sse = sum_squared_error(reference.values(), predicted.values());
        const double n = static_cast<double>(reference.size());
        mae.push_back(rbcda::mae(reference.values(), predicted.values()));
        rmse.push_back(std::sqrt(sse / n));
        sq_error_integral.push_back(sse * cell_area);
        const auto r = rbcda::rrmse(reference.values(), predicted.values());
        if (!r) ++degenerate_count;
        rrmse.push_back(r.value_or(std::numeric_limits<double>::quiet_NaN()));
    }
};

/// Mean of the last `fraction` of a series (at least one entry).
inline double tail_mean(std::span<const double> values, double fraction = 0.25) {
    if (values.empty()) throw Error("cannot average an empty series");
    const auto n = values.size();
    auto count = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n)));
    count = std::clamp<std::size_t>(count, 1, n);
    double s = 0.0;
    for (std::size_t k = n - count; k < n; ++k) s += values[k];
    return s / static_cast<double>(count);
}

/// Plateau RRMSE: mean RRMSE over the final 25% of the series.
inline double plateau_rrmse(const MetricSeries& m) { return tail_mean(m.rrmse, 0.25); }

struct SummaryStats {
    std::size_t count = 0;
    double mean = 0.0;
    double stddev = 0.0; ///< sample standard deviation (n - 1)
    double min = 0.0;
    double q1 = 0.0;
    double median = 0.0;
    double q3 = 0.0;
    double max = 0.0;
};

/// Linear-interpolation quantile of sorted data (the "type 7" definition).
inline double quantile_sorted(std::span<const double> sorted, double q) {
    if (sorted.empty()) throw Error("quantile of empty data");
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline SummaryStats summarize(std::span<const double> values) {
    if (values.empty()) throw Error("cannot summarize empty data");
    std::vector<double> v(values.begin(), values.end());
    std::sort(v.begin(), v.end());
    SummaryStats s;
    s.count = v.size();
    double sum = 0.0;
    for (double x : v) sum += x;
    s.mean = sum / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.stddev = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
    s.min = v.front();
    s.max = v.back();
    s.q1 = quantile_sorted(v, 0.25);
    s.median = quantile_sorted(v, 0.5);
    s.q3 = quantile_sorted(v, 0.75);
    return s;
}

// ---------------------------------------------------------------------------------------
// Kolmogorov-Smirnov normality test

/// Survival function of the Kolmogorov distribution, P(K > x): the asymptotic p-value of
/// sqrt(n) D for a fully specified null.
inline double kolmogorov_survival(double x) {
    if (x <= 0.0) return 1.0;
    if (x < 1.0) {
        // Jacobi-theta form, fast for small x.
        const double pi2 = std::numbers::pi * std::numbers::pi;
        double cdf = 0.0;
        for (int k = 1; k <= 20; ++k) {
            const double m = 2.0 * k - 1.0;
            cdf += std::exp(-m * m * pi2 / (8.0 * x * x));
        }
        cdf *= std::sqrt(2.0 * std::numbers::pi) / x;
        return std::clamp(1.0 - cdf, 0.0, 1.0);
    }
    double q = 0.0;
    for (int k = 1; k <= 100; ++k) {
        const double term = std::exp(-2.0 * k * k * x * x);
        q += (k % 2 == 1 ? 2.0 : -2.0) * term;
        if (term < 1e-17) break;
    }
    return std::clamp(q, 0.0, 1.0);
}

inline double normal_cdf(double x, double mean, double stddev) {
    return 0.5 * std::erfc(-(x - mean) / (stddev * std::numbers::sqrt2));
}

struct KsResult {
    double statistic = 0.0;
    double p_value = 1.0;
    bool degenerate = false; ///< zero sample variance; no test performed
};

/// KS distance between the sorted sample and a normal with its own mean and standard
/// deviation. Returns a negative value when the sample variance is zero.
inline double fitted_normal_ks_statistic(std::span<double> sorted) {
    const std::size_t n = sorted.size();
    double mean = 0.0;
    for (double v : sorted) mean += v;
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (double v : sorted) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / static_cast<double>(n - 1));
    if (!(sd > 0.0) || sd <= 1e-14 * std::max(1.0, std::abs(mean))) return -1.0;
    const double nn = static_cast<double>(n);
    double d = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double f = normal_cdf(sorted[i], mean, sd);
        d = std::max({d, static_cast<double>(i + 1) / nn - f, f - static_cast<double>(i) / nn});
    }
    return d;
}

inline constexpr std::size_t kLillieforsDraws = 20000;
inline constexpr std::uint64_t kLillieforsSeed = 0x4c494c4cull;

/// Sorted null distribution of the fitted-normal KS statistic for sample size n. The
/// statistic is location-scale invariant, so standard normal draws suffice. Simulated once
/// per n from a fixed seed and cached.
inline const std::vector<double>& lilliefors_null(std::size_t n) {
    static std::mutex mutex;
    static std::map<std::size_t, std::vector<double>> cache;
    const std::lock_guard lock(mutex);
    auto it = cache.find(n);
    if (it != cache.end()) return it->second;
    RandomStream rng(kLillieforsSeed + n);
    std::vector<double> null(kLillieforsDraws), x(n);
    for (double& d : null) {
        for (double& v : x) v = rng.normal();
        std::sort(x.begin(), x.end());
        d = fitted_normal_ks_statistic(x);
    }
    std::sort(null.begin(), null.end());
    return cache.emplace(n, std::move(null)).first->second;
}

/// One-sample KS test of `samples` against a normal with the sample mean and standard
/// deviation (Lilliefors). The p-value is the upper tail of the simulated null
/// distribution, (1 + #{D_null >= D}) / (1 + draws).
inline KsResult ks_normality_test(std::span<const double> samples) {
    const std::size_t n = samples.size();
    if (n < 3) throw Error("KS test needs at least three samples");
    std::vector<double> x(samples.begin(), samples.end());
    std::sort(x.begin(), x.end());
    KsResult r;
    const double d = fitted_normal_ks_statistic(x);
    if (d < 0.0) {
        r.degenerate = true;
        r.p_value = std::numeric_limits<double>::quiet_NaN();
        return r;
    }
    r.statistic = d;
    const auto& null = lilliefors_null(n);
    const auto above = static_cast<double>(null.end() - std::lower_bound(null.begin(), null.end(), d));
    r.p_value = (1.0 + above) / (1.0 + static_cast<double>(null.size()));
    return r;
}

inline constexpr std::size_t kKsMinMembers = 20;

/// KS normality test at each spatial point; `samples[p]` holds the ensemble values at point p.
inline std::vector<KsResult> ks_normality(const std::vector<std::vector<double>>& samples) {
    std::vector<KsResult> out;
    out.reserve(samples.size());
    for (const auto& s : samples) {
        if (s.size() < kKsMinMembers)
            throw Error("KS normality test needs at least " + std::to_string(kKsMinMembers) +
                        " members per point");
        out.push_back(ks_normality_test(s));
    }
    return out;
}

enum class SampleLine { horizontal_midline, vertical_centerline };

/// Ensemble values of one variable along a line through the domain centre:
/// result[p][m] is member m at point p.
inline std::vector<std::vector<double>> line_samples(std::span<const Field2D> members,
                                                     SampleLine line) {
    if (members.empty()) throw Error("no members");
    const std::size_t nx = members[0].nx(), ny = members[0].ny();
    const std::size_t points = line == SampleLine::horizontal_midline ? nx : ny;
    std::vector<std::vector<double>> out(points);
    for (std::size_t p = 0; p < points; ++p) {
        out[p].reserve(members.size());
        for (const Field2D& f : members)
            out[p].push_back(line == SampleLine::horizontal_midline ? f(p, ny / 2) : f(nx / 2, p));
    }
    return out;
}

// ---------------------------------------------------------------------------------------
// Power-law fit

struct PowerLawFit {
    double exponent = 0.0;
    double prefactor = 0.0;
    double r_squared = 0.0;
    std::size_t points_used = 0;
};

/// Least-squares fit of log(lambda) = log(prefactor) + exponent * log(sigma), restricted to
/// sigma >= min_sigma. Needs at least three strictly positive pairs.
inline PowerLawFit fit_power_law(std::span<const double> sigma, std::span<const double> lam,
                                 double min_sigma = 0.0) {
    if (sigma.size() != lam.size()) throw Error("power-law fit inputs differ in length");
    std::vector<double> xs, ys;
    for (std::size_t k = 0; k < sigma.size(); ++k) {
        if (!(sigma[k] > 0.0) || !(lam[k] > 0.0))
            throw Error("power-law fit needs strictly positive inputs");
        if (sigma[k] < min_sigma) continue;
        xs.push_back(std::log(sigma[k]));
        ys.push_back(std::log(lam[k]));
    }
    if (xs.size() < 3) throw Error("power-law fit needs at least three points");
    const double n = static_cast<double>(xs.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
        mx += xs[k];
        my += ys[k];
    }
    mx /= n;
    my /= n;
    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
        sxx += (xs[k] - mx) * (xs[k] - mx);
        sxy += (xs[k] - mx) * (ys[k] - my);
        syy += (ys[k] - my) * (ys[k] - my);
    }
    if (sxx == 0.0) throw Error("power-law fit needs distinct sigma values");
    PowerLawFit f;
    f.exponent = sxy / sxx;
    f.prefactor = std::exp(my - f.exponent * mx);
    f.r_squared = syy > 0.0 ? (sxy * sxy) / (sxx * syy) : 1.0;
    f.points_used = xs.size();
    return f;
}

/// Least-squares line y = intercept + slope * x with coefficient of determination.
struct LinearFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r_squared = 0.0;
};

inline LinearFit fit_line(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) throw Error("line fit needs two or more points");
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) {
        mx += x[k];
        my += y[k];
    }
    mx /= n;
    my /= n;
    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) {
        sxx += (x[k] - mx) * (x[k] - mx);
        sxy += (x[k] - mx) * (y[k] - my);
        syy += (y[k] - my) * (y[k] - my);
    }
    if (sxx == 0.0) throw Error("line fit needs distinct x values");
    LinearFit f;
    f.slope = sxy / sxx;
    f.intercept = my - f.slope * mx;
    f.r_squared = syy > 0.0 ? (sxy * sxy) / (sxx * syy) : 1.0;
    return f;
}

// ---------------------------------------------------------------------------------------
// Ensemble-mean improvement

struct MeanImprovement {
    bool improved = false;
    /// min member RRMSE / ensemble-mean RRMSE; infinite when the mean is exact.
    double factor = 1.0;
    bool infinite = false;
    double min_member_rrmse = 0.0;
    double mean_field_rrmse = 0.0;
};

inline MeanImprovement ensemble_mean_improvement(std::span<const double> member_rrmse,
                                                 double mean_field_rrmse) {
    if (member_rrmse.empty()) throw Error("no members");
    MeanImprovement r;
    r.min_member_rrmse = *std::min_element(member_rrmse.begin(), member_rrmse.end());
    r.mean_field_rrmse = mean_field_rrmse;
    if (member_rrmse.size() == 1) return r;
    if (mean_field_rrmse == 0.0) {
        r.infinite = r.min_member_rrmse > 0.0;
        r.improved = r.infinite;
        r.factor = r.infinite ? std::numeric_limits<double>::infinity() : 1.0;
        return r;
    }
    r.factor = r.min_member_rrmse / mean_field_rrmse;
    r.improved = mean_field_rrmse < r.min_member_rrmse;
    return r;
}

/// Pointwise mean of member fields, summed in member order.
inline Field2D ensemble_mean(std::span<const Field2D> members) {
    if (members.empty()) throw Error("no members");
    Field2D mean(members[0].nx(), members[0].ny());
    for (const Field2D& m : members) {
        if (!m.same_shape(mean)) throw Error("member shapes differ");
        for (std::size_t k = 0; k < m.size(); ++k) mean.data()[k] += m.data()[k];
    }
    const double inv = 1.0 / static_cast<double>(members.size());
    for (double& x : mean.values()) x *= inv;
    return mean;
}

} // namespace rbcda
