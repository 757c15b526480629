#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <memory>
#include <mutex>
#include <numbers>
#include <vector>

#include <fftw3.h>

#include "rbcda/config.hpp"
#include "rbcda/field.hpp"

namespace rbcda {

namespace detail {

/// FFTW planning is not thread-safe; execution on distinct plans is.
inline std::mutex& fftw_planner_mutex() {
    static std::mutex m;
    return m;
}

struct FftwFree {
    void operator()(void* p) const { fftw_free(p); }
};

} // namespace detail

/// Solves the cell-centred Poisson problem L phi = f on a channel that is periodic in x with
/// homogeneous Neumann conditions at y = 0 and y = ly. L is the standard 5-point operator.
/// The x direction is diagonalised by a real FFT; each wavenumber leaves a tridiagonal
/// system in y that is solved with a pre-factored Thomas sweep. The constant mode is pinned
/// to zero mean.
class PoissonSolver {
public:
    explicit PoissonSolver(const GridSpec& grid)
        : nx_(grid.nx), ny_(grid.ny), nk_(grid.nx / 2 + 1),
          real_(static_cast<double*>(fftw_malloc(sizeof(double) * nx_ * ny_))),
          spec_(static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * nk_ * ny_))),
          lower_factor_(nk_ * ny_), inv_pivot_(nk_ * ny_) {
        {
            std::lock_guard lock(detail::fftw_planner_mutex());
            const int n = static_cast<int>(nx_);
            const int rows = static_cast<int>(ny_);
            forward_ = fftw_plan_many_dft_r2c(1, &n, rows, real_.get(), nullptr, 1, n, spec_.get(),
                                              nullptr, 1, static_cast<int>(nk_), FFTW_ESTIMATE);
            backward_ = fftw_plan_many_dft_c2r(1, &n, rows, spec_.get(), nullptr, 1,
                                               static_cast<int>(nk_), real_.get(), nullptr, 1, n,
                                               FFTW_ESTIMATE);
        }
        factor(grid.dx(), grid.dy());
    }

    ~PoissonSolver() {
        std::lock_guard lock(detail::fftw_planner_mutex());
        fftw_destroy_plan(forward_);
        fftw_destroy_plan(backward_);
    }

    PoissonSolver(const PoissonSolver&) = delete;
    PoissonSolver& operator=(const PoissonSolver&) = delete;

    /// Overwrites `field` (the right-hand side) with the zero-mean solution.
    void solve(Field2D& field) {
        double* in = real_.get();
        std::copy(field.data(), field.data() + nx_ * ny_, in);
        fftw_execute(forward_);

        auto* s = reinterpret_cast<std::complex<double>*>(spec_.get());
        // Forward elimination then back substitution, vectorised across wavenumbers.
        for (std::size_t k = 0; k < nk_; ++k) s[k] *= inv_pivot_[k];
        for (std::size_t j = 1; j < ny_; ++j) {
            std::complex<double>* cur = s + j * nk_;
            const std::complex<double>* prev = cur - nk_;
            const double* ip = inv_pivot_.data() + j * nk_;
            for (std::size_t k = 0; k < nk_; ++k) cur[k] = (cur[k] - off_ * prev[k]) * ip[k];
        }
        for (std::size_t j = ny_ - 1; j-- > 0;) {
            std::complex<double>* cur = s + j * nk_;
            const std::complex<double>* next = cur + nk_;
            const double* lf = lower_factor_.data() + j * nk_;
            for (std::size_t k = 0; k < nk_; ++k) cur[k] -= lf[k] * next[k];
        }
        // The k = 0 system is singular; row 0 was replaced by phi_0 = 0, so remove the mean.
        double mean = 0.0;
        for (std::size_t j = 0; j < ny_; ++j) mean += s[j * nk_].real();
        mean /= static_cast<double>(ny_);
        for (std::size_t j = 0; j < ny_; ++j) s[j * nk_] = {s[j * nk_].real() - mean, 0.0};

        fftw_execute(backward_);
        const double scale = 1.0 / static_cast<double>(nx_);
        double* out = field.data();
        for (std::size_t n = 0; n < nx_ * ny_; ++n) out[n] = in[n] * scale;
    }

    /// Applies the discrete operator L, for testing.
    static void apply_laplacian(const Field2D& phi, Field2D& out, double dx, double dy) {
        const std::size_t nx = phi.nx(), ny = phi.ny();
        const double ax = 1.0 / (dx * dx), ay = 1.0 / (dy * dy);
        for (std::size_t j = 0; j < ny; ++j) {
            for (std::size_t i = 0; i < nx; ++i) {
                const double c = phi(i, j);
                const double w = phi((i + nx - 1) % nx, j), e = phi((i + 1) % nx, j);
                const double sth = j > 0 ? phi(i, j - 1) : c;
                const double nth = j + 1 < ny ? phi(i, j + 1) : c;
                out(i, j) = ax * (w - 2.0 * c + e) + ay * (sth - 2.0 * c + nth);
            }
        }
    }

private:
    // Thomas factorisation of the y-tridiagonal system for every wavenumber k:
    //   off * phi_{j-1} + diag_j * phi_j + off * phi_{j+1} = rhs_j
    // stored as inv_pivot (1/modified diagonal) and lower_factor (modified super-diagonal).
    void factor(double dx, double dy) {
        off_ = 1.0 / (dy * dy);
        for (std::size_t k = 0; k < nk_; ++k) {
            const double sx = std::sin(std::numbers::pi * static_cast<double>(k) /
                                       static_cast<double>(nx_));
            const double eig = -4.0 * sx * sx / (dx * dx);
            double upper_prev = 0.0;
            for (std::size_t j = 0; j < ny_; ++j) {
                double diag = eig - 2.0 * off_;
                if (j == 0 || j + 1 == ny_) diag += off_;
                if (ny_ == 1) diag = eig;
                double lower = j > 0 ? off_ : 0.0;
                double upper = j + 1 < ny_ ? off_ : 0.0;
                if (k == 0 && j == 0) {
                    diag = 1.0;
                    upper = 0.0;
                }
                if (k == 0 && ny_ == 1) diag = 1.0;
                const double pivot = diag - lower * upper_prev;
                inv_pivot_[j * nk_ + k] = 1.0 / pivot;
                upper_prev = upper / pivot;
                lower_factor_[j * nk_ + k] = upper_prev;
            }
        }
        // Row 0 of k = 0 reads phi_0 = 0 and must ignore its right-hand side; the forward
        // sweep multiplies rhs_0 by inv_pivot, so zero it there and keep the coupling zero.
        inv_pivot_[0] = 0.0;
    }

    std::size_t nx_, ny_, nk_;
    std::unique_ptr<double, detail::FftwFree> real_;
    std::unique_ptr<fftw_complex, detail::FftwFree> spec_;
    std::vector<double> lower_factor_;
    std::vector<double> inv_pivot_;
    double off_ = 0.0;
    fftw_plan forward_ = nullptr;
    fftw_plan backward_ = nullptr;
};

} // namespace rbcda
