#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace rbcda {

/// Dense 2D array stored row-major with x (index i) fastest: data[j * nx + i].
class Field2D {
public:
    Field2D() = default;
    Field2D(std::size_t nx, std::size_t ny, double value = 0.0)
        : nx_(nx), ny_(ny), data_(nx * ny, value) {}

    std::size_t nx() const noexcept { return nx_; }
    std::size_t ny() const noexcept { return ny_; }
    std::size_t size() const noexcept { return data_.size(); }

    double& operator()(std::size_t i, std::size_t j) {
        assert(i < nx_ && j < ny_);
        return data_[j * nx_ + i];
    }
    double operator()(std::size_t i, std::size_t j) const {
        assert(i < nx_ && j < ny_);
        return data_[j * nx_ + i];
    }

    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }
    double* row(std::size_t j) noexcept { return data_.data() + j * nx_; }
    const double* row(std::size_t j) const noexcept { return data_.data() + j * nx_; }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }

    void fill(double value) { std::fill(data_.begin(), data_.end(), value); }

    double max_abs() const noexcept {
        double m = 0.0;
        for (double x : data_) m = std::max(m, std::abs(x));
        return m;
    }

    bool same_shape(const Field2D& other) const noexcept {
        return nx_ == other.nx_ && ny_ == other.ny_;
    }

    friend bool operator==(const Field2D&, const Field2D&) = default;

private:
    std::size_t nx_ = 0;
    std::size_t ny_ = 0;
    std::vector<double> data_;
};

} // namespace rbcda
