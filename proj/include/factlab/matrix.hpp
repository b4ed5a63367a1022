#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace factlab {

// Dense square matrix of doubles, row-major. Token embeddings are one-hot,
// so entry (a, s) is exactly phi(a)^T M phi(s) and no embedding matrix is
// ever materialized.
class Matrix {
public:
    Matrix() = default;
    explicit Matrix(std::size_t side) : side_(side), data_(side * side, 0.0) {}

    std::size_t side() const { return side_; }

    double operator()(std::size_t row, std::size_t col) const { return data_[row * side_ + col]; }
    double& operator()(std::size_t row, std::size_t col) { return data_[row * side_ + col]; }

    const std::vector<double>& data() const { return data_; }
    std::vector<double>& data() { return data_; }

    double max_abs() const {
        double m = 0.0;
        for (double x : data_) m = std::max(m, std::abs(x));
        return m;
    }

    double min_entry() const {
        double m = data_.empty() ? 0.0 : data_.front();
        for (double x : data_) m = std::min(m, x);
        return m;
    }

    void add_to_all(double c) {
        for (double& x : data_) x += c;
    }

    bool all_finite() const {
        for (double x : data_)
            if (!std::isfinite(x)) return false;
        return true;
    }

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t side_ = 0;
    std::vector<double> data_;
};

}  // namespace factlab
