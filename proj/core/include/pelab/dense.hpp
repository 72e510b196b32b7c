#pragma once

#include <complex>
#include <cstddef>
#include <vector>

#include "pelab/errors.hpp"

namespace pelab {

// Small row-major matrix for analysis-side math (f64, no autograd).
struct Mat {
    std::size_t rows = 0, cols = 0;
    std::vector<double> a;

    Mat() = default;
    Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), a(r * c, fill) {}

    double& operator()(std::size_t i, std::size_t j) { return a[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return a[i * cols + j]; }
    bool square() const { return rows == cols; }
};

struct CMat {
    std::size_t rows = 0, cols = 0;
    std::vector<std::complex<double>> a;

    CMat() = default;
    CMat(std::size_t r, std::size_t c) : rows(r), cols(c), a(r * c) {}

    std::complex<double>& operator()(std::size_t i, std::size_t j) { return a[i * cols + j]; }
    const std::complex<double>& operator()(std::size_t i, std::size_t j) const {
        return a[i * cols + j];
    }
    bool square() const { return rows == cols; }
};

inline Mat matmul(const Mat& x, const Mat& y) {
    if (x.cols != y.rows) throw DimensionError("Mat matmul: inner dims disagree");
    Mat out(x.rows, y.cols);
    for (std::size_t i = 0; i < x.rows; ++i)
        for (std::size_t k = 0; k < x.cols; ++k) {
            const double v = x(i, k);
            if (v == 0.0) continue;
            for (std::size_t j = 0; j < y.cols; ++j) out(i, j) += v * y(k, j);
        }
    return out;
}

inline std::vector<double> matvec(const Mat& m, const std::vector<double>& v) {
    if (m.cols != v.size()) throw DimensionError("Mat matvec: dims disagree");
    std::vector<double> out(m.rows, 0.0);
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = 0; j < m.cols; ++j) out[i] += m(i, j) * v[j];
    return out;
}

inline double dot(const std::vector<double>& x, const std::vector<double>& y) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
    return s;
}

inline double norm2(const std::vector<double>& x) { return std::sqrt(dot(x, x)); }

}  // namespace pelab
