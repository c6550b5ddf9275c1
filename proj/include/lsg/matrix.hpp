#pragma once

// Dense row-major matrices (64-bit floats) and the small set of primitives
// the rest of the library is built on. Values are immutable by convention
// once handed to another module; everything here is deterministic with a
// fixed evaluation order so reruns reproduce bit-identical results.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "lsg/rng.hpp"

namespace lsg {

struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;  // row-major, rows*cols entries

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    double* row_ptr(std::size_t i) { return data.data() + i * cols; }
    const double* row_ptr(std::size_t i) const { return data.data() + i * cols; }

    std::size_t size() const { return rows * cols; }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }
};

// 4-D kernel tensor, layout (out, in, kh, kw), row-major.
struct Tensor4 {
    std::size_t out = 0, in = 0, kh = 0, kw = 0;
    std::vector<double> data;

    Tensor4() = default;
    Tensor4(std::size_t n, std::size_t m, std::size_t h, std::size_t w, double fill = 0.0)
        : out(n), in(m), kh(h), kw(w), data(n * m * h * w, fill) {}

    double& at(std::size_t o, std::size_t i, std::size_t a, std::size_t b) {
        return data[((o * in + i) * kh + a) * kw + b];
    }
    double at(std::size_t o, std::size_t i, std::size_t a, std::size_t b) const {
        return data[((o * in + i) * kh + a) * kw + b];
    }

    std::size_t size() const { return out * in * kh * kw; }
};

inline void check_shapes(bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument("shape mismatch: " + what);
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    check_shapes(a.cols == b.rows, "matmul " + std::to_string(a.rows) + "x" +
                                       std::to_string(a.cols) + " * " +
                                       std::to_string(b.rows) + "x" + std::to_string(b.cols));
    Matrix c(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.row_ptr(i);
        double* crow = c.row_ptr(i);
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = arow[k];
            if (aik == 0.0) continue;
            const double* brow = b.row_ptr(k);
            for (std::size_t j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

inline Matrix transpose(const Matrix& m) {
    Matrix t(m.cols, m.rows);
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = 0; j < m.cols; ++j) t(j, i) = m(i, j);
    return t;
}

inline double frobenius_norm(const Matrix& m) {
    double sum = 0.0;
    for (double v : m.data) sum += v * v;
    return std::sqrt(sum);
}

inline Matrix subtract(const Matrix& a, const Matrix& b) {
    check_shapes(a.same_shape(b), "subtract");
    Matrix c(a.rows, a.cols);
    for (std::size_t i = 0; i < a.data.size(); ++i) c.data[i] = a.data[i] - b.data[i];
    return c;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
    check_shapes(a.same_shape(b), "add");
    Matrix c(a.rows, a.cols);
    for (std::size_t i = 0; i < a.data.size(); ++i) c.data[i] = a.data[i] + b.data[i];
    return c;
}

inline void add_scaled_in_place(Matrix& acc, const Matrix& g, double s) {
    check_shapes(acc.same_shape(g), "add_scaled");
    for (std::size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += s * g.data[i];
}

inline void scale_in_place(Matrix& m, double s) {
    for (double& v : m.data) v *= s;
}

// i.i.d. N(0, stddev^2) entries, row-major fill order. stddev == 0 yields an
// all-zero matrix without consuming the generator.
inline Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double stddev, RngState& rng) {
    if (stddev < 0.0) throw std::invalid_argument("gaussian_matrix: negative stddev");
    Matrix m(rows, cols);
    if (stddev == 0.0) return m;
    for (double& v : m.data) v = rng.next_gaussian(stddev);
    return m;
}

namespace detail {

inline double column_dot(const Matrix& m, std::size_t a, std::size_t b) {
    double s = 0.0;
    for (std::size_t i = 0; i < m.rows; ++i) s += m(i, a) * m(i, b);
    return s;
}

inline double column_norm(const Matrix& m, std::size_t j) {
    return std::sqrt(column_dot(m, j, j));
}

}  // namespace detail

// Orthonormalizes the columns of m (requires rows >= cols). Modified
// Gram-Schmidt with one re-orthogonalization pass. A column whose projected
// norm falls below 1e-12 is replaced by a fresh Gaussian column (fixed
// internal seed), projected and renormalized, so the result is always a
// usable orthonormal basis; for full-rank input the column span is preserved.
inline Matrix orthonormalize_columns(const Matrix& m) {
    check_shapes(m.rows >= m.cols, "orthonormalize_columns needs rows >= cols");
    constexpr double kDegenerate = 1e-12;
    Matrix q = m;
    RngState fill_rng(0x6F727468u);  // deterministic replacement source
    for (std::size_t j = 0; j < q.cols; ++j) {
        for (int attempt = 0;; ++attempt) {
            for (int pass = 0; pass < 2; ++pass) {
                for (std::size_t i = 0; i < j; ++i) {
                    const double proj = detail::column_dot(q, i, j);
                    for (std::size_t r = 0; r < q.rows; ++r) q(r, j) -= proj * q(r, i);
                }
            }
            const double norm = detail::column_norm(q, j);
            if (norm >= kDegenerate) {
                for (std::size_t r = 0; r < q.rows; ++r) q(r, j) /= norm;
                break;
            }
            if (attempt > 64)
                throw std::runtime_error("orthonormalize_columns: could not build basis");
            for (std::size_t r = 0; r < q.rows; ++r) q(r, j) = fill_rng.next_gaussian(1.0);
        }
    }
    return q;
}

// (out,in,kh,kw) -> out x (in*kh*kw). Row o of the result is kernel o with
// its last three axes flattened; inverse of unflatten_conv_weight.
inline Matrix flatten_conv_weight(const Tensor4& w) {
    Matrix m(w.out, w.in * w.kh * w.kw);
    m.data = w.data;  // layouts agree
    return m;
}

inline Tensor4 unflatten_conv_weight(const Matrix& m, std::size_t in, std::size_t kh,
                                     std::size_t kw) {
    check_shapes(m.cols == in * kh * kw, "unflatten_conv_weight");
    Tensor4 w(m.rows, in, kh, kw);
    w.data = m.data;
    return w;
}

}  // namespace lsg
