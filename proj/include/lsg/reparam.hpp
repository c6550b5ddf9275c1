#pragma once

// Low-rank reparametrization of a weight matrix W (m x n) as a factor pair
// (L: m x r with orthonormal columns, R: r x n with orthonormal rows), the
// mapping of a W-space gradient onto the factors, and the reconstruction of
// a W-space update from factor gradients:
//
//   decompose:            L = orth(W R0^T), R = orth_rows(L^T W), R0 Gaussian
//   factor_gradients:     dL = dW R^T,      dR = L^T dW
//   reconstruct_gradient: dW = (dL) R + L (dR) - L L^T (dL) R
//
// For orthonormal factors the composition reconstruct(factor_gradients(dW))
// is the orthogonal projection of dW onto span{L A + B R}.

#include <cstddef>
#include <stdexcept>
#include <utility>

#include "lsg/matrix.hpp"
#include "lsg/rng.hpp"

namespace lsg {

struct LowRankFactors {
    Matrix left;   // m x r, orthonormal columns
    Matrix right;  // r x n, orthonormal rows
    std::size_t rank = 0;
};

namespace detail {

inline LowRankFactors power_step(const Matrix& w, std::size_t rank, const Matrix& sketch) {
    LowRankFactors f;
    f.rank = rank;
    f.left = orthonormalize_columns(matmul(w, transpose(sketch)));
    f.right = transpose(orthonormalize_columns(transpose(matmul(transpose(f.left), w))));
    return f;
}

}  // namespace detail

// Single-step randomized power iteration. A fresh Gaussian sketch is drawn
// from rng on every call.
inline LowRankFactors decompose(const Matrix& w, std::size_t rank, RngState& rng) {
    if (rank < 1 || rank > std::min(w.rows, w.cols))
        throw std::invalid_argument("decompose: rank out of range");
    return detail::power_step(w, rank, gaussian_matrix(rank, w.cols, 1.0, rng));
}

// Same step but re-using a previous R as the sketch (warm start).
inline LowRankFactors decompose_warm(const Matrix& w, std::size_t rank, const Matrix& sketch) {
    if (rank < 1 || rank > std::min(w.rows, w.cols))
        throw std::invalid_argument("decompose: rank out of range");
    check_shapes(sketch.rows == rank && sketch.cols == w.cols, "decompose_warm sketch");
    return detail::power_step(w, rank, sketch);
}

inline std::pair<Matrix, Matrix> factor_gradients(const Matrix& dw, const LowRankFactors& f) {
    return {matmul(dw, transpose(f.right)), matmul(transpose(f.left), dw)};
}

inline Matrix reconstruct_gradient(const Matrix& dl, const Matrix& dr, const LowRankFactors& f) {
    Matrix dlr = matmul(dl, f.right);                                // (dL) R
    Matrix result = add(dlr, matmul(f.left, dr));                    // + L (dR)
    Matrix third = matmul(f.left, matmul(transpose(f.left), dlr));   // - L L^T (dL) R
    return subtract(result, third);
}

// Trainable entries of the factor pair; must stay below m*n for the
// factorization to make sense.
inline std::size_t factor_param_count(std::size_t m, std::size_t n, std::size_t r) {
    return r * (m + n);
}

}  // namespace lsg
