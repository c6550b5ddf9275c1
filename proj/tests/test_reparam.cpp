#include "catch2/catch_amalgamated.hpp"

#include <cmath>

#include "lsg/matrix.hpp"
#include "lsg/reparam.hpp"
#include "lsg/rng.hpp"
#include "oracles.hpp"

using lsg::LowRankFactors;
using lsg::Matrix;
using lsg::RngState;

namespace {

double row_orthonormality_defect(const Matrix& r) {
    const Matrix gram = lsg::matmul(r, lsg::transpose(r));
    return lsg::frobenius_norm(lsg::subtract(gram, Matrix::identity(r.rows)));
}

double col_orthonormality_defect(const Matrix& l) {
    const Matrix gram = lsg::matmul(lsg::transpose(l), l);
    return lsg::frobenius_norm(lsg::subtract(gram, Matrix::identity(l.cols)));
}

// orthogonal projection of dw onto {L A + B R}: LL^T dW + dW R^T R - LL^T dW R^T R
Matrix projection_oracle(const Matrix& dw, const LowRankFactors& f) {
    const Matrix pl = lsg::matmul(f.left, lsg::matmul(lsg::transpose(f.left), dw));
    const Matrix pr = lsg::matmul(dw, lsg::matmul(lsg::transpose(f.right), f.right));
    const Matrix plr = lsg::matmul(f.left, lsg::matmul(lsg::transpose(f.left), pr));
    return lsg::subtract(lsg::add(pl, pr), plr);
}

}  // namespace

TEST_CASE("decompose rejects out-of-range ranks", "[reparam]") {
    RngState rng(1);
    const Matrix w = lsg::gaussian_matrix(6, 4, 1.0, rng);
    REQUIRE_THROWS_AS(lsg::decompose(w, 0, rng), std::invalid_argument);
    REQUIRE_THROWS_AS(lsg::decompose(w, 5, rng), std::invalid_argument);
}

TEST_CASE("decompose yields orthonormal factors", "[reparam]") {
    for (std::uint64_t seed = 0; seed < 25; ++seed) {
        RngState rng(seed);
        const Matrix w = lsg::gaussian_matrix(12, 9, 1.0, rng);
        const LowRankFactors f = lsg::decompose(w, 3, rng);
        REQUIRE(col_orthonormality_defect(f.left) < 1e-8);
        REQUIRE(row_orthonormality_defect(f.right) < 1e-8);
    }
}

TEST_CASE("rank-1 matrices are recovered exactly", "[reparam]") {
    RngState rng(7);
    const Matrix u = lsg::gaussian_matrix(10, 1, 1.0, rng);
    const Matrix v = lsg::gaussian_matrix(1, 6, 1.0, rng);
    const Matrix w = lsg::matmul(u, v);
    const LowRankFactors f = lsg::decompose(w, 1, rng);
    // L (L^T W) reconstructs W up to numerical error
    const Matrix rec = lsg::matmul(f.left, lsg::matmul(lsg::transpose(f.left), w));
    REQUIRE(lsg::frobenius_norm(lsg::subtract(rec, w)) / lsg::frobenius_norm(w) < 1e-8);
}

TEST_CASE("full-rank identity reconstructs exactly", "[reparam]") {
    RngState rng(3);
    const Matrix w = Matrix::identity(4);
    const LowRankFactors f = lsg::decompose(w, 4, rng);
    const Matrix rec = projection_oracle(w, f);
    REQUIRE(oracle::rel_fro_err(rec, w) < 1e-8);
}

TEST_CASE("one-step power iteration lands near the best rank-r error", "[reparam]") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        RngState rng(seed);
        const Matrix w = lsg::gaussian_matrix(20, 30, 1.0, rng);
        const LowRankFactors f = lsg::decompose(w, 4, rng);
        const Matrix approx = projection_oracle(w, f);  // rank <= 4 by construction
        const double err = lsg::frobenius_norm(lsg::subtract(approx, w));
        const double best = oracle::best_rank_error(w, 4);
        REQUIRE(err >= best * (1.0 - 1e-9));
        REQUIRE(err <= 3.0 * best);
    }
}

TEST_CASE("factor gradients: zero in, zero out", "[reparam]") {
    RngState rng(5);
    const Matrix w = lsg::gaussian_matrix(8, 6, 1.0, rng);
    const LowRankFactors f = lsg::decompose(w, 2, rng);
    const auto [dl, dr] = lsg::factor_gradients(Matrix(8, 6), f);
    for (double v : dl.data) REQUIRE(v == 0.0);
    for (double v : dr.data) REQUIRE(v == 0.0);
}

TEST_CASE("factor gradients satisfy the orthonormal identities", "[reparam]") {
    RngState rng(21);
    const Matrix w = lsg::gaussian_matrix(9, 7, 1.0, rng);
    const LowRankFactors f = lsg::decompose(w, 3, rng);
    const Matrix m = lsg::gaussian_matrix(3, 3, 1.0, rng);
    // dW = L M R with orthonormal factors: dL = L M (since R R^T = I), dR = M R
    const Matrix dw = lsg::matmul(f.left, lsg::matmul(m, f.right));
    const auto [dl, dr] = lsg::factor_gradients(dw, f);
    REQUIRE(oracle::rel_fro_err(dl, lsg::matmul(f.left, m)) < 1e-10);
    REQUIRE(oracle::rel_fro_err(dr, lsg::matmul(m, f.right)) < 1e-10);
}

TEST_CASE("factor gradients match finite differences of a reparametrized loss", "[reparam]") {
    // loss(W) = 0.5 ||W - T||_F^2 evaluated at W = L R, differentiated in the
    // entries of L (R fixed) and R (L fixed)
    RngState rng(31);
    const std::size_t m = 6, n = 5, r = 2;
    const Matrix w = lsg::gaussian_matrix(m, n, 1.0, rng);
    const Matrix target = lsg::gaussian_matrix(m, n, 1.0, rng);
    LowRankFactors f = lsg::decompose(w, r, rng);

    const auto loss = [&]() {
        const Matrix prod = lsg::matmul(f.left, f.right);
        const Matrix diff = lsg::subtract(prod, target);
        return 0.5 * lsg::frobenius_norm(diff) * lsg::frobenius_norm(diff);
    };
    const Matrix at = lsg::matmul(f.left, f.right);
    const Matrix dw = lsg::subtract(at, target);  // dLoss/dW at W = L R
    const auto [dl, dr] = lsg::factor_gradients(dw, f);

    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t k = 0; k < r; ++k) {
            const double fd = oracle::central_diff(&f.left(i, k), loss);
            REQUIRE(oracle::rel_err(dl(i, k), fd) < 1e-4);
        }
    for (std::size_t k = 0; k < r; ++k)
        for (std::size_t j = 0; j < n; ++j) {
            const double fd = oracle::central_diff(&f.right(k, j), loss);
            REQUIRE(oracle::rel_err(dr(k, j), fd) < 1e-4);
        }
}

TEST_CASE("reconstruct of zero gradients is zero", "[reparam]") {
    RngState rng(2);
    const Matrix w = lsg::gaussian_matrix(5, 8, 1.0, rng);
    const LowRankFactors f = lsg::decompose(w, 2, rng);
    const Matrix rec = lsg::reconstruct_gradient(Matrix(5, 2), Matrix(2, 8), f);
    for (double v : rec.data) REQUIRE(v == 0.0);
}

TEST_CASE("in-span gradients reconstruct exactly", "[reparam]") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        RngState rng(seed + 100);
        const std::size_t m = 10, n = 8, r = 3;
        const Matrix w = lsg::gaussian_matrix(m, n, 1.0, rng);
        const LowRankFactors f = lsg::decompose(w, r, rng);
        // dW = L A + B R with L^T B = 0: project a random B off span(L)
        const Matrix a = lsg::gaussian_matrix(r, n, 1.0, rng);
        Matrix b = lsg::gaussian_matrix(m, r, 1.0, rng);
        b = lsg::subtract(b, lsg::matmul(f.left, lsg::matmul(lsg::transpose(f.left), b)));
        const Matrix dw = lsg::add(lsg::matmul(f.left, a), lsg::matmul(b, f.right));
        const auto [dl, dr] = lsg::factor_gradients(dw, f);
        const Matrix rec = lsg::reconstruct_gradient(dl, dr, f);
        REQUIRE(oracle::rel_fro_err(rec, dw) < 1e-9);
    }
}

TEST_CASE("reconstruct o factor_gradients equals the projection oracle", "[reparam]") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        RngState rng(seed + 500);
        const Matrix w = lsg::gaussian_matrix(11, 9, 1.0, rng);
        const LowRankFactors f = lsg::decompose(w, 4, rng);
        const Matrix dw = lsg::gaussian_matrix(11, 9, 1.0, rng);
        const auto [dl, dr] = lsg::factor_gradients(dw, f);
        const Matrix rec = lsg::reconstruct_gradient(dl, dr, f);
        REQUIRE(oracle::rel_fro_err(rec, projection_oracle(dw, f)) < 1e-9);
    }
}

TEST_CASE("the induced projection is idempotent and contractive", "[reparam]") {
    RngState rng(77);
    const Matrix w = lsg::gaussian_matrix(12, 10, 1.0, rng);
    const LowRankFactors f = lsg::decompose(w, 3, rng);
    const Matrix dw = lsg::gaussian_matrix(12, 10, 1.0, rng);

    const auto project = [&](const Matrix& g) {
        const auto [dl, dr] = lsg::factor_gradients(g, f);
        return lsg::reconstruct_gradient(dl, dr, f);
    };
    const Matrix once = project(dw);
    const Matrix twice = project(once);
    REQUIRE(oracle::rel_fro_err(twice, once) < 1e-9);
    REQUIRE(lsg::frobenius_norm(once) <= lsg::frobenius_norm(dw) * (1.0 + 1e-9));
}

TEST_CASE("warm-start decomposition reuses the sketch deterministically", "[reparam]") {
    RngState rng(41);
    const Matrix w = lsg::gaussian_matrix(10, 7, 1.0, rng);
    const LowRankFactors cold = lsg::decompose(w, 3, rng);
    const LowRankFactors warm1 = lsg::decompose_warm(w, 3, cold.right);
    const LowRankFactors warm2 = lsg::decompose_warm(w, 3, cold.right);
    REQUIRE(warm1.left.data == warm2.left.data);
    REQUIRE(warm1.right.data == warm2.right.data);
    REQUIRE(col_orthonormality_defect(warm1.left) < 1e-8);
}

TEST_CASE("factor parameter count arithmetic", "[reparam]") {
    REQUIRE(lsg::factor_param_count(784, 128, 8) == 8 * (784 + 128));
    REQUIRE(lsg::factor_param_count(784, 128, 8) < 784 * 128);
}
