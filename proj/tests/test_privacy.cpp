#include "catch2/catch_amalgamated.hpp"

#include <cmath>

#include "lsg/privacy.hpp"
#include "lsg/rng.hpp"
#include "oracles.hpp"

using lsg::ClipConfig;
using lsg::GradVec;
using lsg::Matrix;
using lsg::RngState;
using lsg::SlotMask;

namespace {

GradVec random_gradvec(RngState& rng, double scale = 1.0) {
    GradVec g;
    g.mats.push_back(lsg::gaussian_matrix(4, 3, scale, rng));
    g.mats.push_back(lsg::gaussian_matrix(2, 5, scale, rng));
    g.biases.push_back({rng.next_gaussian(scale), rng.next_gaussian(scale)});
    return g;
}

// scalar-loop recomputation of the joint norm
double norm_oracle(const GradVec& g) {
    double s = 0.0;
    for (const Matrix& m : g.mats)
        for (double v : m.data) s += v * v;
    for (const auto& b : g.biases)
        for (double v : b) s += v * v;
    return std::sqrt(s);
}

}  // namespace

TEST_CASE("clip scale formula", "[privacy]") {
    REQUIRE(lsg::clip_scale(2.0, 1.0) == 0.5);   // ||g|| = 2C -> scaled by C/||g||
    REQUIRE(lsg::clip_scale(0.5, 1.0) == 1.0);   // ||g|| = C/2 -> unchanged
    REQUIRE(lsg::clip_scale(0.0, 1.0) == 1.0);   // zero gradient stays zero
    REQUIRE(lsg::clip_scale(5.0, std::numeric_limits<double>::infinity()) == 1.0);
}

TEST_CASE("clipping a doubled-norm sample halves it exactly", "[privacy]") {
    RngState rng(1);
    GradVec g = random_gradvec(rng);
    const double norm = g.l2_norm();
    const double c = norm / 2.0;
    std::vector<GradVec> batch = {g};
    const auto norms = lsg::clip_per_sample(batch, ClipConfig{c, false});
    REQUIRE(norms[0] == Catch::Approx(norm));
    REQUIRE(batch[0].l2_norm() == Catch::Approx(c).epsilon(1e-12));
}

TEST_CASE("small gradients pass through clipping untouched", "[privacy]") {
    RngState rng(2);
    GradVec g = random_gradvec(rng, 0.01);
    const GradVec orig = g;
    std::vector<GradVec> batch = {g};
    lsg::clip_per_sample(batch, ClipConfig{100.0, false});
    REQUIRE(batch[0].mats[0].data == orig.mats[0].data);
    REQUIRE(batch[0].biases[0] == orig.biases[0]);
}

TEST_CASE("post-clip norms stay below C on random batches", "[privacy]") {
    RngState rng(3);
    const double c = 0.7;
    std::vector<GradVec> batch;
    for (int i = 0; i < 16; ++i) batch.push_back(random_gradvec(rng, 2.0));
    const auto norms = lsg::clip_per_sample(batch, ClipConfig{c, false});
    REQUIRE(norms.size() == 16);
    for (const GradVec& g : batch) REQUIRE(norm_oracle(g) <= c + 1e-9);
}

TEST_CASE("per-matrix clipping bounds each slot at C", "[privacy]") {
    RngState rng(4);
    std::vector<GradVec> batch = {random_gradvec(rng, 3.0)};
    const double c = 0.5;
    lsg::clip_per_sample(batch, ClipConfig{c, true});
    for (const Matrix& m : batch[0].mats) {
        double s = 0.0;
        for (double v : m.data) s += v * v;
        REQUIRE(std::sqrt(s) <= c + 1e-9);
    }
    const std::size_t slots = batch[0].slot_count();
    REQUIRE(batch[0].l2_norm() <= c * std::sqrt(static_cast<double>(slots)) + 1e-9);
    // the accountant sees the effective multiplier sigma / sqrt(slots)
    REQUIRE(lsg::effective_multiplier(1.0, ClipConfig{c, true}, slots) ==
            Catch::Approx(1.0 / std::sqrt(static_cast<double>(slots))));
    REQUIRE(lsg::effective_multiplier(1.0, ClipConfig{c, false}, slots) == 1.0);
}

TEST_CASE("dropping one sample moves the clipped sum by at most C", "[privacy]") {
    RngState rng(5);
    const double c = 1.0;
    std::vector<GradVec> batch;
    for (int i = 0; i < 10; ++i) batch.push_back(random_gradvec(rng, 1.5));
    lsg::clip_per_sample(batch, ClipConfig{c, false});

    GradVec sum = batch[0];
    sum.set_zero();
    for (const GradVec& g : batch) sum.add_scaled(g, 1.0);
    for (std::size_t drop = 0; drop < batch.size(); ++drop) {
        GradVec without = sum;
        without.add_scaled(batch[drop], -1.0);
        without.add_scaled(sum, -1.0);  // without = -dropped contribution
        REQUIRE(without.l2_norm() <= c + 1e-9);
    }
}

TEST_CASE("sanitize with sigma=0 is the identity", "[privacy]") {
    RngState rng(6), noise(7);
    GradVec g = random_gradvec(rng);
    const GradVec orig = g;
    const std::vector<SlotMask> masks(g.mats.size());
    lsg::sanitize(g, masks, 1.0, 0.0, noise);
    REQUIRE(g.mats[0].data == orig.mats[0].data);
    REQUIRE(g.mats[1].data == orig.mats[1].data);
    REQUIRE(g.biases[0] == orig.biases[0]);
}

TEST_CASE("sanitize adds noise only to kept coordinates", "[privacy]") {
    RngState rng(8), noise(9);
    GradVec g;
    g.mats.push_back(Matrix(4, 3));
    std::vector<SlotMask> masks(1);
    masks[0].row_kept = {1, 0, 1, 0};  // rows 1 and 3 frozen
    masks[0].col_kept = {1, 1, 0};     // col 2 frozen
    lsg::sanitize(g, masks, 2.0, 1.5, noise);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            if (masks[0].row_kept[i] && masks[0].col_kept[j])
                REQUIRE(g.mats[0](i, j) != 0.0);
            else
                REQUIRE(g.mats[0](i, j) == 0.0);  // frozen: exactly zero
        }
    REQUIRE(lsg::noised_coordinate_count(g, masks) == 4);
}

TEST_CASE("an all-frozen mask yields exactly zero output", "[privacy]") {
    RngState noise(10);
    GradVec g;
    g.mats.push_back(Matrix(3, 3));
    std::vector<SlotMask> masks(1);
    masks[0].row_kept = {0, 0, 0};
    lsg::sanitize(g, masks, 1.0, 2.0, noise);
    for (double v : g.mats[0].data) REQUIRE(v == 0.0);
    REQUIRE(lsg::noised_coordinate_count(g, masks) == 0);
}

TEST_CASE("noise std matches sigma*C within 1% over 1e5 draws", "[privacy]") {
    const double sigma = 1.3, c = 2.0;
    RngState noise(20250810);
    const std::size_t n = 100000;
    GradVec g;
    g.mats.push_back(Matrix(1, 1));
    const std::vector<SlotMask> masks(1);
    double sum = 0.0, sum2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        g.mats[0](0, 0) = 0.0;
        lsg::sanitize(g, masks, c, sigma, noise);
        sum += g.mats[0](0, 0);
        sum2 += g.mats[0](0, 0) * g.mats[0](0, 0);
    }
    const double mean = sum / static_cast<double>(n);
    const double std = std::sqrt(sum2 / static_cast<double>(n) - mean * mean);
    REQUIRE(std::abs(std - sigma * c) / (sigma * c) < 0.01);
}

TEST_CASE("sigma=0 and C=inf leave summed gradients bit-for-bit intact", "[privacy]") {
    RngState rng(11), noise(12);
    std::vector<GradVec> batch;
    for (int i = 0; i < 5; ++i) batch.push_back(random_gradvec(rng, 1.0));
    GradVec plain = batch[0];
    plain.set_zero();
    for (const GradVec& g : batch) plain.add_scaled(g, 1.0);

    const ClipConfig cfg{std::numeric_limits<double>::infinity(), false};
    lsg::clip_per_sample(batch, cfg);
    GradVec piped = batch[0];
    piped.set_zero();
    for (const GradVec& g : batch) piped.add_scaled(g, 1.0);
    lsg::sanitize(piped, std::vector<SlotMask>(piped.mats.size()),
                  std::numeric_limits<double>::infinity(), 0.0, noise);

    REQUIRE(piped.mats[0].data == plain.mats[0].data);
    REQUIRE(piped.mats[1].data == plain.mats[1].data);
    REQUIRE(piped.biases[0] == plain.biases[0]);
}

TEST_CASE("sanitize validates inputs", "[privacy]") {
    RngState noise(13);
    GradVec g;
    g.mats.push_back(Matrix(2, 2));
    REQUIRE_THROWS_AS(lsg::sanitize(g, {}, 1.0, 1.0, noise), std::invalid_argument);
    ClipConfig bad{0.0, false};
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
}
