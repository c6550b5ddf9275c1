#pragma once

// Per-sample clipping and masked Gaussian noise: the one differentially
// private release performed per training step.
//
// A GradVec holds every trainable tensor of one sample (or of the clipped
// sum): matrix slots (factor gradients dL/dR, or full dW) followed by bias
// vectors. Clipping is joint by default: the concatenation of all slots is
// scaled by min(1, C/||g||_2), so the release has L2 sensitivity C under
// add/remove adjacency. The per_matrix mode clips every slot independently
// at C instead; the joint sensitivity then grows to C*sqrt(#slots) and the
// accountant must be fed the adjusted multiplier (see effective_multiplier).
//
// Noise N(0, (sigma*C)^2) is added per coordinate, but only to coordinates
// the sparsity mask kept; frozen coordinates carry zero signal and zero
// noise. Masking happens before clipping, so frozen coordinates never
// consume clipping budget.

#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <vector>

#include "lsg/matrix.hpp"
#include "lsg/rng.hpp"
#include "lsg/sparsity.hpp"

namespace lsg {

struct ClipConfig {
    double clip_norm = 1.0;   // C > 0; +infinity disables clipping
    bool per_matrix = false;  // clip each slot independently at C

    void validate() const {
        if (!(clip_norm > 0.0)) throw std::invalid_argument("clip: C must be positive");
    }
};

struct NoiseConfig {
    double multiplier = 0.0;  // sigma >= 0

    void validate() const {
        if (multiplier < 0.0) throw std::invalid_argument("noise: sigma must be >= 0");
    }
};

struct GradVec {
    std::vector<Matrix> mats;
    std::vector<std::vector<double>> biases;

    double squared_l2() const {
        double s = 0.0;
        for (const Matrix& m : mats)
            for (double v : m.data) s += v * v;
        for (const auto& b : biases)
            for (double v : b) s += v * v;
        return s;
    }
    double l2_norm() const { return std::sqrt(squared_l2()); }

    void set_zero() {
        for (Matrix& m : mats)
            for (double& v : m.data) v = 0.0;
        for (auto& b : biases)
            for (double& v : b) v = 0.0;
    }

    void scale(double s) {
        for (Matrix& m : mats) scale_in_place(m, s);
        for (auto& b : biases)
            for (double& v : b) v *= s;
    }

    void add_scaled(const GradVec& g, double s) {
        for (std::size_t i = 0; i < mats.size(); ++i) add_scaled_in_place(mats[i], g.mats[i], s);
        for (std::size_t i = 0; i < biases.size(); ++i)
            for (std::size_t j = 0; j < biases[i].size(); ++j) biases[i][j] += s * g.biases[i][j];
    }

    std::size_t slot_count() const { return mats.size() + biases.size(); }

    bool all_finite() const {
        for (const Matrix& m : mats)
            if (!m.all_finite()) return false;
        for (const auto& b : biases)
            for (double v : b)
                if (!std::isfinite(v)) return false;
        return true;
    }
};

// min(1, C/norm); a zero-norm gradient is left unscaled.
inline double clip_scale(double norm, double clip_norm) {
    if (norm == 0.0) return 1.0;
    return std::min(1.0, clip_norm / norm);
}

// Clips one sample in place; returns its pre-clip joint norm. In per_matrix
// mode each slot is scaled by its own factor (the returned norm stays the
// joint one, for diagnostics).
inline double clip_in_place(GradVec& g, const ClipConfig& cfg) {
    const double norm = g.l2_norm();
    if (cfg.per_matrix) {
        for (Matrix& m : g.mats) {
            double s = 0.0;
            for (double v : m.data) s += v * v;
            scale_in_place(m, clip_scale(std::sqrt(s), cfg.clip_norm));
        }
        for (auto& b : g.biases) {
            double s = 0.0;
            for (double v : b) s += v * v;
            const double f = clip_scale(std::sqrt(s), cfg.clip_norm);
            for (double& v : b) v *= f;
        }
    } else {
        g.scale(clip_scale(norm, cfg.clip_norm));
    }
    return norm;
}

// In-place per-sample clipping; returns the pre-clip joint norms.
inline std::vector<double> clip_per_sample(std::vector<GradVec>& grads, const ClipConfig& cfg) {
    cfg.validate();
    std::vector<double> norms;
    norms.reserve(grads.size());
    for (GradVec& g : grads) norms.push_back(clip_in_place(g, cfg));
    return norms;
}

// Noise multiplier to feed the accountant so that noise std sigma*C is
// measured against the actual joint sensitivity of the release.
inline double effective_multiplier(double sigma, const ClipConfig& cfg, std::size_t slots) {
    if (!cfg.per_matrix || slots == 0) return sigma;
    return sigma / std::sqrt(static_cast<double>(slots));
}

// Adds N(0, (sigma*C)^2) to every kept coordinate of the summed gradients.
// masks[i] applies to mats[i]; bias slots are always fully kept. Frozen
// coordinates are untouched (they are exactly zero on entry and stay so).
// Noise is drawn in slot order, row-major, kept coordinates only, so the
// consumed stream is identical whenever the kept pattern is identical.
inline void sanitize(GradVec& summed, const std::vector<SlotMask>& masks, double clip_norm,
                     double sigma, RngState& rng) {
    if (sigma < 0.0) throw std::invalid_argument("sanitize: sigma must be >= 0");
    if (masks.size() != summed.mats.size())
        throw std::invalid_argument("sanitize: one mask per matrix slot required");
    if (sigma == 0.0) return;
    const double std = sigma * clip_norm;
    for (std::size_t s = 0; s < summed.mats.size(); ++s) {
        Matrix& m = summed.mats[s];
        const SlotMask& mask = masks[s];
        for (std::size_t i = 0; i < m.rows; ++i) {
            if (!mask.row_ok(i)) continue;
            double* row = m.row_ptr(i);
            for (std::size_t j = 0; j < m.cols; ++j)
                if (mask.col_ok(j)) row[j] += rng.next_gaussian(std);
        }
    }
    for (auto& b : summed.biases)
        for (double& v : b) v += rng.next_gaussian(std);
}

// Number of coordinates that receive noise under the given masks.
inline std::size_t noised_coordinate_count(const GradVec& summed,
                                           const std::vector<SlotMask>& masks) {
    std::size_t count = 0;
    for (std::size_t s = 0; s < summed.mats.size(); ++s) {
        const Matrix& m = summed.mats[s];
        const SlotMask& mask = masks[s];
        for (std::size_t i = 0; i < m.rows; ++i) {
            if (!mask.row_ok(i)) continue;
            for (std::size_t j = 0; j < m.cols; ++j)
                if (mask.col_ok(j)) ++count;
        }
    }
    for (const auto& b : summed.biases) count += b.size();
    return count;
}

}  // namespace lsg
