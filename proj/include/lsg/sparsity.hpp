#pragma once

// Importance-based gradient freezing. Importance of an input unit is the
// absolute sum of its weight row, of an output unit the absolute sum of its
// weight column; for conv kernels the sums additionally run over the kernel
// axes. A mask keeps the top ceil((1-p)*len) units per side (ties broken by
// lower index) and zeroes the factor-gradient rows/columns of all others.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "lsg/matrix.hpp"
#include "lsg/rng.hpp"

namespace lsg {

struct ImportanceVectors {
    std::vector<double> input;   // length m, one score per input unit
    std::vector<double> output;  // length n, one score per output unit
};

// W is m x n (inputs x outputs): input scores are row sums, output scores
// column sums of |W|.
inline ImportanceVectors importance(const Matrix& w) {
    ImportanceVectors iv;
    iv.input.assign(w.rows, 0.0);
    iv.output.assign(w.cols, 0.0);
    for (std::size_t i = 0; i < w.rows; ++i)
        for (std::size_t j = 0; j < w.cols; ++j) {
            const double a = std::abs(w(i, j));
            iv.input[i] += a;
            iv.output[j] += a;
        }
    return iv;
}

// Kernel-level importance for a conv weight (out n, in m, kh, kw): the score
// of input channel i sums |W| over all output channels and kernel positions,
// and symmetrically for output channels.
inline ImportanceVectors importance_conv(const Tensor4& w) {
    ImportanceVectors iv;
    iv.input.assign(w.in, 0.0);
    iv.output.assign(w.out, 0.0);
    for (std::size_t o = 0; o < w.out; ++o)
        for (std::size_t i = 0; i < w.in; ++i)
            for (std::size_t a = 0; a < w.kh; ++a)
                for (std::size_t b = 0; b < w.kw; ++b) {
                    const double v = std::abs(w.at(o, i, a, b));
                    iv.input[i] += v;
                    iv.output[o] += v;
                }
    return iv;
}

struct SparsityMask {
    std::vector<std::size_t> kept_inputs;   // sorted ascending
    std::vector<std::size_t> kept_outputs;  // sorted ascending
    std::vector<char> input_kept;           // bitmap, length m
    std::vector<char> output_kept;          // bitmap, length n
    double sparsity = 0.0;
};

namespace detail {

// ceil((1-p)*len) with a small slack so that exact-integer products are not
// pushed up by floating-point noise (e.g. 0.9*10 -> 9, not 10).
inline std::size_t kept_count(std::size_t len, double p) {
    if (len == 0) return 0;
    const double raw = (1.0 - p) * static_cast<double>(len);
    auto k = static_cast<std::size_t>(std::ceil(raw - 1e-9));
    return std::clamp<std::size_t>(k, 1, len);
}

inline std::vector<std::size_t> top_indices(const std::vector<double>& scores, std::size_t k) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;  // deterministic tie-break
    });
    order.resize(k);
    std::sort(order.begin(), order.end());
    return order;
}

inline std::vector<char> bitmap(const std::vector<std::size_t>& kept, std::size_t len) {
    std::vector<char> flags(len, 0);
    for (std::size_t idx : kept) flags[idx] = 1;
    return flags;
}

}  // namespace detail

inline SparsityMask build_mask(const ImportanceVectors& iv, double p) {
    if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("build_mask: p must be in [0,1)");
    SparsityMask mask;
    mask.sparsity = p;
    mask.kept_inputs = detail::top_indices(iv.input, detail::kept_count(iv.input.size(), p));
    mask.kept_outputs = detail::top_indices(iv.output, detail::kept_count(iv.output.size(), p));
    mask.input_kept = detail::bitmap(mask.kept_inputs, iv.input.size());
    mask.output_kept = detail::bitmap(mask.kept_outputs, iv.output.size());
    return mask;
}

// Uniformly random kept sets of the same sizes (ablation path). Draws one
// shuffle per side from rng.
inline SparsityMask build_random_mask(std::size_t m, std::size_t n, double p, RngState& rng) {
    if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("build_mask: p must be in [0,1)");
    auto pick = [&rng](std::size_t len, std::size_t k) {
        std::vector<std::size_t> order(len);
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = len; i > 1; --i) {
            const auto j = static_cast<std::size_t>(rng.next_unit() * static_cast<double>(i));
            std::swap(order[i - 1], order[std::min(j, i - 1)]);
        }
        order.resize(k);
        std::sort(order.begin(), order.end());
        return order;
    };
    SparsityMask mask;
    mask.sparsity = p;
    mask.kept_inputs = pick(m, detail::kept_count(m, p));
    mask.kept_outputs = pick(n, detail::kept_count(n, p));
    mask.input_kept = detail::bitmap(mask.kept_inputs, m);
    mask.output_kept = detail::bitmap(mask.kept_outputs, n);
    return mask;
}

// Per-tensor freeze pattern: rows/cols not marked kept are zeroed. An empty
// vector means the corresponding side is fully kept.
struct SlotMask {
    std::vector<char> row_kept;
    std::vector<char> col_kept;

    bool row_ok(std::size_t i) const { return row_kept.empty() || row_kept[i]; }
    bool col_ok(std::size_t j) const { return col_kept.empty() || col_kept[j]; }
    bool kept(std::size_t i, std::size_t j) const { return row_ok(i) && col_ok(j); }
    bool trivial() const { return row_kept.empty() && col_kept.empty(); }
};

// Expands a per-channel bitmap so that each channel covers `group` adjacent
// columns (kernel positions of a flattened conv weight).
inline std::vector<char> expand_groups(const std::vector<char>& channels, std::size_t group) {
    std::vector<char> expanded(channels.size() * group);
    for (std::size_t c = 0; c < channels.size(); ++c)
        for (std::size_t g = 0; g < group; ++g) expanded[c * group + g] = channels[c];
    return expanded;
}

inline void apply_slot_mask(Matrix& m, const SlotMask& slot) {
    if (slot.trivial()) return;
    for (std::size_t i = 0; i < m.rows; ++i) {
        double* row = m.row_ptr(i);
        if (!slot.row_ok(i)) {
            for (std::size_t j = 0; j < m.cols; ++j) row[j] = 0.0;
            continue;
        }
        if (slot.col_kept.empty()) continue;
        for (std::size_t j = 0; j < m.cols; ++j)
            if (!slot.col_kept[j]) row[j] = 0.0;
    }
}

// Dense-layer orientation: rows of dL are input units, columns of dR are
// output units. Kept entries are untouched bit-for-bit.
inline void apply_mask(Matrix& dl, Matrix& dr, const SparsityMask& mask) {
    check_shapes(dl.rows == mask.input_kept.size(), "apply_mask dL rows");
    check_shapes(dr.cols == mask.output_kept.size(), "apply_mask dR cols");
    apply_slot_mask(dl, SlotMask{mask.input_kept, {}});
    apply_slot_mask(dr, SlotMask{{}, mask.output_kept});
}

// Conv orientation on flattened factors: rows of dL (out x r) are output
// channels; dR (r x in*k^2) carries k^2 columns per input channel.
inline void apply_mask_conv(Matrix& dl, Matrix& dr, const SparsityMask& mask,
                            std::size_t kernel_area) {
    check_shapes(dl.rows == mask.output_kept.size(), "apply_mask_conv dL rows");
    check_shapes(dr.cols == mask.input_kept.size() * kernel_area, "apply_mask_conv dR cols");
    apply_slot_mask(dl, SlotMask{mask.output_kept, {}});
    apply_slot_mask(dr, SlotMask{{}, expand_groups(mask.input_kept, kernel_area)});
}

}  // namespace lsg
