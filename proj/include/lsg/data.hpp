#pragma once

// Dataset ingestion and minibatch sampling. Loaders are byte-deterministic;
// synthetic generators are seeded. Features are row-major (one sample per
// row) 64-bit floats; image pixels are scaled to [0,1] on load.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lsg/matrix.hpp"
#include "lsg/model.hpp"
#include "lsg/rng.hpp"

namespace lsg {

struct DataError : std::runtime_error {
    explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

struct Dataset {
    Matrix features;  // N x D
    std::vector<int> labels;
    std::size_t classes = 0;
    Shape3 shape;  // D == shape.flat()
    Normalization norm;        // statistics applied to features (if any)
    bool standardized = false;

    std::size_t size() const { return features.rows; }

    void validate() const {
        if (features.rows == 0) throw DataError("dataset: empty");
        if (features.rows != labels.size()) throw DataError("dataset: label count mismatch");
        if (features.cols != shape.flat()) throw DataError("dataset: shape/feature mismatch");
        for (int y : labels)
            if (y < 0 || static_cast<std::size_t>(y) >= classes)
                throw DataError("dataset: label out of range");
        if (!features.all_finite()) throw DataError("dataset: non-finite feature");
    }
};

// ---------------------------------------------------------------------------
// IDX (big-endian header) image/label files
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset,
                               const std::string& path) {
    if (offset + 4 > bytes.size()) throw DataError(path + ": truncated header");
    return (static_cast<std::uint32_t>(bytes[offset]) << 24) |
           (static_cast<std::uint32_t>(bytes[offset + 1]) << 16) |
           (static_cast<std::uint32_t>(bytes[offset + 2]) << 8) |
           static_cast<std::uint32_t>(bytes[offset + 3]);
}

}  // namespace detail

// MNIST-style IDX pair: images magic 0x00000803 (count, rows, cols), labels
// magic 0x00000801 (count). Pixels are scaled to [0,1].
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    const auto img = detail::read_file_bytes(images_path);
    const auto lbl = detail::read_file_bytes(labels_path);

    if (detail::read_be32(img, 0, images_path) != 0x00000803u)
        throw DataError(images_path + ": bad magic (want 0x00000803)");
    if (detail::read_be32(lbl, 0, labels_path) != 0x00000801u)
        throw DataError(labels_path + ": bad magic (want 0x00000801)");

    const std::size_t count = detail::read_be32(img, 4, images_path);
    const std::size_t rows = detail::read_be32(img, 8, images_path);
    const std::size_t cols = detail::read_be32(img, 12, images_path);
    const std::size_t lbl_count = detail::read_be32(lbl, 4, labels_path);
    if (count != lbl_count)
        throw DataError("idx: image count " + std::to_string(count) + " != label count " +
                        std::to_string(lbl_count));

    const std::size_t want_img = 16 + count * rows * cols;
    if (img.size() != want_img)
        throw DataError(images_path + ": expected " + std::to_string(want_img) +
                        " bytes, found " + std::to_string(img.size()));
    const std::size_t want_lbl = 8 + count;
    if (lbl.size() != want_lbl)
        throw DataError(labels_path + ": expected " + std::to_string(want_lbl) +
                        " bytes, found " + std::to_string(lbl.size()));

    Dataset ds;
    ds.shape = Shape3{1, rows, cols};
    ds.features = Matrix(count, rows * cols);
    ds.labels.resize(count);
    ds.classes = 10;
    for (std::size_t i = 0; i < count; ++i) {
        const unsigned char* px = img.data() + 16 + i * rows * cols;
        double* row = ds.features.row_ptr(i);
        for (std::size_t p = 0; p < rows * cols; ++p) row[p] = px[p] / 255.0;
        ds.labels[i] = static_cast<int>(lbl[8 + i]);
    }
    ds.validate();
    return ds;
}

// CIFAR-10 binary batches: records of 1 label byte + 3072 pixel bytes
// (3 channel planes of 32x32).
inline Dataset load_cifar10(const std::vector<std::string>& batch_paths) {
    constexpr std::size_t kRecord = 3073;
    Dataset ds;
    ds.shape = Shape3{3, 32, 32};
    ds.classes = 10;
    std::vector<double> feat;
    for (const std::string& path : batch_paths) {
        const auto bytes = detail::read_file_bytes(path);
        if (bytes.empty() || bytes.size() % kRecord != 0)
            throw DataError(path + ": size " + std::to_string(bytes.size()) +
                            " is not a multiple of record size " + std::to_string(kRecord));
        const std::size_t n = bytes.size() / kRecord;
        for (std::size_t i = 0; i < n; ++i) {
            const unsigned char* rec = bytes.data() + i * kRecord;
            ds.labels.push_back(static_cast<int>(rec[0]));
            for (std::size_t p = 0; p < 3072; ++p) feat.push_back(rec[1 + p] / 255.0);
        }
    }
    const std::size_t n = ds.labels.size();
    ds.features = Matrix(n, 3072);
    ds.features.data = std::move(feat);
    ds.validate();
    return ds;
}

// CSV with a header row; the column named `label_column` holds integer class
// labels, every other column is a numeric feature.
inline Dataset load_csv(const std::string& path, const std::string& label_column = "label") {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw DataError(path + ": missing header row");
    std::vector<std::string> header;
    {
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) header.push_back(cell);
    }
    const auto it = std::find(header.begin(), header.end(), label_column);
    if (it == header.end())
        throw DataError(path + ": no '" + label_column + "' column in header");
    const std::size_t label_idx = static_cast<std::size_t>(it - header.begin());
    const std::size_t dim = header.size() - 1;

    std::vector<double> feat;
    std::vector<int> labels;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::size_t col = 0;
        std::size_t got = 0;
        while (std::getline(ss, cell, ',')) {
            try {
                if (col == label_idx)
                    labels.push_back(std::stoi(cell));
                else
                    feat.push_back(std::stod(cell));
            } catch (...) {
                throw DataError(path + ":" + std::to_string(line_no) + ": bad value '" + cell +
                                "'");
            }
            ++col;
            ++got;
        }
        if (got != header.size())
            throw DataError(path + ":" + std::to_string(line_no) + ": expected " +
                            std::to_string(header.size()) + " cells, found " +
                            std::to_string(got));
    }
    Dataset ds;
    ds.shape = Shape3{1, 1, dim};
    ds.features = Matrix(labels.size(), dim);
    ds.features.data = std::move(feat);
    ds.labels = std::move(labels);
    int maxl = 0;
    for (int y : ds.labels) maxl = std::max(maxl, y);
    ds.classes = static_cast<std::size_t>(maxl) + 1;
    ds.validate();
    return ds;
}

// ---------------------------------------------------------------------------
// synthetic generators
// ---------------------------------------------------------------------------

// Gaussian blobs: class means are `separation`-scaled seeded directions
// (orthonormalized when classes <= dim, so every pair of means sits at
// distance separation*sqrt(2) regardless of the seed), samples are
// mean + N(0, spread^2 I). Classes are assigned round-robin, so priors are
// balanced within one sample.
inline Dataset synth_gaussian_blobs(std::size_t classes, std::size_t dim, std::size_t n,
                                    std::uint64_t seed, double separation = 3.0,
                                    double spread = 1.0) {
    if (classes < 2) throw std::invalid_argument("blobs: need at least 2 classes");
    if (dim == 0 || n == 0) throw std::invalid_argument("blobs: empty dimensions");
    RngState mean_rng(derive_seed(seed, 101));
    Matrix means(classes, dim);
    if (classes <= dim) {
        const Matrix dirs =
            orthonormalize_columns(gaussian_matrix(dim, classes, 1.0, mean_rng));
        for (std::size_t c = 0; c < classes; ++c)
            for (std::size_t d = 0; d < dim; ++d) means(c, d) = separation * dirs(d, c);
    } else {
        for (std::size_t c = 0; c < classes; ++c) {
            double norm2 = 0.0;
            for (std::size_t d = 0; d < dim; ++d) {
                means(c, d) = mean_rng.next_gaussian(1.0);
                norm2 += means(c, d) * means(c, d);
            }
            const double inv = separation / std::sqrt(norm2);
            for (std::size_t d = 0; d < dim; ++d) means(c, d) *= inv;
        }
    }
    RngState rng(derive_seed(seed, 102));
    Dataset ds;
    ds.classes = classes;
    ds.shape = Shape3{1, 1, dim};
    ds.features = Matrix(n, dim);
    ds.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t c = i % classes;
        ds.labels[i] = static_cast<int>(c);
        double* row = ds.features.row_ptr(i);
        for (std::size_t d = 0; d < dim; ++d)
            row[d] = means(c, d) + rng.next_gaussian(spread);
    }
    ds.validate();
    return ds;
}

namespace detail {

struct Seg {
    double x0, y0, x1, y1;
};

// Stroke templates on the unit square (y grows downward).
inline const std::vector<std::vector<Seg>>& digit_strokes() {
    static const std::vector<std::vector<Seg>> strokes = {
        /*0*/ {{0.32, 0.18, 0.68, 0.18}, {0.68, 0.18, 0.68, 0.82}, {0.68, 0.82, 0.32, 0.82},
               {0.32, 0.82, 0.32, 0.18}},
        /*1*/ {{0.38, 0.32, 0.55, 0.16}, {0.55, 0.16, 0.55, 0.84}},
        /*2*/ {{0.30, 0.30, 0.46, 0.16}, {0.46, 0.16, 0.68, 0.22}, {0.68, 0.22, 0.66, 0.44},
               {0.66, 0.44, 0.30, 0.84}, {0.30, 0.84, 0.72, 0.84}},
        /*3*/ {{0.30, 0.17, 0.70, 0.17}, {0.70, 0.17, 0.50, 0.45}, {0.50, 0.45, 0.70, 0.62},
               {0.70, 0.62, 0.64, 0.84}, {0.64, 0.84, 0.30, 0.81}},
        /*4*/ {{0.62, 0.84, 0.62, 0.16}, {0.62, 0.16, 0.30, 0.60}, {0.30, 0.60, 0.76, 0.60}},
        /*5*/ {{0.70, 0.16, 0.35, 0.16}, {0.35, 0.16, 0.33, 0.50}, {0.33, 0.50, 0.64, 0.50},
               {0.64, 0.50, 0.68, 0.78}, {0.68, 0.78, 0.30, 0.84}},
        /*6*/ {{0.64, 0.16, 0.40, 0.40}, {0.40, 0.40, 0.33, 0.70}, {0.33, 0.70, 0.50, 0.84},
               {0.50, 0.84, 0.67, 0.70}, {0.67, 0.70, 0.60, 0.53}, {0.60, 0.53, 0.36, 0.60}},
        /*7*/ {{0.30, 0.16, 0.72, 0.16}, {0.72, 0.16, 0.46, 0.84}},
        /*8*/ {{0.36, 0.16, 0.64, 0.16}, {0.64, 0.16, 0.64, 0.48}, {0.64, 0.48, 0.36, 0.48},
               {0.36, 0.48, 0.36, 0.16}, {0.33, 0.48, 0.67, 0.48}, {0.67, 0.48, 0.67, 0.84},
               {0.67, 0.84, 0.33, 0.84}, {0.33, 0.84, 0.33, 0.48}},
        /*9*/ {{0.66, 0.44, 0.38, 0.50}, {0.38, 0.50, 0.33, 0.26}, {0.33, 0.26, 0.55, 0.16},
               {0.55, 0.16, 0.66, 0.26}, {0.66, 0.26, 0.66, 0.44}, {0.66, 0.44, 0.60, 0.84}},
    };
    return strokes;
}

inline double point_segment_distance(double px, double py, const Seg& s) {
    const double dx = s.x1 - s.x0;
    const double dy = s.y1 - s.y0;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0.0 ? ((px - s.x0) * dx + (py - s.y0) * dy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double cx = s.x0 + t * dx;
    const double cy = s.y0 + t * dy;
    return std::sqrt((px - cx) * (px - cx) + (py - cy) * (py - cy));
}

}  // namespace detail

// Procedurally rendered 28x28 "digits": each class is a fixed stroke glyph
// drawn with per-sample jitter (shift, scale, rotation, stroke width) plus
// pixel noise. A seeded stand-in for handwritten-digit data at desk scale.
inline Dataset synth_digits(std::size_t n, std::uint64_t seed, double pixel_noise = 0.08) {
    constexpr std::size_t kSide = 28;
    const auto& strokes = detail::digit_strokes();
    RngState rng(derive_seed(seed, 201));
    Dataset ds;
    ds.classes = 10;
    ds.shape = Shape3{1, kSide, kSide};
    ds.features = Matrix(n, kSide * kSide);
    ds.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t cls = i % 10;
        ds.labels[i] = static_cast<int>(cls);
        const double shift_x = (rng.next_unit() - 0.5) * 0.18;
        const double shift_y = (rng.next_unit() - 0.5) * 0.18;
        const double scale = 0.85 + rng.next_unit() * 0.3;
        const double angle = (rng.next_unit() - 0.5) * 0.36;
        const double width = 0.035 + rng.next_unit() * 0.02;
        const double ca = std::cos(angle), sa = std::sin(angle);

        std::vector<detail::Seg> segs = strokes[cls];
        for (detail::Seg& s : segs) {
            auto tf = [&](double& x, double& y) {
                const double cx = x - 0.5, cy = y - 0.5;
                x = 0.5 + scale * (ca * cx - sa * cy) + shift_x;
                y = 0.5 + scale * (sa * cx + ca * cy) + shift_y;
            };
            tf(s.x0, s.y0);
            tf(s.x1, s.y1);
        }

        double* row = ds.features.row_ptr(i);
        for (std::size_t py = 0; py < kSide; ++py)
            for (std::size_t px = 0; px < kSide; ++px) {
                const double x = (static_cast<double>(px) + 0.5) / kSide;
                const double y = (static_cast<double>(py) + 0.5) / kSide;
                double dmin = 1e9;
                for (const detail::Seg& s : segs)
                    dmin = std::min(dmin, detail::point_segment_distance(x, y, s));
                double v = std::exp(-(dmin * dmin) / (2.0 * width * width));
                v += rng.next_gaussian(pixel_noise);
                row[py * kSide + px] = std::clamp(v, 0.0, 1.0);
            }
    }
    ds.validate();
    return ds;
}

// ---------------------------------------------------------------------------
// normalization and sampling
// ---------------------------------------------------------------------------

inline Normalization compute_normalization(const Dataset& ds) {
    Normalization norm;
    norm.mean.assign(ds.shape.c, 0.0);
    norm.stddev.assign(ds.shape.c, 0.0);
    const std::size_t per_channel = ds.shape.h * ds.shape.w;
    const double count = static_cast<double>(ds.size() * per_channel);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const double* row = ds.features.row_ptr(i);
        for (std::size_t c = 0; c < ds.shape.c; ++c)
            for (std::size_t p = 0; p < per_channel; ++p) norm.mean[c] += row[c * per_channel + p];
    }
    for (double& m : norm.mean) m /= count;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const double* row = ds.features.row_ptr(i);
        for (std::size_t c = 0; c < ds.shape.c; ++c)
            for (std::size_t p = 0; p < per_channel; ++p) {
                const double d = row[c * per_channel + p] - norm.mean[c];
                norm.stddev[c] += d * d;
            }
    }
    for (double& s : norm.stddev) s = std::max(std::sqrt(s / count), 1e-8);
    return norm;
}

// No-op if the dataset is already standardized (idempotent by construction).
inline void apply_normalization(Dataset& ds, const Normalization& norm) {
    if (ds.standardized) return;
    if (norm.mean.size() != ds.shape.c) throw DataError("normalization: channel mismatch");
    const std::size_t per_channel = ds.shape.h * ds.shape.w;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        double* row = ds.features.row_ptr(i);
        for (std::size_t c = 0; c < ds.shape.c; ++c)
            for (std::size_t p = 0; p < per_channel; ++p)
                row[c * per_channel + p] = (row[c * per_channel + p] - norm.mean[c]) /
                                           norm.stddev[c];
    }
    ds.norm = norm;
    ds.standardized = true;
}

// Head/tail split (first n_head rows vs the rest). Round-robin generators
// keep both sides class-balanced.
inline std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, std::size_t n_head) {
    if (n_head == 0 || n_head >= ds.size())
        throw std::invalid_argument("split_dataset: head size must be in (0, N)");
    Dataset head = ds, tail = ds;
    head.features = Matrix(n_head, ds.features.cols);
    std::copy(ds.features.data.begin(),
              ds.features.data.begin() + static_cast<long>(n_head * ds.features.cols),
              head.features.data.begin());
    head.labels.assign(ds.labels.begin(), ds.labels.begin() + static_cast<long>(n_head));
    const std::size_t n_tail = ds.size() - n_head;
    tail.features = Matrix(n_tail, ds.features.cols);
    std::copy(ds.features.data.begin() + static_cast<long>(n_head * ds.features.cols),
              ds.features.data.end(), tail.features.data.begin());
    tail.labels.assign(ds.labels.begin() + static_cast<long>(n_head), ds.labels.end());
    return {std::move(head), std::move(tail)};
}

// Poisson sampling: every record enters the batch independently with
// probability q. Returns ascending indices (without replacement by
// construction); consumes exactly n uniform draws.
inline std::vector<std::size_t> poisson_sample(std::size_t n, double q, RngState& rng) {
    if (!(q > 0.0 && q <= 1.0)) throw std::invalid_argument("poisson_sample: q not in (0,1]");
    std::vector<std::size_t> batch;
    batch.reserve(static_cast<std::size_t>(q * static_cast<double>(n) * 1.5) + 8);
    for (std::size_t i = 0; i < n; ++i)
        if (rng.next_unit() < q) batch.push_back(i);
    return batch;
}

// Fixed-size batch of `size` distinct indices (partial Fisher-Yates). Not
// covered by the Poisson amplification analysis; the trainer flags the
// ledger when this scheme is used.
inline std::vector<std::size_t> fixed_sample(std::size_t n, std::size_t size, RngState& rng) {
    if (size > n) throw std::invalid_argument("fixed_sample: size > population");
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t i = 0; i < size; ++i) {
        const auto j =
            i + std::min(static_cast<std::size_t>(rng.next_unit() * static_cast<double>(n - i)),
                         n - i - 1);
        std::swap(order[i], order[j]);
    }
    order.resize(size);
    std::sort(order.begin(), order.end());
    return order;
}

// Extracts the rows named by `idx` into a contiguous batch.
inline Matrix gather_rows(const Matrix& features, const std::vector<std::size_t>& idx) {
    Matrix out(idx.size(), features.cols);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const double* src = features.row_ptr(idx[i]);
        std::copy(src, src + features.cols, out.row_ptr(i));
    }
    return out;
}

inline std::vector<int> gather_labels(const std::vector<int>& labels,
                                      const std::vector<std::size_t>& idx) {
    std::vector<int> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = labels[idx[i]];
    return out;
}

}  // namespace lsg
