#pragma once

// Byte-stable text output: doubles are printed with std::to_chars (shortest
// round-trip form), so a deterministic run always writes identical files.

#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lsg/trainer.hpp"

namespace lsg {

inline std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline std::string metrics_csv_header(std::size_t n_layers) {
    std::string h = "epoch,train_loss,test_accuracy,test_loss,eps_spent,noised_coords";
    for (std::size_t t = 0; t < n_layers; ++t) h += ",kept_params_l" + std::to_string(t);
    return h;
}

inline std::string metrics_csv_row(const EpochMetrics& em) {
    std::string row = std::to_string(em.epoch);
    row += "," + format_double(em.train_loss);
    row += "," + format_double(em.test_accuracy);
    row += "," + format_double(em.test_loss);
    row += "," + format_double(em.eps_spent);
    row += "," + std::to_string(em.noised_coords);
    for (std::size_t k : em.kept_params) row += "," + std::to_string(k);
    return row;
}

inline void write_metrics_csv(const std::string& path, const std::vector<EpochMetrics>& history) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    const std::size_t n_layers = history.empty() ? 0 : history.front().kept_params.size();
    out << metrics_csv_header(n_layers) << "\n";
    for (const EpochMetrics& em : history) out << metrics_csv_row(em) << "\n";
}

// Wide-form magnitude grid with a schema header naming each column.
inline void write_grid_csv(const std::string& path, const Matrix& grid,
                           const std::string& col_prefix) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    for (std::size_t j = 0; j < grid.cols; ++j)
        out << (j == 0 ? "" : ",") << col_prefix << j;
    out << "\n";
    for (std::size_t i = 0; i < grid.rows; ++i) {
        for (std::size_t j = 0; j < grid.cols; ++j)
            out << (j == 0 ? "" : ",") << format_double(grid(i, j));
        out << "\n";
    }
}

}  // namespace lsg
