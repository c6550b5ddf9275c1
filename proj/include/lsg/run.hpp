#pragma once

// Run harness shared by the CLI and the test suites: resolves a Config into
// dataset + architecture + TrainConfig, executes training, and writes the
// run directory (metrics.csv + manifest.json [+ checkpoint.json]). A run can
// be replayed byte-identically from its manifest.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "json.hpp"
#include "lsg/config.hpp"
#include "lsg/data.hpp"
#include "lsg/io.hpp"
#include "lsg/sparsity.hpp"
#include "lsg/trainer.hpp"
#include "lsg/version.hpp"

namespace lsg {

// ---------------------------------------------------------------------------
// config -> TrainConfig / datasets / architecture
// ---------------------------------------------------------------------------

inline TrainConfig train_config_from(const Config& cfg) {
    TrainConfig tc;
    tc.method = method_from_name(cfg.get_str("train.method", "lsg"));
    tc.rank = cfg.get_size("train.rank", 8);
    tc.sparsity = cfg.get_double("train.sparsity", 0.0);
    tc.clip_norm = cfg.get_double("train.clip_norm", 1.0);
    tc.noise_multiplier = cfg.get_double("train.sigma", 0.0);
    tc.target_eps = cfg.get_double("train.eps", 0.0);
    tc.delta = cfg.get_double("train.delta", 1e-5);
    tc.batch_size = cfg.get_size("train.batch_size", 100);
    tc.epochs = cfg.get_size("train.epochs", 1);
    const std::string opt = cfg.get_str("train.optimizer", "sgd");
    if (opt == "sgd")
        tc.opt.kind = OptimizerKind::sgd;
    else if (opt == "momentum")
        tc.opt.kind = OptimizerKind::momentum;
    else if (opt == "adam")
        tc.opt.kind = OptimizerKind::adam;
    else
        throw ConfigError("unknown optimizer '" + opt + "'");
    tc.opt.lr = cfg.get_double("train.lr", 0.1);
    tc.opt.momentum = cfg.get_double("train.momentum", 0.9);
    tc.opt.beta1 = cfg.get_double("train.beta1", 0.9);
    tc.opt.beta2 = cfg.get_double("train.beta2", 0.999);
    tc.opt.adam_eps = cfg.get_double("train.adam_eps", 1e-8);
    tc.lr_decay_epoch = cfg.get_size("train.lr_decay_epoch", 0);
    tc.lr_decay_factor = cfg.get_double("train.lr_decay_factor", 1.0);
    tc.seed = cfg.get_u64("train.seed", 1);
    tc.sparsify_after = cfg.get_size("train.sparsify_after", 0);
    const std::string scope = cfg.get_str("train.clip_scope", "global");
    if (scope == "global")
        tc.clip_per_matrix = false;
    else if (scope == "per-matrix")
        tc.clip_per_matrix = true;
    else
        throw ConfigError("unknown clip scope '" + scope + "'");
    const std::string sampling = cfg.get_str("train.sampling", "poisson");
    if (sampling == "poisson")
        tc.sampling = SamplingScheme::poisson;
    else if (sampling == "fixed")
        tc.sampling = SamplingScheme::fixed;
    else
        throw ConfigError("unknown sampling scheme '" + sampling + "'");
    const std::string rule = cfg.get_str("train.sparsify", "importance");
    if (rule == "importance")
        tc.sparsify_rule = SparsifyRule::importance;
    else if (rule == "random")
        tc.sparsify_rule = SparsifyRule::random;
    else
        throw ConfigError("unknown sparsify rule '" + rule + "'");
    const std::string imp = cfg.get_str("train.importance", "weights");
    if (imp == "weights")
        tc.importance_source = ImportanceSource::weights;
    else if (imp == "factors")
        tc.importance_source = ImportanceSource::factors;
    else
        throw ConfigError("unknown importance source '" + imp + "'");
    tc.factorize_classifier = cfg.get_bool("train.factorize_classifier", false);
    tc.warm_start = cfg.get_bool("train.warm_start", false);
    tc.validate();
    return tc;
}

inline std::string data_dir_from(const Config& cfg) {
    std::string dir = cfg.get_str("data.dir", "");
    if (dir.empty()) {
        if (const char* env = std::getenv("LSG_DATA_DIR")) dir = env;
    }
    return dir;
}

namespace detail {

inline Dataset head_subset(const Dataset& ds, std::size_t n) {
    if (n == 0 || n >= ds.size()) return ds;
    Dataset out = ds;
    out.features = Matrix(n, ds.features.cols);
    std::copy(ds.features.data.begin(),
              ds.features.data.begin() + static_cast<long>(n * ds.features.cols),
              out.features.data.begin());
    out.labels.assign(ds.labels.begin(), ds.labels.begin() + static_cast<long>(n));
    return out;
}

}  // namespace detail

// Loads (train, test) per the [data] section. Sources: blobs, digits, mnist,
// cifar10, csv. When standardize=true, train-set channel statistics are
// applied to both splits (and stored in the checkpoint on save).
inline std::pair<Dataset, Dataset> load_datasets(const Config& cfg) {
    const std::string source = cfg.get_str("data.source", "blobs");
    const std::uint64_t seed = cfg.get_u64("data.seed", cfg.get_u64("train.seed", 1));
    Dataset train, test;
    if (source == "blobs") {
        const std::size_t classes = cfg.get_size("data.classes", 3);
        const std::size_t dim = cfg.get_size("data.dim", 20);
        const std::size_t n = cfg.get_size("data.n", 600);
        const std::size_t test_n = cfg.get_size("data.test_n", 200);
        const double separation = cfg.get_double("data.separation", 3.0);
        const double spread = cfg.get_double("data.spread", 1.0);
        // one draw, split head/tail: both sides share the class geometry
        const Dataset all = synth_gaussian_blobs(classes, dim, n + test_n,
                                                 derive_seed(seed, 11), separation, spread);
        std::tie(train, test) = split_dataset(all, n);
    } else if (source == "digits") {
        const std::size_t n = cfg.get_size("data.n", 10000);
        const std::size_t test_n = cfg.get_size("data.test_n", 2000);
        const double noise = cfg.get_double("data.noise", 0.08);
        const Dataset all = synth_digits(n + test_n, derive_seed(seed, 11), noise);
        std::tie(train, test) = split_dataset(all, n);
    } else if (source == "mnist") {
        const std::string dir = data_dir_from(cfg);
        if (dir.empty())
            throw ConfigError("mnist source needs data.dir or LSG_DATA_DIR");
        train = load_idx(dir + "/train-images-idx3-ubyte", dir + "/train-labels-idx1-ubyte");
        test = load_idx(dir + "/t10k-images-idx3-ubyte", dir + "/t10k-labels-idx1-ubyte");
        train = detail::head_subset(train, cfg.get_size("data.n", 0));
        test = detail::head_subset(test, cfg.get_size("data.test_n", 0));
    } else if (source == "cifar10") {
        const std::string dir = data_dir_from(cfg);
        if (dir.empty())
            throw ConfigError("cifar10 source needs data.dir or LSG_DATA_DIR");
        std::vector<std::string> batches;
        for (int b = 1; b <= 5; ++b)
            batches.push_back(dir + "/data_batch_" + std::to_string(b) + ".bin");
        train = load_cifar10(batches);
        test = load_cifar10({dir + "/test_batch.bin"});
        train = detail::head_subset(train, cfg.get_size("data.n", 0));
        test = detail::head_subset(test, cfg.get_size("data.test_n", 0));
    } else if (source == "csv") {
        const std::string label = cfg.get_str("data.label_column", "label");
        train = load_csv(cfg.get_str("data.train_path", ""), label);
        test = load_csv(cfg.get_str("data.test_path", ""), label);
    } else {
        throw ConfigError("unknown data source '" + source + "'");
    }
    if (cfg.get_bool("data.standardize", false)) {
        const Normalization norm = compute_normalization(train);
        apply_normalization(train, norm);
        apply_normalization(test, norm);
    }
    return {std::move(train), std::move(test)};
}

inline std::vector<LayerSpec> specs_from(const Config& cfg, const Dataset& train) {
    const std::string arch = cfg.get_str("model.arch", "dense:32,relu");
    return parse_arch(arch, train.shape, train.classes);
}

// ---------------------------------------------------------------------------
// run directory: metrics.csv + manifest.json (+ checkpoint.json)
// ---------------------------------------------------------------------------

struct RunOutcome {
    TrainResult result;
    std::string metrics_path;
    std::string manifest_path;
    std::string checkpoint_path;  // empty unless requested
};

namespace detail {

inline std::string utc_timestamp() {
    const std::time_t now = std::time(nullptr);
    char buf[32];
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

}  // namespace detail

inline RunOutcome run_train(const Config& cfg, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);

    auto [train_ds, test_ds] = load_datasets(cfg);
    const std::vector<LayerSpec> specs = specs_from(cfg, train_ds);
    const TrainConfig tc = train_config_from(cfg);

    RunOutcome out;
    out.result = train(specs, tc, train_ds, test_ds);

    out.metrics_path = (fs::path(out_dir) / "metrics.csv").string();
    write_metrics_csv(out.metrics_path, out.result.history);

    if (cfg.get_bool("run.save_checkpoint", false)) {
        out.checkpoint_path = (fs::path(out_dir) / "checkpoint.json").string();
        save_checkpoint(out.result.net, out.checkpoint_path,
                        train_ds.standardized ? train_ds.norm : Normalization{});
    }

    nlohmann::json manifest;
    manifest["format"] = "lsg-manifest";
    manifest["version"] = 1;
    manifest["code_version"] = kVersion;
    manifest["created"] = detail::utc_timestamp();
    manifest["seed"] = tc.seed;
    manifest["config"] = cfg.values();
    manifest["outputs"] = {{"metrics_csv", "metrics.csv"}};
    if (!out.checkpoint_path.empty()) manifest["outputs"]["checkpoint"] = "checkpoint.json";
    manifest["certified"] = out.result.certified;
    manifest["sigma_used"] = out.result.sigma_used;
    manifest["steps_taken"] = out.result.steps_taken;
    if (!out.result.history.empty()) {
        manifest["final"] = {
            {"eps", format_double(out.result.final_eps)},
            {"test_accuracy", out.result.history.back().test_accuracy},
            {"train_loss", out.result.history.back().train_loss},
        };
    }
    out.manifest_path = (fs::path(out_dir) / "manifest.json").string();
    std::ofstream mf(out.manifest_path, std::ios::binary);
    if (!mf) throw std::runtime_error("cannot write " + out.manifest_path);
    mf << manifest.dump(2) << "\n";
    return out;
}

// Replays the config snapshot stored in a manifest.
inline Config config_from_manifest(const std::string& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw std::runtime_error("cannot open manifest " + manifest_path);
    nlohmann::json j;
    in >> j;
    if (j.value("format", "") != "lsg-manifest")
        throw std::runtime_error(manifest_path + " is not a run manifest");
    Config cfg;
    for (const auto& [key, value] : j["config"].items())
        cfg.set(key, value.get<std::string>());
    return cfg;
}

// ---------------------------------------------------------------------------
// inspect: |W| and |dW| grids plus importance vectors for one layer
// ---------------------------------------------------------------------------

struct InspectPaths {
    std::string weight_grid;
    std::string grad_grid;
    std::string importance_csv;
};

inline InspectPaths inspect_layer(const Network& net, const Dataset& ds, std::size_t layer,
                                  const std::string& out_dir, std::size_t batch_n = 256) {
    namespace fs = std::filesystem;
    const auto& trainables = net.trainable_layers();
    if (layer >= trainables.size())
        throw std::invalid_argument("inspect: layer index " + std::to_string(layer) +
                                    " out of range (have " + std::to_string(trainables.size()) +
                                    " trainable layers)");
    fs::create_directories(out_dir);

    const Network::Layer& l = net.layers()[trainables[layer]];
    const bool is_conv = l.spec.kind == LayerKind::conv2d;
    const Matrix w = is_conv ? flatten_conv_weight(l.kernel) : l.w;
    Matrix wabs(w.rows, w.cols);
    for (std::size_t i = 0; i < w.data.size(); ++i) wabs.data[i] = std::abs(w.data[i]);

    const std::size_t n = std::min<std::size_t>(batch_n, ds.size());
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    const Matrix batch = gather_rows(ds.features, idx);
    const std::vector<int> labels = gather_labels(ds.labels, idx);
    const BatchGrads grads = batch_gradients(net, batch, labels);
    Matrix gabs = grads.weights[layer];
    for (double& v : gabs.data) v = std::abs(v);

    const ImportanceVectors iv = is_conv ? importance_conv(l.kernel) : importance(l.w);

    InspectPaths paths;
    paths.weight_grid = (fs::path(out_dir) / "weight_grid.csv").string();
    paths.grad_grid = (fs::path(out_dir) / "grad_grid.csv").string();
    paths.importance_csv = (fs::path(out_dir) / "importance.csv").string();
    write_grid_csv(paths.weight_grid, wabs, "w");
    write_grid_csv(paths.grad_grid, gabs, "g");

    std::ofstream imp(paths.importance_csv, std::ios::binary);
    if (!imp) throw std::runtime_error("cannot write " + paths.importance_csv);
    imp << "side,index,importance\n";
    for (std::size_t i = 0; i < iv.input.size(); ++i)
        imp << "input," << i << "," << format_double(iv.input[i]) << "\n";
    for (std::size_t j = 0; j < iv.output.size(); ++j)
        imp << "output," << j << "," << format_double(iv.output[j]) << "\n";
    return paths;
}

// ---------------------------------------------------------------------------
// sweep: a grid of runs, several seeds per cell, plus a summary table
// ---------------------------------------------------------------------------

struct SweepCell {
    std::string name;
    std::string method;
    std::size_t rank = 0;
    double sparsity = 0.0;
    double target_eps = 0.0;
    std::vector<double> final_accuracies;
    std::vector<double> final_eps;
    std::size_t failures = 0;
    std::size_t skipped = 0;  // resumed from previous runs
};

struct SweepGrid {
    std::vector<std::string> methods = {"lsg"};
    std::vector<std::size_t> ranks = {8};
    std::vector<double> sparsities = {0.0};
    std::vector<double> eps_list = {0.0};  // 0 disables calibration
    std::size_t seeds = 1;
    std::uint64_t base_seed = 1;
};

inline std::string sweep_cell_name(const std::string& method, std::size_t rank, double sparsity,
                                   double eps) {
    return method + "_r" + std::to_string(rank) + "_p" + format_double(sparsity) + "_eps" +
           format_double(eps);
}

inline std::vector<SweepCell> run_sweep(const Config& base, const SweepGrid& grid,
                                        const std::string& out_dir, bool resume = false,
                                        bool quiet = true) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    std::vector<SweepCell> cells;
    for (const std::string& method : grid.methods)
        for (std::size_t rank : grid.ranks)
            for (double p : grid.sparsities)
                for (double eps : grid.eps_list) {
                    SweepCell cell;
                    cell.method = method;
                    cell.rank = rank;
                    cell.sparsity = p;
                    cell.target_eps = eps;
                    cell.name = sweep_cell_name(method, rank, p, eps);
                    for (std::size_t s = 0; s < grid.seeds; ++s) {
                        const std::uint64_t seed = grid.base_seed + s;
                        const std::string run_dir =
                            (fs::path(out_dir) / (cell.name + "_seed" + std::to_string(seed)))
                                .string();
                        Config cfg = base;
                        cfg.set("train.method", method);
                        cfg.set("train.rank", std::to_string(rank));
                        cfg.set("train.sparsity", format_double(p));
                        cfg.set("train.eps", format_double(eps));
                        cfg.set("train.seed", std::to_string(seed));
                        const std::string done_marker = run_dir + "/manifest.json";
                        if (resume && fs::exists(done_marker) &&
                            fs::exists(run_dir + "/metrics.csv")) {
                            ++cell.skipped;
                            // recover the final row from the existing metrics file
                            std::ifstream mf(run_dir + "/metrics.csv");
                            std::string line, last;
                            std::getline(mf, line);  // header
                            while (std::getline(mf, line))
                                if (!line.empty()) last = line;
                            if (!last.empty()) {
                                std::stringstream ss(last);
                                std::string cell_str;
                                std::vector<std::string> fields;
                                while (std::getline(ss, cell_str, ','))
                                    fields.push_back(cell_str);
                                if (fields.size() >= 5) {
                                    cell.final_accuracies.push_back(std::stod(fields[2]));
                                    cell.final_eps.push_back(
                                        fields[4] == "inf"
                                            ? std::numeric_limits<double>::infinity()
                                            : std::stod(fields[4]));
                                }
                            }
                            continue;
                        }
                        try {
                            const RunOutcome out = run_train(cfg, run_dir);
                            if (!out.result.history.empty()) {
                                cell.final_accuracies.push_back(
                                    out.result.history.back().test_accuracy);
                                cell.final_eps.push_back(out.result.final_eps);
                            }
                            if (!quiet)
                                std::fprintf(stderr, "[sweep] %s seed %llu done\n",
                                             cell.name.c_str(),
                                             static_cast<unsigned long long>(seed));
                        } catch (const std::exception& e) {
                            ++cell.failures;
                            std::ofstream err(run_dir + "/error.txt", std::ios::binary);
                            err << e.what() << "\n";
                            if (!quiet)
                                std::fprintf(stderr, "[sweep] %s seed %llu FAILED: %s\n",
                                             cell.name.c_str(),
                                             static_cast<unsigned long long>(seed), e.what());
                        }
                    }
                    cells.push_back(std::move(cell));
                }

    std::ofstream summary((fs::path(out_dir) / "summary.csv").string(), std::ios::binary);
    summary << "method,rank,sparsity,eps_target,runs,failures,acc_mean,acc_std,eps_mean\n";
    for (const SweepCell& cell : cells) {
        double mean = 0.0, stddev = 0.0, eps_mean = 0.0;
        const std::size_t n = cell.final_accuracies.size();
        for (double a : cell.final_accuracies) mean += a;
        for (double e : cell.final_eps) eps_mean += e;
        if (n > 0) {
            mean /= static_cast<double>(n);
            eps_mean /= static_cast<double>(n);
            for (double a : cell.final_accuracies) stddev += (a - mean) * (a - mean);
            stddev = std::sqrt(stddev / static_cast<double>(n));
        }
        summary << cell.method << "," << cell.rank << "," << format_double(cell.sparsity) << ","
                << format_double(cell.target_eps) << "," << n << "," << cell.failures << ","
                << format_double(mean) << "," << format_double(stddev) << ","
                << format_double(eps_mean) << "\n";
    }
    return cells;
}

}  // namespace lsg
