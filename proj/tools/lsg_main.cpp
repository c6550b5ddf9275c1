// lsg: differentially private training with low-rank + sparse gradient
// updates, alongside its baselines.
//
// Subcommands:
//   train      one training run -> metrics.csv + manifest.json
//   sweep      a (method, rank, sparsity, eps) grid, several seeds per cell
//   inspect    |W| / |dW| magnitude grids and importance vectors of a layer
//   account    eps for (q, sigma, steps, delta)
//   calibrate  sigma for a target (eps, delta, q, steps)
//
// Exit codes: 0 success, 1 runtime failure, 2 usage/config error.

#include <cstdio>
#include <exception>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "lsg/accountant.hpp"
#include "lsg/run.hpp"
#include "lsg/version.hpp"

namespace {

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

// Flag overrides use the same dotted keys as the config file.
struct Override {
    std::string key;
    std::string* slot;
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"differentially private training with low-rank + sparse gradients"};
    app.set_version_flag("--version", lsg::kVersion);
    app.require_subcommand(1);

    // ---- train ----------------------------------------------------------
    auto* train_cmd = app.add_subcommand("train", "run one training configuration");
    std::string config_path, manifest_path, out_dir = "run";
    bool save_ckpt = false;
    train_cmd->add_option("--config", config_path, "config file (key = value sections)");
    train_cmd->add_option("--from-manifest", manifest_path,
                          "replay the config snapshot of a previous run");
    train_cmd->add_option("--out", out_dir, "output directory")->capture_default_str();
    train_cmd->add_flag("--save-checkpoint", save_ckpt, "write checkpoint.json");

    std::string f_method, f_rank, f_sparsity, f_clip, f_sigma, f_eps, f_delta, f_batch, f_epochs,
        f_opt, f_lr, f_seed, f_arch, f_source, f_data_n, f_data_test_n, f_data_dir, f_sparsify,
        f_importance, f_clip_scope, f_sampling, f_sparsify_after;
    std::vector<Override> overrides = {
        {"train.method", &f_method},         {"train.rank", &f_rank},
        {"train.sparsity", &f_sparsity},     {"train.clip_norm", &f_clip},
        {"train.sigma", &f_sigma},           {"train.eps", &f_eps},
        {"train.delta", &f_delta},           {"train.batch_size", &f_batch},
        {"train.epochs", &f_epochs},         {"train.optimizer", &f_opt},
        {"train.lr", &f_lr},                 {"train.seed", &f_seed},
        {"model.arch", &f_arch},             {"data.source", &f_source},
        {"data.n", &f_data_n},               {"data.test_n", &f_data_test_n},
        {"data.dir", &f_data_dir},           {"train.sparsify", &f_sparsify},
        {"train.importance", &f_importance}, {"train.clip_scope", &f_clip_scope},
        {"train.sampling", &f_sampling},     {"train.sparsify_after", &f_sparsify_after},
    };
    train_cmd->add_option("--method", f_method, "lsg | rgp | sparse-dpsgd | dpsgd | sgd");
    train_cmd->add_option("--r,--rank", f_rank, "factor rank r (lsg/rgp)");
    train_cmd->add_option("--p,--sparsity", f_sparsity, "sparsity fraction in [0,1)");
    train_cmd->add_option("--C,--clip-norm", f_clip, "per-sample clipping norm C");
    train_cmd->add_option("--sigma", f_sigma, "noise multiplier");
    train_cmd->add_option("--eps", f_eps, "target epsilon (calibrates sigma)");
    train_cmd->add_option("--delta", f_delta, "privacy delta");
    train_cmd->add_option("--batch-size", f_batch, "expected batch size B (q = B/N)");
    train_cmd->add_option("--epochs", f_epochs, "training epochs");
    train_cmd->add_option("--optimizer", f_opt, "sgd | momentum | adam");
    train_cmd->add_option("--lr", f_lr, "learning rate");
    train_cmd->add_option("--seed", f_seed, "run seed");
    train_cmd->add_option("--arch", f_arch, "architecture string, e.g. dense:128,relu");
    train_cmd->add_option("--data", f_source, "blobs | digits | mnist | cifar10 | csv");
    train_cmd->add_option("--data-n", f_data_n, "training subset size (0 = all)");
    train_cmd->add_option("--data-test-n", f_data_test_n, "test subset size (0 = all)");
    train_cmd->add_option("--data-dir", f_data_dir, "dataset directory (or LSG_DATA_DIR)");
    train_cmd->add_option("--sparsify", f_sparsify, "importance | random (ablation)");
    train_cmd->add_option("--importance", f_importance, "weights | factors (ablation)");
    train_cmd->add_option("--clip", f_clip_scope, "global | per-matrix");
    train_cmd->add_option("--sampling", f_sampling, "poisson | fixed");
    train_cmd->add_option("--sparsify-after", f_sparsify_after,
                          "epochs trained with p = 0 before sparsifying");

    // ---- sweep ----------------------------------------------------------
    auto* sweep_cmd = app.add_subcommand("sweep", "grid of runs with per-cell seeds");
    std::string sweep_config, sweep_out = "sweep";
    std::string sweep_methods = "lsg", sweep_ranks = "8", sweep_ps = "0", sweep_eps = "0";
    std::size_t sweep_seeds = 1;
    std::uint64_t sweep_base_seed = 1;
    bool sweep_resume = false, sweep_verbose = false;
    sweep_cmd->add_option("--config", sweep_config, "base config file");
    sweep_cmd->add_option("--out", sweep_out, "sweep output directory")->capture_default_str();
    sweep_cmd->add_option("--methods", sweep_methods, "comma list")->capture_default_str();
    sweep_cmd->add_option("--ranks", sweep_ranks, "comma list")->capture_default_str();
    sweep_cmd->add_option("--sparsities", sweep_ps, "comma list")->capture_default_str();
    sweep_cmd->add_option("--eps-list", sweep_eps, "comma list (0 = no target)")
        ->capture_default_str();
    sweep_cmd->add_option("--seeds", sweep_seeds, "seeds per cell")->capture_default_str();
    sweep_cmd->add_option("--base-seed", sweep_base_seed, "first seed")->capture_default_str();
    sweep_cmd->add_flag("--resume", sweep_resume, "skip cells that already have a manifest");
    sweep_cmd->add_flag("--verbose", sweep_verbose, "progress on stderr");

    // ---- inspect --------------------------------------------------------
    auto* inspect_cmd = app.add_subcommand("inspect", "weight/gradient magnitude grids");
    std::string ins_ckpt, ins_out = "inspect";
    std::size_t ins_layer = 0, ins_batch = 256;
    std::string ins_source, ins_dir, ins_n, ins_test_n;
    inspect_cmd->add_option("--checkpoint", ins_ckpt, "checkpoint.json path")->required();
    inspect_cmd->add_option("--layer", ins_layer, "trainable layer index")
        ->capture_default_str();
    inspect_cmd->add_option("--out", ins_out, "output directory")->capture_default_str();
    inspect_cmd->add_option("--batch-size", ins_batch, "samples for the gradient grid")
        ->capture_default_str();
    inspect_cmd->add_option("--data", ins_source, "data source (as in train)");
    inspect_cmd->add_option("--data-dir", ins_dir, "dataset directory");
    inspect_cmd->add_option("--data-n", ins_n, "training subset size");
    inspect_cmd->add_option("--data-test-n", ins_test_n, "test subset size");

    // ---- account / calibrate --------------------------------------------
    auto* account_cmd = app.add_subcommand("account", "epsilon for (q, sigma, steps, delta)");
    double acc_q = 0.01, acc_sigma = 1.0, acc_delta = 1e-5;
    std::size_t acc_steps = 1;
    account_cmd->add_option("--q", acc_q, "sampling rate")->required();
    account_cmd->add_option("--sigma", acc_sigma, "noise multiplier")->required();
    account_cmd->add_option("--steps", acc_steps, "composed steps")->required();
    account_cmd->add_option("--delta", acc_delta, "delta")->capture_default_str();

    auto* calibrate_cmd = app.add_subcommand("calibrate", "sigma for a target epsilon");
    double cal_eps = 1.0, cal_q = 0.01, cal_delta = 1e-5;
    std::size_t cal_steps = 1;
    calibrate_cmd->add_option("--eps", cal_eps, "target epsilon")->required();
    calibrate_cmd->add_option("--q", cal_q, "sampling rate")->required();
    calibrate_cmd->add_option("--steps", cal_steps, "composed steps")->required();
    calibrate_cmd->add_option("--delta", cal_delta, "delta")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*train_cmd) {
            lsg::Config cfg;
            if (!manifest_path.empty())
                cfg = lsg::config_from_manifest(manifest_path);
            else if (!config_path.empty())
                cfg = lsg::Config::from_file(config_path);
            for (const Override& ov : overrides)
                if (!ov.slot->empty()) cfg.set(ov.key, *ov.slot);
            if (save_ckpt) cfg.set("run.save_checkpoint", "true");
            const lsg::RunOutcome out = lsg::run_train(cfg, out_dir);
            const auto& history = out.result.history;
            std::cout << "run written to " << out_dir << "\n";
            std::cout << "steps: " << out.result.steps_taken
                      << "  sigma: " << lsg::format_double(out.result.sigma_used) << "\n";
            if (!history.empty()) {
                std::cout << "final test accuracy: "
                          << lsg::format_double(history.back().test_accuracy) << "\n";
                std::cout << "final eps: " << lsg::format_double(out.result.final_eps)
                          << (out.result.certified ? "" : "  [UNCERTIFIED SAMPLING]") << "\n";
            }
            if (!out.result.certified)
                std::cerr << "warning: sampling scheme not covered by the accountant; "
                             "reported eps assumes Poisson sampling\n";
            return 0;
        }
        if (*sweep_cmd) {
            lsg::Config base;
            if (!sweep_config.empty()) base = lsg::Config::from_file(sweep_config);
            lsg::SweepGrid grid;
            grid.methods = split_list(sweep_methods);
            grid.ranks.clear();
            for (const auto& r : split_list(sweep_ranks))
                grid.ranks.push_back(static_cast<std::size_t>(std::stoull(r)));
            grid.sparsities.clear();
            for (const auto& p : split_list(sweep_ps)) grid.sparsities.push_back(std::stod(p));
            grid.eps_list.clear();
            for (const auto& e : split_list(sweep_eps)) grid.eps_list.push_back(std::stod(e));
            grid.seeds = sweep_seeds;
            grid.base_seed = sweep_base_seed;
            const auto cells = lsg::run_sweep(base, grid, sweep_out, sweep_resume,
                                              !sweep_verbose);
            std::cout << "sweep written to " << sweep_out << " (" << cells.size()
                      << " cells, summary.csv)\n";
            std::size_t failures = 0;
            for (const auto& c : cells) failures += c.failures;
            if (failures > 0) {
                std::cerr << failures << " run(s) failed; see error.txt in cell directories\n";
                return 1;
            }
            return 0;
        }
        if (*inspect_cmd) {
            lsg::Config cfg;
            if (!ins_source.empty()) cfg.set("data.source", ins_source);
            if (!ins_dir.empty()) cfg.set("data.dir", ins_dir);
            if (!ins_n.empty()) cfg.set("data.n", ins_n);
            if (!ins_test_n.empty()) cfg.set("data.test_n", ins_test_n);
            lsg::Normalization norm;
            const lsg::Network net = lsg::load_checkpoint(ins_ckpt, &norm);
            auto [train_ds, test_ds] = lsg::load_datasets(cfg);
            if (!norm.empty()) lsg::apply_normalization(train_ds, norm);
            const lsg::InspectPaths paths =
                lsg::inspect_layer(net, train_ds, ins_layer, ins_out, ins_batch);
            std::cout << "wrote " << paths.weight_grid << "\n"
                      << "wrote " << paths.grad_grid << "\n"
                      << "wrote " << paths.importance_csv << "\n";
            return 0;
        }
        if (*account_cmd) {
            lsg::PrivacyLedger ledger(acc_q, acc_sigma);
            ledger.step(acc_steps);
            std::cout << "epsilon = " << lsg::format_double(ledger.epsilon(acc_delta))
                      << "  (optimal alpha = "
                      << lsg::format_double(ledger.best_alpha(acc_delta)) << ")\n";
            return 0;
        }
        if (*calibrate_cmd) {
            const double sigma = lsg::calibrate_sigma(cal_eps, cal_delta, cal_q, cal_steps);
            std::cout << "sigma = " << lsg::format_double(sigma)
                      << "  (achieved eps = "
                      << lsg::format_double(
                             lsg::epsilon_after(cal_q, sigma, cal_steps, cal_delta))
                      << ")\n";
            return 0;
        }
    } catch (const lsg::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const lsg::ConfigParseError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
