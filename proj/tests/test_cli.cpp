#include "catch2/catch_amalgamated.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "lsg/config.hpp"
#include "lsg/io.hpp"
#include "lsg/run.hpp"

namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

lsg::Config tiny_blob_config() {
    lsg::Config cfg;
    cfg.set("data.source", "blobs");
    cfg.set("data.classes", "3");
    cfg.set("data.dim", "10");
    cfg.set("data.n", "120");
    cfg.set("data.test_n", "60");
    cfg.set("model.arch", "dense:8,relu");
    cfg.set("train.method", "lsg");
    cfg.set("train.rank", "3");
    cfg.set("train.sparsity", "0.3");
    cfg.set("train.sigma", "1.0");
    cfg.set("train.batch_size", "40");
    cfg.set("train.epochs", "2");
    cfg.set("train.lr", "0.2");
    cfg.set("train.seed", "5");
    return cfg;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(LSG_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

}  // namespace

TEST_CASE("config files parse sections, comments and overrides", "[cli]") {
    const fs::path dir = fresh_dir("lsg_cfg_test");
    const std::string path = (dir / "run.cfg").string();
    {
        std::ofstream out(path);
        out << "# comment\n"
            << "[train]\n"
            << "method = rgp\n"
            << "rank = 4\n"
            << "\n"
            << "[data]\n"
            << "source = blobs\n";
    }
    lsg::Config cfg = lsg::Config::from_file(path);
    REQUIRE(cfg.get_str("train.method", "") == "rgp");
    REQUIRE(cfg.get_size("train.rank", 0) == 4);
    REQUIRE(cfg.get_str("data.source", "") == "blobs");
    cfg.set("train.rank", "8");  // flag override wins
    REQUIRE(cfg.get_size("train.rank", 0) == 8);

    {
        std::ofstream out(path);
        out << "[train\nmethod = rgp\n";
    }
    REQUIRE_THROWS_AS(lsg::Config::from_file(path), lsg::ConfigParseError);
    {
        std::ofstream out(path);
        out << "justakey\n";
    }
    REQUIRE_THROWS_AS(lsg::Config::from_file(path), lsg::ConfigParseError);
    REQUIRE_THROWS_AS(lsg::Config::from_file((dir / "missing.cfg").string()),
                      lsg::ConfigParseError);
    fs::remove_all(dir);
}

TEST_CASE("config value conversions validate their input", "[cli]") {
    lsg::Config cfg;
    cfg.set("a", "1.5");
    cfg.set("b", "x");
    cfg.set("c", "true");
    REQUIRE(cfg.get_double("a", 0) == 1.5);
    REQUIRE_THROWS_AS(cfg.get_double("b", 0), lsg::ConfigParseError);
    REQUIRE_THROWS_AS(cfg.get_u64("b", 0), lsg::ConfigParseError);
    REQUIRE(cfg.get_bool("c", false));
    REQUIRE_THROWS_AS(cfg.get_bool("b", false), lsg::ConfigParseError);
    REQUIRE(cfg.get_double("missing", 2.5) == 2.5);
}

TEST_CASE("format_double is byte-stable and round-trips", "[cli]") {
    REQUIRE(lsg::format_double(0.5) == "0.5");
    REQUIRE(lsg::format_double(std::numeric_limits<double>::infinity()) == "inf");
    REQUIRE(lsg::format_double(std::nan("")) == "nan");
    const double v = 0.1 + 0.2;
    REQUIRE(std::stod(lsg::format_double(v)) == v);
}

TEST_CASE("run_train writes metrics, manifest and checkpoint", "[cli]") {
    const fs::path dir = fresh_dir("lsg_run_test");
    lsg::Config cfg = tiny_blob_config();
    cfg.set("run.save_checkpoint", "true");
    const lsg::RunOutcome out = lsg::run_train(cfg, dir.string());

    REQUIRE(fs::exists(out.metrics_path));
    REQUIRE(fs::exists(out.manifest_path));
    REQUIRE(fs::exists(out.checkpoint_path));

    const std::string metrics = slurp(out.metrics_path);
    REQUIRE(metrics.rfind("epoch,train_loss,test_accuracy,test_loss,eps_spent,noised_coords",
                          0) == 0);
    // one header + one row per epoch
    REQUIRE(std::count(metrics.begin(), metrics.end(), '\n') == 3);

    // the checkpoint reloads into a usable network
    const lsg::Network net = lsg::load_checkpoint(out.checkpoint_path);
    REQUIRE(net.classes() == 3);
    fs::remove_all(dir);
}

TEST_CASE("a run can be replayed byte-identically from its manifest", "[cli]") {
    const fs::path dir_a = fresh_dir("lsg_replay_a");
    const fs::path dir_b = fresh_dir("lsg_replay_b");
    const lsg::RunOutcome first = lsg::run_train(tiny_blob_config(), dir_a.string());
    const lsg::Config replay = lsg::config_from_manifest(first.manifest_path);
    const lsg::RunOutcome second = lsg::run_train(replay, dir_b.string());
    REQUIRE(slurp(first.metrics_path) == slurp(second.metrics_path));
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
}

TEST_CASE("sweep runs the full grid and summarizes per cell", "[cli]") {
    const fs::path dir = fresh_dir("lsg_sweep_test");
    lsg::Config base = tiny_blob_config();
    base.set("train.epochs", "1");
    lsg::SweepGrid grid;
    grid.methods = {"lsg", "dpsgd"};
    grid.ranks = {3};
    grid.sparsities = {0.0, 0.3};
    grid.eps_list = {0.0};
    grid.seeds = 2;
    const auto cells = lsg::run_sweep(base, grid, dir.string());

    REQUIRE(cells.size() == 4);  // 2 methods x 2 sparsities
    std::size_t run_dirs = 0;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_directory()) ++run_dirs;
    REQUIRE(run_dirs == 8);  // 4 cells x 2 seeds

    // summary means equal hand-averaged per-run finals
    for (const auto& cell : cells) {
        REQUIRE(cell.final_accuracies.size() == 2);
        REQUIRE(cell.failures == 0);
    }
    const std::string summary = slurp((dir / "summary.csv").string());
    REQUIRE(summary.rfind("method,rank,sparsity,eps_target,runs,failures,acc_mean", 0) == 0);
    {
        std::stringstream ss(summary);
        std::string line;
        std::getline(ss, line);  // header
        std::getline(ss, line);  // first cell (lsg, p=0)
        std::vector<std::string> fields;
        std::stringstream ls(line);
        std::string f;
        while (std::getline(ls, f, ',')) fields.push_back(f);
        const double mean = std::stod(fields[6]);
        const double hand =
            (cells[0].final_accuracies[0] + cells[0].final_accuracies[1]) / 2.0;
        REQUIRE(mean == Catch::Approx(hand).epsilon(1e-12));
    }

    // resume: nothing re-runs, results recovered from disk
    const auto resumed = lsg::run_sweep(base, grid, dir.string(), /*resume=*/true);
    REQUIRE(resumed.size() == 4);
    for (const auto& cell : resumed) {
        REQUIRE(cell.skipped == 2);
        REQUIRE(cell.final_accuracies.size() == 2);
    }
    fs::remove_all(dir);
}

TEST_CASE("sweep records partial failures and continues", "[cli]") {
    const fs::path dir = fresh_dir("lsg_sweep_fail");
    lsg::Config base = tiny_blob_config();
    base.set("train.epochs", "1");
    lsg::SweepGrid grid;
    grid.methods = {"lsg", "nosuchmethod"};
    grid.ranks = {3};
    grid.sparsities = {0.0};
    grid.eps_list = {0.0};
    grid.seeds = 1;
    const auto cells = lsg::run_sweep(base, grid, dir.string());
    REQUIRE(cells.size() == 2);
    REQUIRE(cells[0].failures == 0);
    REQUIRE(cells[1].failures == 1);
    REQUIRE(fs::exists(dir / "nosuchmethod_r3_p0_eps0_seed1" / "error.txt"));
    fs::remove_all(dir);
}

TEST_CASE("inspect emits grids matching layer dimensions and importance", "[cli]") {
    const fs::path dir = fresh_dir("lsg_inspect_test");
    // identity-weight toy layer
    lsg::RngState rng(3);
    lsg::Network net({lsg::LayerSpec::dense_spec(4, 4),
                      lsg::LayerSpec::activation(lsg::LayerKind::softmax_ce)},
                     lsg::Shape3{1, 1, 4}, rng);
    net.layers()[0].w = lsg::Matrix::identity(4);

    lsg::Dataset ds = lsg::synth_gaussian_blobs(4, 4, 40, 9);
    const lsg::InspectPaths paths = lsg::inspect_layer(net, ds, 0, dir.string(), 16);

    const std::string wgrid = slurp(paths.weight_grid);
    std::stringstream ss(wgrid);
    std::string header, row0;
    std::getline(ss, header);
    REQUIRE(header == "w0,w1,w2,w3");
    std::getline(ss, row0);
    REQUIRE(row0 == "1,0,0,0");
    REQUIRE(std::count(wgrid.begin(), wgrid.end(), '\n') == 5);  // header + 4 rows

    // importance rows agree with the sparsity module on |W|
    const lsg::ImportanceVectors iv = lsg::importance(net.layers()[0].w);
    const std::string imp = slurp(paths.importance_csv);
    std::stringstream is(imp);
    std::string line;
    std::getline(is, line);
    REQUIRE(line == "side,index,importance");
    for (std::size_t i = 0; i < 4; ++i) {
        std::getline(is, line);
        REQUIRE(line == "input," + std::to_string(i) + "," + lsg::format_double(iv.input[i]));
    }

    // gradient grid has the layer's dimensions
    const std::string ggrid = slurp(paths.grad_grid);
    REQUIRE(std::count(ggrid.begin(), ggrid.end(), '\n') == 5);

    REQUIRE_THROWS_AS(lsg::inspect_layer(net, ds, 5, dir.string()), std::invalid_argument);
    fs::remove_all(dir);
}

TEST_CASE("cli exit codes: 0 success, 2 usage errors", "[cli]") {
    const fs::path dir = fresh_dir("lsg_cli_exit");
    const std::string out = (dir / "run").string();
    REQUIRE(run_cli("train --data blobs --arch dense:6,relu --method sgd --epochs 1 "
                    "--batch-size 30 --lr 0.1 --out " +
                    out) == 0);
    REQUIRE(fs::exists(out + "/metrics.csv"));
    REQUIRE(fs::exists(out + "/manifest.json"));

    REQUIRE(run_cli("train --method nosuchmethod --out " + out) == 2);
    REQUIRE(run_cli("definitely-not-a-subcommand") == 2);
    REQUIRE(run_cli("account --q 2.0 --sigma 1 --steps 10") == 2);  // invalid q
    REQUIRE(run_cli("") == 2);                                      // subcommand required
    REQUIRE(run_cli("account --q 0.01 --sigma 1.0 --steps 100") == 0);
    REQUIRE(run_cli("calibrate --eps 1.0 --q 0.05 --steps 100") == 0);
    fs::remove_all(dir);
}

TEST_CASE("non-private sgd reports inf eps in the metrics csv", "[cli]") {
    const fs::path dir = fresh_dir("lsg_sgd_inf");
    lsg::Config cfg = tiny_blob_config();
    cfg.set("train.method", "sgd");
    cfg.set("train.epochs", "1");
    const lsg::RunOutcome out = lsg::run_train(cfg, dir.string());
    const std::string metrics = slurp(out.metrics_path);
    std::stringstream ss(metrics);
    std::string header, row;
    std::getline(ss, header);
    std::getline(ss, row);
    std::vector<std::string> fields;
    std::stringstream ls(row);
    std::string f;
    while (std::getline(ls, f, ',')) fields.push_back(f);
    REQUIRE(fields[4] == "inf");  // eps_spent column
    fs::remove_all(dir);
}
