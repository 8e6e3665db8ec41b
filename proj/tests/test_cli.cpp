#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "histovit/cli.hpp"
#include "histovit/dataset.hpp"
#include "histovit/ensemble.hpp"
#include "histovit/rng.hpp"

using namespace histovit;
namespace fs = std::filesystem;

namespace {

int run_cli(const std::vector<std::string>& args) {
    std::vector<std::string> full{"histovit"};
    full.insert(full.end(), args.begin(), args.end());
    std::vector<const char*> argv;
    argv.reserve(full.size());
    for (const std::string& a : full) argv.push_back(a.c_str());
    return cli::run(static_cast<int>(argv.size()), argv.data());
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("--help exits 0 on the app and on every subcommand") {
    CHECK(run_cli({"--help"}) == 0);
    for (const char* sub : {"synth", "balance", "split", "train", "eval", "ensemble",
                            "attention", "report"}) {
        CAPTURE(sub);
        CHECK(run_cli({sub, "--help"}) == 0);
    }
}

TEST_CASE("usage errors exit 2, domain errors exit 1") {
    CHECK(run_cli({"synth", "--nope"}) == 2);
    CHECK(run_cli({"frobnicate"}) == 2);
    CHECK(run_cli({"balance"}) == 2);  // missing required flags
    const fs::path dir = fresh_dir("histovit_cli_err");
    CHECK(run_cli({"balance", "--manifest", (dir / "missing.txt").string(), "--out",
                   (dir / "out.txt").string()}) == 1);
    CHECK(run_cli({"balance", "--manifest", (dir / "missing.txt").string(), "--out",
                   (dir / "out.txt").string(), "--scope", "sideways"}) == 2);
    fs::remove_all(dir);
}

TEST_CASE("synth is byte-identical per seed") {
    const fs::path a = fresh_dir("histovit_cli_synth_a");
    const fs::path b = fresh_dir("histovit_cli_synth_b");
    const std::vector<std::string> common{"--per-class", "2",        "--image-size", "12",
                                          "--seed",      "7",        "--magnifications", "40,100"};
    std::vector<std::string> args_a{"synth", "--out", a.string()};
    args_a.insert(args_a.end(), common.begin(), common.end());
    std::vector<std::string> args_b{"synth", "--out", b.string()};
    args_b.insert(args_b.end(), common.begin(), common.end());
    REQUIRE(run_cli(args_a) == 0);
    REQUIRE(run_cli(args_b) == 0);
    CHECK(slurp(a / "manifest.txt") == slurp(b / "manifest.txt"));
    const DatasetManifest m = load_manifest(a / "manifest.txt");
    CHECK(m.size() == 2 * 8 * 2);
    for (const SampleRecord& rec : m.records()) {
        CHECK(slurp(a / rec.path) == slurp(b / rec.path));
        CHECK(!slurp(a / rec.path).empty());
    }
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("ensemble --probs on agreeing members reproduces their argmax") {
    const fs::path dir = fresh_dir("histovit_cli_probs");
    const fs::path probs = dir / "members.psv";
    std::vector<std::size_t> expected;
    {
        std::vector<ProbRecord> rows;
        rng::Stream s(rng::derive(5, "cli-probs"));
        for (int i = 0; i < 20; ++i) {
            const std::size_t k = s.integer(8);
            expected.push_back(k);
            for (const char* model : {"vit", "deit"}) {
                std::vector<double> p(8);
                double total = 0.0;
                for (double& v : p) {
                    v = s.uniform(0.0, 0.4);
                    total += v;
                }
                p[k] += total + 0.5;  // strict agreement on class k
                total = 2.0 * total + 0.5;
                for (double& v : p) v /= total;
                rows.push_back({"s" + std::to_string(i), model, p});
            }
        }
        write_prob_file(probs, rows);
    }
    const fs::path pred_out = dir / "pred.csv";
    REQUIRE(run_cli({"ensemble", "--probs", probs.string(), "--predictions-out",
                     pred_out.string()}) == 0);
    std::ifstream in(pred_out);
    std::string line;
    std::size_t i = 0;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string id, idx;
        std::getline(ls, id, ',');
        std::getline(ls, idx, ',');
        CHECK(id == "s" + std::to_string(i));
        CHECK(std::stoul(idx) == expected[i]);
        ++i;
    }
    CHECK(i == 20);
    fs::remove_all(dir);
}

TEST_CASE("scripted pipeline: synth, balance, split, train x2, eval, ensemble, report") {
    const fs::path dir = fresh_dir("histovit_cli_pipeline");
    const std::string manifest = (dir / "data" / "manifest.txt").string();

    REQUIRE(run_cli({"synth", "--out", (dir / "data").string(), "--per-class", "6",
                     "--image-size", "16", "--seed", "3", "--magnifications", "40"}) == 0);
    REQUIRE(run_cli({"balance", "--manifest", manifest, "--out",
                     (dir / "balanced.txt").string(), "--scope", "independent", "--seed",
                     "3"}) == 0);
    REQUIRE(run_cli({"split", "--manifest", (dir / "balanced.txt").string(), "--out",
                     (dir / "split.txt").string(), "--seed", "3"}) == 0);

    const std::vector<std::string> model_shape{
        "--image-size", "16", "--patch-size", "4", "--embed-dim", "16", "--heads", "2",
        "--blocks", "1",  "--mlp-dim", "32", "--epochs", "2", "--seed", "3"};
    std::vector<std::string> train_vit{"train",   "--manifest", (dir / "balanced.txt").string(),
                                       "--split", (dir / "split.txt").string(),
                                       "--arch",  "vit",
                                       "--out",   (dir / "vit.ckpt").string(),
                                       "--log",   (dir / "vit.log").string()};
    train_vit.insert(train_vit.end(), model_shape.begin(), model_shape.end());
    REQUIRE(run_cli(train_vit) == 0);

    std::vector<std::string> train_deit{"train",   "--manifest", (dir / "balanced.txt").string(),
                                        "--split", (dir / "split.txt").string(),
                                        "--arch",  "deit",
                                        "--out",   (dir / "deit.ckpt").string()};
    train_deit.insert(train_deit.end(), model_shape.begin(), model_shape.end());
    REQUIRE(run_cli(train_deit) == 0);

    REQUIRE(run_cli({"eval", "--manifest", (dir / "balanced.txt").string(), "--split",
                     (dir / "split.txt").string(), "--model", (dir / "vit.ckpt").string(),
                     "--report", (dir / "vit_report.txt").string(), "--probs-out",
                     (dir / "vit.psv").string()}) == 0);
    CHECK(fs::exists(dir / "vit_report.txt"));
    CHECK(fs::exists(dir / "vit.psv"));

    REQUIRE(run_cli({"ensemble", "--models", (dir / "vit.ckpt").string(), "--models",
                     (dir / "deit.ckpt").string(), "--manifest", (dir / "balanced.txt").string(),
                     "--split", (dir / "split.txt").string(), "--report",
                     (dir / "ensemble_report.txt").string(), "--probs-out",
                     (dir / "members.psv").string(), "--predictions-out",
                     (dir / "pred.csv").string()}) == 0);

    // offline report from the emitted probability file matches the ensemble report
    REQUIRE(run_cli({"report", "--probs", (dir / "members.psv").string(), "--manifest",
                     (dir / "balanced.txt").string(), "--out",
                     (dir / "offline_report.txt").string()}) == 0);
    CHECK(slurp(dir / "ensemble_report.txt") == slurp(dir / "offline_report.txt"));

    // recompute overall accuracy from the probability file and the predictions
    const auto rows = read_prob_file(dir / "members.psv");
    const DatasetManifest bal = load_manifest(dir / "balanced.txt");
    std::map<std::string, Subclass> truth;
    for (const SampleRecord& r : bal.records()) truth.emplace(r.sample_id, r.subclass);
    std::map<std::string, std::vector<std::vector<double>>> by_sample;
    std::vector<std::string> order;
    for (const ProbRecord& r : rows) {
        if (!by_sample.contains(r.sample_id)) order.push_back(r.sample_id);
        by_sample[r.sample_id].push_back(r.probs);
    }
    std::size_t correct = 0;
    for (const std::string& id : order) {
        std::vector<double> avg(8, 0.0);
        for (const auto& p : by_sample[id]) {
            for (std::size_t k = 0; k < 8; ++k) avg[k] += p[k] / by_sample[id].size();
        }
        std::size_t best = 0;
        for (std::size_t k = 1; k < 8; ++k) {
            if (avg[k] > avg[best]) best = k;
        }
        if (best == subclass_index(truth.at(id))) ++correct;
    }
    const double expected_acc = static_cast<double>(correct) / order.size();

    const std::string report = slurp(dir / "ensemble_report.txt");
    const auto pos = report.find("overall_accuracy ");
    REQUIRE(pos != std::string::npos);
    const double reported = std::stod(report.substr(pos + 17));
    CHECK(reported == doctest::Approx(expected_acc).epsilon(1e-9));

    // attention overlay from the trained checkpoint
    const SampleRecord& first = bal.records().front();
    REQUIRE(run_cli({"attention", "--model", (dir / "vit.ckpt").string(), "--image",
                     (dir / first.path).string(), "--method", "rollout", "--out",
                     (dir / "overlay.ppm").string(), "--grid-out",
                     (dir / "grid.txt").string()}) == 0);
    CHECK(fs::exists(dir / "overlay.ppm"));
    const std::string grid = slurp(dir / "grid.txt");
    CHECK(grid.find("method rollout") == 0);
    CHECK(grid.find("grid 4") != std::string::npos);

    fs::remove_all(dir);
}

TEST_CASE("seeded training through the CLI is reproducible") {
    const fs::path dir = fresh_dir("histovit_cli_det");
    REQUIRE(run_cli({"synth", "--out", (dir / "data").string(), "--per-class", "4",
                     "--image-size", "16", "--seed", "11", "--magnifications", "40"}) == 0);
    const std::string manifest = (dir / "data" / "manifest.txt").string();
    REQUIRE(run_cli({"split", "--manifest", manifest, "--out", (dir / "split.txt").string(),
                     "--seed", "11"}) == 0);
    for (const char* name : {"a.ckpt", "b.ckpt"}) {
        REQUIRE(run_cli({"train", "--manifest", manifest, "--split",
                         (dir / "split.txt").string(), "--arch", "vit", "--out",
                         (dir / name).string(), "--image-size", "16", "--patch-size", "4",
                         "--embed-dim", "16", "--heads", "2", "--blocks", "1", "--mlp-dim", "32",
                         "--epochs", "2", "--seed", "11"}) == 0);
    }
    CHECK(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));
    CHECK(!slurp(dir / "a.ckpt").empty());
    fs::remove_all(dir);
}
