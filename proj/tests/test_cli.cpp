#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "stmt/cli.hpp"
#include "stmt/volcore.hpp"

using namespace stmt;
namespace fs = std::filesystem;

namespace {

int run(std::vector<std::string> args, std::vector<std::string> env = {}) {
    args.insert(args.begin(), "stmt");
    std::vector<char*> argv;
    for (auto& a : args) {
        argv.push_back(a.data());
    }
    argv.push_back(nullptr);
    std::vector<char*> envp;
    for (auto& e : env) {
        envp.push_back(e.data());
    }
    envp.push_back(nullptr);
    return run_cli(static_cast<int>(args.size()), argv.data(), envp.data());
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

fs::path fresh_dir(const std::string& name) {
    const fs::path d = fs::temp_directory_path() / name;
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

// Smallest configuration that still exercises every stage.
const char* kTinyProfile = R"(# tiny end-to-end profile
phantom.volume_shape = 16
phantom.num_organs = 2
phantom.n_full = 3
phantom.n_partial = 2
phantom.n_unlabeled = 2
phantom.n_test = 2
phantom.organ_scale = 1.6
phantom.tumor_annotation_rate = 1
net.stage1.base_channels = 2
net.stage1.num_scales = 2
net.stage1.max_channels = 8
net.organ.base_channels = 2
net.organ.num_scales = 2
net.organ.max_channels = 8
net.tumor.base_channels = 2
net.tumor.num_scales = 2
net.tumor.max_channels = 8
train.stage1.epochs = 1
train.stage1.iters_per_epoch = 2
train.stage1.input_shape = 8
train.organ.epochs = 1
train.organ.iters_per_epoch = 2
train.organ.input_shape = 8
train.tumor.epochs = 1
train.tumor.iters_per_epoch = 2
train.tumor.input_shape = 8
eval.sample_interval_s = 0.01
)";

}  // namespace

TEST_CASE("echo round-trips through merge_text") {
    RunConfig a;
    a.set("train.organ.epochs", "7");
    a.set("phantom.volume_shape", "20");
    RunConfig b;
    b.merge_text(a.echo(), "echo");
    CHECK(a == b);
    CHECK(a.hash() == b.hash());
    CHECK(a.get("phantom.volume_shape") == "20,20,20");
}

TEST_CASE("unknown keys and bad values are configuration errors") {
    RunConfig c;
    CHECK_THROWS_AS(c.set("train.organ.epoch", "3"), ConfigError);
    CHECK_THROWS_AS(c.set("train.organ.epochs", "three"), ConfigError);
    CHECK_THROWS_AS(c.set("phantom.volume_shape", "4,4"), ConfigError);
    CHECK_THROWS_AS(c.merge_text("seed = 1\nno_equals_sign\n", "t"), ConfigError);
    CHECK_THROWS_AS(c.merge_file("/nonexistent/stmt.cfg"), ConfigError);
    c.set("workers", "0");
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("comments and blank lines are ignored") {
    RunConfig c;
    c.merge_text("# header\n\nseed = 9   # trailing\n", "t");
    CHECK(c.seed() == 9);
}

TEST_CASE("environment overrides use double underscores") {
    RunConfig c;
    std::string e1 = "STMT__TRAIN__ORGAN__EPOCHS=3";
    std::string e2 = "UNRELATED=1";
    std::vector<char*> env{e1.data(), e2.data(), nullptr};
    c.merge_env(env.data());
    CHECK(c.train(Task::Organ).epochs == 3);
    std::string bad = "STMT__TRAIN__NOPE=1";
    std::vector<char*> env2{bad.data(), nullptr};
    CHECK_THROWS_AS(c.merge_env(env2.data()), ConfigError);
}

TEST_CASE("hash tracks content and with_seed changes only the seed") {
    const RunConfig a;
    const RunConfig b = a.with_seed(42);
    CHECK(b.seed() == 42);
    CHECK(a.hash() != b.hash());
    CHECK(b.with_seed(a.seed()) == a);
}

TEST_CASE("exit codes") {
    const fs::path root = fresh_dir("stmt_test_cli_codes");
    const std::string r = root.string();
    CHECK(run({}) == 2);
    CHECK(run({"--bogus", "phantom"}) == 2);
    CHECK(run({"--run-root", r, "--set", "nope=1", "phantom"}) == 2);
    CHECK(run({"--run-root", r, "-q", "train-teacher"}) == 3);
    CHECK(run({"--run-root", r, "-q", "infer"}) == 3);
    CHECK(run({"--run-root", r, "-q", "--profile", "no-such-profile", "phantom"}) == 2);
}

TEST_CASE("layer precedence: file < environment < --set < --seed") {
    const fs::path root = fresh_dir("stmt_test_cli_layers");
    std::ofstream(root / "p.cfg") << kTinyProfile << "seed = 1\ntrain.organ.epochs = 4\ntrain.tumor.epochs = 4\n";
    const fs::path out = root / "run";
    REQUIRE(run({"--config", (root / "p.cfg").string(), "--run-root", out.string(), "--set", "train.tumor.epochs=6",
                 "--seed", "8", "-q", "phantom"},
                {"STMT__TRAIN__ORGAN__EPOCHS=5", "STMT__TRAIN__TUMOR__EPOCHS=5"}) == 0);
    RunConfig used;
    used.merge_text(slurp(out / "phantom" / "config.txt"), "recorded");
    CHECK(used.train(Task::Organ).epochs == 5);
    CHECK(used.train(Task::Tumor).epochs == 6);
    CHECK(used.seed() == 8);
    CHECK(used.train(Task::Stage1).epochs == 1);
}

TEST_CASE("tiny end-to-end chain") {
    const fs::path root = fresh_dir("stmt_test_cli_chain");
    std::ofstream(root / "tiny.cfg") << kTinyProfile;
    const std::string r = (root / "run").string();
    const std::vector<std::string> base{"--config", (root / "tiny.cfg").string(), "--run-root", r, "-q", "--seed",
                                        "3"};
    auto with = [&](std::initializer_list<std::string> more) {
        std::vector<std::string> a = base;
        a.insert(a.end(), more);
        return a;
    };
    REQUIRE(run(with({"phantom"})) == 0);
    CHECK(run(with({"phantom"})) == 2);  // refuses to overwrite
    REQUIRE(run(with({"phantom", "--force"})) == 0);
    REQUIRE(run(with({"train-stage1"})) == 0);
    REQUIRE(run(with({"train-teacher"})) == 0);
    REQUIRE(run(with({"pseudo"})) == 0);
    REQUIRE(run(with({"train-organ-student"})) == 0);
    REQUIRE(run(with({"train-tumor-mt"})) == 0);
    REQUIRE(run(with({"infer"})) == 0);
    REQUIRE(run(with({"eval"})) == 0);

    const fs::path rr = root / "run";
    for (const char* f : {"stage1/model.ckpt", "teacher/model.ckpt", "pseudo/pseudo.json", "organ_student/model.ckpt",
                          "tumor_mt/model.ckpt", "tumor_mt/teacher.ckpt", "tumor_mt/supervised.ckpt", "infer/profile.csv", "eval/report.csv",
                          "eval/run.json"}) {
        CHECK_MESSAGE(fs::exists(rr / f), f);
    }
    CHECK(slurp(rr / "tumor_mt" / "metrics.csv").rfind("iter,lr,total,L_tl,L_cpl", 0) == 0);
    CHECK(slurp(rr / "eval" / "report.csv").rfind("case_id,", 0) == 0);

    // Predictions keep the test images' shapes.
    for (const auto& e : fs::directory_iterator(rr / "phantom" / "test" / "images")) {
        const Volume img = read_svol_image(e.path());
        CHECK(read_svol_label(rr / "infer" / e.path().filename()).shape == img.shape);
    }

    // Truth against itself scores perfectly.
    const std::string truth = (rr / "phantom" / "test" / "truth").string();
    REQUIRE(run(with({"eval", "--pred", truth, "--truth", truth, "--out", (root / "self").string()})) == 0);
    const std::string report = slurp(root / "self" / "report.csv");
    std::istringstream is(report);
    std::string header;
    std::getline(is, header);
    std::string line;
    int rows = 0;
    while (std::getline(is, line)) {
        if (line.rfind("case_", 0) != 0) {
            continue;
        }
        ++rows;
        std::stringstream ls(line);
        std::string cell;
        std::getline(ls, cell, ',');
        std::getline(ls, cell, ',');
        CHECK(std::stod(cell) == 1.0);
    }
    CHECK(rows == 2);
}
