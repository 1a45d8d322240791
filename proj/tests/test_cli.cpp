#include "cli/experiment.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;
namespace ic = invgame::cli;
using ic::json;

namespace {

const fs::path kConfigs = INVGAME_CONFIG_DIR;

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

std::size_t count_lines(const fs::path& p) {
    std::ifstream in(p);
    std::size_t n = 0;
    for (std::string line; std::getline(in, line);)
        if (!line.empty()) ++n;
    return n;
}

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() /
               (std::string("invgame_cli_") + ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    fs::path write_config(const std::string& name, const std::string& text) const {
        const auto p = dir_ / name;
        std::ofstream(p, std::ios::binary) << text;
        return p;
    }

    int run(const std::string& mode, const fs::path& config, const std::string& out = "out",
            std::optional<std::uint64_t> seed = std::nullopt, std::optional<std::uint64_t> env = std::nullopt) {
        ic::RunOptions opt;
        opt.mode = mode;
        opt.config_path = config.string();
        opt.out_dir = (dir_ / out).string();
        opt.seed = seed;
        opt.env_seed = env;
        log_.str("");
        return ic::run(opt, log_);
    }

    fs::path dir_;
    std::ostringstream log_;
};

const char* kSimulate = R"(
mode: simulate
system:
  A: [[1, 1], [0, 2]]
  players:
    - {B: [[1], [0]], C: [[1, 0]]}
    - {B: [[0], [1]], C: [[0, 1]]}
targets: [3, 4]
trajectory:
  x0: [1, 1]
  dt_fine: 1.0e-3
  delta_t: 0.01
  T: 0.1
  seed: 5
  noise: {amplitude: 1, num_terms: 10, freq_range: [-10, 10]}
)";

}  // namespace

TEST(CliParse, YamlAndJsonAgree) {
    const auto y = ic::parse_config_text("a: 1\nb: [1.5, two]\nc: {d: true, e: null}\nf: '3'\n");
    const auto j = ic::parse_config_text(R"({"a": 1, "b": [1.5, "two"], "c": {"d": true, "e": null}, "f": "3"})");
    EXPECT_EQ(y, j);
    EXPECT_TRUE(y["a"].is_number_integer());
    EXPECT_TRUE(y["f"].is_string());
}

TEST(CliParse, DuplicateKeysAreRejected) {
    EXPECT_ANY_THROW((void)ic::parse_config_text("a: 1\na: 2\n"));
    EXPECT_ANY_THROW((void)ic::parse_config_text(R"({"a": 1, "a": 2})"));
}

TEST(CliParse, UnknownKeysAreRejected) {
    EXPECT_THROW(ic::check_schema(ic::parse_config_text("mode: solve-mb\nsolver: {betta: 1}\n")), ic::ConfigError);
    EXPECT_THROW(ic::check_schema(ic::parse_config_text("sytem: {}\n")), ic::ConfigError);
    EXPECT_NO_THROW(ic::check_schema(ic::parse_config_text("solver: {beta: 1, newton: {coupling: output}}\n")));
}

TEST(CliParse, MatrixShorthand) {
    EXPECT_EQ(ic::to_matrix(json(2.5), "x"), invgame::Matrix::Constant(1, 1, 2.5));
    const auto row = ic::to_matrix(json::array({1, 2, 3}), "x");
    EXPECT_EQ(row.rows(), 1);
    EXPECT_EQ(row.cols(), 3);
    const auto m = ic::to_matrix(json::parse("[[1, 2], [3, 4]]"), "x");
    EXPECT_EQ(m(1, 0), 3.0);
    EXPECT_EQ(ic::to_matrix(ic::from_matrix(m), "x"), m);
    EXPECT_THROW((void)ic::to_matrix(json::parse("[[1, 2], [3]]"), "x"), ic::ConfigError);
}

TEST(CliParse, SeedText) {
    EXPECT_EQ(ic::parse_seed("42"), 42u);
    EXPECT_EQ(ic::parse_seed("18446744073709551615"), UINT64_MAX);
    EXPECT_FALSE(ic::parse_seed("-1"));
    EXPECT_FALSE(ic::parse_seed("12x"));
    EXPECT_FALSE(ic::parse_seed(""));
}

TEST_F(Cli, SolveModelBasedWritesDeterministicArtifacts) {
    ASSERT_EQ(run("solve-mb", kConfigs / "mb_2player.yaml", "a"), ic::kOk) << log_.str();
    const auto r = read_json(dir_ / "a" / "result.json");
    EXPECT_NEAR(r["feedback"]["K"][0][0][0].get<double>(), 3.0, 1e-3);
    EXPECT_NEAR(r["feedback"]["K"][1][0][0].get<double>(), 4.0, 1e-3);
    EXPECT_TRUE(r["certificate"]["passed"].get<bool>());
    const auto outer = r["iterations"]["outer"].get<std::size_t>();
    EXPECT_EQ(outer, 5u);
    EXPECT_EQ(count_lines(dir_ / "a" / "trace.csv"), outer + 1);  // header plus one row per iteration
    EXPECT_TRUE(fs::exists(dir_ / "a" / "timing.json"));

    ASSERT_EQ(run("solve-mb", kConfigs / "mb_2player.yaml", "b"), ic::kOk);
    EXPECT_EQ(slurp(dir_ / "a" / "result.json"), slurp(dir_ / "b" / "result.json"));
    EXPECT_EQ(slurp(dir_ / "a" / "trace.csv"), slurp(dir_ / "b" / "trace.csv"));
}

TEST_F(Cli, OvershootIsANumericalFailure) {
    EXPECT_EQ(run("solve-mb", kConfigs / "mb_2player_overshoot.yaml"), ic::kNumericalFailure);
    EXPECT_NE(log_.str().find("stability lost at s="), std::string::npos) << log_.str();
}

TEST_F(Cli, ModeMismatchAndUnknownKeyAreConfigErrors) {
    EXPECT_EQ(run("solve-mf", kConfigs / "mb_2player.yaml"), ic::kConfigInvalid);
    const auto p = write_config("bad.yaml", "mode: solve-mb\nsolver: {betta: 1}\n");
    EXPECT_EQ(run("solve-mb", p), ic::kConfigInvalid);
    EXPECT_NE(log_.str().find("betta"), std::string::npos) << log_.str();
}

TEST_F(Cli, InvalidGameIsAConfigError) {
    auto text = slurp(kConfigs / "mb_2player.yaml");
    text.replace(text.find("  - [1, 2]"), 10, "  - [-1, 2]");
    EXPECT_EQ(run("solve-mb", write_config("neg.yaml", text)), ic::kConfigInvalid);
    EXPECT_NE(log_.str().find("R_11 not positive definite"), std::string::npos) << log_.str();
}

TEST_F(Cli, CoarseFineStepIsRejected) {
    auto text = slurp(kConfigs / "mf_3state.yaml");
    text.replace(text.find("dt_fine: 1.0e-5"), 15, "dt_fine: 1.0e-3");
    EXPECT_EQ(run("solve-mf", write_config("coarse.yaml", text)), ic::kConfigInvalid);
    EXPECT_NE(log_.str().find("dt_fine"), std::string::npos) << log_.str();
}

TEST_F(Cli, SolveModelFree) {
    ASSERT_EQ(run("solve-mf", kConfigs / "mf_3state.yaml"), ic::kOk) << log_.str();
    const auto r = read_json(dir_ / "out" / "result.json");
    EXPECT_NEAR(r["estimated_B"][0][1][0].get<double>(), 1.0, 5e-2);
    EXPECT_TRUE(r["certificate"]["passed"].get<bool>());
    EXPECT_TRUE(fs::exists(dir_ / "out" / "trajectory.csv"));
}

TEST_F(Cli, SolveDistributed) {
    ASSERT_EQ(run("solve-dist", kConfigs / "dist_3player.yaml"), ic::kOk) << log_.str();
    const auto r = read_json(dir_ / "out" / "result.json");
    EXPECT_EQ(r["audit"]["cross_reads"].get<long>(), 0);
    EXPECT_EQ(count_lines(dir_ / "out" / "messages.jsonl"), 12u);
    std::size_t S = 0;
    for (const auto& a : r["agents"]) S = std::max(S, a["iterations"].get<std::size_t>());
    EXPECT_EQ(count_lines(dir_ / "out" / "trace.csv"), S + 1);
    std::ifstream in(dir_ / "out" / "messages.jsonl");
    std::string first;
    std::getline(in, first);
    const auto m = json::parse(first);
    EXPECT_EQ(m["phase"].get<int>(), 0);
    EXPECT_EQ(m["agent"].get<int>(), 1);
}

TEST_F(Cli, FamilyAndVerifyOnASolvedGame) {
    ASSERT_EQ(run("solve-mb", kConfigs / "mb_2player.yaml", "base"), ic::kOk);
    const std::string base = (dir_ / "base" / "result.json").string();

    const auto fam = write_config("fam.yaml", "mode: family\nfamily: {result: '" + base + "', draws: 10, seed: 3}\n");
    EXPECT_EQ(run("family", fam, "fam"), ic::kOk) << log_.str();
    const auto fr = read_json(dir_ / "fam" / "result.json");
    EXPECT_EQ(fr["draws"].size(), 10u);
    EXPECT_TRUE(fr["failed_draws"].empty());

    const auto zero = write_config("zero.yaml", "mode: family\nfamily:\n  result: '" + base +
                                                    "'\n  deltaR:\n    - [[0, 0], [0, 0]]\n");
    ASSERT_EQ(run("family", zero, "zero"), ic::kOk) << log_.str();
    const auto zr = read_json(dir_ / "zero" / "result.json");
    EXPECT_EQ(zr["draws"][0]["costs"]["Q"], zr["base"]["costs"]["Q"]);

    const auto own = write_config("own.yaml", "mode: family\nfamily:\n  result: '" + base +
                                                  "'\n  deltaR:\n    - [[0.1, 0], [0, 0]]\n");
    EXPECT_EQ(run("family", own, "own"), ic::kConfigInvalid);
    EXPECT_NE(log_.str().find("must be zero"), std::string::npos) << log_.str();

    const auto ver = write_config("ver.yaml", "mode: verify-ne\nverify: {result: '" + base + "'}\n");
    EXPECT_EQ(run("verify-ne", ver, "ver"), ic::kOk);
    EXPECT_TRUE(read_json(dir_ / "ver" / "result.json")["certificate"]["passed"].get<bool>());

    // a perturbed Q still writes a report, which records the failure
    const auto bad = write_config("bad.yaml", "mode: verify-ne\nverify:\n  result: '" + base +
                                                  "'\n  Q: [[[1, 0], [0, 1]], [[1, 0], [0, 1]]]\n");
    EXPECT_EQ(run("verify-ne", bad, "bad"), ic::kOk);
    const auto br = read_json(dir_ / "bad" / "result.json");
    EXPECT_FALSE(br["certificate"]["passed"].get<bool>());
}

TEST_F(Cli, SeedPrecedence) {
    const auto p = write_config("sim.yaml", kSimulate);
    auto seed_of = [&](const std::string& out) {
        return read_json(dir_ / out / "result.json")["data"]["seed"].get<std::uint64_t>();
    };
    ASSERT_EQ(run("simulate", p, "cfg"), ic::kOk) << log_.str();
    EXPECT_EQ(seed_of("cfg"), 5u);
    ASSERT_EQ(run("simulate", p, "env", std::nullopt, 9), ic::kOk);
    EXPECT_EQ(seed_of("env"), 9u);
    ASSERT_EQ(run("simulate", p, "flag", 12, 9), ic::kOk);
    EXPECT_EQ(seed_of("flag"), 12u);
    EXPECT_NE(slurp(dir_ / "cfg" / "trajectory.csv"), slurp(dir_ / "env" / "trajectory.csv"));
    ASSERT_EQ(run("simulate", p, "cfg2"), ic::kOk);
    EXPECT_EQ(slurp(dir_ / "cfg" / "trajectory.csv"), slurp(dir_ / "cfg2" / "trajectory.csv"));
}

TEST(CliExe, ExitCodesFromArgumentParsing) {
    const std::string exe = INVGAME_EXE;
    EXPECT_EQ(WEXITSTATUS(std::system((exe + " > /dev/null 2>&1").c_str())), 2);
    EXPECT_EQ(WEXITSTATUS(std::system((exe + " --help > /dev/null 2>&1").c_str())), 0);
    EXPECT_EQ(WEXITSTATUS(std::system((exe + " solve-mb > /dev/null 2>&1").c_str())), 2);
    const std::string cfg = (kConfigs / "mb_2player.yaml").string();
    const auto out = fs::temp_directory_path() / "invgame_cli_exe";
    EXPECT_EQ(WEXITSTATUS(std::system(
                  (exe + " solve-mb --config " + cfg + " --seed abc --out " + out.string() + " > /dev/null 2>&1").c_str())),
              2);
    EXPECT_EQ(WEXITSTATUS(std::system(
                  (exe + " solve-mb --config " + cfg + " --out " + out.string() + " > /dev/null 2>&1").c_str())),
              0);
    fs::remove_all(out);
}
