#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "fixtures.hpp"
#include "mmdit/cli.hpp"
#include "support.hpp"

using namespace mmdit;
namespace fs = std::filesystem;

namespace {

struct CliRun {
    int code;
    std::string out, err;
};

CliRun run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "mmdit");
    std::vector<const char*> argv;
    for (auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = mmdit::run(int(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) { return read_text_file(p.string()); }

// Small 32×32 model; every artifact lands under one scratch directory.
class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        dir = mmdit::testing::scratch_dir(::testing::UnitTest::GetInstance()->current_test_info()->name());
        write_config(base_config());
    }

    static nlohmann::json base_config() {
        return nlohmann::json::parse(R"({
            "model": {"depth": 3, "width": 16, "heads": 2, "patch": 8, "mlp_ratio": 2},
            "model_name": "tiny",
            "checkpoint": "model.mmdp",
            "out_dir": "out",
            "sampler": {"steps": 2, "cfg": 2.0},
            "train": {"steps": 3, "batch": 2, "eval_every": 0},
            "probe": {"ops": ["disable", "enhance"], "seeds": [0, 1], "prompts_per_attribute": 1},
            "bench": {"reps": 3, "prompts_per_attribute": 1}
        })");
    }

    void write_config(const nlohmann::json& j) {
        std::ofstream(dir / "c.json") << j.dump(2);
    }

    std::string cfg() const { return (dir / "c.json").string(); }

    void train() { ASSERT_EQ(run_cli({"train", "--config", cfg()}).code, 0); }

    fs::path dir;
};

}  // namespace

TEST_F(CliTest, UsageErrors) {
    CliRun r = run_cli({"frobnicate", "--config", cfg()});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("Usage"), std::string::npos);
    r = run_cli({});
    EXPECT_EQ(r.code, 1);
    r = run_cli({"generate", "--prompt", "one red square"});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("--config"), std::string::npos);
    r = run_cli({"generate", "--config", (dir / "missing.json").string(), "--prompt", "one red square"});
    EXPECT_EQ(r.code, 1);
    EXPECT_EQ(r.err.rfind("generate: ", 0), 0u);
    EXPECT_EQ(run_cli({"--help"}).code, 0);
}

TEST_F(CliTest, StrictConfig) {
    auto j = base_config();
    j["sampler"]["stpes"] = 3;
    write_config(j);
    CliRun r = run_cli({"plot", "--config", cfg()});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("stpes"), std::string::npos);
    j = base_config();
    j["blocks"] = {{"color", {1, 5}}};
    write_config(j);
    EXPECT_EQ(run_cli({"plot", "--config", cfg()}).code, 1);
}

TEST_F(CliTest, TrainWritesCheckpointAndLoss) {
    const CliRun r = run_cli({"train", "--config", cfg(), "--seed", "3"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(dir / "model.mmdp"));
    const std::string loss = slurp(dir / "out" / "loss.csv");
    EXPECT_EQ(loss.rfind("step,loss\n1,", 0), 0u);
    EXPECT_EQ(std::count(loss.begin(), loss.end(), '\n'), 4);
    std::istringstream lines(r.err);
    for (std::string line; std::getline(lines, line);) EXPECT_EQ(line.rfind("train: ", 0), 0u) << line;
}

TEST_F(CliTest, GenerateIsReproducibleAndHonorsLambdaDefault) {
    train();
    // A few training steps leave the gates near zero; random weights make the text stream matter.
    const std::string ckpt = (dir / "model.mmdp").string();
    write_checkpoint(mmdit::testing::random_weights<float>(read_checkpoint(ckpt).config, 5), ckpt);
    auto j = base_config();
    j["blocks"] = {{"color", {0, 2}}};
    write_config(j);
    const auto args = std::vector<std::string>{"generate", "--config", cfg(), "--prompt", "two red square",
                                               "--attribute", "color", "--seed", "4"};
    ASSERT_EQ(run_cli(args).code, 0);
    const fs::path img = dir / "out" / "two_red_square_none_s4.ppm";
    ASSERT_TRUE(fs::exists(img));
    const std::string first = slurp(img);
    ASSERT_EQ(run_cli(args).code, 0);
    EXPECT_EQ(slurp(img), first);
    auto with_lambda = args;
    with_lambda.insert(with_lambda.end(), {"--lambda", "1.5"});
    ASSERT_EQ(run_cli(with_lambda).code, 0);
    EXPECT_EQ(slurp(img), first);  // 1.5 is the default
    with_lambda.back() = "2.5";
    ASSERT_EQ(run_cli(with_lambda).code, 0);
    EXPECT_NE(slurp(img), first);
}

TEST_F(CliTest, ValidationPrecedesWrites) {
    train();
    fs::remove_all(dir / "out");
    CliRun r = run_cli({"generate", "--config", cfg(), "--prompt", "two red square", "--skip", "7"});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("block 7"), std::string::npos);
    r = run_cli({"generate", "--config", cfg(), "--prompt", "two crimson square"});
    EXPECT_EQ(r.code, 1);
    r = run_cli({"bench", "--config", cfg(), "--skip", "1,1"});
    EXPECT_EQ(r.code, 1);
    EXPECT_FALSE(fs::exists(dir / "out"));
}

TEST_F(CliTest, CorruptCheckpointIsAnInputError) {
    std::ofstream(dir / "model.mmdp") << "not a checkpoint";
    const CliRun r = run_cli({"generate", "--config", cfg(), "--prompt", "one red square"});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("magic"), std::string::npos);
}

TEST_F(CliTest, ProbePlotSelectPipeline) {
    train();
    const CliRun p = run_cli({"probe", "--config", cfg(), "--jobs", "2"});
    ASSERT_EQ(p.code, 0) << p.err;
    const std::string csv = slurp(dir / "out" / "report.csv");
    const ProbeReport rep = parse_report(csv);
    EXPECT_EQ(rep.rows.size(), 3u * (1 + 3 * 2));
    ASSERT_EQ(run_cli({"probe", "--config", cfg(), "--jobs", "1"}).code, 0);
    EXPECT_EQ(slurp(dir / "out" / "report.csv"), csv);
    ASSERT_EQ(run_cli({"plot", "--config", cfg()}).code, 0);
    const std::string svg = slurp(dir / "out" / "report.svg");
    EXPECT_NE(svg.find("<svg"), std::string::npos);
    ASSERT_EQ(run_cli({"plot", "--config", cfg()}).code, 0);
    EXPECT_EQ(slurp(dir / "out" / "report.svg"), svg);
}

TEST_F(CliTest, SelectBlocksOnFixtureReport) {
    auto j = base_config();
    j["model"]["depth"] = 38;
    j["report"] = "fixture.csv";
    write_config(j);
    write_report(mmdit::testing::spike_report(38, {3, 9, 15, 20}), (dir / "fixture.csv").string());
    CliRun r = run_cli({"select-blocks", "--config", cfg(), "--attribute", "color", "-k", "4"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(r.out, "3,9,15,20\n");
    r = run_cli({"select-blocks", "--config", cfg(), "--attribute", "spatial", "-k", "4"});
    EXPECT_EQ(r.code, 1);
    r = run_cli({"select-blocks", "--config", cfg(), "--attribute", "colour"});
    EXPECT_EQ(r.code, 1);
}

TEST_F(CliTest, EditAndBench) {
    train();
    auto j = base_config();
    j["blocks"] = {{"color", {1}}};
    write_config(j);
    std::ofstream(dir / "e.json") << R"({"src": "one red square", "tgt": "one blue square", "attribute": "color"})";
    CliRun r = run_cli({"edit", "--config", cfg(), (dir / "e.json").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(dir / "out" / "edit_source.ppm"));
    EXPECT_TRUE(fs::exists(dir / "out" / "edit_target.ppm"));
    std::ofstream(dir / "bad.json") << R"({"src": "one red square", "target": "x"})";
    EXPECT_EQ(run_cli({"edit", "--config", cfg(), (dir / "bad.json").string()}).code, 1);

    r = run_cli({"bench", "--config", cfg(), "--skip", "1"});
    ASSERT_EQ(r.code, 0) << r.err;
    const std::string bench = slurp(dir / "out" / "bench.csv");
    EXPECT_EQ(bench.rfind("skip_set,flops,mean_s,min_s,mse,cos,accuracy\n,", 0), 0u);
    EXPECT_NE(bench.find("\n1,"), std::string::npos);
}

TEST_F(CliTest, NumericFailureExitsTwo) {
    auto j = base_config();
    j["train"]["lr"] = 1e30;
    write_config(j);
    const CliRun r = run_cli({"train", "--config", cfg()});
    EXPECT_EQ(r.code, 2) << r.err;
}
