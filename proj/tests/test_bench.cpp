#include <gtest/gtest.h>

#include <filesystem>

#include "mmdit/bench.hpp"
#include "support.hpp"

using namespace mmdit;
using mmdit::testing::random_weights;

TEST(Flops, DefaultConfigTally) {
    const ModelConfig cfg;  // L=12, D=64, N_c=8, 32×32 image in 4×4 patches
    const std::uint64_t D = 64, Nc = 8, Nx = 64, N = Nc + Nx, P = 48;
    // per token per stream: qkv 6D², proj 2D², mlp 2·(2·D·4D) = 16D²
    const std::uint64_t proj_mlp = N * (6 * D * D + 2 * D * D + 16 * D * D);
    const std::uint64_t scores_apply = 2 * N * N * D + 2 * N * N * D;
    EXPECT_EQ(cost_model(cfg).block, proj_mlp + scores_apply);
    EXPECT_EQ(cost_model(cfg).block, 8404992u);
    const std::uint64_t fixed = 2 * Nx * P * D + 2 * Nx * D * P + 2 * 2 * D * D + 2 * D * 2 * D;
    EXPECT_EQ(cost_model(cfg).fixed, fixed);
    const SamplerConfig sc{16, 3.f, 0};
    EXPECT_EQ(flops(cfg, {}, sc), 16u * 2u * (fixed + 12u * 8404992u));
    EXPECT_EQ(flops(cfg, {}, SamplerConfig{16, 1.f, 0}), 16u * 1u * (fixed + 12u * 8404992u));
}

TEST(Flops, SkipAllAndThird) {
    const ModelConfig cfg;
    const SamplerConfig sc{10, 2.f, 0};
    std::vector<std::size_t> all;
    for (std::size_t l = 0; l < cfg.depth; ++l) all.push_back(l);
    const auto m = cost_model(cfg);
    EXPECT_EQ(flops(cfg, {}, sc) - flops(cfg, all, sc), cfg.depth * m.block * 10 * 2);
    const auto third = middle_third(cfg.depth);
    EXPECT_EQ(third, (std::vector<std::size_t>{4, 5, 6, 7}));
    // block FLOPs drop by exactly one third
    EXPECT_EQ(3 * (m.step(0) - m.step(third.size())), cfg.depth * m.block);
}

TEST(Flops, MonotoneInSkipSet) {
    const ModelConfig cfg;
    const SamplerConfig sc;
    EXPECT_GT(flops(cfg, {1}, sc), flops(cfg, {1, 2}, sc));
    EXPECT_EQ(flops(cfg, {1, 2}, sc), flops(cfg, {7, 9}, sc));
    EXPECT_THROW(flops(cfg, {12}, sc), PlanError);
    EXPECT_THROW(flops(cfg, {3, 3}, sc), PlanError);
}

TEST(Flops, MiddleThirdOfOtherDepths) {
    EXPECT_EQ(middle_third(24).front(), 8u);
    EXPECT_EQ(middle_third(24).size(), 8u);
    EXPECT_EQ(middle_third(2), (std::vector<std::size_t>{0}));
    EXPECT_EQ(middle_third(1), (std::vector<std::size_t>{}));
}

namespace {
struct BenchFixture {
    ModelConfig cfg = [] {
        ModelConfig c = mmdit::testing::tiny_config(3, 16, 32);
        c.patch = 8;
        return c;
    }();
    ModelWeights w = random_weights(cfg, 51, 1.0);
    BenchPrompts bp{probe_prompts(1), 3};
    SamplerConfig sc{2, 2.f, 0};
};
}  // namespace

TEST(Bench, EmptySkipMatchesBaseline) {
    const BenchFixture f;
    const auto res = bench(f.w, f.bp, {{1}}, f.sc, 3);
    ASSERT_EQ(res.size(), 2u);
    EXPECT_TRUE(res[0].skip.empty());
    EXPECT_EQ(res[0].mse, 0.0);
    EXPECT_EQ(res[0].reps, 3u);
    EXPECT_GT(res[0].mean_s, 0.0);
    EXPECT_LE(res[0].min_s, res[0].mean_s);
    EXPECT_GT(res[1].mse, 0.0);
    EXPECT_EQ(res[1].flops, flops(f.cfg, {1}, f.sc));
}

TEST(Bench, RejectsBadInput) {
    const BenchFixture f;
    EXPECT_THROW(bench(f.w, f.bp, {{1}}, f.sc, 2), InputError);
    EXPECT_THROW(bench(f.w, f.bp, {{5}}, f.sc, 3), PlanError);
    EXPECT_THROW(bench(f.w, BenchPrompts{}, {{1}}, f.sc, 3), InputError);
}

TEST(Bench, CsvRowsAndHeader) {
    BenchResult r;
    r.skip = {4, 5, 6, 7};
    r.flops = 123;
    r.mean_s = 0.5;
    r.min_s = 0.25;
    r.mse = 1e-3;
    r.cosine = 0.99;
    r.accuracy = 2.0 / 3.0;
    EXPECT_EQ(bench_csv_row(r), "4 5 6 7,123,0.5,0.25,0.001,0.99,0.666667");
    const auto dir = mmdit::testing::scratch_dir("bench_csv");
    const std::string path = (dir / "bench.csv").string();
    append_bench_csv(path, {r});
    append_bench_csv(path, {r});
    EXPECT_EQ(read_text_file(path), std::string(kBenchHeader) + "\n" + bench_csv_row(r) + "\n" + bench_csv_row(r) + "\n");
}
