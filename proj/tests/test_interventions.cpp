#include <gtest/gtest.h>

#include "mmdit/diffusion.hpp"
#include "mmdit/interventions.hpp"
#include "support.hpp"

using namespace mmdit;
using mmdit::testing::random_weights;
using mmdit::testing::some_tokens;
using mmdit::testing::tiny_config;

namespace {

Matrix random_c(std::uint64_t seed, std::size_t rows = 8, std::size_t cols = 6) {
    Rng rng(seed);
    Matrix m(rows, cols);
    for (auto& v : m.data()) v = rng.next_normal();
    return m;
}

struct Fixture {
    ModelConfig cfg = tiny_config(5, 16, 8);
    ModelWeights w = random_weights(cfg, 21, 1.0);
    TokenIds tokens = some_tokens(cfg, 2);
    Image x;
    Fixture() {
        Rng rng(3);
        x = Image(cfg.image_side);
        for (auto& v : x.data) v = rng.next_normal();
    }
    Image run(const InterventionSpec& plan) const { return forward(w, tokens, x, 0.6f, plan).velocity; }
};

}  // namespace

TEST(Enhance, LambdaOneIsIdentity) {
    const Matrix c = random_c(1);
    EXPECT_EQ(apply_enhance(c, 1.f), c);
    EXPECT_EQ(apply_enhance(c, 1.f, std::vector<std::size_t>{0, 3}), c);
}

TEST(Enhance, FullMaskEqualsUnmasked) {
    const Matrix c = random_c(2);
    EXPECT_EQ(apply_enhance(c, 1.5f, std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7}), apply_enhance(c, 1.5f));
}

TEST(Enhance, MaskScalesOnlyChosenRows) {
    const Matrix c = random_c(3);
    const Matrix e = apply_enhance(c, 2.f, std::vector<std::size_t>{1});
    for (std::size_t r = 0; r < c.rows(); ++r)
        for (std::size_t d = 0; d < c.cols(); ++d) EXPECT_EQ(e(r, d), r == 1 ? 2.f * c(r, d) : c(r, d));
    EXPECT_THROW(apply_enhance(c, 2.f, std::vector<std::size_t>{8}), PlanError);
}

TEST(Enhance, ProbeAmplificationByTwo) {
    const Matrix c = random_c(4);
    const Matrix e = apply_enhance(c, 2.f);
    for (std::size_t i = 0; i < c.size(); ++i) EXPECT_EQ(e.data()[i], 2.f * c.data()[i]);
}

TEST(Enhance, PositiveHomogeneity) {
    const Matrix c = random_c(5);
    const std::vector<std::size_t> m{2, 5};
    // powers of two scale without rounding, so composition is exact
    EXPECT_EQ(apply_enhance(apply_enhance(c, 2.f, m), 0.25f, m), apply_enhance(c, 0.5f, m));
    // general factors: one extra rounding, so within a couple of ulps
    const Matrix a = apply_enhance(apply_enhance(c, 1.5f, m), 1.3f, m), b = apply_enhance(c, 1.5f * 1.3f, m);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 4e-7 * std::abs(b.data()[i]));
}

TEST(Disable, ZerosAndSmallLambdaLimit) {
    const Matrix c = random_c(6);
    const Matrix z = apply_disable(c);
    for (float v : z.data()) EXPECT_EQ(v, 0.f);
    const Matrix tiny = apply_enhance(c, 1e-30f);
    for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(tiny.data()[i], z.data()[i], 1e-25);
}

TEST(Validate, AcceptsAndRejects) {
    const ModelConfig cfg = tiny_config(6);
    EXPECT_NO_THROW(validate(InterventionSpec{}, cfg));
    try {
        validate(InterventionSpec{}.add(6, Action::skip()), cfg);
        FAIL() << "expected PlanError";
    } catch (const PlanError& e) {
        EXPECT_NE(std::string(e.what()).find("block 6"), std::string::npos);
    }
    EXPECT_THROW(validate(InterventionSpec{}.add(5, Action::skip()).add(5, Action::enhance(1.5f)), cfg), PlanError);
    EXPECT_THROW(validate(InterventionSpec{}.add(1, Action::enhance(0.f)), cfg), PlanError);
    EXPECT_THROW(validate(InterventionSpec{}.add(1, Action::enhance(4.5f)), cfg), PlanError);
    EXPECT_NO_THROW(validate(InterventionSpec{}.add(1, Action::enhance(4.f)), cfg));
    EXPECT_THROW(validate(InterventionSpec{}.add(1, Action::enhance(2.f, std::vector<std::size_t>{8})), cfg),
                 PlanError);
}

TEST(PlanJson, RoundTripAndStrictKeys) {
    const InterventionSpec plan = InterventionSpec{}
                                      .add(0, Action::remove())
                                      .add(1, Action::disable_text())
                                      .add(2, Action::enhance(1.5f, std::vector<std::size_t>{0, 2}))
                                      .add(3, Action::skip());
    EXPECT_EQ(plan_from_json(plan_to_json(plan)), plan);
    EXPECT_THROW(plan_from_json(nlohmann::json::parse(R"({"acts": []})")), PlanError);
    EXPECT_THROW(plan_from_json(nlohmann::json::parse(R"({"actions": [{"block": 1, "op": "boost"}]})")), PlanError);
    EXPECT_THROW(plan_from_json(nlohmann::json::parse(R"({"actions": [{"block": 1, "op": "enhance"}]})")), PlanError);
    EXPECT_THROW(plan_from_json(nlohmann::json::parse(R"({"actions": [{"block": 1, "op": "skip", "lambda": 2}]})")),
                 PlanError);
}

TEST(PlanEquivalence, EnhanceOneEqualsEmptyPlan) {
    const Fixture f;
    const Image base = f.run({});
    EXPECT_EQ(f.run(InterventionSpec{}.add(3, Action::enhance(1.f))), base);
    std::vector<std::size_t> all;
    for (std::size_t l = 0; l < f.cfg.depth; ++l) all.push_back(l);
    EXPECT_EQ(f.run(InterventionSpec::enhance_blocks(all, 1.f)), base);
    EXPECT_EQ(f.run(InterventionSpec::enhance_blocks(all, 2.f, std::vector<std::size_t>{})), base);
}

TEST(PlanEquivalence, RemoveEqualsSkip) {
    const Fixture f;
    for (std::size_t l = 0; l < f.cfg.depth; ++l)
        EXPECT_EQ(f.run(InterventionSpec{}.add(l, Action::remove())), f.run(InterventionSpec{}.add(l, Action::skip())))
            << l;
}

TEST(PlanEquivalence, InterventionsChangeOutput) {
    const Fixture f;
    const Image base = f.run({});
    EXPECT_NE(f.run(InterventionSpec{}.add(1, Action::skip())), base);
    EXPECT_NE(f.run(InterventionSpec{}.add(1, Action::disable_text())), base);
    EXPECT_NE(f.run(InterventionSpec{}.add(1, Action::enhance(1.5f))), base);
}

TEST(PlanEquivalence, InterventionsPersistForward) {
    // Disabling text at the last block still affects the image because the
    // zeroed stream feeds that block's joint attention.
    const Fixture f;
    EXPECT_NE(f.run(InterventionSpec{}.add(f.cfg.depth - 1, Action::disable_text())), f.run({}));
}

TEST(PlanEquivalence, SkippingEveryBlockLeavesEmbeddings) {
    const Fixture f;
    std::vector<std::size_t> all;
    for (std::size_t l = 0; l < f.cfg.depth; ++l) all.push_back(l);
    const auto r = forward(f.w, f.tokens, f.x, 0.6f, InterventionSpec::skip_set(all), true);
    const Matrix embedded = patchify(f.w, f.x);
    for (const auto& b : r.trace->blocks) EXPECT_EQ(b.image_in, embedded);
}
