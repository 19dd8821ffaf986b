#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "model_fixtures.hpp"
#include "samsep/dit.hpp"

using namespace samsep;
using namespace samsep::dit;
using samsep::testing::full_prompt_example;
using samsep::testing::noise_like;
using samsep::testing::perturbed_params;
using samsep::testing::tiny_config;

namespace {

Conditioning dummy_cond(std::size_t frames, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> nd(0.0f, 0.2f);
    Conditioning c{Tensor<float>::matrix(frames, codec::kChannels), prompt::PromptBundle::dummy(frames)};
    for (auto& v : c.mix.storage()) v = nd(rng);
    return c;
}

double abs_sum(const Tensor<double>& t) {
    double s = 0.0;
    for (double v : t.storage()) s += std::abs(v);
    return s;
}

}  // namespace

TEST(DitConfig, Validation) {
    auto c = tiny_config();
    EXPECT_NO_THROW(validate(c));
    c.heads = 3;
    EXPECT_THROW(validate(c), ConfigError);
    c = tiny_config();
    c.aux_layer = 3;
    EXPECT_THROW(validate(c), ConfigError);
    c.aux_layer = 0;
    EXPECT_THROW(validate(c), ConfigError);
    c = tiny_config();
    c.layers = 0;
    EXPECT_THROW(validate(c), ConfigError);
}

TEST(Forward, OutputShapeIsTBy2C) {
    auto c = tiny_config();
    c.max_frames = 750;
    const auto p = init_params<float>(c, 1);
    for (std::size_t T : {1u, 50u, 750u}) {
        const auto v = velocity(p, c, Tensor<float>::matrix(T, 2 * c.channels), 0.5, dummy_cond(T, T));
        EXPECT_EQ(v.rows(), T);
        EXPECT_EQ(v.cols(), 2 * c.channels);
    }
}

TEST(Forward, ZeroOutputProjectionGivesZeroVelocity) {
    const auto c = tiny_config();
    const auto p = init_params<double>(c, 2);
    std::mt19937_64 rng(3);
    for (double t : {0.0, 0.3, 1.0}) {
        const auto v = velocity(p, c, samsep::testing::random_tensor({20, 2 * c.channels}, rng), t, dummy_cond(20, 4));
        EXPECT_EQ(abs_sum(v), 0.0);
    }
}

TEST(Forward, LengthMismatchIsContractError) {
    const auto c = tiny_config();
    const auto p = init_params<float>(c, 1);
    EXPECT_THROW(velocity(p, c, Tensor<float>::matrix(10, 2 * c.channels), 0.5, dummy_cond(9, 1)), ContractError);
    EXPECT_THROW(velocity(p, c, Tensor<float>::matrix(10, c.channels), 0.5, dummy_cond(10, 1)), ContractError);
    EXPECT_THROW(velocity(p, c, Tensor<float>::matrix(31, 2 * c.channels), 0.5, dummy_cond(31, 1)), ContractError);
}

TEST(Forward, ExamplesInOneGraphDoNotInteract) {
    const auto c = tiny_config();
    const auto p = perturbed_params(c, 5);
    const auto a = full_prompt_example(1), b = full_prompt_example(2);
    const auto xa = noise_like(a.x1, 10), xb = noise_like(b.x1, 11);
    const Conditioning ca{a.mix, a.bundle}, cb{b.mix, b.bundle};

    ag::Graph<double> g1;
    ParamVars<double> pv1(g1, p, false);
    const auto va1 = forward(g1, pv1, c, xa, 0.4, ca).velocity.value();
    const auto vb1 = forward(g1, pv1, c, xb, 0.7, cb).velocity.value();

    ag::Graph<double> g2;
    ParamVars<double> pv2(g2, p, false);
    const auto vb2 = forward(g2, pv2, c, xb, 0.7, cb).velocity.value();
    const auto va2 = forward(g2, pv2, c, xa, 0.4, ca).velocity.value();
    EXPECT_EQ(va1, va2);
    EXPECT_EQ(vb1, vb2);
    EXPECT_EQ(va1, velocity(p, c, xa, 0.4, ca));
}

TEST(Forward, AllDummyConditioningIsFinite) {
    const auto c = tiny_config();
    const auto p = perturbed_params(c, 6);
    std::mt19937_64 rng(7);
    const auto v = velocity(p, c, samsep::testing::random_tensor({25, 2 * c.channels}, rng), 0.9, dummy_cond(25, 8));
    for (double x : v.storage()) EXPECT_TRUE(std::isfinite(x));
    EXPECT_GT(abs_sum(v), 0.0);
}

TEST(Forward, AttentionIsBidirectional) {
    const auto c = tiny_config();
    const auto p = perturbed_params(c, 9);
    std::mt19937_64 rng(10);
    auto x = samsep::testing::random_tensor({12, 2 * c.channels}, rng);
    const auto cond = dummy_cond(12, 11);
    const auto v0 = velocity(p, c, x, 0.5, cond);
    x(11, 0) += 1.0;
    const auto v1 = velocity(p, c, x, 0.5, cond);
    EXPECT_NE(v0(0, 0), v1(0, 0));
}

TEST(TimeEmbed, DeterministicAndShared) {
    const auto c = tiny_config();
    const auto p = perturbed_params(c, 12);
    ag::Graph<double> g;
    ParamVars<double> pv(g, p, false);
    const auto m1 = time_embed(g, pv, c, 0.25);
    const auto m2 = time_embed(g, pv, c, 0.25);
    ASSERT_EQ(m1.size(), c.layers);
    for (std::size_t l = 0; l < c.layers; ++l) EXPECT_EQ(m1[l].value(), m2[l].value());

    const auto shared = time_mlp(g, pv, c, 0.25).value();
    for (std::size_t l = 0; l < c.layers; ++l) {
        const auto& bias = p.at(block_key(l, "mod_bias"));
        for (std::size_t r = 0; r < kModRows; ++r)
            for (std::size_t j = 0; j < c.dim; ++j) EXPECT_NEAR(m1[l].value()(r, j), bias(r, j) + shared[r], 1e-12);
    }
}

TEST(TimeEmbed, TimeOutsideUnitIntervalIsContractError) {
    const auto c = tiny_config();
    const auto p = init_params<double>(c, 1);
    ag::Graph<double> g;
    ParamVars<double> pv(g, p, false);
    EXPECT_THROW(time_embed(g, pv, c, 1.5), ContractError);
    EXPECT_THROW(time_embed(g, pv, c, -0.1), ContractError);
}

TEST(TimeEmbed, SharedMlpMovesEveryLayerAndBiasMovesOne) {
    const auto c = tiny_config();
    auto p = perturbed_params(c, 13);
    auto mods = [&](const ParamStore<double>& q) {
        ag::Graph<double> g;
        ParamVars<double> pv(g, q, false);
        std::vector<Tensor<double>> out;
        for (const auto& m : time_embed(g, pv, c, 0.6)) out.push_back(m.value());
        return out;
    };
    const auto base = mods(p);

    auto q = p;
    q.at("time.l2.b")[0] += 0.1;
    auto moved = mods(q);
    for (std::size_t l = 0; l < c.layers; ++l) EXPECT_NE(moved[l], base[l]);

    q = p;
    q.at(block_key(1, "mod_bias"))(2, 3) += 0.1;
    moved = mods(q);
    EXPECT_EQ(moved[0], base[0]);
    EXPECT_NE(moved[1], base[1]);
}

TEST(TimeEmbed, GradientThroughModulationMatchesFiniteDifferences) {
    const auto c = tiny_config();
    const auto p = perturbed_params(c, 14);
    const auto ex = full_prompt_example(3);
    const auto x0 = noise_like(ex.x1, 15);
    flow::FlowConfig fc;
    fc.lambda_aux = 0.5;
    const auto rep = samsep::testing::model_fd_check(c, fc, p, ex, x0, 0.37, 6);
    for (const char* k : {"time.l1.w", "time.l1.b", "time.l2.w", "time.l2.b", "blocks.0.mod_bias", "blocks.1.mod_bias"})
        EXPECT_LT(rep.worst.at(k), 1e-3) << k;
}

TEST(AuxHead, ShapeAndDeterminism) {
    const auto c = tiny_config();
    const auto p = perturbed_params(c, 16);
    const auto ex = full_prompt_example(4);
    const auto x = noise_like(ex.x1, 17);
    auto run = [&] {
        ag::Graph<double> g;
        ParamVars<double> pv(g, p, false);
        return aux_project(pv, forward(g, pv, c, x, 0.2, {ex.mix, ex.bundle}).aux_hidden).value();
    };
    const auto a = run();
    EXPECT_EQ(a.rows(), ex.x1.rows());
    EXPECT_EQ(a.cols(), 16u);
    EXPECT_EQ(a, run());
}

TEST(AuxHead, GradientReachesOnlyBlocksUpToAuxLayer) {
    auto c = tiny_config();
    c.layers = 3;
    c.aux_layer = 2;
    const auto p = perturbed_params(c, 18);
    const auto ex = full_prompt_example(5);
    const auto x = noise_like(ex.x1, 19);
    ag::Graph<double> g;
    ParamVars<double> pv(g, p, true);
    const auto out = forward(g, pv, c, x, 0.5, {ex.mix, ex.bundle});
    g.backward(flow::aux_loss(aux_project(pv, out.aux_hidden), ex.aed.cast<double>()));
    for (const auto& [name, grad] : pv.grads()) {
        const double n = abs_sum(grad);
        if (name.rfind("blocks.2.", 0) == 0 || name.rfind("out.", 0) == 0) {
            EXPECT_EQ(n, 0.0) << name;
        } else if (name.rfind("blocks.", 0) == 0 || name.rfind("aux.", 0) == 0) {
            EXPECT_GT(n, 0.0) << name;
        }
    }
}

TEST(Params, ZeroInitializedTensors) {
    const auto p = init_params<float>(tiny_config(), 20);
    for (const char* k : {"out.w", "time.l2.w", "visual.gate"})
        for (float v : p.at(k).storage()) EXPECT_EQ(v, 0.0f) << k;
    EXPECT_EQ(init_params<float>(tiny_config(), 20), p);
}
