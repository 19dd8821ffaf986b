#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "model_fixtures.hpp"
#include "samsep/train.hpp"

using namespace samsep;
using namespace samsep::train;

namespace {

TrainConfig small_train(std::size_t threads) {
    TrainConfig tc;
    tc.batch = 3;
    tc.lr = 2e-3;
    tc.warmup = 2;
    tc.threads = threads;
    tc.seed = 42;
    return tc;
}

class NanSource : public DataSource {
public:
    data::MixTriplet draw(std::uint64_t seed) const override {
        auto tr = data::make_triplet(data::Regime::MultiStem, seed, {1.0, std::nullopt, false});
        tr.tgt.samples[100] = std::numeric_limits<float>::quiet_NaN();
        return tr;
    }
};

}  // namespace

TEST(MixSeed, DistinctStreams) {
    EXPECT_EQ(mix_seed(1, 2, 3), mix_seed(1, 2, 3));
    EXPECT_NE(mix_seed(1, 2, 3), mix_seed(1, 3, 2));
    EXPECT_NE(mix_seed(1, 2, 3), mix_seed(2, 2, 3));
}

TEST(LearningRate, LinearWarmupThenConstant) {
    TrainConfig tc;
    tc.lr = 1e-3;
    tc.warmup = 10;
    EXPECT_NEAR(learning_rate(tc, 0), 1e-4, 1e-15);
    EXPECT_NEAR(learning_rate(tc, 4), 5e-4, 1e-15);
    EXPECT_EQ(learning_rate(tc, 9), 1e-3);
    EXPECT_EQ(learning_rate(tc, 500), 1e-3);
    tc.warmup = 0;
    EXPECT_EQ(learning_rate(tc, 0), 1e-3);
}

TEST(Ema, DecayRampsUpToTheConfiguredValue) {
    ParamStore<float> ema{{"w", Tensor<float>(Shape{1}, 0.0f)}};
    const ParamStore<float> p{{"w", Tensor<float>(Shape{1}, 1.0f)}};
    update_ema(ema, p, 0.999, 1);
    EXPECT_NEAR(ema.at("w")[0], 1.0f - 2.0f / 11.0f, 1e-6);
    ParamStore<float> late{{"w", Tensor<float>(Shape{1}, 0.0f)}};
    update_ema(late, p, 0.999, 100000);
    EXPECT_NEAR(late.at("w")[0], 0.001f, 1e-6);
}

TEST(TrainStep, ResultIsIndependentOfThreadCount) {
    const auto mc = samsep::testing::tiny_config();
    const flow::FlowConfig fc;
    const SyntheticSource src({}, 1.0);
    auto a = init_state(mc, 7), b = init_state(mc, 7);
    for (int s = 0; s < 3; ++s) {
        const auto sa = train_step(a, src, mc, fc, small_train(1));
        const auto sb = train_step(b, src, mc, fc, small_train(3));
        EXPECT_EQ(sa.fm_loss, sb.fm_loss);
        EXPECT_EQ(sa.aux_loss, sb.aux_loss);
    }
    EXPECT_EQ(a.params, b.params);
    EXPECT_EQ(a.ema, b.ema);
    EXPECT_EQ(a.step, 3u);
}

TEST(TrainStep, FinetuneWithoutAuxReportsZeroAux) {
    const auto mc = samsep::testing::tiny_config();
    flow::FlowConfig fc;
    fc.lambda_aux = 0.0;
    auto tc = small_train(1);
    tc.stage = Stage::Finetune;
    auto st = init_state(mc, 8);
    const auto s = train_step(st, SyntheticSource({}, 1.0), mc, fc, tc);
    EXPECT_EQ(s.aux_loss, 0.0);
    EXPECT_GT(s.fm_loss, 0.0);
    EXPECT_EQ(st.params.at("aux.l3.b"), init_state(mc, 8).params.at("aux.l3.b"));
}

TEST(TrainStep, NonFiniteLossNamesTheExample) {
    const auto mc = samsep::testing::tiny_config();
    auto st = init_state(mc, 9);
    const auto tc = small_train(2);
    try {
        train_step(st, NanSource(), mc, flow::FlowConfig{}, tc);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("step 0"), std::string::npos) << msg;
        EXPECT_NE(msg.find("example seed " + std::to_string(mix_seed(tc.seed, 0, 0))), std::string::npos) << msg;
    }
    EXPECT_EQ(st.step, 0u);
}

TEST(TrainStep, ZeroBatchIsConfigError) {
    const auto mc = samsep::testing::tiny_config();
    auto st = init_state(mc, 10);
    auto tc = small_train(1);
    tc.batch = 0;
    EXPECT_THROW(train_step(st, SyntheticSource({}, 1.0), mc, flow::FlowConfig{}, tc), ConfigError);
}

TEST(Sources, SyntheticIsDeterministicAndCorpusIsUniform) {
    const SyntheticSource src({}, 1.0);
    EXPECT_EQ(src.draw(5).mix, src.draw(5).mix);
    std::vector<data::MixTriplet> items;
    for (std::uint64_t i = 0; i < 4; ++i) items.push_back(data::make_triplet(data::Regime::MultiStem, i, {1.0, {}, {}}));
    const CorpusSource corpus(items);
    std::array<int, 4> hits{};
    for (std::uint64_t s = 0; s < 4000; ++s)
        for (std::size_t i = 0; i < 4; ++i)
            if (corpus.draw(s).mix == items[i].mix) ++hits[i];
    for (int h : hits) EXPECT_NEAR(h, 1000, 120);
    EXPECT_THROW(CorpusSource({}), ValidationError);
}

TEST(Sources, RegimeWeightsValidation) {
    EXPECT_THROW(SyntheticSource({{0, 0, 0}}, 1.0), ConfigError);
    EXPECT_THROW(SyntheticSource({{1, -1, 0}}, 1.0), ConfigError);
    std::mt19937_64 rng(1);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(pick_regime({{0, 1, 0}}, rng), data::Regime::TargetPlusNoise);
}

TEST(WeightDecay, AppliesToMatricesOnly) {
    EXPECT_TRUE(decays("blocks.0.attn.q.w", {64, 64}));
    EXPECT_TRUE(decays("text.embed", {15, 32}));
    EXPECT_FALSE(decays("blocks.0.attn.q.b", {64}));
    EXPECT_FALSE(decays("blocks.0.mod_bias", {6, 64}));
    EXPECT_FALSE(decays("visual.gate", {1}));
}
