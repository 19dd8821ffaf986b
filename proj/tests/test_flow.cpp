#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "model_fixtures.hpp"
#include "samsep/flow.hpp"

using namespace samsep;
using namespace samsep::flow;
using samsep::testing::random_tensor;

namespace {

double max_abs(const Tensor<double>& a, const Tensor<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

Model tiny_model(std::uint64_t seed) {
    const auto c = samsep::testing::tiny_config();
    return Model{c, cast_params<float>(samsep::testing::perturbed_params(c, seed, 0.1))};
}

codec::Waveform test_mix(double seconds, std::uint64_t seed) {
    data::TripletOptions o;
    o.clip_seconds = seconds;
    return data::make_triplet(data::Regime::MultiStem, seed, o).mix;
}

}  // namespace

TEST(SamplePath, Endpoints) {
    std::mt19937_64 rng(1);
    const auto x0 = random_tensor({6, 4}, rng), x1 = random_tensor({6, 4}, rng);
    EXPECT_EQ(sample_path(x0, x1, 0.0, 0.3).x_t, x0);
    const auto end = sample_path(x0, x1, 1.0, 0.3).x_t;
    for (std::size_t i = 0; i < x0.numel(); ++i) EXPECT_NEAR(end[i], x1[i] + 0.3 * x0[i], 1e-15);
    const auto mid = sample_path(x0, x1, 0.5, 0.0).x_t;
    for (std::size_t i = 0; i < x0.numel(); ++i) EXPECT_NEAR(mid[i], 0.5 * (x0[i] + x1[i]), 1e-15);
}

TEST(SamplePath, TargetIsTheTimeDerivative) {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 100; ++trial) {
        const auto x0 = random_tensor({5, 8}, rng), x1 = random_tensor({5, 8}, rng);
        const double s = u(rng) * 0.999, t = u(rng);
        const auto p = sample_path(x0, x1, t, s);
        const double h = std::min({1e-3, t, 1.0 - t});
        const auto lo = sample_path(x0, x1, t - h, s).x_t, hi = sample_path(x0, x1, t + h, s).x_t;
        for (std::size_t i = 0; i < x0.numel(); ++i) {
            ASSERT_NEAR(p.u_target[i], x1[i] - (1.0 - s) * x0[i], 1e-12);
            if (h > 1e-6) ASSERT_NEAR(p.u_target[i], (hi[i] - lo[i]) / (2 * h), 1e-8);
        }
    }
}

TEST(SamplePath, ContractErrors) {
    EXPECT_THROW(sample_path(Tensor<double>::matrix(2, 3), Tensor<double>::matrix(3, 2), 0.5, 0.0), ContractError);
    EXPECT_THROW(sample_path(Tensor<double>::matrix(2, 3), Tensor<double>::matrix(2, 3), 1.5, 0.0), ContractError);
}

TEST(FmLoss, Examples) {
    std::mt19937_64 rng(3);
    ag::Graph<double> g;
    const auto u = random_tensor({7, 32}, rng);
    EXPECT_EQ(fm_loss(g.constant(u), g.constant(u)).value()[0], 0.0);
    Tensor<double> shifted = u;
    shifted.arr() += 1.0;
    EXPECT_NEAR(fm_loss(g.constant(shifted), g.constant(u)).value()[0], 1.0, 1e-14);
    const auto p = random_tensor({7, 32}, rng);
    double s = 0.0;
    for (std::size_t i = 0; i < p.numel(); ++i) s += (p[i] - u[i]) * (p[i] - u[i]);
    EXPECT_NEAR(fm_loss(g.constant(p), g.constant(u)).value()[0], s / (7 * 32), 1e-13);
    EXPECT_GT(fm_loss(g.constant(p), g.constant(u)).value()[0], 0.0);
}

TEST(AuxLoss, Examples) {
    std::mt19937_64 rng(4);
    ag::Graph<double> g;
    const auto a = random_tensor({9, 16}, rng);
    EXPECT_NEAR(aux_loss(g.constant(a), a).value()[0], 0.0, 1e-14);
    Tensor<double> neg = a, big = a;
    neg.arr() *= -1.0;
    big.arr() *= 3.0;
    EXPECT_NEAR(aux_loss(g.constant(neg), a).value()[0], 2.0, 1e-14);
    EXPECT_NEAR(aux_loss(g.constant(big), a).value()[0], 0.0, 1e-14);
}

TEST(AuxLoss, ZeroRowsScoreOne) {
    ag::Graph<double> g;
    auto proj = g.leaf(Tensor<double>::matrix(3, 4));
    auto l = aux_loss(proj, Tensor<double>::matrix(3, 4, 1.0));
    EXPECT_EQ(l.value()[0], 1.0);
    g.backward(l);
    for (double v : proj.grad().storage()) EXPECT_TRUE(std::isfinite(v));
}

TEST(TotalLoss, Examples) {
    ag::Graph<double> g;
    auto fm = g.constant(Tensor<double>::scalar(0.5));
    auto aux = g.constant(Tensor<double>::scalar(0.25));
    EXPECT_EQ(total_loss(fm, aux, 0.0).value()[0], 0.5);
    EXPECT_EQ(total_loss(fm, aux, 1.0).value()[0], 0.75);
}

TEST(TotalLoss, GradientIsLinearInTheTerms) {
    const auto mc = samsep::testing::tiny_config();
    const auto p = samsep::testing::perturbed_params(mc, 5);
    const auto ex = samsep::testing::full_prompt_example(6);
    const auto x0 = samsep::testing::noise_like(ex.x1, 7);
    const double lambda = 0.7;
    auto grads_of = [&](int which) {
        FlowConfig fc;
        fc.lambda_aux = lambda;
        ag::Graph<double> g;
        ParamVars<double> pv(g, p, true);
        auto lt = train::build_loss(g, pv, mc, fc, ex, x0, 0.45);
        g.backward(which == 0 ? lt.total : which == 1 ? lt.fm : lt.aux);
        return pv.grads();
    };
    const auto gt = grads_of(0), gf = grads_of(1), ga = grads_of(2);
    for (const auto& [k, v] : gt)
        for (std::size_t i = 0; i < v.numel(); ++i)
            ASSERT_NEAR(v[i], gf.at(k)[i] + lambda * ga.at(k)[i], 1e-10 * (1.0 + std::abs(v[i]))) << k;
}

TEST(OdeSolve, ConstantFieldIsExact) {
    std::mt19937_64 rng(8);
    const auto x0 = random_tensor({4, 4}, rng);
    const auto c = random_tensor({4, 4}, rng);
    auto field = [&](const Tensor<double>&, double) { return c; };
    for (Solver s : {Solver::Euler, Solver::Midpoint})
        for (int steps : {1, 3, 16}) {
            const auto x1 = ode_solve(x0, field, steps, s);
            for (std::size_t i = 0; i < x0.numel(); ++i) EXPECT_NEAR(x1[i], x0[i] + c[i], 1e-14);
        }
}

TEST(OdeSolve, EulerOneStepFollowsStraightPath) {
    std::mt19937_64 rng(9);
    const auto x0 = random_tensor({5, 6}, rng), x1 = random_tensor({5, 6}, rng);
    Tensor<double> u = x1;
    u.arr() -= x0.arr();
    auto field = [&](const Tensor<double>&, double) { return u; };
    EXPECT_LT(max_abs(ode_solve(x0, field, 1, Solver::Euler), x1), 1e-15);
}

TEST(OdeSolve, MidpointIsSecondOrder) {
    std::mt19937_64 rng(10);
    const auto x0 = random_tensor({3, 3}, rng);
    Tensor<double> exact = x0;
    exact.arr() *= std::exp(-1.0);
    auto field = [](const Tensor<double>& x, double) {
        Tensor<double> v = x;
        v.arr() *= -1.0;
        return v;
    };
    double prev = max_abs(ode_solve(x0, field, 4, Solver::Midpoint), exact);
    for (int steps : {8, 16, 32, 64}) {
        const double err = max_abs(ode_solve(x0, field, steps, Solver::Midpoint), exact);
        EXPECT_GE(std::log2(prev / err), 1.9) << steps;
        EXPECT_NEAR(prev / err, 4.0, 0.5) << steps;
        prev = err;
    }
}

TEST(OdeSolve, ZeroStepsIsConfigError) {
    auto field = [](const Tensor<double>& x, double) { return x; };
    EXPECT_THROW(ode_solve(Tensor<double>::matrix(1, 1), field, 0, Solver::Midpoint), ConfigError);
}

TEST(Separate, DeterministicAndLengthPreserving) {
    const auto m = tiny_model(11);
    const auto mix = test_mix(1.0, 12);
    const auto bundle = prompt::PromptBundle{prompt::parse_text("chirp-up"), prompt::SpanTokens::null(25),
                                             prompt::VisualFeats::absent(25)};
    FlowConfig fc;
    fc.ode_steps = 4;
    const auto a = separate(mix, bundle, fc, m, 5), b = separate(mix, bundle, fc, m, 5);
    EXPECT_EQ(a.target, b.target);
    EXPECT_EQ(a.residual, b.residual);
    EXPECT_EQ(a.target.samples.size(), mix.samples.size());
    EXPECT_EQ(a.residual.samples.size(), mix.samples.size());
    EXPECT_NE(separate(mix, bundle, fc, m, 6).target, a.target);
}

TEST(Separate, RefusesClipsOverThirtySeconds) {
    auto m = tiny_model(13);
    m.config.max_frames = 800;
    codec::Waveform mix;
    mix.samples.assign(31 * codec::kSampleRate, 0.01f);
    FlowConfig fc;
    fc.ode_steps = 1;
    EXPECT_THROW(separate(mix, prompt::PromptBundle::dummy(775), fc, m, 1), ContractError);
}

TEST(WindowPlan, PartitionOfUnityForTheDefaultPlan) {
    const auto plan = make_window_plan(1500, 500, 125);
    for (double c : mask_coverage(plan)) EXPECT_NEAR(c, 1.0, 1e-9);
    EXPECT_EQ(plan.windows.front().start, 0u);
    EXPECT_EQ(plan.windows.back().end, 1500u);
}

TEST(WindowPlan, PartitionOfUnityOverRandomTriples) {
    std::mt19937_64 rng(14);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t w = 1 + rng() % 600;
        const std::size_t o = rng() % w;
        const std::size_t T = 1 + rng() % 3000;
        const auto plan = make_window_plan(T, w, o);
        const auto cov = mask_coverage(plan);
        ASSERT_EQ(cov.size(), T);
        for (std::size_t t = 0; t < T; ++t) ASSERT_NEAR(cov[t], 1.0, 1e-9) << w << " " << o << " " << T << " @" << t;
        for (const auto& win : plan.windows) ASSERT_LE(win.size(), w);
    }
}

TEST(WindowPlan, InvalidPlansAreConfigErrors) {
    EXPECT_THROW(make_window_plan(1000, 100, 100), ConfigError);
    EXPECT_THROW(make_window_plan(1000, 100, 150), ConfigError);
    EXPECT_THROW(make_window_plan(1000, 0, 0), ConfigError);
    EXPECT_THROW(make_window_plan(0, 100, 10), ConfigError);
}

TEST(MultiDiffusion, SingleWindowEqualsOneShot) {
    const auto m = tiny_model(15);
    FlowConfig fc;
    fc.ode_steps = 3;
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const auto mix = test_mix(1.0, 20 + seed);
        auto bundle = prompt::PromptBundle::dummy(25);
        bundle.text = prompt::parse_text("am-tone");
        const auto a = separate(mix, bundle, fc, m, seed);
        const auto b = multi_diffusion(mix, bundle, make_window_plan(25, 500, 125), fc, m, seed);
        EXPECT_EQ(a.joint, b.joint);
        EXPECT_EQ(a.target, b.target);
    }
}

TEST(MultiDiffusion, IdenticalOverlapValuesMergeToThatValue) {
    const auto plan = make_window_plan(100, 40, 10);
    std::mt19937_64 rng(16);
    std::normal_distribution<float> nd;
    Tensor<float> global = Tensor<float>::matrix(100, 3);
    for (auto& v : global.storage()) v = nd(rng);
    std::vector<Tensor<float>> states;
    for (const auto& w : plan.windows) states.push_back(slice_rows_of(global, w.start, w.end));
    const auto merged = merge_windows(plan, states, 3);
    for (std::size_t i = 0; i < global.numel(); ++i) EXPECT_NEAR(merged[i], global[i], 1e-6);
}

TEST(MultiDiffusion, OverlapNotBelowWindowIsRejected) {
    const auto m = tiny_model(17);
    const auto mix = test_mix(1.0, 18);
    WindowPlan bad = make_window_plan(25, 10, 5);
    bad.overlap = 10;
    EXPECT_THROW(multi_diffusion(mix, prompt::PromptBundle::dummy(25), bad, FlowConfig{}, m, 1), ConfigError);
}

TEST(Training, TwoHundredStepsHalveTheFlowLossOnAFixedBatch) {
    const auto mc = samsep::testing::tiny_config();
    FlowConfig fc;
    fc.lambda_aux = 0.0;
    auto params = dit::init_params<float>(mc, 19);
    std::vector<train::Example> batch;
    std::vector<Tensor<float>> noise;
    std::vector<double> times;
    std::mt19937_64 rng(20);
    for (std::uint64_t i = 0; i < 4; ++i) {
        batch.push_back(samsep::testing::full_prompt_example(30 + i));
        noise.push_back(initial_noise(batch.back().x1.rows(), mc.channels, rng()));
        times.push_back(std::uniform_real_distribution<double>(0.0, 1.0)(rng));
    }
    AdamW<float> opt;
    opt.init(params);
    auto step = [&](bool update) {
        GradStore<float> total;
        double fm = 0.0;
        for (std::size_t i = 0; i < batch.size(); ++i) {
            ag::Graph<float> g;
            ParamVars<float> pv(g, params, true);
            auto lt = train::build_loss(g, pv, mc, fc, batch[i], noise[i], times[i]);
            fm += lt.fm.value()[0] / batch.size();
            g.backward(ag::scale(lt.total, 0.25f));
            for (auto& [k, v] : pv.grads()) {
                auto it = total.find(k);
                if (it == total.end())
                    total.emplace(k, v);
                else
                    it->second.arr() += v.arr();
            }
        }
        if (update) opt.step(params, total, 3e-3);
        return fm;
    };
    const double initial = step(true);
    for (int s = 1; s < 200; ++s) step(true);
    const double final_loss = step(false);
    EXPECT_LT(final_loss, 0.5 * initial) << initial << " -> " << final_loss;
}
