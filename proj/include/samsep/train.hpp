#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "samsep/autograd.hpp"
#include "samsep/codec.hpp"
#include "samsep/data.hpp"
#include "samsep/dit.hpp"
#include "samsep/flow.hpp"
#include "samsep/optim.hpp"
#include "samsep/prompts.hpp"

namespace samsep::train {

enum class Stage { Pretrain, Finetune };

struct TrainConfig {
    std::size_t steps = 2000;
    std::size_t batch = 16;
    double lr = 1e-3;
    std::size_t warmup = 100;
    double ema_decay = 0.999;
    double dropout = 0.3;  // per prompt modality
    Stage stage = Stage::Pretrain;
    std::uint64_t seed = 0;
    std::size_t threads = 4;
};

/// splitmix64 finalizer; derives independent stream seeds from a tuple.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
    auto sm = [](std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    };
    return sm(sm(sm(a) ^ b) ^ c);
}

// ---------------------------------------------------------------------------
// Data sources

class DataSource {
public:
    virtual ~DataSource() = default;
    /// Deterministic triplet for a stream seed.
    virtual data::MixTriplet draw(std::uint64_t seed) const = 0;
};

struct RegimeWeights {
    std::array<double, 3> w{0.5, 0.3, 0.2};  // multi_stem, target_plus_noise, spiky_span
};

inline void validate(const RegimeWeights& rw) {
    double s = 0.0;
    for (double v : rw.w) {
        if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("regime weights must be finite and non-negative");
        s += v;
    }
    if (!(s > 0.0)) throw ConfigError("regime weights must not all be zero");
}

inline data::Regime pick_regime(const RegimeWeights& rw, std::mt19937_64& rng) {
    std::discrete_distribution<int> d(rw.w.begin(), rw.w.end());
    return static_cast<data::Regime>(d(rng));
}

/// Triplets synthesized on the fly from the stream seed.
class SyntheticSource : public DataSource {
public:
    SyntheticSource(RegimeWeights weights, double clip_seconds) : weights_(weights), clip_(clip_seconds) {
        validate(weights_);
    }
    data::MixTriplet draw(std::uint64_t seed) const override {
        std::mt19937_64 rng(seed);
        const auto regime = pick_regime(weights_, rng);
        data::TripletOptions opt;
        opt.clip_seconds = clip_;
        return data::make_triplet(regime, rng(), opt);
    }

private:
    RegimeWeights weights_;
    double clip_;
};

/// Uniform draws from a fixed, in-memory set of triplets.
class CorpusSource : public DataSource {
public:
    explicit CorpusSource(std::vector<data::MixTriplet> items) : items_(std::move(items)) {
        if (items_.empty()) throw ValidationError("corpus is empty");
    }
    data::MixTriplet draw(std::uint64_t seed) const override {
        std::mt19937_64 rng(seed);
        return items_[std::uniform_int_distribution<std::size_t>(0, items_.size() - 1)(rng)];
    }
    std::size_t size() const { return items_.size(); }

private:
    std::vector<data::MixTriplet> items_;
};

// ---------------------------------------------------------------------------
// State

struct TrainState {
    ParamStore<float> params;
    ParamStore<float> ema;
    AdamW<float> opt;
    std::size_t step = 0;
};

inline TrainState init_state(const dit::DitConfig& cfg, std::uint64_t seed) {
    TrainState s;
    s.params = dit::init_params<float>(cfg, seed);
    s.ema = s.params;
    s.opt.init(s.params);
    return s;
}

struct StepStats {
    std::size_t step = 0;
    double fm_loss = 0.0;
    double aux_loss = 0.0;
    double lr = 0.0;
};

struct Example {
    Tensor<float> x1;   // T x 2C: [target | residual], codec units
    Tensor<float> mix;  // T x C
    Tensor<float> aed;  // T x F
    prompt::PromptBundle bundle;
};

inline Example make_example(const data::MixTriplet& tr) {
    Example ex;
    const auto zt = codec::encode(tr.tgt);
    const auto zr = codec::encode(tr.res);
    ex.x1 = concat_columns<float>({&zt, &zr});
    ex.mix = codec::encode(tr.mix);
    ex.aed = codec::aed_embedding(zt);
    ex.bundle = tr.bundle;
    return ex;
}

inline double learning_rate(const TrainConfig& tc, std::size_t step) {
    if (tc.warmup == 0) return tc.lr;
    return tc.lr * std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(tc.warmup));
}

/// Per-example loss terms and parameter gradients of (fm + lambda aux) / batch.
struct ExampleResult {
    double fm = 0.0;
    double aux = 0.0;
    GradStore<float> grads;
    std::uint64_t seed = 0;
};

template <typename T>
struct LossTerms {
    ag::Var<T> fm;
    ag::Var<T> aux;
    ag::Var<T> total;
    bool has_aux = false;
};

/// Builds the training loss graph for one example at flow time t.
template <typename T>
LossTerms<T> build_loss(ag::Graph<T>& g, const ParamVars<T>& pv, const dit::DitConfig& mc, const flow::FlowConfig& fc,
                        const Example& ex, const Tensor<T>& x0, double t) {
    Tensor<T> x1 = ex.x1.template cast<T>();
    x1.arr() *= static_cast<T>(mc.latent_scale);
    const auto path = flow::sample_path(x0, x1, static_cast<T>(t), static_cast<T>(fc.sigma_min));
    dit::Conditioning cond{ex.mix, ex.bundle};
    auto out = dit::forward(g, pv, mc, path.x_t, t, cond);
    LossTerms<T> lt;
    lt.fm = flow::fm_loss(out.velocity, g.constant(path.u_target));
    lt.total = lt.fm;
    if (fc.lambda_aux != 0.0) {
        lt.aux = flow::aux_loss(dit::aux_project(pv, out.aux_hidden), ex.aed.template cast<T>());
        lt.total = flow::total_loss(lt.fm, lt.aux, static_cast<T>(fc.lambda_aux));
        lt.has_aux = true;
    }
    return lt;
}

inline ExampleResult run_example(const ParamStore<float>& params, const DataSource& source, const dit::DitConfig& mc,
                                 const flow::FlowConfig& fc, const TrainConfig& tc, std::size_t step, std::size_t index) {
    ExampleResult r;
    r.seed = mix_seed(tc.seed, step, index);
    std::mt19937_64 rng(r.seed);
    Example ex = make_example(source.draw(rng()));
    const double p = tc.stage == Stage::Pretrain ? tc.dropout : 0.0;
    ex.bundle = prompt::apply_condition_dropout(ex.bundle, p, p, p, rng);
    const double t = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    const Tensor<float> x0 = flow::initial_noise(ex.x1.rows(), mc.channels, rng());

    ag::Graph<float> g;
    ParamVars<float> pv(g, params, true);
    auto lt = build_loss(g, pv, mc, fc, ex, x0, t);
    r.fm = lt.fm.value()[0];
    r.aux = lt.has_aux ? lt.aux.value()[0] : 0.0;
    if (!std::isfinite(r.fm) || !std::isfinite(r.aux))
        throw NumericError("non-finite loss at step " + std::to_string(step) + ", example " + std::to_string(index) +
                           ", example seed " + std::to_string(r.seed));
    g.backward(ag::scale(lt.total, 1.0f / static_cast<float>(tc.batch)));
    r.grads = pv.grads();
    return r;
}

inline void update_ema(ParamStore<float>& ema, const ParamStore<float>& params, double decay, std::size_t step) {
    const double d = std::min(decay, (1.0 + static_cast<double>(step)) / (10.0 + static_cast<double>(step)));
    const auto df = static_cast<float>(d);
    for (auto& [k, e] : ema) e.arr() = df * e.arr() + (1.0f - df) * params.at(k).arr();
}

/// One optimizer step. Per-example gradients may be computed on several
/// threads; they are always reduced in example order, so results do not
/// depend on the thread count.
inline StepStats train_step(TrainState& st, const DataSource& source, const dit::DitConfig& mc,
                            const flow::FlowConfig& fc, const TrainConfig& tc) {
    if (tc.batch == 0) throw ConfigError("train: batch must be positive");
    std::vector<ExampleResult> results(tc.batch);
    std::vector<std::exception_ptr> errors(tc.batch);
    const std::size_t nthreads = std::max<std::size_t>(1, std::min(tc.threads, tc.batch));
    auto work = [&](std::size_t tid) {
        for (std::size_t i = tid; i < tc.batch; i += nthreads) {
            try {
                results[i] = run_example(st.params, source, mc, fc, tc, st.step, i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    if (nthreads == 1) {
        work(0);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < nthreads; ++t) pool.emplace_back(work, t);
        for (auto& th : pool) th.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);

    GradStore<float> total = std::move(results[0].grads);
    for (std::size_t i = 1; i < tc.batch; ++i)
        for (auto& [k, gsum] : total) gsum.arr() += results[i].grads.at(k).arr();

    StepStats s;
    s.step = st.step;
    s.lr = learning_rate(tc, st.step);
    for (const auto& r : results) {
        s.fm_loss += r.fm / static_cast<double>(tc.batch);
        s.aux_loss += r.aux / static_cast<double>(tc.batch);
    }
    st.opt.step(st.params, total, s.lr);
    ++st.step;
    update_ema(st.ema, st.params, tc.ema_decay, st.step);
    return s;
}

}  // namespace samsep::train
