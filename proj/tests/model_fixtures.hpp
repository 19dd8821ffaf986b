#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <string>

#include "fd_check.hpp"
#include "samsep/train.hpp"

namespace samsep::testing {

/// Small separator that keeps whole-model finite differences cheap.
inline dit::DitConfig tiny_config() {
    dit::DitConfig c;
    c.layers = 2;
    c.dim = 16;
    c.ffn_dim = 32;
    c.heads = 2;
    c.aux_layer = 1;
    c.aux_hidden = 16;
    c.time_hidden = 16;
    c.max_frames = 30;
    return c;
}

/// Initial parameters with every tensor perturbed, so zero-initialized
/// projections and gates do not hide gradient paths.
inline ParamStore<double> perturbed_params(const dit::DitConfig& c, std::uint64_t seed, double sd = 0.3) {
    auto p = dit::init_params<double>(c, seed);
    std::mt19937_64 rng(seed ^ 0x5eedULL);
    std::normal_distribution<double> nd(0.0, sd);
    for (auto& [k, v] : p)
        for (auto& x : v.storage()) x += nd(rng);
    return p;
}

/// A one-second example with all three prompt modalities present and a
/// multi-token text prompt.
inline train::Example full_prompt_example(std::uint64_t seed) {
    data::TripletOptions o;
    o.clip_seconds = 1.0;
    o.visible = true;
    auto ex = train::make_example(data::make_triplet(data::Regime::SpikySpan, seed, o));
    ex.bundle.text.tokens.insert(ex.bundle.text.tokens.begin(), {codec::kNumClasses + 1, codec::kNumClasses + 4});
    return ex;
}

inline Tensor<double> noise_like(const Tensor<float>& x, std::uint64_t seed, double sd = 1.0) {
    std::mt19937_64 rng(seed);
    return random_tensor(x.shape(), rng, sd);
}

struct FdReport {
    std::map<std::string, double> worst;  // per parameter tensor
    std::size_t coords = 0;
    double max() const {
        double m = 0.0;
        for (const auto& [k, v] : worst) m = std::max(m, v);
        return m;
    }
};

/// Central differences of the training loss against backprop on
/// `per_tensor` random coordinates of every parameter tensor.
inline FdReport model_fd_check(const dit::DitConfig& mc, const flow::FlowConfig& fc, const ParamStore<double>& params,
                               const train::Example& ex, const Tensor<double>& x0, double t, std::size_t per_tensor,
                               double h = 1e-4, std::uint64_t seed = 1) {
    auto loss = [&](const ParamStore<double>& p) {
        ag::Graph<double> g;
        ParamVars<double> pv(g, p, false);
        return train::build_loss(g, pv, mc, fc, ex, x0, t).total.value()[0];
    };
    ag::Graph<double> g;
    ParamVars<double> pv(g, params, true);
    g.backward(train::build_loss(g, pv, mc, fc, ex, x0, t).total);
    const auto grads = pv.grads();

    std::mt19937_64 rng(seed);
    FdReport rep;
    auto p = params;
    for (const auto& [name, value] : params) {
        std::uniform_int_distribution<std::size_t> pick(0, value.numel() - 1);
        double worst = 0.0;
        for (std::size_t r = 0; r < per_tensor; ++r) {
            const std::size_t i = pick(rng);
            auto& x = p.at(name).storage()[i];
            const double x_orig = x;
            x = x_orig + h;
            const double lp = loss(p);
            x = x_orig - h;
            const double lm = loss(p);
            x = x_orig;
            worst = std::max(worst, rel_err(grads.at(name).storage()[i], (lp - lm) / (2 * h)));
            ++rep.coords;
        }
        rep.worst[name] = worst;
    }
    return rep;
}

}  // namespace samsep::testing
