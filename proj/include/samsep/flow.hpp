#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "samsep/autograd.hpp"
#include "samsep/codec.hpp"
#include "samsep/dit.hpp"
#include "samsep/prompts.hpp"

namespace samsep::flow {

enum class Solver { Euler, Midpoint };

struct FlowConfig {
    double sigma_min = 1e-4;
    double lambda_aux = 1.0;
    int ode_steps = 16;
    Solver solver = Solver::Midpoint;
};

inline void validate(const FlowConfig& c) {
    if (!(c.sigma_min >= 0.0 && c.sigma_min < 1.0)) throw ConfigError("flow: sigma_min must lie in [0, 1)");
    if (c.ode_steps < 1) throw ConfigError("flow: ode_steps must be >= 1");
}

/// Longest clip accepted by one-shot separation (30 s at 25 Hz).
inline constexpr std::size_t kOneShotMaxFrames = 750;

// ---------------------------------------------------------------------------
// Probability path and losses

template <typename T>
struct PathSample {
    Tensor<T> x_t;
    Tensor<T> u_target;
};

/// Conditional OT path x_t = (1 - (1 - s) t) x0 + t x1 and its velocity
/// x1 - (1 - s) x0.
template <typename T>
PathSample<T> sample_path(const Tensor<T>& x0, const Tensor<T>& x1, T t, T sigma_min) {
    if (!x0.same_shape(x1)) throw ContractError("sample_path: x0 and x1 shapes differ");
    if (!(t >= T{0} && t <= T{1})) throw ContractError("sample_path: t outside [0, 1]");
    PathSample<T> s{Tensor<T>(x0.shape()), Tensor<T>(x0.shape())};
    const T a = T{1} - (T{1} - sigma_min) * t;
    s.x_t.arr() = a * x0.arr() + t * x1.arr();
    s.u_target.arr() = x1.arr() - (T{1} - sigma_min) * x0.arr();
    return s;
}

/// Squared error averaged over every element.
template <typename T>
ag::Var<T> fm_loss(const ag::Var<T>& pred, const ag::Var<T>& u_target) {
    return ag::mse(pred, u_target);
}

/// Mean over frames of 1 - cos(projection, target embedding).
template <typename T>
ag::Var<T> aux_loss(const ag::Var<T>& proj, const Tensor<T>& a_tgt) {
    return ag::cosine_rows_loss(proj, a_tgt);
}

template <typename T>
ag::Var<T> total_loss(const ag::Var<T>& fm, const ag::Var<T>& aux, T lambda_aux) {
    if (lambda_aux == T{0}) return fm;
    return ag::add(fm, ag::scale(aux, lambda_aux));
}

// ---------------------------------------------------------------------------
// ODE integration on the uniform grid t_i = i / steps

/// One step from t to t + dt. `field(x, t)` returns the velocity.
template <typename T, typename Field>
Tensor<T> ode_step(const Tensor<T>& x, double t, double dt, Field&& field, Solver solver) {
    Tensor<T> out = x;
    if (solver == Solver::Euler) {
        const Tensor<T> k1 = field(x, t);
        out.arr() += static_cast<T>(dt) * k1.arr();
        return out;
    }
    const Tensor<T> k1 = field(x, t);
    Tensor<T> mid = x;
    mid.arr() += static_cast<T>(dt / 2) * k1.arr();
    const Tensor<T> k2 = field(mid, t + dt / 2);
    out.arr() += static_cast<T>(dt) * k2.arr();
    return out;
}

inline double grid_time(int i, int steps) { return static_cast<double>(i) / static_cast<double>(steps); }

template <typename T, typename Field>
Tensor<T> ode_solve(const Tensor<T>& x0, Field&& field, int steps, Solver solver) {
    if (steps < 1) throw ConfigError("ode_solve: steps must be >= 1");
    Tensor<T> x = x0;
    for (int i = 0; i < steps; ++i) {
        const double t = grid_time(i, steps);
        x = ode_step(x, t, grid_time(i + 1, steps) - t, field, solver);
    }
    return x;
}

// ---------------------------------------------------------------------------
// Separation

struct Model {
    dit::DitConfig config;
    ParamStore<float> params;
};

struct Separation {
    codec::Waveform target;
    codec::Waveform residual;
    Tensor<float> joint;  // T x 2C
};

/// Standard-normal initial state for a clip, fixed by the seed.
inline Tensor<float> initial_noise(std::size_t frames, std::size_t channels, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> nd(0.0f, 1.0f);
    Tensor<float> x = Tensor<float>::matrix(frames, 2 * channels);
    for (auto& v : x.storage()) v = nd(rng);
    return x;
}

/// Splits a joint latent into target [0, C) and residual [C, 2C) halves and decodes each.
inline Separation split_and_decode(Tensor<float> joint, std::size_t channels, std::size_t length) {
    Separation s;
    s.target = codec::decode(slice_columns(joint, 0, channels), length);
    s.residual = codec::decode(slice_columns(joint, channels, 2 * channels), length);
    s.joint = std::move(joint);
    return s;
}

/// Joint latent from flow space back to codec units.
inline Tensor<float> unscale(Tensor<float> joint, const dit::DitConfig& c) {
    joint.arr() /= static_cast<float>(c.latent_scale);
    return joint;
}

inline auto model_field(const Model& m, const dit::Conditioning& cond) {
    return [&m, &cond](const Tensor<float>& x, double t) { return dit::velocity(m.params, m.config, x, t, cond); };
}

/// One-shot separation of a clip of at most 30 s.
inline Separation separate(const codec::Waveform& mix, const prompt::PromptBundle& bundle, const FlowConfig& cfg,
                           const Model& model, std::uint64_t seed) {
    validate(cfg);
    if (mix.samples.empty()) throw ContractError("separate: empty mixture");
    dit::Conditioning cond{codec::encode(mix), bundle};
    const std::size_t frames = cond.mix.rows();
    if (frames > kOneShotMaxFrames)
        throw ContractError("separate: clip exceeds 30 s; use long-form (multi-diffusion) separation");
    prompt::validate(bundle, frames);
    const Tensor<float> x0 = initial_noise(frames, model.config.channels, seed);
    Tensor<float> x1 = ode_solve(x0, model_field(model, cond), cfg.ode_steps, cfg.solver);
    return split_and_decode(unscale(std::move(x1), model.config), model.config.channels, mix.samples.size());
}

// ---------------------------------------------------------------------------
// Multi-diffusion

struct Window {
    std::size_t start = 0;
    std::size_t end = 0;
    std::size_t size() const { return end - start; }
};

struct WindowPlan {
    std::size_t total = 0;
    std::size_t window_len = 500;
    std::size_t overlap = 125;
    std::vector<Window> windows;
    std::vector<std::vector<double>> masks;  // per window, normalized weights
};

/// Overlapping windows covering [0, total) with triangular cross-fades.
///
/// Windows advance by window_len - overlap; the last window is pulled back so
/// it ends exactly at `total`. Each mask ramps up across the overlap with its
/// predecessor and down across the overlap with its successor (the first
/// window has no ramp-up, the last no ramp-down), and the padded masks are
/// renormalized pointwise so they sum to one at every frame.
inline WindowPlan make_window_plan(std::size_t total, std::size_t window_len = 500, std::size_t overlap = 125) {
    if (window_len == 0) throw ConfigError("window plan: window length must be positive");
    if (overlap >= window_len) throw ConfigError("window plan: overlap must be smaller than the window");
    if (total == 0) throw ConfigError("window plan: empty clip");
    WindowPlan p{total, window_len, overlap, {}, {}};
    if (total <= window_len) {
        p.windows.push_back({0, total});
    } else {
        const std::size_t stride = window_len - overlap;
        std::size_t s = 0;
        while (s + window_len < total) {
            p.windows.push_back({s, s + window_len});
            s += stride;
        }
        const std::size_t last = total - window_len;
        if (p.windows.empty() || last > p.windows.back().start) p.windows.push_back({last, total});
    }

    const std::size_t n = p.windows.size();
    std::vector<double> norm(total, 0.0);
    p.masks.resize(n);
    for (std::size_t j = 0; j < n; ++j) {
        const Window& w = p.windows[j];
        std::vector<double>& m = p.masks[j];
        m.assign(w.size(), 1.0);
        if (j > 0 && p.windows[j - 1].end > w.start) {
            const std::size_t L = std::min(p.windows[j - 1].end - w.start, w.size());
            for (std::size_t i = 0; i < L; ++i) m[i] = std::min(m[i], static_cast<double>(i + 1) / static_cast<double>(L + 1));
        }
        if (j + 1 < n && w.end > p.windows[j + 1].start) {
            const std::size_t L = std::min(w.end - p.windows[j + 1].start, w.size());
            for (std::size_t i = 0; i < L; ++i) {
                const std::size_t k = w.size() - L + i;
                m[k] = std::min(m[k], static_cast<double>(L - i) / static_cast<double>(L + 1));
            }
        }
        for (std::size_t i = 0; i < w.size(); ++i) norm[w.start + i] += m[i];
    }
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = 0; i < p.windows[j].size(); ++i) p.masks[j][i] /= norm[p.windows[j].start + i];
    return p;
}

/// Sum over windows of the zero-padded masks at every global frame.
inline std::vector<double> mask_coverage(const WindowPlan& p) {
    std::vector<double> cov(p.total, 0.0);
    for (std::size_t j = 0; j < p.windows.size(); ++j)
        for (std::size_t i = 0; i < p.windows[j].size(); ++i) cov[p.windows[j].start + i] += p.masks[j][i];
    return cov;
}

/// Merges per-window states into a global latent with the plan's masks.
inline Tensor<float> merge_windows(const WindowPlan& plan, const std::vector<Tensor<float>>& states, std::size_t cols) {
    Tensor<float> x = Tensor<float>::matrix(plan.total, cols);
    for (std::size_t j = 0; j < plan.windows.size(); ++j) {
        const auto& w = plan.windows[j];
        for (std::size_t i = 0; i < w.size(); ++i) {
            const auto m = static_cast<float>(plan.masks[j][i]);
            for (std::size_t c = 0; c < cols; ++c) x(w.start + i, c) += m * states[j](i, c);
        }
    }
    return x;
}

/// Long-form separation: every shared solver step updates each window from
/// the current global latent, then merges the windows with the plan's masks.
/// Span and visual prompts are sliced per window; text is shared.
inline Separation multi_diffusion(const codec::Waveform& mix, const prompt::PromptBundle& bundle, const WindowPlan& plan,
                                  const FlowConfig& cfg, const Model& model, std::uint64_t seed) {
    validate(cfg);
    if (mix.samples.empty()) throw ContractError("multi_diffusion: empty mixture");
    const Tensor<float> mix_latent = codec::encode(mix);
    const std::size_t frames = mix_latent.rows();
    if (plan.total != frames) throw ConfigError("multi_diffusion: plan does not cover the clip");
    if (plan.overlap >= plan.window_len) throw ConfigError("multi_diffusion: overlap must be smaller than the window");
    prompt::validate(bundle, frames);

    std::vector<dit::Conditioning> conds;
    conds.reserve(plan.windows.size());
    for (const auto& w : plan.windows)
        conds.push_back({slice_rows_of(mix_latent, w.start, w.end), prompt::slice_frames(bundle, w.start, w.end)});

    const std::size_t cols = 2 * model.config.channels;
    Tensor<float> x = initial_noise(frames, model.config.channels, seed);
    std::vector<Tensor<float>> states(plan.windows.size());
    for (int i = 0; i < cfg.ode_steps; ++i) {
        const double t = grid_time(i, cfg.ode_steps);
        const double dt = grid_time(i + 1, cfg.ode_steps) - t;
        for (std::size_t j = 0; j < plan.windows.size(); ++j) {
            const auto& w = plan.windows[j];
            states[j] = ode_step(slice_rows_of(x, w.start, w.end), t, dt, model_field(model, conds[j]), cfg.solver);
        }
        x = merge_windows(plan, states, cols);
    }
    return split_and_decode(unscale(std::move(x), model.config), model.config.channels, mix.samples.size());
}

}  // namespace samsep::flow
