#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "samsep/autograd.hpp"
#include "samsep/codec.hpp"
#include "samsep/optim.hpp"
#include "samsep/prompts.hpp"

namespace samsep::dit {

struct DitConfig {
    std::size_t layers = 4;
    std::size_t dim = 64;
    std::size_t ffn_dim = 256;
    std::size_t heads = 4;
    std::size_t channels = codec::kChannels;  // C; the joint latent has 2C
    std::size_t span_dim = prompt::kSpanDim;
    std::size_t visual_dim = prompt::kVisualDim;
    std::size_t text_dim = prompt::kTextDim;
    std::size_t aux_layer = 2;  // 1-based block index feeding the aux head
    std::size_t aux_dim = codec::kChannels;  // F
    std::size_t aux_hidden = 64;
    std::size_t time_freqs = 16;
    std::size_t time_hidden = 64;
    std::size_t max_frames = 750;
    /// Codec latents are multiplied by this on the way into the flow space
    /// (target, residual and mixture alike) and divided by it on the way out.
    double latent_scale = 8.0;

    std::size_t input_dim() const { return 3 * channels + span_dim + visual_dim; }

    friend bool operator==(const DitConfig&, const DitConfig&) = default;
};

inline void validate(const DitConfig& c) {
    if (c.layers == 0 || c.dim == 0 || c.ffn_dim == 0) throw ConfigError("dit: layers, dim and ffn_dim must be positive");
    if (c.heads == 0 || c.dim % c.heads != 0) throw ConfigError("dit: dim must be divisible by heads");
    if (c.aux_layer < 1 || c.aux_layer > c.layers) throw ConfigError("dit: aux_layer must lie in [1, layers]");
    if (c.max_frames == 0) throw ConfigError("dit: max_frames must be positive");
    if (!(c.latent_scale > 0.0) || !std::isfinite(c.latent_scale)) throw ConfigError("dit: latent_scale must be positive");
}

/// Order of the six modulation rows produced per block.
enum ModRow : std::size_t { kShiftAttn = 0, kScaleAttn, kGateAttn, kShiftFfn, kScaleFfn, kGateFfn, kModRows };

inline constexpr double kLnEps = 1e-5;

inline std::string block_key(std::size_t l, const std::string& leaf) { return "blocks." + std::to_string(l) + "." + leaf; }

/// Fresh parameters. Linear weights ~ N(0, 1/fan_in); the velocity output
/// projection, the modulation MLP output and the visual gate start at zero.
template <typename T>
ParamStore<T> init_params(const DitConfig& c, std::uint64_t seed) {
    validate(c);
    std::mt19937_64 rng(seed);
    ParamStore<T> p;
    auto normal = [&](std::size_t r, std::size_t cols, double sd) {
        std::normal_distribution<double> nd(0.0, sd);
        Tensor<T> t = Tensor<T>::matrix(r, cols);
        for (auto& v : t.storage()) v = static_cast<T>(nd(rng));
        return t;
    };
    auto linear = [&](const std::string& name, std::size_t in, std::size_t out) {
        p[name + ".w"] = normal(in, out, 1.0 / std::sqrt(static_cast<double>(in)));
        p[name + ".b"] = Tensor<T>(Shape{out}, T{0});
    };
    auto norm = [&](const std::string& name, std::size_t d) {
        p[name + ".g"] = Tensor<T>(Shape{d}, T{1});
        p[name + ".b"] = Tensor<T>(Shape{d}, T{0});
    };
    const std::size_t D = c.dim;

    linear("time.l1", 2 * c.time_freqs, c.time_hidden);
    p["time.l2.w"] = Tensor<T>::matrix(c.time_hidden, kModRows);
    p["time.l2.b"] = Tensor<T>(Shape{kModRows}, T{0});

    p["text.embed"] = normal(prompt::kVocabSize, c.text_dim, 1.0);
    p["span.embed"] = normal(prompt::kSpanVocab, c.span_dim, 1.0);
    linear("visual.proj", c.visual_dim, c.visual_dim);
    p["visual.gate"] = Tensor<T>(Shape{1}, T{0});

    linear("in", c.input_dim(), D);
    p["pos"] = normal(c.max_frames, D, 0.02);

    for (std::size_t l = 0; l < c.layers; ++l) {
        p[block_key(l, "mod_bias")] = Tensor<T>::matrix(kModRows, D);
        for (const char* n : {"attn.q", "attn.k", "attn.v", "attn.o", "xattn.q", "xattn.o"}) linear(block_key(l, n), D, D);
        linear(block_key(l, "xattn.k"), c.text_dim, D);
        linear(block_key(l, "xattn.v"), c.text_dim, D);
        norm(block_key(l, "xattn.norm"), D);
        linear(block_key(l, "ffn.l1"), D, c.ffn_dim);
        linear(block_key(l, "ffn.l2"), c.ffn_dim, D);
    }

    norm("aux.norm", D);
    linear("aux.l1", D, c.aux_hidden);
    linear("aux.l2", c.aux_hidden, c.aux_hidden);
    linear("aux.l3", c.aux_hidden, c.aux_dim);

    norm("out.norm", D);
    p["out.w"] = Tensor<T>::matrix(D, 2 * c.channels);
    p["out.b"] = Tensor<T>(Shape{2 * c.channels}, T{0});
    return p;
}

template <typename T>
std::size_t param_count(const ParamStore<T>& p) {
    std::size_t n = 0;
    for (const auto& [k, v] : p) n += v.numel();
    return n;
}

/// Conditioning for one clip, all frame-aligned with the latent.
struct Conditioning {
    Tensor<float> mix;  // T x C, codec units
    prompt::PromptBundle bundle;
};

/// Sinusoidal featurization of flow time: sin/cos at geometrically spaced
/// frequencies from 1 to 1000 rad per unit time.
template <typename T>
Tensor<T> time_features(double t, std::size_t freqs) {
    Tensor<T> f = Tensor<T>::matrix(1, 2 * freqs);
    for (std::size_t i = 0; i < freqs; ++i) {
        const double w = std::pow(1000.0, freqs > 1 ? static_cast<double>(i) / static_cast<double>(freqs - 1) : 0.0);
        f(0, i) = static_cast<T>(std::sin(w * t));
        f(0, freqs + i) = static_cast<T>(std::cos(w * t));
    }
    return f;
}

template <typename T>
struct ForwardOut {
    ag::Var<T> velocity;                  // T x 2C
    std::vector<ag::Var<T>> modulations;  // per block, 6 x D
    ag::Var<T> aux_hidden;                // T x D after block aux_layer
};

namespace detail {

template <typename T>
ag::Var<T> linear(const ParamVars<T>& pv, const std::string& name, const ag::Var<T>& x) {
    return ag::add_row(ag::matmul(x, pv[name + ".w"]), pv[name + ".b"]);
}

template <typename T>
ag::Var<T> modulated_norm(const ag::Var<T>& x, const ag::Var<T>& mod, std::size_t shift_row, std::size_t scale_row) {
    auto xn = ag::normalize_rows(x, static_cast<T>(kLnEps));
    auto sc = ag::add_scalar(ag::slice_rows(mod, scale_row, scale_row + 1), T{1});
    return ag::add_row(ag::mul_row(xn, sc), ag::slice_rows(mod, shift_row, shift_row + 1));
}

}  // namespace detail

/// Shared time MLP output (1 x 6) for flow time t in [0, 1].
template <typename T>
ag::Var<T> time_mlp(ag::Graph<T>& g, const ParamVars<T>& pv, const DitConfig& c, double t) {
    if (!(t >= 0.0 && t <= 1.0)) throw ContractError("time_embed: t outside [0, 1]");
    auto f = g.constant(time_features<T>(t, c.time_freqs));
    auto h = ag::gelu(detail::linear(pv, "time.l1", f));
    return detail::linear(pv, "time.l2", h);
}

/// Per-block modulation (6 x D): shared MLP value on each row plus the
/// block's own bias vectors.
template <typename T>
std::vector<ag::Var<T>> time_embed(ag::Graph<T>& g, const ParamVars<T>& pv, const DitConfig& c, double t) {
    auto shared = time_mlp(g, pv, c, t);
    std::vector<ag::Var<T>> mods;
    mods.reserve(c.layers);
    for (std::size_t l = 0; l < c.layers; ++l) mods.push_back(ag::add_col(pv[block_key(l, "mod_bias")], shared));
    return mods;
}

/// Velocity network forward pass for one clip.
template <typename T>
ForwardOut<T> forward(ag::Graph<T>& g, const ParamVars<T>& pv, const DitConfig& c, const Tensor<T>& x_t, double t,
                      const Conditioning& cond) {
    const std::size_t frames = x_t.rows();
    if (x_t.cols() != 2 * c.channels) throw ContractError("forward: joint latent must have 2C channels");
    if (cond.mix.rows() != frames || cond.mix.cols() != c.channels)
        throw ContractError("forward: mixture latent length or channels differ from x_t");
    if (frames == 0 || frames > c.max_frames)
        throw ContractError("forward: clip length " + std::to_string(frames) + " frames outside [1, " +
                            std::to_string(c.max_frames) + "]");
    prompt::validate(cond.bundle, frames);

    auto mods = time_embed(g, pv, c, t);

    auto xv = g.constant(x_t);
    Tensor<T> mix_scaled = cond.mix.template cast<T>();
    mix_scaled.arr() *= static_cast<T>(c.latent_scale);
    auto mixv = g.constant(std::move(mix_scaled));
    auto span = prompt::embed_span(cond.bundle.span, pv["span.embed"]);
    auto vis_in = g.constant(cond.bundle.visual.feats.template cast<T>());
    auto vis = ag::mul_scalar(detail::linear(pv, "visual.proj", vis_in), pv["visual.gate"]);

    auto h = detail::linear(pv, "in", ag::concat_cols<T>({xv, mixv, span, vis}));
    h = ag::add(h, ag::slice_rows(pv["pos"], 0, frames));

    auto text = prompt::embed_text(cond.bundle.text, pv["text.embed"]);

    ForwardOut<T> out;
    for (std::size_t l = 0; l < c.layers; ++l) {
        const auto& mod = mods[l];
        auto key = [l](const char* leaf) { return block_key(l, leaf); };

        auto a = detail::modulated_norm(h, mod, kShiftAttn, kScaleAttn);
        auto q = detail::linear(pv, key("attn.q"), a);
        auto k = detail::linear(pv, key("attn.k"), a);
        auto v = detail::linear(pv, key("attn.v"), a);
        auto sa = detail::linear(pv, key("attn.o"), ag::attention(q, k, v, c.heads));
        h = ag::add(h, ag::mul_row(sa, ag::slice_rows(mod, kGateAttn, kGateAttn + 1)));

        auto xn = ag::layer_norm(h, pv[key("xattn.norm.g")], pv[key("xattn.norm.b")], static_cast<T>(kLnEps));
        auto xq = detail::linear(pv, key("xattn.q"), xn);
        auto xk = detail::linear(pv, key("xattn.k"), text);
        auto xvv = detail::linear(pv, key("xattn.v"), text);
        h = ag::add(h, detail::linear(pv, key("xattn.o"), ag::attention(xq, xk, xvv, c.heads)));

        auto f = detail::modulated_norm(h, mod, kShiftFfn, kScaleFfn);
        f = detail::linear(pv, key("ffn.l2"), ag::gelu(detail::linear(pv, key("ffn.l1"), f)));
        h = ag::add(h, ag::mul_row(f, ag::slice_rows(mod, kGateFfn, kGateFfn + 1)));

        if (l + 1 == c.aux_layer) out.aux_hidden = h;
    }
    auto o = ag::layer_norm(h, pv["out.norm.g"], pv["out.norm.b"], static_cast<T>(kLnEps));
    out.velocity = detail::linear(pv, "out", o);
    out.modulations = std::move(mods);
    return out;
}

/// Auxiliary head: LN -> (linear, GELU) x2 -> linear, mapping T x D to T x F.
template <typename T>
ag::Var<T> aux_project(const ParamVars<T>& pv, const ag::Var<T>& hidden) {
    auto x = ag::layer_norm(hidden, pv["aux.norm.g"], pv["aux.norm.b"], static_cast<T>(kLnEps));
    x = ag::gelu(detail::linear(pv, "aux.l1", x));
    x = ag::gelu(detail::linear(pv, "aux.l2", x));
    return detail::linear(pv, "aux.l3", x);
}

/// Inference-only velocity evaluation (no gradient tape is kept).
template <typename T>
Tensor<T> velocity(const ParamStore<T>& params, const DitConfig& c, const Tensor<T>& x_t, double t,
                   const Conditioning& cond) {
    ag::Graph<T> g;
    ParamVars<T> pv(g, params, false);
    return forward(g, pv, c, x_t, t, cond).velocity.value();
}

}  // namespace samsep::dit
