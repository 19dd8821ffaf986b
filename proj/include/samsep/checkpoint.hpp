#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "samsep/dit.hpp"
#include "samsep/errors.hpp"
#include "samsep/flow.hpp"
#include "samsep/optim.hpp"
#include "samsep/tensor.hpp"
#include "samsep/train.hpp"

namespace samsep::ckpt {

using json = nlohmann::json;

inline constexpr char kMagic[4] = {'S', 'A', 'M', 'T'};
inline constexpr std::uint32_t kVersion = 1;

struct NamedTensor {
    std::string name;
    Tensor<float> value;
};

/// In-memory form of a checkpoint file: ordered tensors plus free-form metadata.
struct Checkpoint {
    std::vector<NamedTensor> tensors;
    json meta = json::object();

    const Tensor<float>* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t.value;
        return nullptr;
    }
};

namespace detail {

template <typename U>
void put_le(std::string& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(const std::string& in, std::size_t at) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
        v |= static_cast<U>(static_cast<unsigned char>(in[at + i])) << (8 * i);
    return v;
}

}  // namespace detail

/// Serializes to the byte layout: "SAMT", u32 version, u64 header length,
/// JSON header, f32 little-endian payloads in header order.
inline std::string to_bytes(const Checkpoint& c) {
    json entries = json::array();
    std::uint64_t offset = 0;
    for (const auto& t : c.tensors) {
        entries.push_back({{"name", t.name}, {"dtype", "f32"}, {"shape", t.value.shape()}, {"offset", offset}});
        offset += 4 * t.value.numel();
    }
    const json header = {{"tensors", entries}, {"meta", c.meta}};
    const std::string hs = header.dump();

    std::string out(kMagic, 4);
    detail::put_le<std::uint32_t>(out, kVersion);
    detail::put_le<std::uint64_t>(out, hs.size());
    out += hs;
    out.reserve(out.size() + offset);
    for (const auto& t : c.tensors)
        for (float v : t.value.storage()) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
    return out;
}

inline Checkpoint from_bytes(const std::string& b) {
    if (b.size() < 16 || std::memcmp(b.data(), kMagic, 4) != 0) throw ValidationError("checkpoint: bad magic");
    const auto version = detail::get_le<std::uint32_t>(b, 4);
    if (version != kVersion) throw ValidationError("checkpoint: unsupported version " + std::to_string(version));
    const auto hlen = detail::get_le<std::uint64_t>(b, 8);
    if (hlen > b.size() - 16) throw ValidationError("checkpoint: truncated header");
    json header;
    try {
        header = json::parse(b.substr(16, hlen));
    } catch (const json::exception& e) {
        throw ValidationError(std::string("checkpoint: malformed header: ") + e.what());
    }
    const std::size_t base = 16 + hlen;
    Checkpoint c;
    c.meta = header.value("meta", json::object());
    std::uint64_t expected = 0;
    for (const auto& e : header.at("tensors")) {
        if (e.at("dtype") != "f32") throw ValidationError("checkpoint: unsupported dtype");
        const Shape shape = e.at("shape").get<Shape>();
        const auto off = e.at("offset").get<std::uint64_t>();
        if (off != expected) throw ValidationError("checkpoint: payloads not in header order");
        Tensor<float> t(shape);
        if (base + off + 4 * t.numel() > b.size()) throw ValidationError("checkpoint: truncated payload");
        for (std::size_t i = 0; i < t.numel(); ++i)
            t.storage()[i] = std::bit_cast<float>(detail::get_le<std::uint32_t>(b, base + off + 4 * i));
        expected = off + 4 * t.numel();
        c.tensors.push_back({e.at("name").get<std::string>(), std::move(t)});
    }
    if (base + expected != b.size()) throw ValidationError("checkpoint: trailing bytes");
    return c;
}

inline void write(const std::string& path, const Checkpoint& c) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw ValidationError("cannot write " + path);
    const std::string bytes = to_bytes(c);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw ValidationError("write failed: " + path);
}

inline Checkpoint read(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ValidationError("cannot read " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return from_bytes(bytes);
}

// ---------------------------------------------------------------------------
// Model and training state

inline json to_json(const dit::DitConfig& c) {
    return {{"layers", c.layers},         {"dim", c.dim},
            {"ffn_dim", c.ffn_dim},       {"heads", c.heads},
            {"channels", c.channels},     {"span_dim", c.span_dim},
            {"visual_dim", c.visual_dim}, {"text_dim", c.text_dim},
            {"aux_layer", c.aux_layer},   {"aux_dim", c.aux_dim},
            {"aux_hidden", c.aux_hidden}, {"time_freqs", c.time_freqs},
            {"time_hidden", c.time_hidden}, {"max_frames", c.max_frames},
            {"latent_scale", c.latent_scale}};
}

inline dit::DitConfig dit_config_from_json(const json& j) {
    dit::DitConfig c;
    try {
        c.layers = j.at("layers");
        c.dim = j.at("dim");
        c.ffn_dim = j.at("ffn_dim");
        c.heads = j.at("heads");
        c.channels = j.at("channels");
        c.span_dim = j.at("span_dim");
        c.visual_dim = j.at("visual_dim");
        c.text_dim = j.at("text_dim");
        c.aux_layer = j.at("aux_layer");
        c.aux_dim = j.at("aux_dim");
        c.aux_hidden = j.at("aux_hidden");
        c.time_freqs = j.at("time_freqs");
        c.time_hidden = j.at("time_hidden");
        c.max_frames = j.at("max_frames");
        c.latent_scale = j.at("latent_scale");
    } catch (const json::exception& e) {
        throw ValidationError(std::string("checkpoint: bad model config: ") + e.what());
    }
    dit::validate(c);
    return c;
}

inline void append(Checkpoint& c, const std::string& prefix, const ParamStore<float>& p) {
    for (const auto& [k, v] : p) c.tensors.push_back({prefix + k, v});
}

/// Collects every tensor named prefix + key, checking it against a reference layout.
inline ParamStore<float> extract(const Checkpoint& c, const std::string& prefix, const ParamStore<float>& layout) {
    ParamStore<float> out;
    for (const auto& [k, ref] : layout) {
        const Tensor<float>* t = c.find(prefix + k);
        if (!t) throw ValidationError("checkpoint: missing tensor " + prefix + k);
        if (t->shape() != ref.shape()) throw ValidationError("checkpoint: shape mismatch for " + prefix + k);
        out.emplace(k, *t);
    }
    return out;
}

/// Inference checkpoint holding raw parameter names.
inline Checkpoint model_checkpoint(const dit::DitConfig& cfg, const ParamStore<float>& params, json meta = json::object()) {
    Checkpoint c;
    meta["kind"] = "model";
    meta["model"] = to_json(cfg);
    c.meta = std::move(meta);
    append(c, "", params);
    return c;
}

inline flow::Model load_model(const Checkpoint& c) {
    if (!c.meta.contains("model")) throw ValidationError("checkpoint: no model config");
    flow::Model m;
    m.config = dit_config_from_json(c.meta.at("model"));
    const auto layout = dit::init_params<float>(m.config, 0);
    const std::string prefix = c.meta.value("kind", "model") == "train_state" ? "ema/" : "";
    m.params = extract(c, prefix, layout);
    return m;
}

/// Full training state: parameters, EMA copy and optimizer moments.
inline Checkpoint state_checkpoint(const dit::DitConfig& cfg, const train::TrainState& st, json meta = json::object()) {
    Checkpoint c;
    meta["kind"] = "train_state";
    meta["model"] = to_json(cfg);
    meta["step"] = st.step;
    meta["adam_steps"] = st.opt.steps();
    c.meta = std::move(meta);
    append(c, "param/", st.params);
    append(c, "ema/", st.ema);
    append(c, "adam.m/", st.opt.first_moments());
    append(c, "adam.v/", st.opt.second_moments());
    return c;
}

inline train::TrainState load_state(const Checkpoint& c, dit::DitConfig* cfg_out = nullptr) {
    if (c.meta.value("kind", "") != "train_state") throw ValidationError("checkpoint: not a training state");
    const auto cfg = dit_config_from_json(c.meta.at("model"));
    const auto layout = dit::init_params<float>(cfg, 0);
    train::TrainState st;
    st.params = extract(c, "param/", layout);
    st.ema = extract(c, "ema/", layout);
    st.opt.init(st.params);
    st.opt.first_moments() = extract(c, "adam.m/", layout);
    st.opt.second_moments() = extract(c, "adam.v/", layout);
    st.opt.set_steps(c.meta.at("adam_steps").get<std::size_t>());
    st.step = c.meta.at("step").get<std::size_t>();
    if (cfg_out) *cfg_out = cfg;
    return st;
}

}  // namespace samsep::ckpt
