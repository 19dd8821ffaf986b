#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include "samsep/dit.hpp"
#include "samsep/errors.hpp"
#include "samsep/flow.hpp"
#include "samsep/train.hpp"

namespace samsep::config {

struct DataConfig {
    train::RegimeWeights weights;
    std::size_t count = 0;
    std::uint64_t seed = 0;
    double clip_seconds = 10.0;
};

struct RunConfig {
    dit::DitConfig model;
    flow::FlowConfig flow;
    DataConfig data;
    train::TrainConfig train;
    std::size_t checkpoint_every = 500;
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::size_t to_size(const std::string& k, const std::string& v) {
    std::size_t pos = 0;
    unsigned long long x = 0;
    try {
        if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
        x = std::stoull(v, &pos);
    } catch (const std::exception&) {
        throw ConfigError(k + ": expected a non-negative integer, got '" + v + "'");
    }
    if (pos != v.size()) throw ConfigError(k + ": expected a non-negative integer, got '" + v + "'");
    return static_cast<std::size_t>(x);
}

inline double to_real(const std::string& k, const std::string& v) {
    std::size_t pos = 0;
    double x = 0.0;
    try {
        x = std::stod(v, &pos);
    } catch (const std::exception&) {
        throw ConfigError(k + ": expected a number, got '" + v + "'");
    }
    if (pos != v.size() || !std::isfinite(x)) throw ConfigError(k + ": expected a finite number, got '" + v + "'");
    return x;
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

inline const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> s = [] {
        std::map<std::string, Setter> m;
        auto size = [&](const char* key, auto member) {
            m[key] = [member](RunConfig& c, const std::string& k, const std::string& v) { member(c) = to_size(k, v); };
        };
        auto real = [&](const char* key, auto member) {
            m[key] = [member](RunConfig& c, const std::string& k, const std::string& v) { member(c) = to_real(k, v); };
        };
        size("model.layers", [](RunConfig& c) -> std::size_t& { return c.model.layers; });
        size("model.dim", [](RunConfig& c) -> std::size_t& { return c.model.dim; });
        size("model.ffn_dim", [](RunConfig& c) -> std::size_t& { return c.model.ffn_dim; });
        size("model.heads", [](RunConfig& c) -> std::size_t& { return c.model.heads; });
        size("model.aux_layer", [](RunConfig& c) -> std::size_t& { return c.model.aux_layer; });
        size("model.aux_hidden", [](RunConfig& c) -> std::size_t& { return c.model.aux_hidden; });
        size("model.time_hidden", [](RunConfig& c) -> std::size_t& { return c.model.time_hidden; });
        size("model.max_frames", [](RunConfig& c) -> std::size_t& { return c.model.max_frames; });
        real("model.latent_scale", [](RunConfig& c) -> double& { return c.model.latent_scale; });
        real("flow.sigma_min", [](RunConfig& c) -> double& { return c.flow.sigma_min; });
        real("flow.lambda_aux", [](RunConfig& c) -> double& { return c.flow.lambda_aux; });
        m["flow.ode_steps"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.flow.ode_steps = static_cast<int>(to_size(k, v));
        };
        m["flow.solver"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            if (v == "euler") c.flow.solver = flow::Solver::Euler;
            else if (v == "midpoint") c.flow.solver = flow::Solver::Midpoint;
            else throw ConfigError(k + ": expected euler or midpoint");
        };
        real("data.weights.multi_stem", [](RunConfig& c) -> double& { return c.data.weights.w[0]; });
        real("data.weights.target_plus_noise", [](RunConfig& c) -> double& { return c.data.weights.w[1]; });
        real("data.weights.spiky_span", [](RunConfig& c) -> double& { return c.data.weights.w[2]; });
        size("data.count", [](RunConfig& c) -> std::size_t& { return c.data.count; });
        m["data.seed"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.data.seed = to_size(k, v); };
        real("data.clip_seconds", [](RunConfig& c) -> double& { return c.data.clip_seconds; });
        size("train.steps", [](RunConfig& c) -> std::size_t& { return c.train.steps; });
        size("train.batch", [](RunConfig& c) -> std::size_t& { return c.train.batch; });
        real("train.lr", [](RunConfig& c) -> double& { return c.train.lr; });
        size("train.warmup", [](RunConfig& c) -> std::size_t& { return c.train.warmup; });
        real("train.ema_decay", [](RunConfig& c) -> double& { return c.train.ema_decay; });
        real("train.dropout", [](RunConfig& c) -> double& { return c.train.dropout; });
        m["train.seed"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.train.seed = to_size(k, v); };
        size("train.threads", [](RunConfig& c) -> std::size_t& { return c.train.threads; });
        size("train.checkpoint_every", [](RunConfig& c) -> std::size_t& { return c.checkpoint_every; });
        return m;
    }();
    return s;
}

}  // namespace detail

/// Applies one `key=value` assignment.
inline void set(RunConfig& c, const std::string& key, const std::string& value) {
    const auto& s = detail::setters();
    const auto it = s.find(key);
    if (it == s.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second(c, key, value);
}

inline void validate(const RunConfig& c) {
    dit::validate(c.model);
    flow::validate(c.flow);
    train::validate(c.data.weights);
    if (!(c.data.clip_seconds >= 1.0) || c.data.clip_seconds * codec::kFrameRate > static_cast<double>(c.model.max_frames))
        throw ConfigError("data.clip_seconds must lie in [1, max_frames / 25]");
    if (c.train.batch == 0) throw ConfigError("train.batch must be positive");
    if (!(c.train.lr > 0.0)) throw ConfigError("train.lr must be positive");
    if (!(c.train.ema_decay >= 0.0 && c.train.ema_decay < 1.0)) throw ConfigError("train.ema_decay must lie in [0, 1)");
    if (!(c.train.dropout >= 0.0 && c.train.dropout <= 1.0)) throw ConfigError("train.dropout must lie in [0, 1]");
    if (c.train.threads == 0) throw ConfigError("train.threads must be positive");
}

/// Parses flat `key = value` text; `#` starts a comment. Both seeds must be
/// given explicitly.
inline RunConfig parse(const std::string& text) {
    RunConfig c;
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    bool data_seed = false, train_seed = false;
    while (std::getline(is, line)) {
        ++lineno;
        if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = detail::trim(line.substr(0, eq));
        set(c, key, detail::trim(line.substr(eq + 1)));
        data_seed |= key == "data.seed";
        train_seed |= key == "train.seed";
    }
    if (!data_seed || !train_seed) throw ConfigError("config must set data.seed and train.seed");
    validate(c);
    return c;
}

inline RunConfig load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
}

}  // namespace samsep::config
