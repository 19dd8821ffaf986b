#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <random>
#include <string>

#include "samsep/autograd.hpp"
#include "samsep/tensor.hpp"

namespace samsep {

/// Named parameter tensors. Ordered by name so iteration (and therefore
/// serialization and gradient reduction) is deterministic.
template <typename T>
using ParamStore = std::map<std::string, Tensor<T>>;

template <typename T>
using GradStore = std::map<std::string, Tensor<T>>;

template <typename U, typename T>
ParamStore<U> cast_params(const ParamStore<T>& p) {
    ParamStore<U> out;
    for (const auto& [k, v] : p) out.emplace(k, v.template cast<U>());
    return out;
}

/// Graph leaves for every parameter, keyed by name.
template <typename T>
class ParamVars {
public:
    ParamVars(ag::Graph<T>& g, const ParamStore<T>& params, bool requires_grad) {
        for (const auto& [k, v] : params) vars_.emplace(k, g.leaf(v, requires_grad));
    }

    const ag::Var<T>& operator[](const std::string& name) const {
        auto it = vars_.find(name);
        if (it == vars_.end()) throw ContractError("missing parameter '" + name + "'");
        return it->second;
    }

    /// Gradients after backward (zeros for parameters the loss does not reach).
    GradStore<T> grads() const {
        GradStore<T> out;
        for (const auto& [k, v] : vars_) out.emplace(k, v.grad());
        return out;
    }

private:
    std::map<std::string, ag::Var<T>> vars_;
};

/// Whether decoupled weight decay applies: weight matrices and embedding
/// tables, not biases, gains, modulation biases or scalar gates.
inline bool decays(const std::string& name, const Shape& shape) {
    if (shape.size() != 2 || shape[0] == 1) return false;
    return name.find("mod_bias") == std::string::npos;
}

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.1;
};

/// AdamW with decoupled weight decay. Moments are kept in the parameter
/// precision so a serialized state resumes bit-exactly.
template <typename T>
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    void init(const ParamStore<T>& params) {
        m_.clear();
        v_.clear();
        for (const auto& [k, p] : params) {
            m_.emplace(k, Tensor<T>(p.shape(), T{0}));
            v_.emplace(k, Tensor<T>(p.shape(), T{0}));
        }
        step_ = 0;
    }

    void step(ParamStore<T>& params, const GradStore<T>& grads, double lr) {
        ++step_;
        const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
        const T c1 = static_cast<T>(1.0 - std::pow(cfg_.beta1, static_cast<double>(step_)));
        const T c2 = static_cast<T>(1.0 - std::pow(cfg_.beta2, static_cast<double>(step_)));
        const T lr_t = static_cast<T>(lr);
        const T eps = static_cast<T>(cfg_.eps);
        for (auto& [k, p] : params) {
            const auto git = grads.find(k);
            if (git == grads.end()) continue;
            auto m = m_.at(k).arr();
            auto v = v_.at(k).arr();
            const auto g = git->second.arr();
            m = b1 * m + (T(1) - b1) * g;
            v = b2 * v + (T(1) - b2) * g.square();
            auto pa = p.arr();
            if (decays(k, p.shape())) pa *= T(1) - lr_t * static_cast<T>(cfg_.weight_decay);
            pa -= lr_t * (m / c1) / ((v / c2).sqrt() + eps);
        }
    }

    std::size_t steps() const { return step_; }
    void set_steps(std::size_t s) { step_ = s; }
    ParamStore<T>& first_moments() { return m_; }
    ParamStore<T>& second_moments() { return v_; }
    const ParamStore<T>& first_moments() const { return m_; }
    const ParamStore<T>& second_moments() const { return v_; }

private:
    AdamWConfig cfg_;
    ParamStore<T> m_, v_;
    std::size_t step_ = 0;
};

}  // namespace samsep
