#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "samsep/tensor.hpp"

namespace samsep::ag {

template <typename T>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
template <typename T>
class Var {
public:
    Var() = default;
    Var(Graph<T>* g, std::size_t id) : graph_(g), id_(id) {}

    const Tensor<T>& value() const { return graph_->value(id_); }
    const Tensor<T>& grad() const { return graph_->grad(id_); }
    bool requires_grad() const { return graph_->requires_grad(id_); }
    std::size_t id() const { return id_; }
    Graph<T>* graph() const { return graph_; }
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }

private:
    Graph<T>* graph_ = nullptr;
    std::size_t id_ = 0;
};

/// Tape of primitive operations in creation (= topological) order.
///
/// Nodes are appended by the op functions below; backward walks the tape in
/// reverse, so every node is visited exactly once. Storage is a deque so that
/// references to existing values stay valid while new nodes are appended.
template <typename T>
class Graph {
public:
    /// Backward rule: receives the node's upstream gradient and its own output value.
    using BackwardFn = std::function<void(Graph&, const Tensor<T>& upstream, const Tensor<T>& out)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
        nodes_.push_back(Node{std::move(value), Tensor<T>(), requires_grad, true, {}});
        return Var<T>(this, nodes_.size() - 1);
    }

    Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

    /// Appends an interior node; `fn` is dropped when no parent needs a gradient.
    Var<T> emit(Tensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn fn) {
        bool rg = false;
        for (const auto& p : parents) rg = rg || requires_grad(p.id());
        nodes_.push_back(Node{std::move(value), Tensor<T>(), rg, false, rg ? std::move(fn) : BackwardFn{}});
        return Var<T>(this, nodes_.size() - 1);
    }

    Var<T> emit(Tensor<T> value, const std::vector<Var<T>>& parents, BackwardFn fn) {
        bool rg = false;
        for (const auto& p : parents) rg = rg || requires_grad(p.id());
        nodes_.push_back(Node{std::move(value), Tensor<T>(), rg, false, rg ? std::move(fn) : BackwardFn{}});
        return Var<T>(this, nodes_.size() - 1);
    }

    const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

    /// Gradient of a node; zeros of the value's shape if nothing has flowed in.
    const Tensor<T>& grad(std::size_t id) {
        Node& n = nodes_.at(id);
        if (n.grad.numel() != n.value.numel()) n.grad = Tensor<T>(n.value.shape(), T{0});
        return n.grad;
    }

    /// Mutable gradient accumulator used by backward rules.
    Tensor<T>& grad_accumulator(std::size_t id) {
        Node& n = nodes_[id];
        if (n.grad.numel() != n.value.numel()) n.grad = Tensor<T>(n.value.shape(), T{0});
        return n.grad;
    }

    void zero_grad() {
        for (auto& n : nodes_) n.grad = Tensor<T>();
    }

    std::size_t size() const { return nodes_.size(); }

    /// Reverse sweep from a scalar loss. Interior gradients are released once
    /// propagated; leaf gradients accumulate across calls until zero_grad().
    void backward(const Var<T>& loss) {
        if (loss.graph() != this) throw ContractError("loss belongs to a different graph");
        const Tensor<T>& lv = value(loss.id());
        if (lv.numel() != 1) throw ContractError("backward requires a scalar loss, got shape " + shape_str(lv.shape()));
        if (!requires_grad(loss.id())) return;
        grad_accumulator(loss.id())[0] += T{1};
        for (std::size_t i = loss.id() + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.is_leaf || !n.backward || n.grad.numel() == 0) continue;
            Tensor<T> upstream = std::move(n.grad);
            n.grad = Tensor<T>();
            n.backward(*this, upstream, n.value);
        }
    }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool requires_grad;
        bool is_leaf;
        BackwardFn backward;
    };
    std::deque<Node> nodes_;
};

namespace detail {

template <typename T>
void check_same(const Var<T>& a, const Var<T>& b, const char* op) {
    if (!a.value().same_shape(b.value()))
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.value().shape()) + " vs " +
                             shape_str(b.value().shape()));
}

template <typename T>
bool wants(Graph<T>& g, const Var<T>& v) {
    return g.requires_grad(v.id());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (av.cols() != bv.rows())
        throw DimensionError("matmul: inner extents differ " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
    Tensor<T> out = Tensor<T>::matrix(av.rows(), bv.cols());
    out.mat().noalias() = av.mat() * bv.mat();
    return a.graph()->emit(std::move(out), {a, b}, [a, b](Graph<T>& g, const Tensor<T>& up, const Tensor<T>&) {
        if (detail::wants(g, a)) g.grad_accumulator(a.id()).mat().noalias() += up.mat() * b.value().mat().transpose();
        if (detail::wants(g, b)) g.grad_accumulator(b.id()).mat().noalias() += a.value().mat().transpose() * up.mat();
    });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    detail::check_same(a, b, "add");
    Tensor<T> out = a.value();
    out.arr() += b.value().arr();
    return a.graph()->emit(std::move(out), {a, b}, [a, b](Graph<T>& g, const Tensor<T>& up, const Tensor<T>&) {
        if (detail::wants(g, a)) g.grad_accumulator(a.id()).arr() += up.arr();
        if (detail::wants(g, b)) g.grad_accumulator(b.id()).arr() += up.arr();
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    detail::check_same(a, b, "sub");
    Tensor<T> out = a.value();
    out.arr() -= b.value().arr();
    return a.graph()->emit(std::move(out), {a, b}, [a, b](Graph<T>& g, const Tensor<T>& up, const Tensor<T>&) {
        if (detail::wants(g, a)) g.grad_accumulator(a.id()).arr() += up.arr();
        if (detail::wants(g, b)) g.grad_accumulator(b.id()).arr() -= up.arr();
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    detail::check_same(a, b, "mul");
    Tensor<T> out = a.value();
    out.arr() *= b.value().arr();
    return a.graph()->emit(std::move(out), {a, b}, [a, b](Graph<T>& g, const Tensor<T>& up, const Tensor<T>&) {
        if (detail::wants(g, a)) g.grad_accumulator(a.id()).arr() += up.arr() * b.value().arr();
        if (detail::wants(g, b)) g.grad_accumulator(b.id()).arr() += up.arr() * a.value().arr();
    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
    Tensor<T> out = a.value();
    out.arr() *= s;
    return a.graph()->emit(std::move(out), {a}, [a, s](Graph<T>& g, const Tensor<T>& up, const Tensor<T>&) {
        g.grad_accumulator(a.id()).arr() += s * up.arr();
    });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
    Tensor<T> out = a.value();
    out.arr() += s;
    return a.graph()->emit(std::move(out), {a}, [a](Graph<T>& g, const Tensor<T>& up, const Tensor<T>&) {
        g.grad_accumulator(a.id()).arr() += up.arr();
    });
}

/// Multiplies a tensor by a 1-element tensor treated as a scalar.
template <typename T>
Var<T> mul_scalar(const Var<T>& x, const Var<T>& s) {
    if (s.value().numel() != 1) throw DimensionError("mul_scalar: scale must have one element");
    Tensor<T> out = x.value();
    const T sv = s.value()[0];
    out.arr() *= sv;
    return x.graph()->emit(std::move(out), {x, s}, [x, s](Graph<T>& g, const Tensor<T>& up, const Tensor<T>&) {
        if (detail::wants(g, x)) g.grad_accumulator(x.id()).arr() += s.value()[0] * up.arr();
        if (detail::wants(g, s)) g.grad_accumulator(s.id())[0] += (up.arr() * x.value().arr()).sum();
    });
}

/// x (R x C) + row (1 x C) broadcast down the rows.
template <typename T>
Var<T> add_row(const Var<T>& x, const Var<T>& row) {
    if (row.value().numel() != x.cols()) throw DimensionError("add_row: row length must equal column count");
    Tensor<T> out = x.value();
    out.mat().rowwise() += row.value().row_vec();
    return x.graph()->emit(std::move(out), {x, row}, [x, row](Graph<T>& g, const Tensor<T>& up, const Tensor<T>&) {
        if (detail::wants(g, x)) g.grad_accumulator(x.id()).arr() += up.arr();
        if (detail::wants(g, row)) {
            auto& gr = g.grad_accumulator(row.id());
            gr.row_vec() += up.mat().colwise().sum();
        }
    });
}

/// x (R x C) * row (1 x C) broadcast down the rows.
template <typename T>
Var<T> mul_row(const Var<T>& x, const Var<T>& row) {
    if (row.value().numel() != x.cols()) throw DimensionError("mul_row: row length must equal column count");
    Tensor<T> out = x.value();
    out.mat().array().rowwise() *= row.value().row_vec().array();
    return x.graph()->emit(std::move(out), {x, row}, [x, row](Graph<T>& g, const Tensor<T>& up, const Tensor<T>&) {
        if (detail::wants(g, x))
            g.grad_accumulator(x.id()).mat().array() += up.mat().array().rowwise() * row.value().row_vec().array();
        if (detail::wants(g, row)) {
            auto& gr = g.grad_accumulator(row.id());
            gr.row_vec() += (up.mat().array() * x.value().mat().array()).matrix().colwise().sum();
        }
    });
}

/// x (R x C) + v (R elements) broadcast along each row: out(i, j) = x(i, j) + v[i].
template <typename T>
Var<T> add_col(const Var<T>& x, const Var<T>& v) {
    if (v.value().numel() != x.rows()) throw DimensionError("add_col: vector length must equal row count");
    Tensor<T> out = x.value();
    out.mat().colwise() += v.value().col_vec();
    return x.graph()->emit(std::move(out), {x, v}, [x, v](Graph<T>& g, const Tensor<T>& up, const Tensor<T>&) {
        if (detail::wants(g, x)) g.grad_accumulator(x.id()).arr() += up.arr();
        if (detail::wants(g, v)) {
            auto& gv = g.grad_accumulator(v.id());
            gv.col_vec() += up.mat().rowwise().sum();
        }
    });
}

/// GELU, tanh approximation.
template <typename T>
Var<T> gelu(const Var<T>& x) {
    const T c = T(0.7978845608028654);  // sqrt(2/pi)
    const T k = T(0.044715);
    const auto xa = x.value().arr();
    Tensor<T> out(x.value().shape());
    out.arr() = T(0.5) * xa * (T(1) + (c * (xa + k * xa.cube())).tanh());
    return x.graph()->emit(std::move(out), {x}, [x, c, k](Graph<T>& g, const Tensor<T>& up, const Tensor<T>&) {
        const auto xv = x.value().arr();
        const Eigen::Array<T, Eigen::Dynamic, 1> th = (c * (xv + k * xv.cube())).tanh();
        const auto d = T(0.5) * (T(1) + th) + T(0.5) * xv * (T(1) - th.square()) * c * (T(1) + T(3) * k * xv.square());
        g.grad_accumulator(x.id()).arr() += up.arr() * d;
    });
}

// ---------------------------------------------------------------------------
// Normalization

/// Per-row zero-mean unit-variance normalization without affine parameters.
template <typename T>
Var<T> normalize_rows(const Var<T>& x, T eps) {
    if (!(eps > T{0})) throw ContractError("layer_norm: eps must be positive");
    const auto& xv = x.value();
    const auto R = static_cast<Eigen::Index>(xv.rows());
    const auto C = static_cast<Eigen::Index>(xv.cols());
    Tensor<T> out = Tensor<T>::matrix(xv.rows(), xv.cols());
    Tensor<T> inv_std = Tensor<T>::matrix(1, xv.rows());
    auto xm = xv.mat();
    auto om = out.mat();
    for (Eigen::Index r = 0; r < R; ++r) {
        const T mu = xm.row(r).mean();
        const T var = (xm.row(r).array() - mu).square().sum() / static_cast<T>(C);
        const T is = T(1) / std::sqrt(var + eps);
        om.row(r) = (xm.row(r).array() - mu) * is;
        inv_std[static_cast<std::size_t>(r)] = is;
    }
    return x.graph()->emit(std::move(out), {x},
                           [x, inv_std, C](Graph<T>& g, const Tensor<T>& up, const Tensor<T>& normed) {
                               const auto xh = normed.mat();
                               auto gx = g.grad_accumulator(x.id()).mat();
                               const auto um = up.mat();
                               for (Eigen::Index r = 0; r < xh.rows(); ++r) {
                                   const T mg = um.row(r).mean();
                                   const T mgx = um.row(r).dot(xh.row(r)) / static_cast<T>(C);
                                   gx.row(r).array() += inv_std[static_cast<std::size_t>(r)] *
                                                        (um.row(r).array() - mg - xh.row(r).array() * mgx);
                               }
                           });
}

/// Layer normalization with per-column gain and bias.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps) {
    return add_row(mul_row(normalize_rows(x, eps), gain), bias);
}

// ---------------------------------------------------------------------------
// Structural

template <typename T>
Var<T> slice_cols(const Var<T>& x, std::size_t begin, std::size_t end) {
    Tensor<T> out = slice_columns(x.value(), begin, end);
    return x.graph()->emit(std::move(out), {x}, [x, begin, end](Graph<T>& g, const Tensor<T>& up, const Tensor<T>&) {
        g.grad_accumulator(x.id()).mat().middleCols(static_cast<Eigen::Index>(begin),
                                                    static_cast<Eigen::Index>(end - begin)) += up.mat();
    });
}

template <typename T>
Var<T> slice_rows(const Var<T>& x, std::size_t begin, std::size_t end) {
    Tensor<T> out = slice_rows_of(x.value(), begin, end);
    return x.graph()->emit(std::move(out), {x}, [x, begin, end](Graph<T>& g, const Tensor<T>& up, const Tensor<T>&) {
        g.grad_accumulator(x.id()).mat().middleRows(static_cast<Eigen::Index>(begin),
                                                    static_cast<Eigen::Index>(end - begin)) += up.mat();
    });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no inputs");
    std::vector<const Tensor<T>*> ptrs;
    ptrs.reserve(parts.size());
    for (const auto& p : parts) ptrs.push_back(&p.value());
    Tensor<T> out = concat_columns(ptrs);
    return parts.front().graph()->emit(std::move(out), parts, [parts](Graph<T>& g, const Tensor<T>& up, const Tensor<T>&) {
        std::size_t off = 0;
        for (const auto& p : parts) {
            const std::size_t c = p.value().cols();
            if (detail::wants(g, p))
                g.grad_accumulator(p.id()).mat() +=
                    up.mat().middleCols(static_cast<Eigen::Index>(off), static_cast<Eigen::Index>(c));
            off += c;
        }
    });
}

/// Embedding lookup: row i of the result is row ids[i] of the table.
template <typename T>
Var<T> gather_rows(const Var<T>& table, std::vector<std::size_t> ids) {
    const auto& tv = table.value();
    Tensor<T> out = Tensor<T>::matrix(ids.size(), tv.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= tv.rows()) throw ContractError("gather_rows: index out of range");
        out.mat().row(static_cast<Eigen::Index>(i)) = tv.mat().row(static_cast<Eigen::Index>(ids[i]));
    }
    return table.graph()->emit(std::move(out), {table},
                               [table, ids = std::move(ids)](Graph<T>& g, const Tensor<T>& up, const Tensor<T>&) {
                                   auto gt = g.grad_accumulator(table.id()).mat();
                                   for (std::size_t i = 0; i < ids.size(); ++i)
                                       gt.row(static_cast<Eigen::Index>(ids[i])) +=
                                           up.mat().row(static_cast<Eigen::Index>(i));
                               });
}

// ---------------------------------------------------------------------------
// Reductions and losses (scalar outputs have rank 0)

template <typename T>
Var<T> sum(const Var<T>& x) {
    Tensor<T> out = Tensor<T>::scalar(x.value().arr().sum());
    return x.graph()->emit(std::move(out), {x}, [x](Graph<T>& g, const Tensor<T>& up, const Tensor<T>&) {
        g.grad_accumulator(x.id()).arr() += up[0];
    });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
    const T n = static_cast<T>(x.value().numel());
    return scale(sum(x), T(1) / n);
}

/// Mean of squared differences over all elements.
template <typename T>
Var<T> mse(const Var<T>& pred, const Var<T>& target) {
    detail::check_same(pred, target, "mse");
    const T n = static_cast<T>(pred.value().numel());
    const T loss = (pred.value().arr() - target.value().arr()).square().sum() / n;
    return pred.graph()->emit(Tensor<T>::scalar(loss), {pred, target},
                              [pred, target, n](Graph<T>& g, const Tensor<T>& up, const Tensor<T>&) {
                                  const T k = T(2) * up[0] / n;
                                  if (detail::wants(g, pred))
                                      g.grad_accumulator(pred.id()).arr() +=
                                          k * (pred.value().arr() - target.value().arr());
                                  if (detail::wants(g, target))
                                      g.grad_accumulator(target.id()).arr() -=
                                          k * (pred.value().arr() - target.value().arr());
                              });
}

/// Mean over rows of (1 - cosine(pred_row, target_row)). Rows where either
/// side has zero norm count as similarity 0 and carry no gradient.
template <typename T>
Var<T> cosine_rows_loss(const Var<T>& pred, const Tensor<T>& target) {
    if (!pred.value().same_shape(target)) throw DimensionError("cosine_rows_loss: shape mismatch");
    const auto pm = pred.value().mat();
    const auto tm = target.mat();
    const auto R = pm.rows();
    T total = 0;
    for (Eigen::Index r = 0; r < R; ++r) {
        const T pn = pm.row(r).norm();
        const T tn = tm.row(r).norm();
        const T sim = (pn > T{0} && tn > T{0}) ? pm.row(r).dot(tm.row(r)) / (pn * tn) : T{0};
        total += T(1) - sim;
    }
    const T loss = R > 0 ? total / static_cast<T>(R) : T{0};
    return pred.graph()->emit(Tensor<T>::scalar(loss), {pred},
                              [pred, target](Graph<T>& g, const Tensor<T>& up, const Tensor<T>&) {
                                  const auto p = pred.value().mat();
                                  const auto a = target.mat();
                                  auto gp = g.grad_accumulator(pred.id()).mat();
                                  const T k = up[0] / static_cast<T>(p.rows());
                                  for (Eigen::Index r = 0; r < p.rows(); ++r) {
                                      const T pn = p.row(r).norm();
                                      const T an = a.row(r).norm();
                                      if (!(pn > T{0} && an > T{0})) continue;
                                      const T cs = p.row(r).dot(a.row(r)) / (pn * an);
                                      gp.row(r) -= k * (a.row(r) / (pn * an) - cs * p.row(r) / (pn * pn));
                                  }
                              });
}

// ---------------------------------------------------------------------------
// Attention

/// Multi-head scaled dot-product attention over pre-projected q, k, v.
/// Heads split the feature axis into equal contiguous blocks. No masking.
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t heads) {
    const auto& qv = q.value();
    const auto& kv = k.value();
    const auto& vv = v.value();
    const std::size_t D = qv.cols();
    if (heads == 0 || D % heads != 0)
        throw ConfigError("attention: feature dim " + std::to_string(D) + " not divisible by " + std::to_string(heads) +
                          " heads");
    if (kv.cols() != D || vv.cols() != D || kv.rows() != vv.rows())
        throw DimensionError("attention: q/k/v extents disagree");
    if (kv.rows() == 0) throw DimensionError("attention: no keys");
    const auto dh = static_cast<Eigen::Index>(D / heads);
    const T sc = T(1) / std::sqrt(static_cast<T>(dh));
    const auto Tq = static_cast<Eigen::Index>(qv.rows());
    const auto Tk = static_cast<Eigen::Index>(kv.rows());

    auto probs = std::make_shared<std::vector<RowMatrix<T>>>(heads);
    Tensor<T> out = Tensor<T>::matrix(qv.rows(), D);
    for (std::size_t h = 0; h < heads; ++h) {
        const auto c0 = static_cast<Eigen::Index>(h) * dh;
        RowMatrix<T>& P = (*probs)[h];
        P.resize(Tq, Tk);
        P.noalias() = qv.mat().middleCols(c0, dh) * kv.mat().middleCols(c0, dh).transpose();
        P *= sc;
        for (Eigen::Index r = 0; r < Tq; ++r) {
            const T m = P.row(r).maxCoeff();
            P.row(r).array() = (P.row(r).array() - m).exp();
            P.row(r) /= P.row(r).sum();
        }
        out.mat().middleCols(c0, dh).noalias() = P * vv.mat().middleCols(c0, dh);
    }
    return q.graph()->emit(
        std::move(out), {q, k, v}, [q, k, v, heads, dh, sc, probs](Graph<T>& g, const Tensor<T>& up, const Tensor<T>&) {
            const bool wq = detail::wants(g, q), wk = detail::wants(g, k), wv = detail::wants(g, v);
            RowMatrix<T> dP, dS;
            for (std::size_t h = 0; h < heads; ++h) {
                const auto c0 = static_cast<Eigen::Index>(h) * dh;
                const RowMatrix<T>& P = (*probs)[h];
                const auto G = up.mat().middleCols(c0, dh);
                if (wv) g.grad_accumulator(v.id()).mat().middleCols(c0, dh).noalias() += P.transpose() * G;
                if (!wq && !wk) continue;
                dP.noalias() = G * v.value().mat().middleCols(c0, dh).transpose();
                const Eigen::Matrix<T, Eigen::Dynamic, 1> rs = (dP.array() * P.array()).rowwise().sum();
                dS = P.array() * (dP.array().colwise() - rs.array());
                dS *= sc;
                if (wq) g.grad_accumulator(q.id()).mat().middleCols(c0, dh).noalias() += dS * k.value().mat().middleCols(c0, dh);
                if (wk)
                    g.grad_accumulator(k.id()).mat().middleCols(c0, dh).noalias() +=
                        dS.transpose() * q.value().mat().middleCols(c0, dh);
            }
        });
}

}  // namespace samsep::ag
