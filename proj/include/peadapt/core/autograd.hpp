#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. Every value in a model is a Var; operations record a backward
// closure when at least one input requires a gradient.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "peadapt/core/error.hpp"

namespace peadapt {

template <typename S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

namespace ag {

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <typename S>
struct Node {
    Matrix<S> value;
    Matrix<S> grad;  // empty until something is accumulated
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(const Matrix<S>&)> backward;

    template <typename E>
    void accumulate(const E& g) {
        if (grad.size() == 0) {
            grad = g;
        } else {
            grad += g;
        }
    }
};

template <typename S>
class Var {
public:
    Var() = default;
    explicit Var(Matrix<S> value, bool requires_grad = false)
        : node_(std::make_shared<Node<S>>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }

    bool defined() const { return node_ != nullptr; }
    const Matrix<S>& value() const { return node_->value; }
    /// Direct access for optimizers and loaders; never used inside a recorded graph.
    Matrix<S>& mutable_value() { return node_->value; }
    const Matrix<S>& grad() const { return node_->grad; }
    bool has_grad() const { return node_->grad.size() != 0; }
    void zero_grad() { node_->grad.resize(0, 0); }
    Index rows() const { return node_->value.rows(); }
    Index cols() const { return node_->value.cols(); }
    Index size() const { return node_->value.size(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }
    Node<S>* node() const { return node_.get(); }
    const std::shared_ptr<Node<S>>& shared() const { return node_; }

    template <typename E>
    void accumulate(const E& g) const {
        if (requires_grad()) {
            node_->accumulate(g);
        }
    }

private:
    std::shared_ptr<Node<S>> node_;
};

template <typename S>
Var<S> constant(Matrix<S> value) {
    return Var<S>(std::move(value), false);
}

/// Creates an op result. The backward closure receives the upstream gradient.
template <typename S>
Var<S> make_op(Matrix<S> value, std::vector<Var<S>> inputs,
               std::function<void(const Matrix<S>&)> backward, bool force_grad = false) {
    Var<S> out(std::move(value), false);
    if (!grad_mode_flag()) {
        return out;
    }
    bool any = force_grad;
    for (const auto& in : inputs) {
        any = any || in.requires_grad();
    }
    if (!any) {
        return out;
    }
    auto* n = out.node();
    n->requires_grad = true;
    n->inputs.reserve(inputs.size());
    for (const auto& in : inputs) {
        n->inputs.push_back(in.shared());
    }
    n->backward = std::move(backward);
    return out;
}

/// Runs reverse accumulation from `root`, seeding with ones (or `seed`).
template <typename S>
void backward(const Var<S>& root, const Matrix<S>* seed = nullptr) {
    if (!root.requires_grad()) {
        return;
    }
    std::vector<Node<S>*> order;
    std::unordered_set<Node<S>*> visited;
    std::vector<std::pair<Node<S>*, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    visited.insert(root.node());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->inputs.size()) {
            Node<S>* child = n->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) {
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    if (seed) {
        root.node()->accumulate(*seed);
    } else {
        root.node()->accumulate(Matrix<S>::Ones(root.rows(), root.cols()));
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<S>* n = *it;
        if (n->backward && n->grad.size() != 0) {
            n->backward(n->grad);
        }
    }
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
    check_dims("matmul rhs", b.rows(), b.cols(), a.cols(), -1);
    return make_op<S>(a.value() * b.value(), {a, b}, [a, b](const Matrix<S>& g) {
        a.accumulate(g * b.value().transpose());
        b.accumulate(a.value().transpose() * g);
    });
}

/// a * b^T
template <typename S>
Var<S> matmul_nt(const Var<S>& a, const Var<S>& b) {
    check_dims("matmul_nt rhs", b.rows(), b.cols(), -1, a.cols());
    return make_op<S>(a.value() * b.value().transpose(), {a, b}, [a, b](const Matrix<S>& g) {
        a.accumulate(g * b.value());
        b.accumulate(g.transpose() * a.value());
    });
}

/// x * W^T + b, with W stored out x in and b stored 1 x out (optional).
template <typename S>
Var<S> linear(const Var<S>& x, const Var<S>& w, const Var<S>& b = Var<S>()) {
    check_dims("linear weight", w.rows(), w.cols(), -1, x.cols());
    Matrix<S> y = x.value() * w.value().transpose();
    if (b.defined()) {
        check_dims("linear bias", b.rows(), b.cols(), 1, w.rows());
        y.rowwise() += b.value().row(0);
    }
    std::vector<Var<S>> ins{x, w};
    if (b.defined()) {
        ins.push_back(b);
    }
    return make_op<S>(std::move(y), std::move(ins), [x, w, b](const Matrix<S>& g) {
        x.accumulate(g * w.value());
        w.accumulate(g.transpose() * x.value());
        if (b.defined()) {
            b.accumulate(g.colwise().sum());
        }
    });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
    check_dims("add", b.rows(), b.cols(), a.rows(), a.cols());
    return make_op<S>(a.value() + b.value(), {a, b}, [a, b](const Matrix<S>& g) {
        a.accumulate(g);
        b.accumulate(g);
    });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
    check_dims("sub", b.rows(), b.cols(), a.rows(), a.cols());
    return make_op<S>(a.value() - b.value(), {a, b}, [a, b](const Matrix<S>& g) {
        a.accumulate(g);
        b.accumulate(-g);
    });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
    check_dims("mul", b.rows(), b.cols(), a.rows(), a.cols());
    return make_op<S>(a.value().cwiseProduct(b.value()), {a, b}, [a, b](const Matrix<S>& g) {
        a.accumulate(g.cwiseProduct(b.value()));
        b.accumulate(g.cwiseProduct(a.value()));
    });
}

template <typename S>
Var<S> scale(const Var<S>& a, S c) {
    return make_op<S>(a.value() * c, {a}, [a, c](const Matrix<S>& g) { a.accumulate(g * c); });
}

/// Adds a 1 x n row to every row of `a`.
template <typename S>
Var<S> add_row(const Var<S>& a, const Var<S>& row) {
    check_dims("add_row", row.rows(), row.cols(), 1, a.cols());
    Matrix<S> y = a.value();
    y.rowwise() += row.value().row(0);
    return make_op<S>(std::move(y), {a, row}, [a, row](const Matrix<S>& g) {
        a.accumulate(g);
        row.accumulate(g.colwise().sum());
    });
}

/// Multiplies row i of `a` by s(i, 0).
template <typename S>
Var<S> mul_rows(const Var<S>& a, const Var<S>& s) {
    check_dims("mul_rows scale", s.rows(), s.cols(), a.rows(), 1);
    Matrix<S> y = a.value().array().colwise() * s.value().col(0).array();
    return make_op<S>(std::move(y), {a, s}, [a, s](const Matrix<S>& g) {
        a.accumulate((g.array().colwise() * s.value().col(0).array()).matrix());
        s.accumulate(g.cwiseProduct(a.value()).rowwise().sum());
    });
}

/// Multiplies every entry of `a` by the 1 x 1 value `s`.
template <typename S>
Var<S> mul_scalar(const Var<S>& a, const Var<S>& s) {
    check_dims("mul_scalar", s.rows(), s.cols(), 1, 1);
    const S c = s.value()(0, 0);
    return make_op<S>(a.value() * c, {a, s}, [a, s](const Matrix<S>& g) {
        a.accumulate(g * s.value()(0, 0));
        Matrix<S> gs(1, 1);
        gs(0, 0) = g.cwiseProduct(a.value()).sum();
        s.accumulate(gs);
    });
}

// ---------------------------------------------------------------------------
// Activations

template <typename S>
Var<S> relu(const Var<S>& x) {
    Matrix<S> y = x.value().cwiseMax(S(0));
    return make_op<S>(std::move(y), {x}, [x](const Matrix<S>& g) {
        x.accumulate((x.value().array() > S(0)).select(g, S(0)).matrix());
    });
}

template <typename S>
Var<S> sigmoid(const Var<S>& x) {
    Matrix<S> y = x.value().unaryExpr([](S v) { return S(1) / (S(1) + std::exp(-v)); });
    Matrix<S> yc = y;
    return make_op<S>(std::move(y), {x}, [x, yc](const Matrix<S>& g) {
        x.accumulate((g.array() * yc.array() * (S(1) - yc.array())).matrix());
    });
}

template <typename S>
Var<S> tanh(const Var<S>& x) {
    Matrix<S> y = x.value().array().tanh().matrix();
    Matrix<S> yc = y;
    return make_op<S>(std::move(y), {x}, [x, yc](const Matrix<S>& g) {
        x.accumulate((g.array() * (S(1) - yc.array().square())).matrix());
    });
}

template <typename S>
Var<S> exp(const Var<S>& x) {
    Matrix<S> y = x.value().array().exp().matrix();
    Matrix<S> yc = y;
    return make_op<S>(std::move(y), {x}, [x, yc](const Matrix<S>& g) {
        x.accumulate(g.cwiseProduct(yc));
    });
}

/// Exact (erf-based) GELU.
template <typename S>
Var<S> gelu(const Var<S>& x) {
    const S inv_sqrt2 = S(1) / std::sqrt(S(2));
    Matrix<S> y = x.value().unaryExpr(
        [inv_sqrt2](S v) { return S(0.5) * v * (S(1) + std::erf(v * inv_sqrt2)); });
    return make_op<S>(std::move(y), {x}, [x, inv_sqrt2](const Matrix<S>& g) {
        const S inv_sqrt_2pi = S(1) / std::sqrt(S(2) * S(M_PI));
        Matrix<S> d = x.value().unaryExpr([&](S v) {
            return S(0.5) * (S(1) + std::erf(v * inv_sqrt2)) +
                   v * inv_sqrt_2pi * std::exp(S(-0.5) * v * v);
        });
        x.accumulate(g.cwiseProduct(d));
    });
}

/// x * sigmoid(1.702 x), the activation used inside CLIP transformer MLPs.
template <typename S>
Var<S> quick_gelu(const Var<S>& x) {
    Matrix<S> sig = x.value().unaryExpr([](S v) { return S(1) / (S(1) + std::exp(S(-1.702) * v)); });
    Matrix<S> y = x.value().cwiseProduct(sig);
    return make_op<S>(std::move(y), {x}, [x, sig](const Matrix<S>& g) {
        Matrix<S> d = (sig.array() + S(1.702) * x.value().array() * sig.array() * (S(1) - sig.array())).matrix();
        x.accumulate(g.cwiseProduct(d));
    });
}

// ---------------------------------------------------------------------------
// Normalisation

/// Row-wise layer normalisation with 1 x d affine parameters.
template <typename S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, S eps = S(1e-5)) {
    check_dims("layer_norm gamma", gamma.rows(), gamma.cols(), 1, x.cols());
    check_dims("layer_norm beta", beta.rows(), beta.cols(), 1, x.cols());
    const Index n = x.rows();
    const Index d = x.cols();
    Matrix<S> xhat(n, d);
    Matrix<S> inv_std(n, 1);
    for (Index i = 0; i < n; ++i) {
        const S mu = x.value().row(i).mean();
        const S var = (x.value().row(i).array() - mu).square().mean();
        inv_std(i, 0) = S(1) / std::sqrt(var + eps);
        xhat.row(i) = (x.value().row(i).array() - mu) * inv_std(i, 0);
    }
    Matrix<S> y = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
    y.rowwise() += beta.value().row(0);
    return make_op<S>(std::move(y), {x, gamma, beta},
                      [x, gamma, beta, xhat, inv_std](const Matrix<S>& g) {
                          gamma.accumulate(g.cwiseProduct(xhat).colwise().sum());
                          beta.accumulate(g.colwise().sum());
                          if (!x.requires_grad()) {
                              return;
                          }
                          Matrix<S> dxhat = (g.array().rowwise() * gamma.value().row(0).array()).matrix();
                          Matrix<S> dx(g.rows(), g.cols());
                          for (Index i = 0; i < g.rows(); ++i) {
                              const S m1 = dxhat.row(i).mean();
                              const S m2 = dxhat.row(i).cwiseProduct(xhat.row(i)).mean();
                              dx.row(i) = (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2) * inv_std(i, 0);
                          }
                          x.accumulate(dx);
                      });
}

/// Scales each row to unit L2 norm.
template <typename S>
Var<S> normalize_rows(const Var<S>& x, S eps = S(1e-12)) {
    Matrix<S> norms = x.value().rowwise().norm().cwiseMax(eps);
    Matrix<S> y = (x.value().array().colwise() / norms.col(0).array()).matrix();
    Matrix<S> yc = y;
    return make_op<S>(std::move(y), {x}, [x, yc, norms](const Matrix<S>& g) {
        Matrix<S> dots = g.cwiseProduct(yc).rowwise().sum();
        Matrix<S> dx = ((g.array() - yc.array().colwise() * dots.col(0).array()).colwise() /
                        norms.col(0).array())
                           .matrix();
        x.accumulate(dx);
    });
}

// ---------------------------------------------------------------------------
// Structural ops

template <typename S>
Var<S> slice_rows(const Var<S>& x, Index start, Index count) {
    if (start < 0 || count < 0 || start + count > x.rows()) {
        throw ShapeError("slice_rows out of range");
    }
    return make_op<S>(x.value().middleRows(start, count), {x}, [x, start, count](const Matrix<S>& g) {
        if (!x.requires_grad()) {
            return;
        }
        Matrix<S> full = Matrix<S>::Zero(x.rows(), x.cols());
        full.middleRows(start, count) = g;
        x.accumulate(full);
    });
}

template <typename S>
Var<S> slice_cols(const Var<S>& x, Index start, Index count) {
    if (start < 0 || count < 0 || start + count > x.cols()) {
        throw ShapeError("slice_cols out of range");
    }
    return make_op<S>(x.value().middleCols(start, count), {x}, [x, start, count](const Matrix<S>& g) {
        if (!x.requires_grad()) {
            return;
        }
        Matrix<S> full = Matrix<S>::Zero(x.rows(), x.cols());
        full.middleCols(start, count) = g;
        x.accumulate(full);
    });
}

template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
    if (parts.empty()) {
        throw ShapeError("concat_rows of nothing");
    }
    Index total = 0;
    for (const auto& p : parts) {
        check_dims("concat_rows part", p.rows(), p.cols(), -1, parts.front().cols());
        total += p.rows();
    }
    Matrix<S> y(total, parts.front().cols());
    Index at = 0;
    for (const auto& p : parts) {
        y.middleRows(at, p.rows()) = p.value();
        at += p.rows();
    }
    return make_op<S>(std::move(y), parts, [parts](const Matrix<S>& g) {
        Index off = 0;
        for (const auto& p : parts) {
            p.accumulate(g.middleRows(off, p.rows()));
            off += p.rows();
        }
    });
}

template <typename S>
Var<S> gather_rows(const Var<S>& x, std::vector<Index> idx) {
    Matrix<S> y(static_cast<Index>(idx.size()), x.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= x.rows()) {
            throw ShapeError("gather_rows index out of range");
        }
        y.row(static_cast<Index>(i)) = x.value().row(idx[i]);
    }
    return make_op<S>(std::move(y), {x}, [x, idx](const Matrix<S>& g) {
        if (!x.requires_grad()) {
            return;
        }
        Matrix<S> full = Matrix<S>::Zero(x.rows(), x.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            full.row(idx[i]) += g.row(static_cast<Index>(i));
        }
        x.accumulate(full);
    });
}

/// Returns `base` with x.row(i) added onto base.row(idx[i]).
template <typename S>
Var<S> add_at_rows(const Var<S>& base, const Var<S>& x, std::vector<Index> idx) {
    check_dims("add_at_rows", x.rows(), x.cols(), static_cast<Index>(idx.size()), base.cols());
    Matrix<S> y = base.value();
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= base.rows()) {
            throw ShapeError("add_at_rows index out of range");
        }
        y.row(idx[i]) += x.value().row(static_cast<Index>(i));
    }
    return make_op<S>(std::move(y), {base, x}, [base, x, idx](const Matrix<S>& g) {
        base.accumulate(g);
        if (!x.requires_grad()) {
            return;
        }
        Matrix<S> gx(x.rows(), x.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            gx.row(static_cast<Index>(i)) = g.row(idx[i]);
        }
        x.accumulate(gx);
    });
}

template <typename S>
Var<S> mean_rows(const Var<S>& x) {
    const Index n = x.rows();
    if (n == 0) {
        throw ShapeError("mean_rows of empty matrix");
    }
    return make_op<S>(x.value().colwise().mean(), {x}, [x, n](const Matrix<S>& g) {
        x.accumulate(g.replicate(n, 1) / S(n));
    });
}

template <typename S>
Var<S> sum(const Var<S>& x) {
    Matrix<S> y(1, 1);
    y(0, 0) = x.value().sum();
    return make_op<S>(std::move(y), {x}, [x](const Matrix<S>& g) {
        x.accumulate(Matrix<S>::Constant(x.rows(), x.cols(), g(0, 0)));
    });
}

/// sum(x .* w) for a constant weight matrix.
template <typename S>
Var<S> weighted_sum(const Var<S>& x, Matrix<S> w) {
    check_dims("weighted_sum", w.rows(), w.cols(), x.rows(), x.cols());
    Matrix<S> y(1, 1);
    y(0, 0) = x.value().cwiseProduct(w).sum();
    return make_op<S>(std::move(y), {x}, [x, w](const Matrix<S>& g) { x.accumulate(w * g(0, 0)); });
}

// ---------------------------------------------------------------------------
// Attention and losses

/// Per-(group, head) attention probabilities and, after backward, their gradients.
template <typename S>
struct AttentionTap {
    Index groups = 0;
    Index heads = 0;
    std::vector<Matrix<S>> probs;
    std::vector<Matrix<S>> grads;
};

/// Multi-head scaled dot-product self-attention over independent row groups.
///
/// `qkv` holds (groups * group_len) rows of [q | k | v]; attention never crosses
/// group boundaries. Returns the concatenated head outputs (before the output
/// projection). With a tap the op always records a gradient so that callers can
/// read d(loss)/d(probabilities) even when nothing upstream is trainable.
template <typename S>
Var<S> attention(const Var<S>& qkv, Index group_len, Index heads, bool causal,
                 AttentionTap<S>* tap = nullptr) {
    if (qkv.cols() % 3 != 0) {
        throw ShapeError("attention: qkv width must be a multiple of 3");
    }
    const Index d = qkv.cols() / 3;
    if (heads <= 0 || d % heads != 0) {
        throw ShapeError("attention: width " + std::to_string(d) + " not divisible by heads");
    }
    if (group_len <= 0 || qkv.rows() % group_len != 0) {
        throw ShapeError("attention: rows not a multiple of the group length");
    }
    const Index groups = qkv.rows() / group_len;
    const Index dh = d / heads;
    const S sc = S(1) / std::sqrt(S(dh));
    const Matrix<S>& in = qkv.value();
    Matrix<S> out(qkv.rows(), d);
    auto probs = std::make_shared<std::vector<Matrix<S>>>(static_cast<std::size_t>(groups * heads));
    for (Index g = 0; g < groups; ++g) {
        for (Index h = 0; h < heads; ++h) {
            auto q = in.block(g * group_len, h * dh, group_len, dh);
            auto k = in.block(g * group_len, d + h * dh, group_len, dh);
            auto v = in.block(g * group_len, 2 * d + h * dh, group_len, dh);
            Matrix<S> p = (q * k.transpose()) * sc;
            for (Index i = 0; i < group_len; ++i) {
                if (causal) {
                    for (Index j = i + 1; j < group_len; ++j) {
                        p(i, j) = -std::numeric_limits<S>::infinity();
                    }
                }
                const S mx = p.row(i).maxCoeff();
                p.row(i) = (p.row(i).array() - mx).exp();
                p.row(i) /= p.row(i).sum();
            }
            out.block(g * group_len, h * dh, group_len, dh) = p * v;
            (*probs)[static_cast<std::size_t>(g * heads + h)] = std::move(p);
        }
    }
    if (tap) {
        tap->groups = groups;
        tap->heads = heads;
        tap->probs = *probs;
        tap->grads.assign(probs->size(), Matrix<S>());
    }
    return make_op<S>(
        std::move(out), {qkv},
        [qkv, group_len, heads, groups, d, dh, sc, probs, tap](const Matrix<S>& gout) {
            const Matrix<S>& in = qkv.value();
            Matrix<S> gin;
            if (qkv.requires_grad()) {
                gin = Matrix<S>::Zero(in.rows(), in.cols());
            }
            for (Index g = 0; g < groups; ++g) {
                for (Index h = 0; h < heads; ++h) {
                    const Matrix<S>& p = (*probs)[static_cast<std::size_t>(g * heads + h)];
                    auto q = in.block(g * group_len, h * dh, group_len, dh);
                    auto k = in.block(g * group_len, d + h * dh, group_len, dh);
                    auto v = in.block(g * group_len, 2 * d + h * dh, group_len, dh);
                    auto dout = gout.block(g * group_len, h * dh, group_len, dh);
                    Matrix<S> dp = dout * v.transpose();
                    if (tap) {
                        tap->grads[static_cast<std::size_t>(g * heads + h)] = dp;
                    }
                    if (!qkv.requires_grad()) {
                        continue;
                    }
                    Matrix<S> ds = p.cwiseProduct(dp);
                    Matrix<S> rs = ds.rowwise().sum();
                    ds -= (p.array().colwise() * rs.col(0).array()).matrix();
                    gin.block(g * group_len, h * dh, group_len, dh) += (ds * k) * sc;
                    gin.block(g * group_len, d + h * dh, group_len, dh) += (ds.transpose() * q) * sc;
                    gin.block(g * group_len, 2 * d + h * dh, group_len, dh) += p.transpose() * dout;
                }
            }
            if (qkv.requires_grad()) {
                qkv.accumulate(gin);
            }
        },
        tap != nullptr);
}

/// Row-wise softmax of a constant matrix (no graph).
template <typename S>
Matrix<S> softmax_rows(const Matrix<S>& z) {
    Matrix<S> p(z.rows(), z.cols());
    for (Index i = 0; i < z.rows(); ++i) {
        const S mx = z.row(i).maxCoeff();
        p.row(i) = (z.row(i).array() - mx).exp();
        p.row(i) /= p.row(i).sum();
    }
    return p;
}

/// Mean over rows of -sum_c y_c log softmax(z)_c, for soft targets y.
template <typename S>
Var<S> soft_cross_entropy(const Var<S>& logits, const Matrix<S>& targets) {
    check_dims("soft_cross_entropy targets", targets.rows(), targets.cols(), logits.rows(), logits.cols());
    const Index n = logits.rows();
    if (n == 0) {
        throw ShapeError("soft_cross_entropy on empty batch");
    }
    Matrix<S> p = softmax_rows(logits.value());
    S total = 0;
    for (Index i = 0; i < n; ++i) {
        const S mx = logits.value().row(i).maxCoeff();
        const S lse = mx + std::log((logits.value().row(i).array() - mx).exp().sum());
        for (Index c = 0; c < logits.cols(); ++c) {
            if (targets(i, c) != S(0)) {
                total -= targets(i, c) * (logits.value()(i, c) - lse);
            }
        }
    }
    Matrix<S> y(1, 1);
    y(0, 0) = total / S(n);
    return make_op<S>(std::move(y), {logits}, [logits, targets, p, n](const Matrix<S>& g) {
        Matrix<S> rs = targets.rowwise().sum();
        Matrix<S> dz = ((p.array().colwise() * rs.col(0).array()) - targets.array()).matrix();
        logits.accumulate(dz * (g(0, 0) / S(n)));
    });
}

}  // namespace ag
}  // namespace peadapt
