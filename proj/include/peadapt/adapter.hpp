#pragma once

// Bottleneck adapters (shared and textual), the recurrent temporal adapter and
// its dynamic per-frame scaling. All adapters return the additive delta; the
// host composes residuals.

#include <string>
#include <vector>

#include "peadapt/core/autograd.hpp"
#include "peadapt/core/error.hpp"
#include "peadapt/core/rng.hpp"

namespace peadapt {

enum class ScalePlacement { none, input_level, recurrent_output, post_up_projection };
enum class CellKind { vanilla, rnn, lstm, gru };

inline const char* to_string(ScalePlacement p) {
    switch (p) {
    case ScalePlacement::none: return "none";
    case ScalePlacement::input_level: return "input_level";
    case ScalePlacement::recurrent_output: return "recurrent_output";
    case ScalePlacement::post_up_projection: return "post_up_projection";
    }
    return "?";
}

inline const char* to_string(CellKind k) {
    switch (k) {
    case CellKind::vanilla: return "vanilla";
    case CellKind::rnn: return "rnn";
    case CellKind::lstm: return "lstm";
    case CellKind::gru: return "gru";
    }
    return "?";
}

inline ScalePlacement parse_scale_placement(const std::string& s) {
    for (auto p : {ScalePlacement::none, ScalePlacement::input_level, ScalePlacement::recurrent_output,
                   ScalePlacement::post_up_projection}) {
        if (s == to_string(p)) {
            return p;
        }
    }
    throw ConfigError("unknown scale placement '" + s + "'");
}

inline CellKind parse_cell_kind(const std::string& s) {
    for (auto k : {CellKind::vanilla, CellKind::rnn, CellKind::lstm, CellKind::gru}) {
        if (s == to_string(k)) {
            return k;
        }
    }
    throw ConfigError("unknown cell kind '" + s + "'");
}

/// Gate count of a recurrent cell (rows of its stacked weight matrices per hidden unit).
inline Index gate_count(CellKind k) {
    switch (k) {
    case CellKind::vanilla: return 0;
    case CellKind::rnn: return 1;
    case CellKind::lstm: return 4;
    case CellKind::gru: return 3;
    }
    return 0;
}

struct AdapterConfig {
    Index model_dim = 0;
    Index reduction = 8;
    ScalePlacement scale_placement = ScalePlacement::post_up_projection;
    CellKind cell_kind = CellKind::gru;
    /// Width of the dynamic scale projection; 1 means one scalar per frame.
    Index scale_out = 1;

    Index hidden_dim() const { return reduction > 0 ? model_dim / reduction : 0; }

    void validate() const {
        if (model_dim <= 0) {
            throw ConfigError("adapter model_dim must be positive, got " + std::to_string(model_dim));
        }
        if (reduction <= 0) {
            throw ConfigError("adapter reduction must be positive, got " + std::to_string(reduction));
        }
        if (hidden_dim() < 1) {
            throw ConfigError("adapter hidden_dim floor(" + std::to_string(model_dim) + "/" +
                              std::to_string(reduction) + ") is zero");
        }
        if (scale_out < 1) {
            throw ConfigError("scale_out must be at least 1");
        }
        if (scale_out != 1) {
            const Index target = scale_placement == ScalePlacement::recurrent_output ? hidden_dim() : model_dim;
            if (scale_out != target) {
                throw ConfigError("scale_out must be 1 or the width of the scaled tensor (" +
                                  std::to_string(target) + "), got " + std::to_string(scale_out));
            }
        }
    }
};

namespace detail {

template <typename S>
ag::Var<S> param(Matrix<S> m) {
    return ag::Var<S>(std::move(m), true);
}

template <typename S>
Matrix<S> uniform_matrix(Index rows, Index cols, S bound, Rng& rng) {
    Matrix<S> m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) {
        m.data()[i] = static_cast<S>(rng.uniform(-1.0, 1.0)) * bound;
    }
    return m;
}

inline void check_model_dim(const char* what, Index got, Index expected) {
    if (got != expected) {
        throw ShapeError(std::string(what) + ": expected feature width " + std::to_string(expected) +
                         ", got " + std::to_string(got));
    }
}

}  // namespace detail

/// Down/up projection pair with biases (ShA and TA share this layout).
template <typename S>
struct BottleneckAdapter {
    ag::Var<S> down_w;  // hidden x model
    ag::Var<S> down_b;  // 1 x hidden
    ag::Var<S> up_w;    // model x hidden
    ag::Var<S> up_b;    // 1 x model

    Index model_dim() const { return down_w.cols(); }
    Index hidden_dim() const { return down_w.rows(); }

    /// Fan-in uniform down projection, zero up projection: the delta starts at exactly zero.
    static BottleneckAdapter init(const AdapterConfig& cfg, Rng& rng) {
        cfg.validate();
        const Index d = cfg.model_dim;
        const Index h = cfg.hidden_dim();
        BottleneckAdapter a;
        a.down_w = detail::param<S>(detail::uniform_matrix<S>(h, d, S(1) / std::sqrt(S(d)), rng));
        a.down_b = detail::param<S>(Matrix<S>::Zero(1, h));
        a.up_w = detail::param<S>(Matrix<S>::Zero(d, h));
        a.up_b = detail::param<S>(Matrix<S>::Zero(1, d));
        return a;
    }

    template <typename F>
    void visit(F&& f, const std::string& prefix) {
        f(prefix + ".down.weight", down_w);
        f(prefix + ".down.bias", down_b);
        f(prefix + ".up.weight", up_w);
        f(prefix + ".up.bias", up_b);
    }
};

/// Recurrent cell over the bottleneck width, PyTorch gate layout
/// (rnn: [h]; gru: [r, z, n]; lstm: [i, f, g, o]).
template <typename S>
struct RecurrentCell {
    CellKind kind = CellKind::gru;
    ag::Var<S> w_ih, w_hh, b_ih, b_hh;

    static RecurrentCell init(CellKind kind, Index hidden, Rng& rng) {
        RecurrentCell c;
        c.kind = kind;
        const Index g = gate_count(kind);
        if (g == 0) {
            return c;
        }
        const S bound = S(1) / std::sqrt(S(hidden));
        c.w_ih = detail::param<S>(detail::uniform_matrix<S>(g * hidden, hidden, bound, rng));
        c.w_hh = detail::param<S>(detail::uniform_matrix<S>(g * hidden, hidden, bound, rng));
        c.b_ih = detail::param<S>(Matrix<S>::Zero(1, g * hidden));
        c.b_hh = detail::param<S>(Matrix<S>::Zero(1, g * hidden));
        return c;
    }

    template <typename F>
    void visit(F&& f, const std::string& prefix) {
        if (kind == CellKind::vanilla) {
            return;
        }
        f(prefix + ".weight_ih", w_ih);
        f(prefix + ".weight_hh", w_hh);
        f(prefix + ".bias_ih", b_ih);
        f(prefix + ".bias_hh", b_hh);
    }
};

template <typename S>
struct TemporalAdapter {
    ag::Var<S> down_w, down_b, up_w, up_b;
    RecurrentCell<S> cell;
    ag::Var<S> scale_w;  // scale_out x model
    ag::Var<S> scale_b;  // 1 x scale_out

    Index model_dim() const { return down_w.cols(); }
    Index hidden_dim() const { return down_w.rows(); }

    /// Zero up projection, zero scale weights and unit scale bias: identity at step 0.
    static TemporalAdapter init(const AdapterConfig& cfg, Rng& rng) {
        cfg.validate();
        const Index d = cfg.model_dim;
        const Index h = cfg.hidden_dim();
        TemporalAdapter a;
        a.down_w = detail::param<S>(detail::uniform_matrix<S>(h, d, S(1) / std::sqrt(S(d)), rng));
        a.down_b = detail::param<S>(Matrix<S>::Zero(1, h));
        a.up_w = detail::param<S>(Matrix<S>::Zero(d, h));
        a.up_b = detail::param<S>(Matrix<S>::Zero(1, d));
        a.cell = RecurrentCell<S>::init(cfg.cell_kind, h, rng);
        a.scale_w = detail::param<S>(Matrix<S>::Zero(cfg.scale_out, d));
        a.scale_b = detail::param<S>(Matrix<S>::Ones(1, cfg.scale_out));
        return a;
    }

    template <typename F>
    void visit(F&& f, const std::string& prefix) {
        f(prefix + ".down.weight", down_w);
        f(prefix + ".down.bias", down_b);
        cell.visit(f, prefix + ".cell");
        f(prefix + ".up.weight", up_w);
        f(prefix + ".up.bias", up_b);
        f(prefix + ".scale.weight", scale_w);
        f(prefix + ".scale.bias", scale_b);
    }
};

template <typename P>
Index count_params(P& params) {
    Index n = 0;
    params.visit([&n](const std::string&, auto& v) { n += v.size(); }, "");
    return n;
}

// ---------------------------------------------------------------------------
// Graph-level forward functions

/// Up(GELU(Down(x))) row-wise.
template <typename S>
ag::Var<S> bottleneck_delta(const ag::Var<S>& x, const BottleneckAdapter<S>& p) {
    detail::check_model_dim("bottleneck adapter input", x.cols(), p.model_dim());
    return ag::linear(ag::gelu(ag::linear(x, p.down_w, p.down_b)), p.up_w, p.up_b);
}

/// ReLU(linear(x)): one nonnegative scale row per input row.
template <typename S>
ag::Var<S> dynamic_scale(const ag::Var<S>& x, const TemporalAdapter<S>& p) {
    detail::check_model_dim("dynamic scale input", x.cols(), p.model_dim());
    return ag::relu(ag::linear(x, p.scale_w, p.scale_b));
}

namespace detail {

template <typename S>
ag::Var<S> apply_scale(const ag::Var<S>& x, const ag::Var<S>& s) {
    if (s.cols() == 1) {
        return ag::mul_rows(x, s);
    }
    return ag::mul(x, s);
}

template <typename S>
struct CellState {
    ag::Var<S> h;
    ag::Var<S> c;
};

template <typename S>
CellState<S> cell_step(const RecurrentCell<S>& cell, const ag::Var<S>& x, const CellState<S>& st) {
    const Index hd = x.cols();
    auto gi = ag::linear(x, cell.w_ih, cell.b_ih);
    auto gh = ag::linear(st.h, cell.w_hh, cell.b_hh);
    switch (cell.kind) {
    case CellKind::rnn:
        return {ag::tanh(ag::add(gi, gh)), {}};
    case CellKind::gru: {
        auto r = ag::sigmoid(ag::add(ag::slice_cols(gi, 0, hd), ag::slice_cols(gh, 0, hd)));
        auto z = ag::sigmoid(ag::add(ag::slice_cols(gi, hd, hd), ag::slice_cols(gh, hd, hd)));
        auto n = ag::tanh(ag::add(ag::slice_cols(gi, 2 * hd, hd), ag::mul(r, ag::slice_cols(gh, 2 * hd, hd))));
        // (1 - z) * n + z * h == n + z * (h - n)
        return {ag::add(n, ag::mul(z, ag::sub(st.h, n))), {}};
    }
    case CellKind::lstm: {
        auto pre = ag::add(gi, gh);
        auto i = ag::sigmoid(ag::slice_cols(pre, 0, hd));
        auto f = ag::sigmoid(ag::slice_cols(pre, hd, hd));
        auto g = ag::tanh(ag::slice_cols(pre, 2 * hd, hd));
        auto o = ag::sigmoid(ag::slice_cols(pre, 3 * hd, hd));
        auto c = ag::add(ag::mul(f, st.c), ag::mul(i, g));
        return {ag::mul(o, ag::tanh(c)), c};
    }
    case CellKind::vanilla:
        break;
    }
    throw ConfigError("cell_step called on a vanilla cell");
}

}  // namespace detail

/// Temporal adapter over `steps` time steps of `streams` parallel sequences.
///
/// `x` stacks rows time-major: rows [t*streams, (t+1)*streams) are step t.
/// Every stream runs the same cell with its own hidden state starting at zero.
/// The vanilla cell has no recurrence and ignores the input-level and
/// recurrent-output placements.
template <typename S>
ag::Var<S> temporal_delta(const ag::Var<S>& x, Index steps, Index streams, const TemporalAdapter<S>& p,
                          ScalePlacement placement) {
    if (steps <= 0 || streams <= 0 || x.rows() == 0) {
        throw InputError("temporal adapter: empty sequence");
    }
    if (x.rows() != steps * streams) {
        throw ShapeError("temporal adapter: expected " + std::to_string(steps * streams) + " rows, got " +
                         std::to_string(x.rows()));
    }
    detail::check_model_dim("temporal adapter input", x.cols(), p.model_dim());
    const bool recurrent = p.cell.kind != CellKind::vanilla;
    ScalePlacement where = placement;
    if (!recurrent && (where == ScalePlacement::input_level || where == ScalePlacement::recurrent_output)) {
        where = ScalePlacement::none;
    }
    ag::Var<S> s;
    if (where != ScalePlacement::none) {
        s = dynamic_scale(x, p);
    }
    auto in = where == ScalePlacement::input_level ? detail::apply_scale(x, s) : x;
    auto down = ag::linear(in, p.down_w, p.down_b);
    ag::Var<S> hidden = down;
    if (recurrent) {
        const Index hd = p.hidden_dim();
        detail::CellState<S> st{ag::constant<S>(Matrix<S>::Zero(streams, hd)),
                                ag::constant<S>(Matrix<S>::Zero(streams, hd))};
        std::vector<ag::Var<S>> hs;
        hs.reserve(static_cast<std::size_t>(steps));
        for (Index t = 0; t < steps; ++t) {
            st = detail::cell_step(p.cell, ag::slice_rows(down, t * streams, streams), st);
            hs.push_back(st.h);
        }
        hidden = steps == 1 ? hs.front() : ag::concat_rows(hs);
    }
    if (where == ScalePlacement::recurrent_output) {
        hidden = detail::apply_scale(hidden, s);
    }
    auto up = ag::linear(ag::gelu(hidden), p.up_w, p.up_b);
    if (where == ScalePlacement::post_up_projection) {
        up = detail::apply_scale(up, s);
    }
    return up;
}

// ---------------------------------------------------------------------------
// Pure value-level entry points

/// Shared adapter delta for post-attention features (T_tok x d).
template <typename S>
Matrix<S> sha_forward(const Matrix<S>& h_attn, const BottleneckAdapter<S>& params) {
    ag::NoGradGuard ng;
    return bottleneck_delta(ag::constant(h_attn), params).value();
}

/// Textual adapter delta for post-MLP text features.
template <typename S>
Matrix<S> ta_forward(const Matrix<S>& h_mlp, const BottleneckAdapter<S>& params) {
    ag::NoGradGuard ng;
    return bottleneck_delta(ag::constant(h_mlp), params).value();
}

template <typename S>
Matrix<S> dynamic_scale(const Matrix<S>& h_mlp, const TemporalAdapter<S>& params) {
    ag::NoGradGuard ng;
    return dynamic_scale(ag::constant(h_mlp), params).value();
}

/// Temporal adapter delta for one per-frame feature sequence (T x d).
template <typename S>
Matrix<S> tda_forward(const Matrix<S>& h_mlp, const TemporalAdapter<S>& params, const AdapterConfig& cfg) {
    if (params.cell.kind != cfg.cell_kind) {
        throw ConfigError(std::string("temporal adapter built for cell '") + to_string(params.cell.kind) +
                          "' but config selects '" + to_string(cfg.cell_kind) + "'");
    }
    ag::NoGradGuard ng;
    return temporal_delta(ag::constant(h_mlp), h_mlp.rows(), 1, params, cfg.scale_placement).value();
}

}  // namespace peadapt
