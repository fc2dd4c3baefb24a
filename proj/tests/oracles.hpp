#pragma once

// Scalar-loop reference implementations used only by the tests. They share
// no code with the library beyond reading parameter values.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <vector>

#include "peadapt/peadapt.hpp"

namespace oracle {

struct M {
    long rows = 0, cols = 0;
    std::vector<double> v;
    M() = default;
    M(long r, long c, double fill = 0.0) : rows(r), cols(c), v(static_cast<std::size_t>(r * c), fill) {}
    double& operator()(long i, long j) { return v[static_cast<std::size_t>(i * cols + j)]; }
    double operator()(long i, long j) const { return v[static_cast<std::size_t>(i * cols + j)]; }
};

template <typename Mat>
M from(const Mat& m) {
    M o(m.rows(), m.cols());
    for (long i = 0; i < m.rows(); ++i)
        for (long j = 0; j < m.cols(); ++j) o(i, j) = static_cast<double>(m(i, j));
    return o;
}

inline peadapt::Matrix<double> to_eigen(const M& m) {
    peadapt::Matrix<double> o(m.rows, m.cols);
    for (long i = 0; i < m.rows; ++i)
        for (long j = 0; j < m.cols; ++j) o(i, j) = m(i, j);
    return o;
}

inline double max_abs_diff(const M& a, const M& b) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.v.size(); ++i) d = std::max(d, std::abs(a.v[i] - b.v[i]));
    return d;
}

template <typename Mat>
double max_abs_diff(const Mat& a, const M& b) {
    return max_abs_diff(from(a), b);
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }
inline double quick_gelu(double x) { return x / (1.0 + std::exp(-1.702 * x)); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// y[i][o] = sum_k x[i][k] * w[o][k] + b[o]   (w is out x in)
inline M affine(const M& x, const M& w, const M* b) {
    M y(x.rows, w.rows);
    for (long i = 0; i < x.rows; ++i) {
        for (long o = 0; o < w.rows; ++o) {
            double s = b ? (*b)(0, o) : 0.0;
            for (long k = 0; k < x.cols; ++k) s += x(i, k) * w(o, k);
            y(i, o) = s;
        }
    }
    return y;
}

/// y = x * w   (w is in x out)
inline M right_mul(const M& x, const M& w) {
    M y(x.rows, w.cols);
    for (long i = 0; i < x.rows; ++i)
        for (long o = 0; o < w.cols; ++o) {
            double s = 0;
            for (long k = 0; k < x.cols; ++k) s += x(i, k) * w(k, o);
            y(i, o) = s;
        }
    return y;
}

inline M map(const M& x, double (*f)(double)) {
    M y = x;
    for (auto& e : y.v) e = f(e);
    return y;
}

inline M add(const M& a, const M& b) {
    M y = a;
    for (std::size_t i = 0; i < y.v.size(); ++i) y.v[i] += b.v[i];
    return y;
}

inline M layer_norm(const M& x, const M& g, const M& b, double eps = 1e-5) {
    M y(x.rows, x.cols);
    for (long i = 0; i < x.rows; ++i) {
        double mean = 0;
        for (long j = 0; j < x.cols; ++j) mean += x(i, j);
        mean /= x.cols;
        double var = 0;
        for (long j = 0; j < x.cols; ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
        var /= x.cols;
        for (long j = 0; j < x.cols; ++j) y(i, j) = (x(i, j) - mean) / std::sqrt(var + eps) * g(0, j) + b(0, j);
    }
    return y;
}

struct Bottleneck {
    M dw, db, uw, ub;
};

template <typename S>
Bottleneck read(const peadapt::BottleneckAdapter<S>& p) {
    return {from(p.down_w.value()), from(p.down_b.value()), from(p.up_w.value()), from(p.up_b.value())};
}

inline M bottleneck(const M& x, const Bottleneck& p) {
    M h(x.rows, p.dw.rows);
    for (long i = 0; i < x.rows; ++i) {
        for (long k = 0; k < p.dw.rows; ++k) {
            double s = p.db(0, k);
            for (long j = 0; j < x.cols; ++j) s += p.dw(k, j) * x(i, j);
            h(i, k) = gelu(s);
        }
    }
    M y(x.rows, p.uw.rows);
    for (long i = 0; i < x.rows; ++i) {
        for (long o = 0; o < p.uw.rows; ++o) {
            double s = p.ub(0, o);
            for (long k = 0; k < p.dw.rows; ++k) s += p.uw(o, k) * h(i, k);
            y(i, o) = s;
        }
    }
    return y;
}

struct Temporal {
    Bottleneck proj;
    peadapt::CellKind kind;
    M wih, whh, bih, bhh, sw, sb;
};

template <typename S>
Temporal read(const peadapt::TemporalAdapter<S>& p) {
    Temporal t;
    t.proj = {from(p.down_w.value()), from(p.down_b.value()), from(p.up_w.value()), from(p.up_b.value())};
    t.kind = p.cell.kind;
    if (p.cell.kind != peadapt::CellKind::vanilla) {
        t.wih = from(p.cell.w_ih.value());
        t.whh = from(p.cell.w_hh.value());
        t.bih = from(p.cell.b_ih.value());
        t.bhh = from(p.cell.b_hh.value());
    }
    t.sw = from(p.scale_w.value());
    t.sb = from(p.scale_b.value());
    return t;
}

/// max(0, x w^T + b) per row (scale_out = 1 assumed by callers using column 0).
inline M scale(const M& x, const Temporal& p) {
    M s(x.rows, p.sw.rows);
    for (long i = 0; i < x.rows; ++i)
        for (long o = 0; o < p.sw.rows; ++o) {
            double a = p.sb(0, o);
            for (long j = 0; j < x.cols; ++j) a += p.sw(o, j) * x(i, j);
            s(i, o) = a > 0 ? a : 0.0;
        }
    return s;
}

/// Unrolled recurrence on one sequence, written gate by gate.
inline M recur(const M& x, const Temporal& p) {
    const long hd = x.cols;
    M h(x.rows, hd);
    std::vector<double> hp(static_cast<std::size_t>(hd), 0.0), cp(static_cast<std::size_t>(hd), 0.0);
    auto gate = [&](const M& w, const M& b, long row, const std::vector<double>& in) {
        double s = b(0, row);
        for (long k = 0; k < hd; ++k) s += w(row, k) * in[static_cast<std::size_t>(k)];
        return s;
    };
    for (long t = 0; t < x.rows; ++t) {
        std::vector<double> xt(static_cast<std::size_t>(hd));
        for (long k = 0; k < hd; ++k) xt[static_cast<std::size_t>(k)] = x(t, k);
        std::vector<double> hn(static_cast<std::size_t>(hd)), cn(static_cast<std::size_t>(hd));
        for (long j = 0; j < hd; ++j) {
            const auto J = static_cast<std::size_t>(j);
            switch (p.kind) {
            case peadapt::CellKind::rnn:
                hn[J] = std::tanh(gate(p.wih, p.bih, j, xt) + gate(p.whh, p.bhh, j, hp));
                break;
            case peadapt::CellKind::gru: {
                const double r = sigmoid(gate(p.wih, p.bih, j, xt) + gate(p.whh, p.bhh, j, hp));
                const double z = sigmoid(gate(p.wih, p.bih, hd + j, xt) + gate(p.whh, p.bhh, hd + j, hp));
                const double n = std::tanh(gate(p.wih, p.bih, 2 * hd + j, xt) + r * gate(p.whh, p.bhh, 2 * hd + j, hp));
                hn[J] = (1.0 - z) * n + z * hp[J];
                break;
            }
            case peadapt::CellKind::lstm: {
                const double i = sigmoid(gate(p.wih, p.bih, j, xt) + gate(p.whh, p.bhh, j, hp));
                const double f = sigmoid(gate(p.wih, p.bih, hd + j, xt) + gate(p.whh, p.bhh, hd + j, hp));
                const double g = std::tanh(gate(p.wih, p.bih, 2 * hd + j, xt) + gate(p.whh, p.bhh, 2 * hd + j, hp));
                const double o = sigmoid(gate(p.wih, p.bih, 3 * hd + j, xt) + gate(p.whh, p.bhh, 3 * hd + j, hp));
                cn[J] = f * cp[J] + i * g;
                hn[J] = o * std::tanh(cn[J]);
                break;
            }
            case peadapt::CellKind::vanilla:
                hn[J] = xt[J];
                break;
            }
        }
        hp = hn;
        cp = cn;
        for (long k = 0; k < hd; ++k) h(t, k) = hn[static_cast<std::size_t>(k)];
    }
    return h;
}

inline M scale_rows(const M& x, const M& s) {
    M y = x;
    for (long i = 0; i < x.rows; ++i)
        for (long j = 0; j < x.cols; ++j) y(i, j) *= s(i, 0);
    return y;
}

inline M temporal(const M& x, const Temporal& p, peadapt::ScalePlacement where) {
    using peadapt::ScalePlacement;
    if (p.kind == peadapt::CellKind::vanilla &&
        (where == ScalePlacement::input_level || where == ScalePlacement::recurrent_output)) {
        where = ScalePlacement::none;
    }
    const M s = scale(x, p);
    const M in = where == ScalePlacement::input_level ? scale_rows(x, s) : x;
    M down = affine(in, p.proj.dw, &p.proj.db);
    M h = recur(down, p);
    if (where == ScalePlacement::recurrent_output) h = scale_rows(h, s);
    M up = affine(map(h, gelu), p.proj.uw, &p.proj.ub);
    if (where == ScalePlacement::post_up_projection) up = scale_rows(up, s);
    return up;
}

/// Multi-head attention over one sequence from its fused qkv rows.
inline M attention(const M& qkv, long heads, bool causal) {
    const long n = qkv.rows, d = qkv.cols / 3, dh = d / heads;
    M out(n, d);
    for (long h = 0; h < heads; ++h) {
        for (long i = 0; i < n; ++i) {
            std::vector<double> sc(static_cast<std::size_t>(n));
            double mx = -1e300;
            for (long j = 0; j < n; ++j) {
                double s = 0;
                for (long k = 0; k < dh; ++k) s += qkv(i, h * dh + k) * qkv(j, d + h * dh + k);
                s /= std::sqrt(static_cast<double>(dh));
                if (causal && j > i) s = -1e300;
                sc[static_cast<std::size_t>(j)] = s;
                mx = std::max(mx, s);
            }
            double z = 0;
            for (auto& s : sc) {
                s = s <= -1e299 ? 0.0 : std::exp(s - mx);
                z += s;
            }
            for (long k = 0; k < dh; ++k) {
                double acc = 0;
                for (long j = 0; j < n; ++j) acc += sc[static_cast<std::size_t>(j)] / z * qkv(j, 2 * d + h * dh + k);
                out(i, h * dh + k) = acc;
            }
        }
    }
    return out;
}

struct BlockW {
    M ln1w, ln1b, qkvw, qkvb, outw, outb, ln2w, ln2b, fcw, fcb, pw, pb;
};

template <typename S>
BlockW read(const peadapt::BlockWeights<S>& w) {
    return {from(w.ln1_w.value()), from(w.ln1_b.value()), from(w.qkv_w.value()), from(w.qkv_b.value()),
            from(w.out_w.value()), from(w.out_b.value()), from(w.ln2_w.value()), from(w.ln2_b.value()),
            from(w.fc_w.value()),  from(w.fc_b.value()),  from(w.proj_w.value()), from(w.proj_b.value())};
}

inline M rows_of(const M& x, long start, long count) {
    M y(count, x.cols);
    for (long i = 0; i < count; ++i)
        for (long j = 0; j < x.cols; ++j) y(i, j) = x(start + i, j);
    return y;
}

/// Straight-line vision block over `frames` sequences of `seq` rows each.
/// sha / tda may be null; class_row is the class-token row within a sequence.
inline M vision_block(const M& x, long frames, long heads, const BlockW& w, const Bottleneck* sha, const Temporal* tda,
                      peadapt::ScalePlacement where, long class_row) {
    const long seq = x.rows / frames;
    M h1(x.rows, x.cols), mlp(x.rows, x.cols);
    for (long t = 0; t < frames; ++t) {
        const M xt = rows_of(x, t * seq, seq);
        const M attn = affine(attention(affine(layer_norm(xt, w.ln1w, w.ln1b), w.qkvw, &w.qkvb), heads, false), w.outw, &w.outb);
        M ht = add(xt, attn);
        if (sha) ht = add(ht, bottleneck(attn, *sha));
        const M m = affine(map(affine(layer_norm(ht, w.ln2w, w.ln2b), w.fcw, &w.fcb), quick_gelu), w.pw, &w.pb);
        for (long i = 0; i < seq; ++i)
            for (long j = 0; j < x.cols; ++j) {
                h1(t * seq + i, j) = ht(i, j);
                mlp(t * seq + i, j) = m(i, j);
            }
    }
    M out = add(h1, mlp);
    if (tda) {
        M stream(frames, x.cols);
        for (long t = 0; t < frames; ++t)
            for (long j = 0; j < x.cols; ++j) stream(t, j) = mlp(t * seq + class_row, j);
        const M delta = temporal(stream, *tda, where);
        for (long t = 0; t < frames; ++t)
            for (long j = 0; j < x.cols; ++j) out(t * seq + class_row, j) += delta(t, j);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Finite differences

/// Relative error |a - n| / max(|a|, |n|, 1e-6), maximised over all entries of `param`.
template <typename Loss>
double fd_check(peadapt::ag::Var<double>& param, Loss&& loss, double eps = 1e-5) {
    param.zero_grad();
    auto l = loss();
    peadapt::ag::backward(l);
    const peadapt::Matrix<double> analytic =
        param.has_grad() ? param.grad() : peadapt::Matrix<double>::Zero(param.rows(), param.cols());
    double worst = 0.0;
    for (long i = 0; i < param.size(); ++i) {
        double& w = param.mutable_value().data()[i];
        const double keep = w;
        double plus, minus;
        {
            peadapt::ag::NoGradGuard ng;
            w = keep + eps;
            plus = loss().value()(0, 0);
            w = keep - eps;
            minus = loss().value()(0, 0);
        }
        w = keep;
        const double numeric = (plus - minus) / (2 * eps);
        const double a = analytic.data()[i];
        const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
        worst = std::max(worst, rel);
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Metrics

struct BruteMetrics {
    double uar, war;
};

/// Expands the matrix into individual (true, pred) samples and counts them one by one.
inline BruteMetrics brute_metrics(const std::vector<std::vector<long>>& cm) {
    std::vector<std::pair<int, int>> samples;
    for (std::size_t i = 0; i < cm.size(); ++i)
        for (std::size_t j = 0; j < cm.size(); ++j)
            for (long n = 0; n < cm[i][j]; ++n) samples.emplace_back(static_cast<int>(i), static_cast<int>(j));
    std::vector<long> hit(cm.size(), 0), seen(cm.size(), 0);
    long correct = 0;
    for (auto [t, p] : samples) {
        ++seen[static_cast<std::size_t>(t)];
        if (t == p) {
            ++hit[static_cast<std::size_t>(t)];
            ++correct;
        }
    }
    double sum = 0;
    int classes = 0;
    for (std::size_t k = 0; k < cm.size(); ++k) {
        if (seen[k] == 0) continue;
        sum += static_cast<double>(hit[k]) / static_cast<double>(seen[k]);
        ++classes;
    }
    return {sum / classes, static_cast<double>(correct) / static_cast<double>(samples.size())};
}

// ---------------------------------------------------------------------------
// Misc helpers

inline peadapt::Matrix<double> random_matrix(long r, long c, std::mt19937_64& g, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    peadapt::Matrix<double> m(r, c);
    for (long i = 0; i < m.size(); ++i) m.data()[i] = n(g);
    return m;
}

/// Replaces every parameter with Gaussian noise so that no delta is trivially zero.
template <typename P>
void randomize(P& params, std::mt19937_64& g, double scale = 0.5) {
    params.visit(
        [&](const std::string&, auto& v) {
            std::normal_distribution<double> n(0.0, scale);
            for (long i = 0; i < v.size(); ++i) {
                v.mutable_value().data()[i] = static_cast<typename std::decay_t<decltype(v.mutable_value())>::Scalar>(n(g));
            }
        },
        "");
}

}  // namespace oracle
