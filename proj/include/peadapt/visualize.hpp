#pragma once

// Gradient-weighted attention rollout and embedding projections.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <string>
#include <vector>

#include "peadapt/core/autograd.hpp"
#include "peadapt/core/rng.hpp"
#include "peadapt/data.hpp"
#include "peadapt/evaluator.hpp"
#include "peadapt/host.hpp"

namespace peadapt {

struct RolloutResult {
    int target_class = 0;
    Index grid = 0;
    std::vector<std::vector<float>> maps;  // per frame, grid x grid row-major, min-max scaled
    std::vector<std::vector<double>> raw;  // same before scaling
};

/// Min-max scaling to [0, 1]; a constant map becomes all zeros.
inline std::vector<float> min_max_scale(const std::vector<double>& v) {
    std::vector<float> out(v.size(), 0.0f);
    if (v.empty()) return out;
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    const double range = *hi - *lo;
    if (!(range > 0.0)) return out;
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>((v[i] - *lo) / range);
    return out;
}

/// Per-frame relevance of each patch for `target_class` (predicted class when
/// negative). Each layer contributes the head mean of attention weighted by
/// the positive part of d(logit)/d(attention), mixed half-and-half with the
/// identity for the residual path and row-normalised; layers compose by
/// left multiplication. Parameters are left unchanged.
template <typename S>
RolloutResult attention_rollout(Model<S>& model, const Video& clip, int target_class = -1) {
    ag::Var<S> text;
    {
        ag::NoGradGuard ng;
        text = ag::constant(model.encode_class_prompts().value());
    }
    std::vector<ag::AttentionTap<S>> taps;
    const auto fv = model.encode_video(clip, &taps);
    const auto logits = model.logits(fv, text);
    RolloutResult r;
    r.target_class = target_class >= 0 ? target_class : argmax_row(logits.value().row(0));
    if (r.target_class >= logits.cols()) {
        throw InputError("rollout target class out of range");
    }
    Matrix<S> seed = Matrix<S>::Zero(1, logits.cols());
    seed(0, r.target_class) = S(1);
    ag::backward(logits, &seed);
    for (auto& [name, p] : model.bundle().parameters()) p.zero_grad();

    const Index seq = model.vision_seq_len();
    const Index cls = model.class_token_index();
    const Index m = model.host().patches();
    r.grid = model.host().grid();
    const Index frames = static_cast<Index>(clip.size());
    for (Index t = 0; t < frames; ++t) {
        Matrix<double> roll = Matrix<double>::Identity(seq, seq);
        for (const auto& tap : taps) {
            Matrix<double> fused = Matrix<double>::Zero(seq, seq);
            for (Index h = 0; h < tap.heads; ++h) {
                const auto k = static_cast<std::size_t>(t * tap.heads + h);
                const Matrix<double> a = tap.probs[k].template cast<double>();
                Matrix<double> g = tap.grads[k].size() ? Matrix<double>(tap.grads[k].template cast<double>())
                                                       : Matrix<double>::Zero(seq, seq);
                fused += a.cwiseProduct(g.cwiseMax(0.0));
            }
            fused /= static_cast<double>(tap.heads);
            Matrix<double> mixed = 0.5 * (fused + Matrix<double>::Identity(seq, seq));
            for (Index i = 0; i < seq; ++i) mixed.row(i) /= mixed.row(i).sum();
            roll = mixed * roll;
        }
        std::vector<double> raw(static_cast<std::size_t>(m));
        for (Index p = 0; p < m; ++p) raw[static_cast<std::size_t>(p)] = roll(cls, cls + 1 + p);
        r.maps.push_back(min_max_scale(raw));
        r.raw.push_back(std::move(raw));
    }
    return r;
}

/// Writes frame_XX.pgm heatmaps (one pixel per patch) and rollout.csv
/// ("frame,row,col,value,raw").
inline void write_rollout(const std::string& dir, const RolloutResult& r) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream csv(fs::path(dir) / "rollout.csv");
    if (!csv) {
        throw IoError("cannot write rollout values into '" + dir + "'");
    }
    csv << "frame,row,col,value,raw\n" << std::setprecision(9);
    for (std::size_t t = 0; t < r.maps.size(); ++t) {
        std::ostringstream name;
        name << "frame_" << std::setw(2) << std::setfill('0') << t << ".pgm";
        write_pgm((fs::path(dir) / name.str()).string(), r.maps[t], static_cast<int>(r.grid), static_cast<int>(r.grid));
        for (Index i = 0; i < r.grid * r.grid; ++i) {
            csv << t << "," << i / r.grid << "," << i % r.grid << "," << r.maps[t][static_cast<std::size_t>(i)] << ","
                << r.raw[t][static_cast<std::size_t>(i)] << "\n";
        }
    }
}

// ---------------------------------------------------------------------------
// Embeddings

struct TsneConfig {
    double perplexity = 30.0;  // capped at (N - 1) / 3
    int iterations = 1000;
    int exaggeration_iters = 250;
    double exaggeration = 12.0;
    double learning_rate = 200.0;
    std::uint64_t seed = 0;
};

/// Exact t-SNE (O(N^2) per iteration) with a fixed seed; intended for the few
/// hundred clips of a desk-scale split.
inline Matrix<double> tsne(const Matrix<double>& x, const TsneConfig& cfg = {}) {
    const Index n = x.rows();
    if (n == 0) {
        throw InputError("tsne: no points");
    }
    Matrix<double> y = Matrix<double>::Zero(n, 2);
    if (n == 1) return y;
    const double perplexity = std::max(1.0, std::min(cfg.perplexity, static_cast<double>(n - 1) / 3.0));
    Matrix<double> d2(n, n);
    for (Index i = 0; i < n; ++i) {
        for (Index j = 0; j < n; ++j) d2(i, j) = (x.row(i) - x.row(j)).squaredNorm();
    }
    // Conditional affinities with per-point bandwidth matched to the perplexity.
    Matrix<double> p = Matrix<double>::Zero(n, n);
    const double target = std::log(perplexity);
    for (Index i = 0; i < n; ++i) {
        double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
        for (int it = 0; it < 100; ++it) {
            double sum = 0.0, wsum = 0.0;
            for (Index j = 0; j < n; ++j) {
                if (j == i) continue;
                const double e = std::exp(-beta * d2(i, j));
                p(i, j) = e;
                sum += e;
                wsum += e * d2(i, j);
            }
            sum = std::max(sum, 1e-300);
            const double entropy = std::log(sum) + beta * wsum / sum;
            for (Index j = 0; j < n; ++j) p(i, j) /= sum;
            const double diff = entropy - target;
            if (std::abs(diff) < 1e-5) break;
            if (diff > 0) {
                lo = beta;
                beta = std::isinf(hi) ? beta * 2.0 : (beta + hi) / 2.0;
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
    }
    Matrix<double> pj = (p + p.transpose()) / (2.0 * static_cast<double>(n));
    pj = pj.cwiseMax(1e-12);

    Rng rng(cfg.seed);
    for (Index i = 0; i < y.size(); ++i) y.data()[i] = rng.normal(0.0, 1e-4);
    Matrix<double> update = Matrix<double>::Zero(n, 2);
    Matrix<double> gains = Matrix<double>::Ones(n, 2);
    Matrix<double> num(n, n);
    for (int it = 0; it < cfg.iterations; ++it) {
        const double exag = it < cfg.exaggeration_iters ? cfg.exaggeration : 1.0;
        const double momentum = it < cfg.exaggeration_iters ? 0.5 : 0.8;
        double qsum = 0.0;
        for (Index i = 0; i < n; ++i) {
            for (Index j = 0; j < n; ++j) {
                num(i, j) = i == j ? 0.0 : 1.0 / (1.0 + (y.row(i) - y.row(j)).squaredNorm());
                qsum += num(i, j);
            }
        }
        Matrix<double> grad = Matrix<double>::Zero(n, 2);
        for (Index i = 0; i < n; ++i) {
            for (Index j = 0; j < n; ++j) {
                if (i == j) continue;
                const double q = std::max(num(i, j) / qsum, 1e-12);
                grad.row(i) += 4.0 * (exag * pj(i, j) - q) * num(i, j) * (y.row(i) - y.row(j));
            }
        }
        for (Index k = 0; k < grad.size(); ++k) {
            const bool same = (grad.data()[k] > 0) == (update.data()[k] > 0);
            gains.data()[k] = same ? std::max(0.01, gains.data()[k] * 0.8) : gains.data()[k] + 0.2;
            update.data()[k] = momentum * update.data()[k] - cfg.learning_rate * gains.data()[k] * grad.data()[k];
            y.data()[k] += update.data()[k];
        }
        const Eigen::RowVector2d mean = y.colwise().mean();
        y.rowwise() -= mean;
    }
    return y;
}

enum class ProjectionMethod { raw, tsne };

inline ProjectionMethod parse_projection(const std::string& s) {
    if (s == "raw") return ProjectionMethod::raw;
    if (s == "tsne") return ProjectionMethod::tsne;
    throw ConfigError("embedding method must be raw or tsne, got '" + s + "'");
}

struct EmbeddingExport {
    std::vector<std::string> ids;
    std::vector<int> labels;
    Matrix<double> values;  // clips x d_j (raw) or clips x 2 (tsne)
};

template <typename S>
EmbeddingExport export_embeddings(const Model<S>& model, const Dataset& ds, const std::vector<Index>& which,
                                  ProjectionMethod method, const TsneConfig& tcfg = {}, std::uint64_t seed = 0) {
    if (which.empty()) {
        throw InputError("export_embeddings: empty split");
    }
    ag::NoGradGuard ng;
    const auto opt = load_options_for(model, seed);
    EmbeddingExport e;
    Matrix<double> raw(static_cast<Index>(which.size()), model.host().joint_dim);
    for (std::size_t i = 0; i < which.size(); ++i) {
        const auto& rec = ds.clips.at(static_cast<std::size_t>(which[i]));
        const auto clip = load_clip(rec, opt.frames, opt.image_size, opt.mean, opt.stddev, Split::eval, seed, 0, opt.policy);
        raw.row(static_cast<Index>(i)) = model.encode_video(clip.frames).value().row(0).template cast<double>();
        e.ids.push_back(rec.id);
        e.labels.push_back(rec.label);
    }
    e.values = method == ProjectionMethod::raw ? raw : tsne(raw, tcfg);
    return e;
}

inline void write_embeddings_csv(const std::string& path, const EmbeddingExport& e) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write embeddings to '" + path + "'");
    }
    out << "clip_id,label";
    for (Index c = 0; c < e.values.cols(); ++c) out << ",x" << c;
    out << "\n" << std::setprecision(9);
    for (std::size_t i = 0; i < e.ids.size(); ++i) {
        out << e.ids[i] << "," << e.labels[i];
        for (Index c = 0; c < e.values.cols(); ++c) out << "," << e.values(static_cast<Index>(i), c);
        out << "\n";
    }
}

}  // namespace peadapt
