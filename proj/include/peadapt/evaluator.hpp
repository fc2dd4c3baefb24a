#pragma once

#include <fstream>
#include <iomanip>
#include <string>
#include <vector>

#include "peadapt/core/autograd.hpp"
#include "peadapt/data.hpp"
#include "peadapt/host.hpp"
#include "peadapt/metrics.hpp"

namespace peadapt {

/// Lowest index wins ties.
template <typename Row>
int argmax_row(const Row& row) {
    int best = 0;
    for (int c = 1; c < static_cast<int>(row.size()); ++c) {
        if (row(c) > row(best)) best = c;
    }
    return best;
}

struct ClipPrediction {
    std::string clip_id;
    int truth = 0;
    int pred = 0;
    std::vector<double> probs;
};

struct EvalResult {
    MetricsReport report;
    ConfusionMatrix confusion;
    std::vector<ClipPrediction> predictions;
    Matrix<double> logits;  // clips x classes
};

template <typename S>
ClipLoadOptions load_options_for(const Model<S>& model, std::uint64_t seed = 0) {
    ClipLoadOptions o;
    o.frames = model.host().frames;
    o.image_size = static_cast<int>(model.host().image_size);
    o.mean = model.host().pixel_mean;
    o.stddev = model.host().pixel_std;
    o.seed = seed;
    return o;
}

/// Deterministic (eval-mode) pass over `which`. Never touches parameters.
template <typename S>
EvalResult evaluate(const Model<S>& model, const Dataset& ds, const std::vector<Index>& which,
                    const ClipLoadOptions& opt) {
    if (which.empty()) {
        throw InputError("evaluate: empty split");
    }
    if (ds.classes.size() != model.classes().size()) {
        throw InputError("dataset has " + std::to_string(ds.classes.size()) + " classes, model has " +
                         std::to_string(model.classes().size()));
    }
    ag::NoGradGuard no_grad;
    const auto text = model.encode_class_prompts();
    const Index classes = static_cast<Index>(model.classes().size());
    EvalResult r;
    r.confusion = ConfusionMatrix(static_cast<int>(classes));
    r.logits = Matrix<double>(static_cast<Index>(which.size()), classes);
    for (std::size_t i = 0; i < which.size(); ++i) {
        const auto& rec = ds.clips.at(static_cast<std::size_t>(which[i]));
        const auto clip =
            load_clip(rec, opt.frames, opt.image_size, opt.mean, opt.stddev, Split::eval, opt.seed, 0, opt.policy);
        const auto logits = model.logits(model.encode_video(clip.frames), text).value();
        const Matrix<S> probs = ag::softmax_rows<S>(logits);
        ClipPrediction p;
        p.clip_id = rec.id;
        p.truth = rec.label;
        p.pred = argmax_row(logits.row(0));
        for (Index c = 0; c < classes; ++c) p.probs.push_back(static_cast<double>(probs(0, c)));
        r.logits.row(static_cast<Index>(i)) = logits.row(0).template cast<double>();
        r.confusion.add(p.truth, p.pred);
        r.predictions.push_back(std::move(p));
    }
    r.report = compute_metrics(r.confusion);
    return r;
}

inline void write_predictions_csv(const std::string& path, const std::vector<ClipPrediction>& preds, int classes) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write predictions to '" + path + "'");
    }
    out << "clip_id,true,pred";
    for (int c = 0; c < classes; ++c) out << ",prob_" << c;
    out << "\n" << std::setprecision(9);
    for (const auto& p : preds) {
        out << p.clip_id << "," << p.truth << "," << p.pred;
        for (double v : p.probs) out << "," << v;
        out << "\n";
    }
}

inline void write_confusion_csv(const std::string& path, const ConfusionMatrix& cm) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write confusion matrix to '" + path + "'");
    }
    for (int i = 0; i < cm.classes(); ++i) {
        for (int j = 0; j < cm.classes(); ++j) out << (j ? "," : "") << cm.at(i, j);
        out << "\n";
    }
}

}  // namespace peadapt
