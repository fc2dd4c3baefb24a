#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "peadapt/evaluator.hpp"
#include "peadapt/trainer.hpp"

namespace peadapt {

struct FoldResult {
    int fold = 0;
    std::vector<Index> train;
    std::vector<Index> test;
    EvalResult eval;
    TrainResult training;
};

struct KFoldResult {
    std::vector<FoldResult> folds;
    double mean_uar = 0.0;
    double mean_war = 0.0;
};

/// Fold f (0..k-1) is the test split; training uses every clip of another
/// fold. When fold f is the only fold present, training reuses its clips.
template <typename S>
KFoldResult run_kfold(const Dataset& ds, int k, const std::function<Model<S>()>& make_model,
                      const TrainingConfig& cfg, const AugmentConfig& aug, const std::string& out_dir) {
    if (k < 1) {
        throw ConfigError("k-fold needs k >= 1");
    }
    const auto present = ds.fold_ids();
    for (int f = 0; f < k; ++f) {
        if (std::find(present.begin(), present.end(), f) == present.end()) {
            throw IngestionError("fold id " + std::to_string(f) + " does not occur in the annotations");
        }
    }
    KFoldResult out;
    for (int f = 0; f < k; ++f) {
        FoldResult fr;
        fr.fold = f;
        for (Index i = 0; i < ds.size(); ++i) {
            (ds.clips[static_cast<std::size_t>(i)].fold == f ? fr.test : fr.train).push_back(i);
        }
        if (fr.train.empty()) {
            fr.train = fr.test;
        }
        Model<S> model = make_model();
        TrainOptions to;
        to.out_dir = (std::filesystem::path(out_dir) / ("fold_" + std::to_string(f))).string();
        fr.training = train_loop(model, ds, fr.train, cfg, aug, to);
        fr.eval = evaluate(model, ds, fr.test, load_options_for(model, cfg.seed));
        write_predictions_csv((std::filesystem::path(to.out_dir) / "predictions.csv").string(), fr.eval.predictions,
                              static_cast<int>(ds.classes.size()));
        out.mean_uar += fr.eval.report.uar;
        out.mean_war += fr.eval.report.war;
        out.folds.push_back(std::move(fr));
    }
    out.mean_uar /= k;
    out.mean_war /= k;
    return out;
}

}  // namespace peadapt
