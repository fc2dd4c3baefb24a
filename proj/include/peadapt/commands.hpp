#pragma once

// Subcommand implementations shared by the CLI binary and the tests. Every
// command writes manifest.json and config.resolved into its output directory.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>

#include <json.hpp>

#include "peadapt/config.hpp"
#include "peadapt/data.hpp"
#include "peadapt/evaluator.hpp"
#include "peadapt/host.hpp"
#include "peadapt/kfold.hpp"
#include "peadapt/trainer.hpp"
#include "peadapt/visualize.hpp"

namespace peadapt {

inline constexpr const char* kVersion = "0.3.0";

inline std::string version_digest() {
    std::ostringstream s;
    s << std::hex << fnv1a(std::string("peadapt-") + kVersion);
    return s.str();
}

struct CommandContext {
    std::string out_dir;
    std::string checkpoint;
    std::ostream* out = &std::cout;
};

inline void write_manifest(const std::string& command, const RunConfig& cfg, const CommandContext& ctx,
                           const nlohmann::json& extra = nlohmann::json::object()) {
    namespace fs = std::filesystem;
    if (ctx.out_dir.empty()) return;
    fs::create_directories(ctx.out_dir);
    nlohmann::json config = nlohmann::json::object();
    config["preset"] = cfg.preset;
    for (const auto& f : config_schema()) config[f.key] = f.get(cfg);
    nlohmann::json m{{"command", command},
                     {"version", kVersion},
                     {"version_digest", version_digest()},
                     {"seed", cfg.train.seed},
                     {"host_digest", cfg.host.digest()},
                     {"checkpoint", ctx.checkpoint},
                     {"config", config}};
    for (auto it = extra.begin(); it != extra.end(); ++it) m[it.key()] = it.value();
    std::ofstream(fs::path(ctx.out_dir) / "manifest.json") << m.dump(2) << "\n";
    std::ofstream(fs::path(ctx.out_dir) / "config.resolved") << resolved_config_text(cfg);
}

namespace detail {

inline std::string require_root(const RunConfig& cfg) {
    if (cfg.data.root.empty()) {
        throw ConfigError("data.root is not set");
    }
    return cfg.data.root;
}

inline std::string require_out(const CommandContext& ctx) {
    if (ctx.out_dir.empty()) {
        throw ConfigError("an output directory (--out) is required");
    }
    return ctx.out_dir;
}

template <typename S>
Model<S> build_model(const RunConfig& cfg, const Dataset& ds) {
    return Model<S>(cfg.host, cfg.bundle, ds.classes);
}

inline std::vector<Index> training_split(const RunConfig& cfg, const Dataset& ds) {
    std::vector<Index> out;
    for (Index i = 0; i < ds.size(); ++i) {
        if (cfg.data.test_fold < 0 || ds.clips[static_cast<std::size_t>(i)].fold != cfg.data.test_fold) out.push_back(i);
    }
    if (out.empty()) {
        throw IngestionError("no training clips outside test fold " + std::to_string(cfg.data.test_fold));
    }
    return out;
}

/// Clips selected by data.eval_split ("auto" = the test fold if one is set, else all clips).
inline std::vector<Index> evaluation_split(const RunConfig& cfg, const Dataset& ds) {
    std::string split = cfg.data.eval_split;
    if (split == "auto") split = cfg.data.test_fold >= 0 ? "test" : "all";
    std::vector<Index> out;
    if (split == "all") {
        for (Index i = 0; i < ds.size(); ++i) out.push_back(i);
    } else if (split == "test") {
        if (cfg.data.test_fold < 0) throw ConfigError("data.eval_split=test needs data.test_fold");
        out = ds.indices_in_folds({cfg.data.test_fold});
    } else {
        auto [train, hold] = split_holdout(training_split(cfg, ds), cfg.train.holdout_fraction, cfg.train.seed);
        out = split == "train" ? train : (hold.empty() ? train : hold);
    }
    if (out.empty()) {
        throw IngestionError("evaluation split '" + split + "' is empty");
    }
    return out;
}

template <typename S>
void maybe_load_checkpoint(Model<S>& model, const CommandContext& ctx) {
    if (!ctx.checkpoint.empty()) load_checkpoint(ctx.checkpoint, model);
}

inline ClipLoadOptions options(const RunConfig& cfg) {
    ClipLoadOptions o;
    o.frames = cfg.host.frames;
    o.image_size = static_cast<int>(cfg.host.image_size);
    o.mean = cfg.host.pixel_mean;
    o.stddev = cfg.host.pixel_std;
    o.seed = cfg.train.seed;
    o.policy = cfg.data.corrupt_policy;
    return o;
}

inline nlohmann::json report_json(const MetricsReport& r) {
    nlohmann::json recalls = nlohmann::json::array();
    for (std::size_t k = 0; k < r.per_class_recall.size(); ++k) {
        recalls.push_back(r.support[k] > 0 ? nlohmann::json(r.per_class_recall[k]) : nlohmann::json(nullptr));
    }
    return {{"uar", r.uar}, {"war", r.war}, {"per_class_recall", recalls}, {"support", r.support}};
}

}  // namespace detail

template <typename S>
int cmd_audit(const RunConfig& cfg, const CommandContext& ctx) {
    auto bundle = AdapterBundle<S>::init(cfg.host, cfg.bundle);
    const auto a = audit_trainable(bundle, cfg.host);
    auto& out = *ctx.out;
    out << "preset     " << cfg.preset << "\n";
    out << "trainable  " << a.trainable << "\n";
    out << "frozen     " << a.frozen << "\n";
    out << "total      " << a.total << "\n";
    out << "fraction   " << std::fixed << std::setprecision(6) << a.fraction << std::defaultfloat << "\n";
    for (const auto& [family, n] : a.by_family) out << "  " << std::left << std::setw(12) << family << std::right << n << "\n";
    nlohmann::json fam(a.by_family);
    write_manifest("audit", cfg, ctx,
                   {{"audit", {{"trainable", a.trainable}, {"frozen", a.frozen}, {"total", a.total},
                               {"fraction", a.fraction}, {"by_family", fam}}}});
    return 0;
}

inline int cmd_synth(const RunConfig& cfg, const CommandContext& ctx) {
    SynthConfig s;
    s.classes = cfg.data.synth_classes;
    s.clips_per_class = cfg.data.synth_clips_per_class;
    s.frames = static_cast<int>(cfg.host.frames);
    s.image_size = static_cast<int>(cfg.host.image_size);
    s.folds = cfg.data.synth_folds;
    s.noise = cfg.data.synth_noise;
    s.seed = cfg.train.seed;
    const std::string root = cfg.data.root.empty() ? detail::require_out(ctx) : cfg.data.root;
    const auto ds = generate_synthetic_dataset(root, s);
    *ctx.out << "wrote " << ds.size() << " clips of " << ds.classes.size() << " classes to " << root << "\n";
    CommandContext mctx = ctx;
    if (mctx.out_dir.empty()) mctx.out_dir = root;
    write_manifest("synth", cfg, mctx, {{"clips", ds.size()}});
    return 0;
}

template <typename S>
int cmd_train(const RunConfig& cfg, const CommandContext& ctx) {
    const std::string out_dir = detail::require_out(ctx);
    const auto ds = load_dataset(detail::require_root(cfg));
    auto model = detail::build_model<S>(cfg, ds);
    TrainOptions to;
    to.out_dir = out_dir;
    to.resume_from = ctx.checkpoint;
    to.log_augmentations = true;
    to.on_epoch = [&ctx](const EpochLog& e) {
        *ctx.out << "epoch " << e.epoch << " step " << e.step << " loss " << e.loss << " val_uar " << e.uar
                 << " val_war " << e.war << "\n";
    };
    const auto res = train_loop(model, ds, detail::training_split(cfg, ds), cfg.train, cfg.aug, to);
    nlohmann::json summary{{"best_val_war", res.best_war},
                           {"train_clips", res.train_indices.size()},
                           {"holdout_clips", res.holdout_indices.size()},
                           {"init_checkpoint", res.init_checkpoint},
                           {"dead_parameters", res.dead_parameters}};
    if (cfg.train.epochs > 0) {
        summary["best_checkpoint"] = res.best_checkpoint;
        summary["final_checkpoint"] = res.final_checkpoint;
    }
    std::ofstream(std::filesystem::path(out_dir) / "train_summary.json") << summary.dump(2) << "\n";
    *ctx.out << "checkpoint " << (cfg.train.epochs > 0 ? res.final_checkpoint : res.init_checkpoint) << "\n";
    write_manifest("train", cfg, ctx, {{"summary", summary}});
    return 0;
}

template <typename S>
int cmd_eval(const RunConfig& cfg, const CommandContext& ctx) {
    const auto ds = load_dataset(detail::require_root(cfg));
    auto model = detail::build_model<S>(cfg, ds);
    detail::maybe_load_checkpoint(model, ctx);
    const auto which = detail::evaluation_split(cfg, ds);
    const auto r = evaluate(model, ds, which, detail::options(cfg));
    *ctx.out << format_report(r.report, ds.classes);
    if (!ctx.out_dir.empty()) {
        namespace fs = std::filesystem;
        fs::create_directories(ctx.out_dir);
        write_predictions_csv((fs::path(ctx.out_dir) / "predictions.csv").string(), r.predictions,
                              static_cast<int>(ds.classes.size()));
        write_confusion_csv((fs::path(ctx.out_dir) / "confusion.csv").string(), r.confusion);
        std::ofstream(fs::path(ctx.out_dir) / "report.csv") << report_csv(r.report, ds.classes);
    }
    write_manifest("eval", cfg, ctx, {{"report", detail::report_json(r.report)}, {"clips", which.size()}});
    return 0;
}

template <typename S>
int cmd_kfold(const RunConfig& cfg, const CommandContext& ctx) {
    const std::string out_dir = detail::require_out(ctx);
    const auto ds = load_dataset(detail::require_root(cfg));
    const auto res = run_kfold<S>(
        ds, cfg.data.kfold, [&] { return detail::build_model<S>(cfg, ds); }, cfg.train, cfg.aug, out_dir);
    nlohmann::json folds = nlohmann::json::array();
    for (const auto& f : res.folds) {
        *ctx.out << "fold " << f.fold << " UAR " << f.eval.report.uar << " WAR " << f.eval.report.war << "\n";
        folds.push_back({{"fold", f.fold}, {"report", detail::report_json(f.eval.report)}, {"test_clips", f.test.size()}});
    }
    *ctx.out << "mean UAR " << res.mean_uar << " WAR " << res.mean_war << "\n";
    std::ofstream csv(std::filesystem::path(out_dir) / "kfold.csv");
    csv << std::setprecision(17) << "fold,uar,war\n";
    for (const auto& f : res.folds) csv << f.fold << "," << f.eval.report.uar << "," << f.eval.report.war << "\n";
    csv << "mean," << res.mean_uar << "," << res.mean_war << "\n";
    write_manifest("kfold", cfg, ctx, {{"folds", folds}, {"mean_uar", res.mean_uar}, {"mean_war", res.mean_war}});
    return 0;
}

template <typename S>
int cmd_export_attention(const RunConfig& cfg, const CommandContext& ctx) {
    const std::string out_dir = detail::require_out(ctx);
    const auto ds = load_dataset(detail::require_root(cfg));
    auto model = detail::build_model<S>(cfg, ds);
    detail::maybe_load_checkpoint(model, ctx);
    const auto which = detail::evaluation_split(cfg, ds);
    Index pick = which.front();
    if (!cfg.exports.clip.empty()) {
        pick = -1;
        for (Index i = 0; i < ds.size(); ++i) {
            if (ds.clips[static_cast<std::size_t>(i)].id == cfg.exports.clip) pick = i;
        }
        if (pick < 0) throw LookupError("no clip named '" + cfg.exports.clip + "'");
    }
    const auto opt = detail::options(cfg);
    const auto& rec = ds.clips[static_cast<std::size_t>(pick)];
    const auto clip = load_clip(rec, opt.frames, opt.image_size, opt.mean, opt.stddev, Split::eval, opt.seed, 0, opt.policy);
    const auto r = attention_rollout(model, clip.frames);
    write_rollout(out_dir, r);
    *ctx.out << "clip " << rec.id << " predicted " << ds.classes[static_cast<std::size_t>(r.target_class)] << "; "
             << r.maps.size() << " maps of " << r.grid << "x" << r.grid << " in " << out_dir << "\n";
    write_manifest("export-attention", cfg, ctx,
                   {{"clip", rec.id}, {"target_class", r.target_class}, {"source_frames", clip.source_frames}});
    return 0;
}

template <typename S>
int cmd_export_embeddings(const RunConfig& cfg, const CommandContext& ctx) {
    const std::string out_dir = detail::require_out(ctx);
    const auto ds = load_dataset(detail::require_root(cfg));
    auto model = detail::build_model<S>(cfg, ds);
    detail::maybe_load_checkpoint(model, ctx);
    TsneConfig t;
    t.perplexity = cfg.exports.perplexity;
    t.iterations = cfg.exports.tsne_iterations;
    t.seed = cfg.train.seed;
    const auto method = parse_projection(cfg.exports.method);
    const auto which = detail::evaluation_split(cfg, ds);
    const auto e = export_embeddings(model, ds, which, method, t, cfg.train.seed);
    std::filesystem::create_directories(out_dir);
    const auto path = (std::filesystem::path(out_dir) / "embeddings.csv").string();
    write_embeddings_csv(path, e);
    *ctx.out << "wrote " << e.ids.size() << " rows to " << path << "\n";
    write_manifest("export-embeddings", cfg, ctx,
                   {{"method", cfg.exports.method},
                    {"tsne", {{"perplexity", t.perplexity}, {"iterations", t.iterations},
                              {"exaggeration", t.exaggeration}, {"learning_rate", t.learning_rate}}}});
    return 0;
}

/// Runs `name` at the configured precision.
inline int dispatch_command(const std::string& name, const RunConfig& cfg, const CommandContext& ctx) {
    auto run = [&](auto tag) -> int {
        using S = decltype(tag);
        if (name == "audit") return cmd_audit<S>(cfg, ctx);
        if (name == "train") return cmd_train<S>(cfg, ctx);
        if (name == "eval") return cmd_eval<S>(cfg, ctx);
        if (name == "kfold") return cmd_kfold<S>(cfg, ctx);
        if (name == "export-attention") return cmd_export_attention<S>(cfg, ctx);
        if (name == "export-embeddings") return cmd_export_embeddings<S>(cfg, ctx);
        if (name == "synth") return cmd_synth(cfg, ctx);
        throw ConfigError("unknown command '" + name + "'");
    };
    return cfg.host.precision == "float64" ? run(double{}) : run(float{});
}

}  // namespace peadapt
