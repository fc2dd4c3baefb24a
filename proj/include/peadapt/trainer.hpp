#pragma once

// AdamW over two parameter groups (adapters, prompts), warmup + cosine
// schedule, soft-label cross-entropy, checkpointing and resumable epochs.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "peadapt/archive.hpp"
#include "peadapt/core/autograd.hpp"
#include "peadapt/core/error.hpp"
#include "peadapt/data.hpp"
#include "peadapt/evaluator.hpp"
#include "peadapt/host.hpp"

namespace peadapt {

struct TrainingConfig {
    Index batch_size = 8;
    Index epochs = 30;
    double lr_adapters = 2e-4;
    double lr_prompts = 3e-5;
    double weight_decay = 0.01;
    Index warmup_epochs = 3;
    std::string scheduler = "cosine";
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double grad_clip = 0.0;       // global-norm clipping, 0 = off
    double holdout_fraction = 0.1;
    double global_lr = 0.0;       // accepted but ignored (informational note only)
    Index max_steps = 0;          // 0 = epochs * steps_per_epoch

    void validate() const {
        if (batch_size <= 0) throw ConfigError("train.batch_size must be positive");
        if (epochs < 0) throw ConfigError("train.epochs must be nonnegative");
        if (!(lr_adapters > 0.0) || !(lr_prompts > 0.0)) throw ConfigError("learning rates must be positive");
        if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be nonnegative");
        if (warmup_epochs < 0 || (epochs > 0 && warmup_epochs >= epochs)) {
            throw ConfigError("train.warmup_epochs must be smaller than train.epochs");
        }
        if (scheduler != "cosine" && scheduler != "constant") {
            throw ConfigError("train.scheduler must be cosine or constant, got '" + scheduler + "'");
        }
        if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && eps > 0.0)) {
            throw ConfigError("AdamW moments must satisfy 0 <= beta < 1 and eps > 0");
        }
        if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) {
            throw ConfigError("train.holdout_fraction must lie in [0, 1)");
        }
        if (grad_clip < 0.0 || max_steps < 0) throw ConfigError("train.grad_clip and train.max_steps must be nonnegative");
    }
};

// ---------------------------------------------------------------------------
// Parameter groups and optimizer

template <typename S>
struct ParamGroup {
    std::string name;
    double lr = 0.0;
    double weight_decay = 0.0;
    std::vector<std::pair<std::string, ag::Var<S>>> params;
};

template <typename S>
std::vector<ParamGroup<S>> build_param_groups(Model<S>& model, const TrainingConfig& cfg) {
    for (const auto& [name, v] : model.backbone().arrays()) {
        if (v.requires_grad()) {
            throw TrainingError("backbone array '" + name + "' is trainable; the backbone must stay frozen");
        }
    }
    if (cfg.global_lr > 0.0) {
        std::cerr << "note: a global learning rate was requested; per-group rates (" << cfg.lr_adapters << ", "
                  << cfg.lr_prompts << ") are used instead\n";
    }
    ParamGroup<S> adapters{"adapters", cfg.lr_adapters, cfg.weight_decay, {}};
    ParamGroup<S> prompts{"prompts", cfg.lr_prompts, cfg.weight_decay, {}};
    std::set<const void*> seen;
    model.bundle().visit([&](const char* family, const std::string& name, ag::Var<S>& v) {
        if (!seen.insert(v.node()).second) {
            throw TrainingError("parameter '" + name + "' appears twice");
        }
        (std::string(family) == "prompts" ? prompts : adapters).params.emplace_back(name, v);
    });
    std::vector<ParamGroup<S>> out;
    if (!adapters.params.empty()) out.push_back(std::move(adapters));
    if (!prompts.params.empty()) out.push_back(std::move(prompts));
    return out;
}

/// Learning-rate multiplier: linear warmup from 0, then half-cosine down to 0
/// at `total_steps`.
inline double lr_at(Index step, Index total_steps, Index warmup_steps, const std::string& scheduler = "cosine") {
    if (step < 0) {
        throw InputError("lr_at: negative step");
    }
    if (warmup_steps > 0 && step < warmup_steps) {
        return static_cast<double>(step) / static_cast<double>(warmup_steps);
    }
    if (scheduler == "constant") {
        return 1.0;
    }
    const Index decay = total_steps - warmup_steps;
    if (decay <= 0) {
        return step >= total_steps ? 0.0 : 1.0;
    }
    const double progress = std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(decay));
    return 0.5 * (1.0 + std::cos(std::acos(-1.0) * progress));
}

template <typename S>
class AdamW {
public:
    AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    Index steps() const { return t_; }

    /// Skips parameters without a gradient.
    void step(std::vector<ParamGroup<S>>& groups, double lr_multiplier) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (auto& g : groups) {
            const S lr = static_cast<S>(g.lr * lr_multiplier);
            const S wd = static_cast<S>(g.weight_decay);
            for (auto& [name, p] : g.params) {
                if (!p.has_grad()) continue;
                auto& st = state_[name];
                if (st.m.size() == 0) {
                    st.m = Matrix<S>::Zero(p.rows(), p.cols());
                    st.v = Matrix<S>::Zero(p.rows(), p.cols());
                }
                const Matrix<S>& grad = p.grad();
                st.m = static_cast<S>(beta1_) * st.m + static_cast<S>(1.0 - beta1_) * grad;
                st.v = static_cast<S>(beta2_) * st.v + static_cast<S>(1.0 - beta2_) * grad.cwiseProduct(grad);
                Matrix<S>& w = p.mutable_value();
                w -= lr * wd * w;
                const auto mhat = st.m.array() / static_cast<S>(bc1);
                const auto vhat = st.v.array() / static_cast<S>(bc2);
                w.array() -= lr * mhat / (vhat.sqrt() + static_cast<S>(eps_));
            }
        }
    }

    void save(NamedArrays& c) const {
        c.metadata["optimizer_steps"] = std::to_string(t_);
        for (const auto& [name, st] : state_) {
            c.put("optimizer.m." + name, st.m);
            c.put("optimizer.v." + name, st.v);
        }
    }

    void load(const NamedArrays& c, const std::vector<ParamGroup<S>>& groups) {
        state_.clear();
        auto it = c.metadata.find("optimizer_steps");
        if (it == c.metadata.end()) {
            throw IngestionError("checkpoint has no optimizer state");
        }
        t_ = std::stoll(it->second);
        for (const auto& g : groups) {
            for (const auto& [name, p] : g.params) {
                if (!c.contains("optimizer.m." + name)) continue;
                auto& st = state_[name];
                st.m = c.get<S>("optimizer.m." + name, p.rows(), p.cols());
                st.v = c.get<S>("optimizer.v." + name, p.rows(), p.cols());
            }
        }
    }

private:
    struct Moments {
        Matrix<S> m, v;
    };
    double beta1_, beta2_, eps_;
    Index t_ = 0;
    std::map<std::string, Moments> state_;
};

// ---------------------------------------------------------------------------
// One optimisation step

/// Remembers which parameters ever received a nonzero gradient.
struct GradientTracker {
    std::map<std::string, bool> touched;

    template <typename S>
    void record(const std::vector<ParamGroup<S>>& groups) {
        for (const auto& g : groups) {
            for (const auto& [name, p] : g.params) {
                bool& t = touched[name];
                if (!t && p.has_grad() && p.grad().cwiseAbs().maxCoeff() > S(0)) t = true;
            }
        }
    }

    std::vector<std::string> dead() const {
        std::vector<std::string> out;
        for (const auto& [name, t] : touched) {
            if (!t) out.push_back(name);
        }
        return out;
    }
};

struct StepResult {
    double loss = 0.0;
    Matrix<double> logits;
    std::map<std::string, double> grad_norms;
};

template <typename S>
double group_grad_norm(const ParamGroup<S>& g) {
    double s = 0.0;
    for (const auto& [name, p] : g.params) {
        if (p.has_grad()) s += static_cast<double>(p.grad().squaredNorm());
    }
    return std::sqrt(s);
}

template <typename S>
StepResult train_step(Model<S>& model, const ClipBatch& batch, AdamW<S>& opt, std::vector<ParamGroup<S>>& groups,
                      double lr_multiplier, const TrainingConfig& cfg, GradientTracker* tracker = nullptr) {
    for (auto& g : groups) {
        for (auto& [name, p] : g.params) p.zero_grad();
    }
    const auto logits = model.forward(batch.clip_ptrs());
    const Matrix<S> targets = batch.labels.template cast<S>();
    const auto loss = ag::soft_cross_entropy(logits, targets);
    StepResult r;
    r.loss = static_cast<double>(loss.value()(0, 0));
    r.logits = logits.value().template cast<double>();
    if (!std::isfinite(r.loss)) {
        std::ostringstream msg;
        msg << "non-finite loss " << r.loss << " on batch [";
        for (std::size_t i = 0; i < batch.ids.size(); ++i) msg << (i ? " " : "") << batch.ids[i];
        msg << "]";
        for (const auto& g : groups) msg << " lr_" << g.name << "=" << g.lr * lr_multiplier;
        for (const auto& g : groups) msg << " grad_norm_" << g.name << "=" << group_grad_norm(g);
        throw TrainingError(msg.str());
    }
    if (loss.requires_grad()) {
        ag::backward(loss);
    }
    if (tracker) tracker->record(groups);
    double total_sq = 0.0;
    for (const auto& g : groups) {
        const double n = group_grad_norm(g);
        r.grad_norms[g.name] = n;
        total_sq += n * n;
    }
    if (cfg.grad_clip > 0.0 && std::sqrt(total_sq) > cfg.grad_clip) {
        const S f = static_cast<S>(cfg.grad_clip / std::sqrt(total_sq));
        for (auto& g : groups) {
            for (auto& [name, p] : g.params) {
                if (p.has_grad()) p.node()->grad *= f;
            }
        }
    }
    opt.step(groups, lr_multiplier);
    model.after_update();
    return r;
}

// ---------------------------------------------------------------------------
// Checkpoints

template <typename S>
void save_checkpoint(const std::string& path, Model<S>& model, const std::map<std::string, std::string>& meta = {},
                     const AdamW<S>* opt = nullptr) {
    NamedArrays c;
    model.bundle().save(c);
    c.metadata = meta;
    c.metadata["host_digest"] = model.host().digest();
    c.metadata["bundle_config"] = model.bundle_config().canonical();
    c.metadata["classes"] = std::to_string(model.classes().size());
    if (opt) opt->save(c);
    c.save(path);
}

/// Restores adapter/prompt arrays; rejects checkpoints from a different host or bundle layout.
template <typename S>
NamedArrays load_checkpoint(const std::string& path, Model<S>& model) {
    NamedArrays c = NamedArrays::load(path);
    auto meta = [&c, &path](const char* key) {
        auto it = c.metadata.find(key);
        if (it == c.metadata.end()) throw IngestionError("checkpoint '" + path + "' lacks '" + key + "'");
        return it->second;
    };
    if (meta("host_digest") != model.host().digest()) {
        throw IngestionError("checkpoint '" + path + "' was written for a different host (digest " +
                             meta("host_digest") + ", expected " + model.host().digest() + ")");
    }
    if (meta("bundle_config") != model.bundle_config().canonical()) {
        throw IngestionError("checkpoint '" + path + "' was written for a different adapter configuration");
    }
    model.bundle().load(c);
    return c;
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochLog {
    Index epoch = 0;
    Index step = 0;
    double loss = 0.0;
    double lr_adapters = 0.0;
    double lr_prompts = 0.0;
    double uar = 0.0;
    double war = 0.0;
};

struct TrainResult {
    std::string init_checkpoint;
    std::string best_checkpoint;
    std::string final_checkpoint;
    std::string latest_checkpoint;
    std::vector<EpochLog> log;
    std::vector<double> step_losses;
    std::vector<double> step_lrs;  // adapter-group lr per step
    double best_war = -1.0;
    std::vector<Index> train_indices;
    std::vector<Index> holdout_indices;
    std::vector<std::string> dead_parameters;
};

struct TrainOptions {
    std::string out_dir;
    std::string resume_from;      // latest checkpoint to continue from
    bool log_augmentations = false;
    std::function<void(const EpochLog&)> on_epoch;
};

/// Shuffles `train` with the run seed and carves the validation holdout off its end.
inline std::pair<std::vector<Index>, std::vector<Index>> split_holdout(std::vector<Index> train, double fraction,
                                                                      std::uint64_t seed) {
    Rng rng(derive_seed({seed, 0x401dULL}));
    const auto perm = rng.permutation(static_cast<long>(train.size()));
    std::vector<Index> shuffled;
    for (long p : perm) shuffled.push_back(train[static_cast<std::size_t>(p)]);
    const auto n_hold = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(shuffled.size())));
    std::vector<Index> hold(shuffled.end() - static_cast<long>(n_hold), shuffled.end());
    shuffled.resize(shuffled.size() - n_hold);
    std::sort(shuffled.begin(), shuffled.end());
    std::sort(hold.begin(), hold.end());
    return {shuffled, hold};
}

inline nlohmann::json to_json(const EpochLog& e) {
    return {{"epoch", e.epoch}, {"step", e.step}, {"loss", e.loss}, {"lr_a", e.lr_adapters},
            {"lr_p", e.lr_prompts}, {"uar", e.uar}, {"war", e.war}};
}

template <typename S>
TrainResult train_loop(Model<S>& model, const Dataset& ds, const std::vector<Index>& train_split,
                       const TrainingConfig& cfg, const AugmentConfig& aug, const TrainOptions& opts) {
    cfg.validate();
    aug.validate();
    if (train_split.empty() || ds.clips.empty()) {
        throw InputError("train_loop: the training split is empty");
    }
    namespace fs = std::filesystem;
    const fs::path out(opts.out_dir);
    std::error_code ec;
    fs::create_directories(out, ec);
    {
        std::ofstream probe(out / ".write_test");
        if (ec || !probe) {
            throw IoError("checkpoint directory '" + opts.out_dir + "' is not writable");
        }
    }
    fs::remove(out / ".write_test", ec);

    TrainResult res;
    std::tie(res.train_indices, res.holdout_indices) = split_holdout(train_split, cfg.holdout_fraction, cfg.seed);
    const std::vector<Index>& val = res.holdout_indices.empty() ? res.train_indices : res.holdout_indices;
    const Index n = static_cast<Index>(res.train_indices.size());
    const Index steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    Index total_steps = cfg.epochs * steps_per_epoch;
    if (cfg.max_steps > 0) total_steps = std::min(total_steps, cfg.max_steps);
    const Index warmup_steps = std::min(cfg.warmup_epochs * steps_per_epoch, total_steps);

    auto groups = build_param_groups(model, cfg);
    AdamW<S> opt(cfg.beta1, cfg.beta2, cfg.eps);
    GradientTracker tracker;
    for (const auto& g : groups) {
        for (const auto& [name, p] : g.params) tracker.touched[name] = false;
    }
    const ClipLoadOptions load = load_options_for(model, cfg.seed);

    res.init_checkpoint = (out / "checkpoint_init.bin").string();
    res.best_checkpoint = (out / "checkpoint_best.bin").string();
    res.final_checkpoint = (out / "checkpoint_final.bin").string();
    res.latest_checkpoint = (out / "checkpoint_latest.bin").string();

    Index start_epoch = 0;
    Index step = 0;
    std::ofstream log_file;
    if (!opts.resume_from.empty()) {
        const NamedArrays c = load_checkpoint(opts.resume_from, model);
        opt.load(c, groups);
        start_epoch = std::stoll(c.metadata.at("epoch"));
        step = std::stoll(c.metadata.at("step"));
        res.best_war = std::stod(c.metadata.at("best_war"));
        log_file.open(out / "train_log.jsonl", std::ios::app);
    } else {
        save_checkpoint(res.init_checkpoint, model, {{"epoch", "0"}, {"step", "0"}, {"best_war", "-1"}});
        log_file.open(out / "train_log.jsonl", std::ios::trunc);
    }
    std::ofstream aug_log;
    if (opts.log_augmentations) aug_log.open(out / "augmentations.jsonl", opts.resume_from.empty() ? std::ios::trunc : std::ios::app);

    auto lr_of = [&groups](const std::string& name, double mult) {
        for (const auto& g : groups) {
            if (g.name == name) return g.lr * mult;
        }
        return 0.0;
    };

    for (Index epoch = start_epoch; epoch < cfg.epochs && step < total_steps; ++epoch) {
        Rng order_rng(derive_seed({cfg.seed, static_cast<std::uint64_t>(epoch), 0x0dd5ULL}));
        const auto perm = order_rng.permutation(static_cast<long>(n));
        double loss_sum = 0.0;
        Index batches = 0;
        double mult = 0.0;
        for (Index b = 0; b < steps_per_epoch && step < total_steps; ++b, ++step) {
            std::vector<Index> which;
            for (Index i = b * cfg.batch_size; i < std::min(n, (b + 1) * cfg.batch_size); ++i) {
                which.push_back(res.train_indices[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])]);
            }
            ClipBatch batch = make_batch(ds, which, load, Split::train, static_cast<std::uint64_t>(epoch));
            Rng aug_rng(derive_seed({aug.rng_seed, cfg.seed, static_cast<std::uint64_t>(step), 0xa9u}));
            MixRecord rec;
            batch = augment_batch(batch, aug, aug_rng, &rec);
            if (aug_log.is_open()) {
                aug_log << nlohmann::json{{"step", step}, {"kind", to_string(rec.kind)}, {"lambda", rec.lambda},
                                          {"perm", rec.perm}, {"ids", batch.ids}}
                               .dump()
                        << "\n";
            }
            mult = lr_at(step, total_steps, warmup_steps, cfg.scheduler);
            const auto r = train_step(model, batch, opt, groups, mult, cfg, &tracker);
            res.step_losses.push_back(r.loss);
            res.step_lrs.push_back(lr_of("adapters", mult));
            loss_sum += r.loss;
            ++batches;
        }
        const auto ev = evaluate(model, ds, val, load);
        EpochLog e;
        e.epoch = epoch + 1;
        e.step = step;
        e.loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
        e.lr_adapters = lr_of("adapters", mult);
        e.lr_prompts = lr_of("prompts", mult);
        e.uar = ev.report.uar;
        e.war = ev.report.war;
        res.log.push_back(e);
        log_file << to_json(e).dump() << "\n";
        log_file.flush();
        if (opts.on_epoch) opts.on_epoch(e);
        if (e.war > res.best_war) {
            res.best_war = e.war;
            save_checkpoint(res.best_checkpoint, model,
                            {{"epoch", std::to_string(e.epoch)}, {"step", std::to_string(step)},
                             {"val_war", std::to_string(e.war)}, {"val_uar", std::to_string(e.uar)}});
        }
        std::ostringstream best;
        best << std::setprecision(17) << res.best_war;
        save_checkpoint(res.latest_checkpoint, model,
                        {{"epoch", std::to_string(e.epoch)}, {"step", std::to_string(step)}, {"best_war", best.str()}},
                        &opt);
    }
    if (cfg.epochs > 0) {
        save_checkpoint(res.final_checkpoint, model, {{"epoch", std::to_string(cfg.epochs)}, {"step", std::to_string(step)}});
    }
    res.dead_parameters = tracker.dead();
    return res;
}

}  // namespace peadapt
