#pragma once

// Run configuration: one flat "section.key" namespace validated against a
// fixed schema. Sources apply in order: preset, file, PEADAPT_* environment,
// --set overrides, dedicated command-line flags.

#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "peadapt/core/error.hpp"
#include "peadapt/core/strings.hpp"
#include "peadapt/data.hpp"
#include "peadapt/host.hpp"
#include "peadapt/trainer.hpp"
#include "peadapt/visualize.hpp"

extern char** environ;

namespace peadapt {

struct DataConfig {
    std::string root;
    CorruptFramePolicy corrupt_policy = CorruptFramePolicy::skip;
    int test_fold = -1;          // -1: train on every clip
    std::string eval_split = "auto";  // auto | test | holdout | train | all
    int kfold = 5;
    int synth_classes = 2;
    int synth_clips_per_class = 32;
    int synth_folds = 5;
    double synth_noise = 0.03;
};

struct ExportConfig {
    std::string clip;            // clip id; empty = first clip of the split
    std::string method = "tsne";
    double perplexity = 30.0;
    int tsne_iterations = 1000;
};

struct RunConfig {
    std::string preset = "toy";
    HostConfig host = HostConfig::toy();
    BundleConfig bundle;
    TrainingConfig train;
    AugmentConfig aug;
    DataConfig data;
    ExportConfig exports;

    void validate() const {
        host.validate();
        train.validate();
        aug.validate();
        AdapterConfig{host.vision_dim, bundle.reduction, bundle.placement, bundle.cell, bundle.scale_out}.validate();
        AdapterConfig{host.text_dim, bundle.reduction, bundle.placement, bundle.cell, bundle.scale_out}.validate();
        if (bundle.prompt_tokens < 0 || bundle.prompt_depth < 0) {
            throw ConfigError("prompt.tokens and prompt.depth must be nonnegative");
        }
        if (data.kfold < 1) throw ConfigError("data.kfold must be at least 1");
        static const std::vector<std::string> splits{"auto", "test", "holdout", "train", "all"};
        if (std::find(splits.begin(), splits.end(), data.eval_split) == splits.end()) {
            throw ConfigError("data.eval_split must be one of auto, test, holdout, train, all");
        }
        parse_projection(exports.method);
    }
};

namespace detail {

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
    std::istringstream in(v);
    T out{};
    in >> out;
    if (in.fail() || !in.eof()) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
    return out;
}

template <typename T>
std::string show(const T& v) {
    std::ostringstream s;
    s << std::setprecision(17) << v;
    return s.str();
}

inline std::string show(bool v) { return v ? "true" : "false"; }

}  // namespace detail

struct ConfigField {
    std::string key;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

/// Every accepted key, in the order used for the resolved-config echo.
inline const std::vector<ConfigField>& config_schema() {
    using detail::parse_bool;
    using detail::parse_number;
    using detail::show;
    static const std::vector<ConfigField> schema = [] {
        std::vector<ConfigField> f;
        auto num = [&f](const std::string& key, auto member) {
            f.push_back({key,
                         [key, member](RunConfig& c, const std::string& v) {
                             auto& ref = member(c);
                             ref = parse_number<std::decay_t<decltype(ref)>>(key, v);
                         },
                         [member](const RunConfig& c) { return show(member(const_cast<RunConfig&>(c))); }});
        };
        auto flag = [&f](const std::string& key, auto member) {
            f.push_back({key, [key, member](RunConfig& c, const std::string& v) { member(c) = parse_bool(key, v); },
                         [member](const RunConfig& c) { return show(static_cast<bool>(member(const_cast<RunConfig&>(c)))); }});
        };
        auto text = [&f](const std::string& key, auto member) {
            f.push_back({key, [member](RunConfig& c, const std::string& v) { member(c) = v; },
                         [member](const RunConfig& c) { return member(const_cast<RunConfig&>(c)); }});
        };
#define PEADAPT_FIELD(expr) [](RunConfig& c) -> auto& { return expr; }
        num("host.vision_dim", PEADAPT_FIELD(c.host.vision_dim));
        num("host.text_dim", PEADAPT_FIELD(c.host.text_dim));
        num("host.joint_dim", PEADAPT_FIELD(c.host.joint_dim));
        num("host.layers_v", PEADAPT_FIELD(c.host.layers_v));
        num("host.layers_t", PEADAPT_FIELD(c.host.layers_t));
        num("host.heads_v", PEADAPT_FIELD(c.host.heads_v));
        num("host.heads_t", PEADAPT_FIELD(c.host.heads_t));
        num("host.patch_size", PEADAPT_FIELD(c.host.patch_size));
        num("host.image_size", PEADAPT_FIELD(c.host.image_size));
        num("host.frames", PEADAPT_FIELD(c.host.frames));
        num("host.vocab_size", PEADAPT_FIELD(c.host.vocab_size));
        num("host.context_length", PEADAPT_FIELD(c.host.context_length));
        num("host.mlp_ratio", PEADAPT_FIELD(c.host.mlp_ratio));
        text("host.precision", PEADAPT_FIELD(c.host.precision));
        num("host.backbone_seed", PEADAPT_FIELD(c.host.backbone_seed));
        num("host.temperature", PEADAPT_FIELD(c.host.temperature));
        text("host.pretrained", PEADAPT_FIELD(c.host.pretrained_path));
        text("host.pretrained_manifest", PEADAPT_FIELD(c.host.pretrained_manifest));

        flag("adapter.sha_vision", PEADAPT_FIELD(c.bundle.sha_vision));
        flag("adapter.tda", PEADAPT_FIELD(c.bundle.tda));
        flag("adapter.sha_text", PEADAPT_FIELD(c.bundle.sha_text));
        flag("adapter.ta", PEADAPT_FIELD(c.bundle.ta));
        num("adapter.reduction", PEADAPT_FIELD(c.bundle.reduction));
        f.push_back({"adapter.cell", [](RunConfig& c, const std::string& v) { c.bundle.cell = parse_cell_kind(v); },
                     [](const RunConfig& c) { return std::string(to_string(c.bundle.cell)); }});
        f.push_back({"adapter.placement",
                     [](RunConfig& c, const std::string& v) { c.bundle.placement = parse_scale_placement(v); },
                     [](const RunConfig& c) { return std::string(to_string(c.bundle.placement)); }});
        num("adapter.scale_out", PEADAPT_FIELD(c.bundle.scale_out));
        f.push_back({"adapter.tda_stream",
                     [](RunConfig& c, const std::string& v) {
                         if (v == "class_token") c.bundle.tda_stream = TdaStream::class_token;
                         else if (v == "all_tokens") c.bundle.tda_stream = TdaStream::all_tokens;
                         else throw ConfigError("adapter.tda_stream must be class_token or all_tokens, got '" + v + "'");
                     },
                     [](const RunConfig& c) {
                         return std::string(c.bundle.tda_stream == TdaStream::class_token ? "class_token" : "all_tokens");
                     }});
        flag("adapter.share_across_layers", PEADAPT_FIELD(c.bundle.share_across_layers));
        flag("adapter.drop_attention_residual", PEADAPT_FIELD(c.bundle.drop_attention_residual));
        flag("adapter.train_temperature", PEADAPT_FIELD(c.bundle.train_temperature));
        num("adapter.seed", PEADAPT_FIELD(c.bundle.seed));

        f.push_back({"prompt.variant",
                     [](RunConfig& c, const std::string& v) { c.bundle.prompt_variant = parse_prompt_variant(v); },
                     [](const RunConfig& c) { return std::string(to_string(c.bundle.prompt_variant)); }});
        flag("prompt.enabled", PEADAPT_FIELD(c.bundle.prompts_enabled));
        num("prompt.tokens", PEADAPT_FIELD(c.bundle.prompt_tokens));
        num("prompt.depth", PEADAPT_FIELD(c.bundle.prompt_depth));
        text("prompt.file", PEADAPT_FIELD(c.bundle.prompt_file));

        num("train.batch_size", PEADAPT_FIELD(c.train.batch_size));
        num("train.epochs", PEADAPT_FIELD(c.train.epochs));
        num("train.lr_adapters", PEADAPT_FIELD(c.train.lr_adapters));
        num("train.lr_prompts", PEADAPT_FIELD(c.train.lr_prompts));
        num("train.weight_decay", PEADAPT_FIELD(c.train.weight_decay));
        num("train.warmup_epochs", PEADAPT_FIELD(c.train.warmup_epochs));
        text("train.scheduler", PEADAPT_FIELD(c.train.scheduler));
        num("train.seed", PEADAPT_FIELD(c.train.seed));
        num("train.beta1", PEADAPT_FIELD(c.train.beta1));
        num("train.beta2", PEADAPT_FIELD(c.train.beta2));
        num("train.eps", PEADAPT_FIELD(c.train.eps));
        num("train.grad_clip", PEADAPT_FIELD(c.train.grad_clip));
        num("train.holdout_fraction", PEADAPT_FIELD(c.train.holdout_fraction));
        num("train.global_lr", PEADAPT_FIELD(c.train.global_lr));
        num("train.max_steps", PEADAPT_FIELD(c.train.max_steps));

        flag("aug.enabled", PEADAPT_FIELD(c.aug.enabled));
        num("aug.p_mixup_threshold", PEADAPT_FIELD(c.aug.p_mixup_threshold));
        num("aug.p_fmix_threshold", PEADAPT_FIELD(c.aug.p_fmix_threshold));
        num("aug.mixup_alpha", PEADAPT_FIELD(c.aug.mixup_alpha));
        num("aug.fmix_alpha", PEADAPT_FIELD(c.aug.fmix_alpha));
        num("aug.fmix_decay_power", PEADAPT_FIELD(c.aug.fmix_decay_power));
        num("aug.seed", PEADAPT_FIELD(c.aug.rng_seed));

        text("data.root", PEADAPT_FIELD(c.data.root));
        f.push_back({"data.corrupt_policy",
                     [](RunConfig& c, const std::string& v) {
                         if (v == "skip") c.data.corrupt_policy = CorruptFramePolicy::skip;
                         else if (v == "fail") c.data.corrupt_policy = CorruptFramePolicy::fail;
                         else throw ConfigError("data.corrupt_policy must be skip or fail, got '" + v + "'");
                     },
                     [](const RunConfig& c) {
                         return std::string(c.data.corrupt_policy == CorruptFramePolicy::skip ? "skip" : "fail");
                     }});
        num("data.test_fold", PEADAPT_FIELD(c.data.test_fold));
        text("data.eval_split", PEADAPT_FIELD(c.data.eval_split));
        num("data.kfold", PEADAPT_FIELD(c.data.kfold));
        num("data.synth_classes", PEADAPT_FIELD(c.data.synth_classes));
        num("data.synth_clips_per_class", PEADAPT_FIELD(c.data.synth_clips_per_class));
        num("data.synth_folds", PEADAPT_FIELD(c.data.synth_folds));
        num("data.synth_noise", PEADAPT_FIELD(c.data.synth_noise));

        text("export.clip", PEADAPT_FIELD(c.exports.clip));
        text("export.method", PEADAPT_FIELD(c.exports.method));
        num("export.perplexity", PEADAPT_FIELD(c.exports.perplexity));
        num("export.tsne_iterations", PEADAPT_FIELD(c.exports.tsne_iterations));
#undef PEADAPT_FIELD
        return f;
    }();
    return schema;
}

inline const ConfigField& config_field(const std::string& key) {
    for (const auto& f : config_schema()) {
        if (f.key == key) return f;
    }
    throw ConfigError("unknown configuration key '" + key + "'");
}

inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
    config_field(key).set(c, value);
}

inline std::string get_config_value(const RunConfig& c, const std::string& key) { return config_field(key).get(c); }

/// "host.layers_v" -> "PEADAPT_HOST_LAYERS_V".
inline std::string env_name(const std::string& key) {
    std::string out = "PEADAPT_";
    for (char ch : key) out += ch == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    return out;
}

inline RunConfig preset_config(const std::string& preset) {
    RunConfig c;
    c.preset = preset;
    if (preset == "toy") {
        c.host = HostConfig::toy();
    } else if (preset == "full") {
        c.host = HostConfig::full();
    } else {
        throw ConfigError("preset must be toy or full, got '" + preset + "'");
    }
    return c;
}

/// "key = value" (or "key: value") lines; '#' starts a comment.
inline std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text, const std::string& origin) {
    std::vector<std::pair<std::string, std::string>> out;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto h = line.find('#'); h != std::string::npos) line = line.substr(0, h);
        line = trim(line);
        if (line.empty()) continue;
        auto sep = line.find('=');
        if (sep == std::string::npos) sep = line.find(':');
        if (sep == std::string::npos) {
            throw ConfigError(origin + " line " + std::to_string(lineno) + ": expected 'key = value'");
        }
        out.emplace_back(trim(line.substr(0, sep)), trim(line.substr(sep + 1)));
    }
    return out;
}

inline std::vector<std::pair<std::string, std::string>> read_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot read config file '" + path + "'");
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str(), path);
}

struct ConfigSources {
    std::string preset;  // empty: the file's "preset" entry, else toy
    std::string file;
    std::vector<std::string> overrides;                        // "key=value"
    std::vector<std::pair<std::string, std::string>> flags;    // already keyed
    bool use_environment = true;
};

inline RunConfig resolve_config(const ConfigSources& src) {
    std::vector<std::pair<std::string, std::string>> file_entries;
    if (!src.file.empty()) {
        file_entries = read_config_file(src.file);
    }
    std::string preset = "toy";
    for (const auto& [k, v] : file_entries) {
        if (k == "preset") preset = v;
    }
    if (!src.preset.empty()) preset = src.preset;
    RunConfig c = preset_config(preset);
    for (const auto& [k, v] : file_entries) {
        if (k == "preset") continue;
        set_config_value(c, k, v);
    }
    if (src.use_environment) {
        std::map<std::string, std::string> known;
        for (const auto& f : config_schema()) known[env_name(f.key)] = f.key;
        for (char** e = environ; e && *e; ++e) {
            const std::string entry(*e);
            if (entry.rfind("PEADAPT_", 0) != 0) continue;
            const auto eq = entry.find('=');
            const std::string name = entry.substr(0, eq);
            auto it = known.find(name);
            if (it == known.end()) {
                throw ConfigError("unknown configuration variable '" + name + "' in the environment");
            }
            set_config_value(c, it->second, eq == std::string::npos ? "" : entry.substr(eq + 1));
        }
    }
    for (const auto& o : src.overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("--set expects key=value, got '" + o + "'");
        }
        set_config_value(c, trim(o.substr(0, eq)), trim(o.substr(eq + 1)));
    }
    for (const auto& [k, v] : src.flags) set_config_value(c, k, v);
    c.validate();
    return c;
}

/// Same format that resolve_config reads, so a run can be replayed from it.
inline std::string resolved_config_text(const RunConfig& c) {
    std::ostringstream s;
    s << "preset = " << c.preset << "\n";
    for (const auto& f : config_schema()) s << f.key << " = " << f.get(c) << "\n";
    return s.str();
}

}  // namespace peadapt
