#pragma once

// Frozen dual encoder (ViT over frame patches, causal text transformer) with
// adapter insertion points, prompt injection, parameter audit, weight import.

#include <array>
#include <cmath>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "peadapt/adapter.hpp"
#include "peadapt/archive.hpp"
#include "peadapt/core/autograd.hpp"
#include "peadapt/core/error.hpp"
#include "peadapt/core/rng.hpp"
#include "peadapt/image.hpp"
#include "peadapt/prompt.hpp"

namespace peadapt {

struct HostConfig {
    Index vision_dim = 64;
    Index text_dim = 64;
    Index joint_dim = 32;
    Index layers_v = 2;
    Index layers_t = 2;
    Index heads_v = 4;
    Index heads_t = 4;
    Index patch_size = 16;
    Index image_size = 64;
    Index frames = 8;
    Index vocab_size = 256;
    Index context_length = 32;
    Index mlp_ratio = 4;
    std::string precision = "float32";
    std::uint64_t backbone_seed = 1234;
    double temperature = 0.07;
    std::array<float, 3> pixel_mean{0.5f, 0.5f, 0.5f};
    std::array<float, 3> pixel_std{0.5f, 0.5f, 0.5f};
    /// Optional named-array container with pretrained backbone weights.
    std::string pretrained_path;
    std::string pretrained_manifest;

    static HostConfig toy() { return HostConfig{}; }

    /// ViT-B/16-shaped dual encoder.
    static HostConfig full() {
        HostConfig c;
        c.vision_dim = 768;
        c.text_dim = 512;
        c.joint_dim = 512;
        c.layers_v = 12;
        c.layers_t = 12;
        c.heads_v = 12;
        c.heads_t = 8;
        c.patch_size = 16;
        c.image_size = 224;
        c.frames = 16;
        c.vocab_size = 49408;
        c.context_length = 77;
        c.pixel_mean = {0.48145466f, 0.4578275f, 0.40821073f};
        c.pixel_std = {0.26862954f, 0.26130258f, 0.27577711f};
        return c;
    }

    Index grid() const { return image_size / patch_size; }
    Index patches() const { return (image_size * image_size) / (patch_size * patch_size); }
    Index patch_dim() const { return 3 * patch_size * patch_size; }

    void validate() const {
        auto positive = [](const char* name, Index v) {
            if (v <= 0) {
                throw ConfigError(std::string("host ") + name + " must be positive, got " + std::to_string(v));
            }
        };
        positive("vision_dim", vision_dim);
        positive("text_dim", text_dim);
        positive("joint_dim", joint_dim);
        positive("layers_v", layers_v);
        positive("layers_t", layers_t);
        positive("heads_v", heads_v);
        positive("heads_t", heads_t);
        positive("patch_size", patch_size);
        positive("image_size", image_size);
        positive("frames", frames);
        positive("vocab_size", vocab_size);
        positive("context_length", context_length);
        positive("mlp_ratio", mlp_ratio);
        if (image_size % patch_size != 0) {
            throw ConfigError("image_size " + std::to_string(image_size) + " is not a multiple of patch_size " +
                              std::to_string(patch_size));
        }
        if (vision_dim % heads_v != 0 || text_dim % heads_t != 0) {
            throw ConfigError("encoder widths must be divisible by their head counts");
        }
        if (context_length < 2) {
            throw ConfigError("context_length must hold at least the start and end tokens");
        }
        if (!(temperature > 0.0)) {
            throw ConfigError("temperature must be positive");
        }
        if (precision != "float32" && precision != "float64") {
            throw ConfigError("precision must be float32 or float64, got '" + precision + "'");
        }
    }

    std::string canonical() const {
        std::ostringstream s;
        s << "dv=" << vision_dim << ";dt=" << text_dim << ";dj=" << joint_dim << ";lv=" << layers_v
          << ";lt=" << layers_t << ";hv=" << heads_v << ";ht=" << heads_t << ";p=" << patch_size
          << ";img=" << image_size << ";T=" << frames << ";vocab=" << vocab_size << ";ctx=" << context_length
          << ";mlp=" << mlp_ratio << ";prec=" << precision << ";seed=" << backbone_seed << ";tau=" << temperature
          << ";weights=" << pretrained_path;
        return s.str();
    }

    std::string digest() const {
        std::ostringstream s;
        s << std::hex << fnv1a(canonical());
        return s.str();
    }
};

// ---------------------------------------------------------------------------
// Backbone layout

enum class InitKind { normal, uniform, zeros, ones, constant };

struct ArraySpec {
    std::string name;
    Index rows;
    Index cols;
    InitKind init;
    double scale;
};

namespace detail {

inline void block_layout(std::vector<ArraySpec>& out, const std::string& prefix, Index d, Index layers,
                         Index mlp_ratio) {
    const double attn_std = 1.0 / std::sqrt(static_cast<double>(d));
    const double proj_std = attn_std / std::sqrt(2.0 * static_cast<double>(layers));
    const double fc_std = 1.0 / std::sqrt(2.0 * static_cast<double>(d));
    const Index hidden = d * mlp_ratio;
    for (Index l = 0; l < layers; ++l) {
        const std::string p = prefix + ".blocks." + std::to_string(l);
        out.push_back({p + ".ln1.weight", 1, d, InitKind::ones, 0});
        out.push_back({p + ".ln1.bias", 1, d, InitKind::zeros, 0});
        out.push_back({p + ".attn.qkv.weight", 3 * d, d, InitKind::normal, attn_std});
        out.push_back({p + ".attn.qkv.bias", 1, 3 * d, InitKind::zeros, 0});
        out.push_back({p + ".attn.out.weight", d, d, InitKind::normal, proj_std});
        out.push_back({p + ".attn.out.bias", 1, d, InitKind::zeros, 0});
        out.push_back({p + ".ln2.weight", 1, d, InitKind::ones, 0});
        out.push_back({p + ".ln2.bias", 1, d, InitKind::zeros, 0});
        out.push_back({p + ".mlp.fc.weight", hidden, d, InitKind::normal, fc_std});
        out.push_back({p + ".mlp.fc.bias", 1, hidden, InitKind::zeros, 0});
        out.push_back({p + ".mlp.proj.weight", d, hidden, InitKind::normal, proj_std});
        out.push_back({p + ".mlp.proj.bias", 1, d, InitKind::zeros, 0});
    }
}

}  // namespace detail

/// Every frozen array with its shape and toy initialisation, in a fixed order.
inline std::vector<ArraySpec> backbone_layout(const HostConfig& c) {
    c.validate();
    std::vector<ArraySpec> out;
    const Index dv = c.vision_dim;
    const Index dt = c.text_dim;
    const double sv = 1.0 / std::sqrt(static_cast<double>(dv));
    const double st = 1.0 / std::sqrt(static_cast<double>(dt));
    out.push_back({"vision.patch_embed.weight", dv, c.patch_dim(), InitKind::uniform,
                   1.0 / std::sqrt(static_cast<double>(c.patch_dim()))});
    out.push_back({"vision.class_embed", 1, dv, InitKind::normal, sv});
    out.push_back({"vision.pos_embed", c.patches() + 1, dv, InitKind::normal, sv});
    out.push_back({"vision.ln_pre.weight", 1, dv, InitKind::ones, 0});
    out.push_back({"vision.ln_pre.bias", 1, dv, InitKind::zeros, 0});
    detail::block_layout(out, "vision", dv, c.layers_v, c.mlp_ratio);
    out.push_back({"vision.ln_post.weight", 1, dv, InitKind::ones, 0});
    out.push_back({"vision.ln_post.bias", 1, dv, InitKind::zeros, 0});
    out.push_back({"vision.proj", dv, c.joint_dim, InitKind::normal, sv});
    out.push_back({"text.token_embed", c.vocab_size, dt, InitKind::normal, 0.02});
    out.push_back({"text.pos_embed", c.context_length, dt, InitKind::normal, 0.01});
    detail::block_layout(out, "text", dt, c.layers_t, c.mlp_ratio);
    out.push_back({"text.ln_final.weight", 1, dt, InitKind::ones, 0});
    out.push_back({"text.ln_final.bias", 1, dt, InitKind::zeros, 0});
    out.push_back({"text.proj", dt, c.joint_dim, InitKind::normal, st});
    out.push_back({"logit_scale", 1, 1, InitKind::constant, std::log(1.0 / c.temperature)});
    return out;
}

inline Index backbone_param_count(const HostConfig& c) {
    Index n = 0;
    for (const auto& a : backbone_layout(c)) {
        n += a.rows * a.cols;
    }
    return n;
}

/// Source (CLIP state-dict style) name -> backbone name.
inline std::map<std::string, std::string> default_name_mapping(const HostConfig& c) {
    std::map<std::string, std::string> m;
    m["visual.conv1.weight"] = "vision.patch_embed.weight";
    m["visual.class_embedding"] = "vision.class_embed";
    m["visual.positional_embedding"] = "vision.pos_embed";
    m["visual.ln_pre.weight"] = "vision.ln_pre.weight";
    m["visual.ln_pre.bias"] = "vision.ln_pre.bias";
    m["visual.ln_post.weight"] = "vision.ln_post.weight";
    m["visual.ln_post.bias"] = "vision.ln_post.bias";
    m["visual.proj"] = "vision.proj";
    m["token_embedding.weight"] = "text.token_embed";
    m["positional_embedding"] = "text.pos_embed";
    m["ln_final.weight"] = "text.ln_final.weight";
    m["ln_final.bias"] = "text.ln_final.bias";
    m["text_projection"] = "text.proj";
    m["logit_scale"] = "logit_scale";
    auto blocks = [&m](const std::string& src, const std::string& dst, Index layers) {
        const std::vector<std::pair<std::string, std::string>> parts{
            {"ln_1.weight", "ln1.weight"},
            {"ln_1.bias", "ln1.bias"},
            {"attn.in_proj_weight", "attn.qkv.weight"},
            {"attn.in_proj_bias", "attn.qkv.bias"},
            {"attn.out_proj.weight", "attn.out.weight"},
            {"attn.out_proj.bias", "attn.out.bias"},
            {"ln_2.weight", "ln2.weight"},
            {"ln_2.bias", "ln2.bias"},
            {"mlp.c_fc.weight", "mlp.fc.weight"},
            {"mlp.c_fc.bias", "mlp.fc.bias"},
            {"mlp.c_proj.weight", "mlp.proj.weight"},
            {"mlp.c_proj.bias", "mlp.proj.bias"},
        };
        for (Index l = 0; l < layers; ++l) {
            for (const auto& [a, b] : parts) {
                m[src + ".resblocks." + std::to_string(l) + "." + a] = dst + ".blocks." + std::to_string(l) + "." + b;
            }
        }
    };
    blocks("visual.transformer", "vision", c.layers_v);
    blocks("transformer", "text", c.layers_t);
    return m;
}

// ---------------------------------------------------------------------------
// Frozen backbone

template <typename S>
struct BlockWeights {
    ag::Var<S> ln1_w, ln1_b, qkv_w, qkv_b, out_w, out_b, ln2_w, ln2_b, fc_w, fc_b, proj_w, proj_b;
};

template <typename S>
class FrozenBackbone {
public:
    /// Seeded Gaussian toy weights (seed from the config).
    static FrozenBackbone random(const HostConfig& cfg) {
        FrozenBackbone b;
        b.cfg_ = cfg;
        Rng rng(cfg.backbone_seed);
        for (const auto& spec : backbone_layout(cfg)) {
            Matrix<S> m(spec.rows, spec.cols);
            switch (spec.init) {
            case InitKind::normal:
                for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(rng.normal(0.0, spec.scale));
                break;
            case InitKind::uniform:
                for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(rng.uniform(-spec.scale, spec.scale));
                break;
            case InitKind::zeros: m.setZero(); break;
            case InitKind::ones: m.setOnes(); break;
            case InitKind::constant: m.setConstant(static_cast<S>(spec.scale)); break;
            }
            b.arrays_.emplace_back(spec.name, ag::Var<S>(std::move(m), false));
        }
        b.bind();
        b.freeze();
        return b;
    }

    const HostConfig& config() const { return cfg_; }

    ag::Var<S>& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) {
            throw LookupError("backbone has no array named '" + name + "'");
        }
        return arrays_[it->second].second;
    }

    const std::vector<std::pair<std::string, ag::Var<S>>>& arrays() const { return arrays_; }
    std::vector<std::pair<std::string, ag::Var<S>>>& arrays() { return arrays_; }

    Index count() const {
        Index n = 0;
        for (const auto& [name, v] : arrays_) n += v.size();
        return n;
    }

    bool frozen() const { return frozen_; }

    /// Disables gradients for every backbone array. There is no inverse.
    void freeze() {
        for (auto& [name, v] : arrays_) {
            v.set_requires_grad(false);
        }
        frozen_ = true;
    }

    [[noreturn]] void unfreeze() {
        throw UnsupportedOperation("the backbone stays frozen; unfreezing is not supported");
    }

    NamedArrays to_container() const {
        NamedArrays c;
        for (const auto& [name, v] : arrays_) c.put(name, v.value());
        c.metadata["host_digest"] = cfg_.digest();
        return c;
    }

    // Handles into arrays_ (shared nodes).
    ag::Var<S> patch_w, class_emb, vis_pos, ln_pre_w, ln_pre_b, ln_post_w, ln_post_b, vis_proj;
    ag::Var<S> tok_emb, txt_pos, ln_final_w, ln_final_b, txt_proj, logit_scale;
    std::vector<BlockWeights<S>> vblocks, tblocks;

private:
    void bind() {
        index_.clear();
        for (std::size_t i = 0; i < arrays_.size(); ++i) index_[arrays_[i].first] = i;
        patch_w = get("vision.patch_embed.weight");
        class_emb = get("vision.class_embed");
        vis_pos = get("vision.pos_embed");
        ln_pre_w = get("vision.ln_pre.weight");
        ln_pre_b = get("vision.ln_pre.bias");
        ln_post_w = get("vision.ln_post.weight");
        ln_post_b = get("vision.ln_post.bias");
        vis_proj = get("vision.proj");
        tok_emb = get("text.token_embed");
        txt_pos = get("text.pos_embed");
        ln_final_w = get("text.ln_final.weight");
        ln_final_b = get("text.ln_final.bias");
        txt_proj = get("text.proj");
        logit_scale = get("logit_scale");
        auto blocks = [this](const std::string& prefix, Index layers) {
            std::vector<BlockWeights<S>> out;
            for (Index l = 0; l < layers; ++l) {
                const std::string p = prefix + ".blocks." + std::to_string(l) + ".";
                out.push_back({get(p + "ln1.weight"), get(p + "ln1.bias"), get(p + "attn.qkv.weight"),
                               get(p + "attn.qkv.bias"), get(p + "attn.out.weight"), get(p + "attn.out.bias"),
                               get(p + "ln2.weight"), get(p + "ln2.bias"), get(p + "mlp.fc.weight"),
                               get(p + "mlp.fc.bias"), get(p + "mlp.proj.weight"), get(p + "mlp.proj.bias")});
            }
            return out;
        };
        vblocks = blocks("vision", cfg_.layers_v);
        tblocks = blocks("text", cfg_.layers_t);
    }

    HostConfig cfg_;
    std::vector<std::pair<std::string, ag::Var<S>>> arrays_;
    std::map<std::string, std::size_t> index_;
    bool frozen_ = false;
};

template <typename S>
void freeze_backbone(FrozenBackbone<S>& backbone) {
    backbone.freeze();
}

namespace detail {

/// A stored array may fill a rows x cols target when the element counts agree
/// and its leading dimension matches (1-D and scalar arrays fill row vectors).
inline bool shape_compatible(const ArrayRecord& r, Index rows, Index cols) {
    if (r.numel() != rows * cols) {
        return false;
    }
    if (r.dims.size() >= 2) {
        return r.dims[0] == rows;
    }
    return rows == 1 || cols == 1;
}

inline std::string dims_of(const ArrayRecord& r) {
    std::string s = "[";
    for (std::size_t i = 0; i < r.dims.size(); ++i) s += (i ? "," : "") + std::to_string(r.dims[i]);
    return s + "]";
}

}  // namespace detail

/// Loads every backbone array from a container. Names are translated with the
/// manifest at `manifest_path` ("source -> target" lines) or, when empty, the
/// default state-dict table; arrays already stored under backbone names load
/// directly. All problems are collected and reported together.
template <typename S>
void import_pretrained(const std::string& weights_path, FrozenBackbone<S>& backbone,
                       const std::string& manifest_path = "") {
    const NamedArrays src = NamedArrays::load(weights_path);
    const auto mapping =
        manifest_path.empty() ? default_name_mapping(backbone.config()) : load_name_mapping(manifest_path);
    std::map<std::string, std::string> source_of;
    for (const auto& [from, to] : mapping) {
        if (src.contains(from)) source_of[to] = from;
    }
    std::vector<std::string> problems;
    std::vector<std::pair<std::size_t, Matrix<S>>> loaded;
    for (std::size_t i = 0; i < backbone.arrays().size(); ++i) {
        const auto& [name, var] = backbone.arrays()[i];
        std::string from = name;
        if (auto it = source_of.find(name); it != source_of.end()) {
            from = it->second;
        } else if (!src.contains(name)) {
            problems.push_back("missing array '" + name + "'");
            continue;
        }
        const ArrayRecord& r = src.at(from);
        if (!detail::shape_compatible(r, var.rows(), var.cols())) {
            problems.push_back("shape mismatch for '" + name + "' (from '" + from + "'): expected " +
                               dims_str(var.rows(), var.cols()) + ", got " + detail::dims_of(r));
            continue;
        }
        loaded.emplace_back(i, src.get<S>(from, var.rows(), var.cols()));
    }
    if (!problems.empty()) {
        std::string msg = "cannot import '" + weights_path + "': ";
        for (std::size_t i = 0; i < problems.size(); ++i) msg += (i ? "; " : "") + problems[i];
        throw IngestionError(msg);
    }
    for (auto& [i, m] : loaded) {
        backbone.arrays()[i].second.mutable_value() = std::move(m);
    }
}

/// Writes the backbone under state-dict names and shapes (patch weights as
/// [d,3,P,P], biases and embeddings 1-D) plus the matching name manifest.
template <typename S>
void export_backbone_state_dict(const FrozenBackbone<S>& backbone, const std::string& weights_path,
                                const std::string& manifest_path) {
    const HostConfig& c = backbone.config();
    const auto mapping = default_name_mapping(c);
    std::map<std::string, std::string> to_source;
    for (const auto& [from, to] : mapping) to_source[to] = from;
    NamedArrays out;
    for (const auto& [name, var] : backbone.arrays()) {
        ArrayRecord r;
        r.dtype = sizeof(S) == 4 ? DType::float32 : DType::float64;
        r.data.assign(var.value().data(), var.value().data() + var.size());
        if (name == "vision.patch_embed.weight") {
            r.dims = {c.vision_dim, 3, c.patch_size, c.patch_size};
        } else if (name == "logit_scale") {
            r.dims = {};
        } else if (var.rows() == 1) {
            r.dims = {static_cast<std::int64_t>(var.cols())};
        } else {
            r.dims = {static_cast<std::int64_t>(var.rows()), static_cast<std::int64_t>(var.cols())};
        }
        out.put(to_source.at(name), std::move(r));
    }
    out.save(weights_path);
    save_name_mapping(manifest_path, mapping);
}

// ---------------------------------------------------------------------------
// Adapter bundle

enum class TdaStream { class_token, all_tokens };

struct BundleConfig {
    bool sha_vision = true;
    bool tda = true;
    bool sha_text = true;
    bool ta = true;
    Index reduction = 8;
    CellKind cell = CellKind::gru;
    ScalePlacement placement = ScalePlacement::post_up_projection;
    Index scale_out = 1;
    TdaStream tda_stream = TdaStream::class_token;
    bool share_across_layers = false;
    bool drop_attention_residual = false;
    PromptVariant prompt_variant = PromptVariant::maple_au;
    bool prompts_enabled = true;
    Index prompt_tokens = 2;
    Index prompt_depth = 1;
    std::string prompt_file;
    bool train_temperature = false;
    std::uint64_t seed = 7;

    bool learnable_prompts() const {
        return prompts_enabled && has_learnable_tokens(prompt_variant) && prompt_tokens > 0 && prompt_depth > 0;
    }

    std::string canonical() const {
        std::ostringstream s;
        s << "sha_v=" << sha_vision << ";tda=" << tda << ";sha_t=" << sha_text << ";ta=" << ta
          << ";r=" << reduction << ";cell=" << to_string(cell) << ";place=" << to_string(placement)
          << ";scale_out=" << scale_out << ";stream=" << (tda_stream == TdaStream::class_token ? "cls" : "all")
          << ";share=" << share_across_layers << ";drop_attn_res=" << drop_attention_residual
          << ";prompt=" << to_string(prompt_variant) << ";prompts_on=" << prompts_enabled
          << ";n_tok=" << prompt_tokens << ";depth=" << prompt_depth << ";tau_train=" << train_temperature
          << ";seed=" << seed;
        return s.str();
    }
};

/// Every trainable array of the model.
template <typename S>
struct AdapterBundle {
    BundleConfig cfg;
    std::vector<BottleneckAdapter<S>> sha_v;  // per vision layer (aliased when shared)
    std::vector<TemporalAdapter<S>> tda;
    std::vector<BottleneckAdapter<S>> sha_t;
    std::vector<BottleneckAdapter<S>> ta;
    PromptState<S> prompts;
    ag::Var<S> logit_scale;  // only when the temperature trains

    AdapterConfig vision_adapter_config(const HostConfig& h) const {
        return {h.vision_dim, cfg.reduction, cfg.placement, cfg.cell, cfg.scale_out};
    }
    AdapterConfig text_adapter_config(const HostConfig& h) const {
        return {h.text_dim, cfg.reduction, cfg.placement, cfg.cell, cfg.scale_out};
    }

    static AdapterBundle init(const HostConfig& host, const BundleConfig& cfg) {
        AdapterBundle b;
        b.cfg = cfg;
        Rng rng(derive_seed({cfg.seed, 0xada9ULL}));
        const auto vc = b.vision_adapter_config(host);
        const auto tc = b.text_adapter_config(host);
        auto shared_stack = [&](Index layers, const AdapterConfig& ac) {
            std::vector<BottleneckAdapter<S>> out;
            for (Index l = 0; l < layers; ++l) {
                if (cfg.share_across_layers && l > 0) {
                    out.push_back(out.front());
                } else {
                    out.push_back(BottleneckAdapter<S>::init(ac, rng));
                }
            }
            return out;
        };
        if (cfg.sha_vision) b.sha_v = shared_stack(host.layers_v, vc);
        if (cfg.tda) {
            for (Index l = 0; l < host.layers_v; ++l) b.tda.push_back(TemporalAdapter<S>::init(vc, rng));
        }
        if (cfg.sha_text) b.sha_t = shared_stack(host.layers_t, tc);
        if (cfg.ta) {
            for (Index l = 0; l < host.layers_t; ++l) b.ta.push_back(BottleneckAdapter<S>::init(tc, rng));
        }
        if (cfg.learnable_prompts()) {
            const Index depth_limit = std::min(host.layers_v, host.layers_t);
            if (cfg.prompt_depth > depth_limit) {
                throw ConfigError("prompt depth " + std::to_string(cfg.prompt_depth) + " exceeds encoder depth " +
                                  std::to_string(depth_limit));
            }
            b.prompts = PromptState<S>::init(cfg.prompt_tokens, cfg.prompt_depth, host.text_dim, host.vision_dim,
                                             is_coupled(cfg.prompt_variant), rng);
        }
        if (cfg.train_temperature) {
            Matrix<S> m(1, 1);
            m(0, 0) = static_cast<S>(std::log(1.0 / host.temperature));
            b.logit_scale = ag::Var<S>(std::move(m), true);
        }
        return b;
    }

    /// f(family, name, var) once per distinct trainable array.
    template <typename F>
    void visit(F&& f) {
        auto stack = [&](const char* family, const std::string& prefix, std::vector<BottleneckAdapter<S>>& v) {
            for (std::size_t l = 0; l < v.size(); ++l) {
                if (cfg.share_across_layers && l > 0) break;
                const std::string p = cfg.share_across_layers ? prefix + ".shared" : prefix + "." + std::to_string(l);
                v[l].visit([&](const std::string& n, ag::Var<S>& var) { f(family, n, var); }, p);
            }
        };
        stack("sha_vision", "vision.sha", sha_v);
        for (std::size_t l = 0; l < tda.size(); ++l) {
            tda[l].visit([&](const std::string& n, ag::Var<S>& var) { f("tda", n, var); },
                         "vision.tda." + std::to_string(l));
        }
        stack("sha_text", "text.sha", sha_t);
        for (std::size_t l = 0; l < ta.size(); ++l) {
            ta[l].visit([&](const std::string& n, ag::Var<S>& var) { f("ta", n, var); },
                        "text.ta." + std::to_string(l));
        }
        prompts.visit([&](const std::string& n, ag::Var<S>& var) { f("prompts", n, var); }, "prompts");
        if (logit_scale.defined()) f("temperature", std::string("temperature.logit_scale"), logit_scale);
    }

    std::vector<std::pair<std::string, ag::Var<S>>> parameters() {
        std::vector<std::pair<std::string, ag::Var<S>>> out;
        visit([&out](const char*, const std::string& n, ag::Var<S>& v) { out.emplace_back(n, v); });
        return out;
    }

    void save(NamedArrays& c) {
        visit([&c](const char*, const std::string& n, ag::Var<S>& v) { c.put(n, v.value()); });
    }

    void load(const NamedArrays& c) {
        visit([&c](const char*, const std::string& n, ag::Var<S>& v) {
            if (!c.contains(n)) {
                throw IngestionError("checkpoint is missing adapter array '" + n + "'");
            }
            v.mutable_value() = c.get<S>(n, v.rows(), v.cols());
        });
        prompts.recouple();
    }
};

struct ParameterAudit {
    Index trainable = 0;
    Index frozen = 0;
    Index total = 0;
    double fraction = 0.0;
    std::map<std::string, Index> by_family;
};

/// Exact counts; the backbone is counted from its layout so this also works
/// for configurations too large to materialise.
template <typename S>
ParameterAudit audit_trainable(AdapterBundle<S>& bundle, const HostConfig& host) {
    ParameterAudit a;
    for (const char* fam : {"sha_vision", "tda", "sha_text", "ta", "prompts"}) a.by_family[fam] = 0;
    bundle.visit([&a](const char* family, const std::string&, ag::Var<S>& v) {
        a.by_family[family] += v.size();
        a.trainable += v.size();
    });
    a.frozen = backbone_param_count(host);
    a.total = a.trainable + a.frozen;
    a.fraction = a.total > 0 ? static_cast<double>(a.trainable) / static_cast<double>(a.total) : 0.0;
    return a;
}

// ---------------------------------------------------------------------------
// Model

/// Splits a frame into P x P patches, one row per patch in raster order, each
/// row flattened channel-major then (y, x) to match [d, 3, P, P] patch weights.
template <typename S>
Matrix<S> patchify(const Image& frame, Index patch, const std::array<float, 3>& mean,
                   const std::array<float, 3>& stddev, bool normalize) {
    const Index gh = frame.height / patch;
    const Index gw = frame.width / patch;
    Matrix<S> out(gh * gw, 3 * patch * patch);
    for (Index gy = 0; gy < gh; ++gy) {
        for (Index gx = 0; gx < gw; ++gx) {
            const Index row = gy * gw + gx;
            for (int c = 0; c < 3; ++c) {
                for (Index py = 0; py < patch; ++py) {
                    for (Index px = 0; px < patch; ++px) {
                        float v = frame.at(static_cast<int>(gy * patch + py), static_cast<int>(gx * patch + px), c);
                        if (normalize) v = (v - mean[c]) / stddev[c];
                        out(row, c * patch * patch + py * patch + px) = static_cast<S>(v);
                    }
                }
            }
        }
    }
    return out;
}

template <typename S>
class Model {
public:
    Model(HostConfig host, BundleConfig bcfg, std::vector<std::string> classes,
          std::optional<FrozenBackbone<S>> backbone = std::nullopt)
        : host_(std::move(host)),
          backbone_(backbone ? std::move(*backbone) : FrozenBackbone<S>::random(host_)),
          bundle_(AdapterBundle<S>::init(host_, bcfg)),
          tokenizer_(static_cast<int>(host_.vocab_size)),
          classes_(std::move(classes)) {
        host_.validate();
        if (!host_.pretrained_path.empty() && !backbone) {
            import_pretrained(host_.pretrained_path, backbone_, host_.pretrained_manifest);
        }
        freeze_backbone(backbone_);
        if (classes_.empty()) {
            throw ConfigError("model needs at least one class");
        }
        std::map<std::string, std::string> descriptions;
        const PromptMode mode = text_mode_of(bcfg.prompt_variant);
        if (mode == PromptMode::chatgpt_file) {
            descriptions = load_prompt_descriptions(bcfg.prompt_file, classes_);
        }
        for (const auto& c : classes_) {
            prompt_texts_.push_back(build_au_prompt(c, AUPromptTable::canonical(), mode, &descriptions));
        }
    }

    const HostConfig& host() const { return host_; }
    const BundleConfig& bundle_config() const { return bundle_.cfg; }
    FrozenBackbone<S>& backbone() { return backbone_; }
    const FrozenBackbone<S>& backbone() const { return backbone_; }
    AdapterBundle<S>& bundle() { return bundle_; }
    const AdapterBundle<S>& bundle() const { return bundle_; }
    const Tokenizer& tokenizer() const { return tokenizer_; }
    const std::vector<std::string>& classes() const { return classes_; }
    const std::vector<std::string>& prompt_texts() const { return prompt_texts_; }
    void set_prompt_texts(std::vector<std::string> texts) { prompt_texts_ = std::move(texts); }

    Index vision_prompt_count() const { return bundle_.prompts.coupled() ? bundle_.prompts.token_count() : 0; }
    Index text_prompt_count() const { return bundle_.prompts.token_count(); }
    /// Row of the class token inside each frame's sequence (after any prompts).
    Index class_token_index() const { return vision_prompt_count(); }
    Index vision_seq_len() const { return vision_prompt_count() + 1 + host_.patches(); }

    ParameterAudit audit() { return audit_trainable(bundle_, host_); }

    /// Keeps derived prompt state consistent after an optimizer step.
    void after_update() { bundle_.prompts.recouple(); }

    // -- vision ---------------------------------------------------------------

    /// Patch + class embeddings with prompts prepended, after ln_pre:
    /// (T * L) x d_v, frame-major.
    ag::Var<S> embed_frames(const Video& clip) const {
        check_clip(clip);
        const Index m = host_.patches();
        Matrix<S> patches(static_cast<Index>(clip.size()) * m, host_.patch_dim());
        for (std::size_t t = 0; t < clip.size(); ++t) {
            patches.middleRows(static_cast<Index>(t) * m, m) =
                patchify<S>(clip[t], host_.patch_size, host_.pixel_mean, host_.pixel_std, false);
        }
        auto emb = ag::matmul_nt(ag::constant(std::move(patches)), backbone_.patch_w);
        ag::Var<S> vp;
        if (vision_prompt_count() > 0) vp = bundle_.prompts.vision_tokens_var(0);
        std::vector<ag::Var<S>> frames;
        for (std::size_t t = 0; t < clip.size(); ++t) {
            auto tokens = ag::add(ag::concat_rows<S>({backbone_.class_emb, ag::slice_rows(emb, static_cast<Index>(t) * m, m)}),
                                  backbone_.vis_pos);
            frames.push_back(inject_prompts(tokens, vp));
        }
        auto x = frames.size() == 1 ? frames.front() : ag::concat_rows(frames);
        return ag::layer_norm(x, backbone_.ln_pre_w, backbone_.ln_pre_b);
    }

    /// One pre-norm vision block with ShA after attention and TDA after the MLP.
    /// `x` is (frames * L) x d_v, frame-major.
    ag::Var<S> vision_block(const ag::Var<S>& x, Index layer, Index frames, ag::AttentionTap<S>* tap = nullptr) const {
        if (layer < 0 || layer >= host_.layers_v) {
            throw ShapeError("vision layer " + std::to_string(layer) + " out of range");
        }
        if (frames <= 0 || x.rows() % frames != 0) {
            throw ShapeError("vision block input rows not divisible by the frame count");
        }
        check_dims("vision block input", x.rows(), x.cols(), -1, host_.vision_dim);
        const Index seq = x.rows() / frames;
        const auto& w = backbone_.vblocks[static_cast<std::size_t>(layer)];
        auto h = deep_vision_prompts(x, layer, frames, seq);
        auto attn = attention_sublayer(h, w, seq, host_.heads_v, false, tap);
        ag::Var<S> h1;
        if (!bundle_.sha_v.empty()) {
            auto delta = bottleneck_delta(attn, bundle_.sha_v[static_cast<std::size_t>(layer)]);
            h1 = bundle_.cfg.drop_attention_residual ? ag::add(h, delta) : ag::add(ag::add(h, attn), delta);
        } else {
            h1 = ag::add(h, attn);
        }
        auto mlp = mlp_sublayer(h1, w);
        auto h2 = ag::add(h1, mlp);
        if (!bundle_.tda.empty()) {
            const auto& p = bundle_.tda[static_cast<std::size_t>(layer)];
            if (bundle_.cfg.tda_stream == TdaStream::all_tokens) {
                h2 = ag::add(h2, temporal_delta(mlp, frames, seq, p, bundle_.cfg.placement));
            } else {
                std::vector<Index> idx;
                for (Index t = 0; t < frames; ++t) idx.push_back(t * seq + class_token_index());
                auto stream = ag::gather_rows(mlp, idx);
                h2 = ag::add_at_rows(h2, temporal_delta(stream, frames, 1, p, bundle_.cfg.placement), idx);
            }
        }
        return h2;
    }

    /// Per-frame class-token features after ln_post: T x d_v.
    ag::Var<S> frame_features(const Video& clip, std::vector<ag::AttentionTap<S>>* taps = nullptr) const {
        auto x = embed_frames(clip);
        const Index frames = static_cast<Index>(clip.size());
        if (taps) taps->assign(static_cast<std::size_t>(host_.layers_v), ag::AttentionTap<S>{});
        for (Index l = 0; l < host_.layers_v; ++l) {
            x = vision_block(x, l, frames, taps ? &(*taps)[static_cast<std::size_t>(l)] : nullptr);
        }
        std::vector<Index> idx;
        const Index seq = vision_seq_len();
        for (Index t = 0; t < frames; ++t) idx.push_back(t * seq + class_token_index());
        return ag::layer_norm(ag::gather_rows(x, idx), backbone_.ln_post_w, backbone_.ln_post_b);
    }

    /// Mean over frames of the class-token features, projected and L2-normalised.
    ag::Var<S> pool_and_project(const ag::Var<S>& frame_feats) const {
        return ag::normalize_rows(ag::matmul(ag::mean_rows(frame_feats), backbone_.vis_proj));
    }

    ag::Var<S> encode_video(const Video& clip, std::vector<ag::AttentionTap<S>>* taps = nullptr) const {
        return pool_and_project(frame_features(clip, taps));
    }

    /// B x d_j, one row per clip.
    ag::Var<S> encode_videos(const std::vector<const Video*>& clips) const {
        if (clips.empty()) {
            throw InputError("encode_videos: empty batch");
        }
        std::vector<ag::Var<S>> rows;
        rows.reserve(clips.size());
        for (const Video* c : clips) rows.push_back(encode_video(*c));
        return rows.size() == 1 ? rows.front() : ag::concat_rows(rows);
    }

    // -- text -----------------------------------------------------------------

    ag::Var<S> text_block(const ag::Var<S>& x, Index layer) const {
        if (layer < 0 || layer >= host_.layers_t) {
            throw ShapeError("text layer " + std::to_string(layer) + " out of range");
        }
        const auto& w = backbone_.tblocks[static_cast<std::size_t>(layer)];
        auto h = deep_text_prompts(x, layer);
        auto attn = attention_sublayer(h, w, h.rows(), host_.heads_t, true, nullptr);
        ag::Var<S> h1;
        if (!bundle_.sha_t.empty()) {
            auto delta = bottleneck_delta(attn, bundle_.sha_t[static_cast<std::size_t>(layer)]);
            h1 = bundle_.cfg.drop_attention_residual ? ag::add(h, delta) : ag::add(ag::add(h, attn), delta);
        } else {
            h1 = ag::add(h, attn);
        }
        auto mlp = mlp_sublayer(h1, w);
        auto h2 = ag::add(h1, mlp);
        if (!bundle_.ta.empty()) {
            h2 = ag::add(h2, bottleneck_delta(mlp, bundle_.ta[static_cast<std::size_t>(layer)]));
        }
        return h2;
    }

    /// 1 x d_j embedding of one prompt, pooled at the end-of-text token.
    ag::Var<S> encode_prompt(const std::string& text) const {
        if (trim(text).empty()) {
            throw InputError("encode_text: empty prompt");
        }
        bool truncated = false;
        const auto ids = tokenizer_.encode(text, static_cast<int>(host_.context_length), &truncated);
        if (truncated) {
            std::cerr << "warning: prompt truncated to " << host_.context_length << " tokens: '" << text << "'\n";
        }
        const Index n = static_cast<Index>(ids.size());
        std::vector<Index> rows(ids.begin(), ids.end());
        auto x = ag::add(ag::gather_rows(backbone_.tok_emb, rows), ag::slice_rows(backbone_.txt_pos, 0, n));
        ag::Var<S> tp;
        if (text_prompt_count() > 0) tp = bundle_.prompts.text_tokens[0];
        x = inject_prompts(x, tp);
        for (Index l = 0; l < host_.layers_t; ++l) x = text_block(x, l);
        auto eot = ag::slice_rows(x, text_prompt_count() + n - 1, 1);
        eot = ag::layer_norm(eot, backbone_.ln_final_w, backbone_.ln_final_b);
        return ag::normalize_rows(ag::matmul(eot, backbone_.txt_proj));
    }

    /// C x d_j, one row per prompt.
    ag::Var<S> encode_text(const std::vector<std::string>& prompts) const {
        if (prompts.empty()) {
            throw InputError("encode_text: no prompts");
        }
        std::vector<ag::Var<S>> rows;
        for (const auto& p : prompts) rows.push_back(encode_prompt(p));
        return rows.size() == 1 ? rows.front() : ag::concat_rows(rows);
    }

    ag::Var<S> encode_class_prompts() const { return encode_text(prompt_texts_); }

    // -- classification -------------------------------------------------------

    /// cos(f_v, f_t) / tau for normalised embeddings: B x C.
    ag::Var<S> logits(const ag::Var<S>& fv, const ag::Var<S>& ft) const {
        auto cos = ag::matmul_nt(fv, ft);
        if (bundle_.logit_scale.defined()) {
            return ag::mul_scalar(cos, ag::exp(bundle_.logit_scale));
        }
        return ag::scale(cos, static_cast<S>(std::exp(backbone_.logit_scale.value()(0, 0))));
    }

    ag::Var<S> forward(const std::vector<const Video*>& clips) const {
        return logits(encode_videos(clips), encode_class_prompts());
    }

private:
    void check_clip(const Video& clip) const {
        if (static_cast<Index>(clip.size()) != host_.frames) {
            throw InputError("clip has " + std::to_string(clip.size()) + " frames, host expects " +
                             std::to_string(host_.frames));
        }
        for (const auto& f : clip) {
            if (f.height != host_.image_size || f.width != host_.image_size) {
                throw InputError("frame is " + std::to_string(f.height) + "x" + std::to_string(f.width) +
                                 ", host expects " + std::to_string(host_.image_size) + "x" +
                                 std::to_string(host_.image_size));
            }
        }
    }

    ag::Var<S> attention_sublayer(const ag::Var<S>& h, const BlockWeights<S>& w, Index seq, Index heads, bool causal,
                                  ag::AttentionTap<S>* tap) const {
        auto qkv = ag::linear(ag::layer_norm(h, w.ln1_w, w.ln1_b), w.qkv_w, w.qkv_b);
        return ag::linear(ag::attention(qkv, seq, heads, causal, tap), w.out_w, w.out_b);
    }

    ag::Var<S> mlp_sublayer(const ag::Var<S>& h, const BlockWeights<S>& w) const {
        auto in = ag::layer_norm(h, w.ln2_w, w.ln2_b);
        return ag::linear(ag::quick_gelu(ag::linear(in, w.fc_w, w.fc_b)), w.proj_w, w.proj_b);
    }

    /// Deep prompting: layers 1..depth-1 replace the prompt rows with their own tokens.
    ag::Var<S> deep_vision_prompts(const ag::Var<S>& x, Index layer, Index frames, Index seq) const {
        const Index n = vision_prompt_count();
        if (layer == 0 || n == 0 || layer >= bundle_.prompts.depth()) {
            return x;
        }
        auto vp = bundle_.prompts.vision_tokens_var(layer);
        std::vector<ag::Var<S>> parts;
        for (Index t = 0; t < frames; ++t) {
            parts.push_back(vp);
            parts.push_back(ag::slice_rows(x, t * seq + n, seq - n));
        }
        return ag::concat_rows(parts);
    }

    ag::Var<S> deep_text_prompts(const ag::Var<S>& x, Index layer) const {
        const Index n = text_prompt_count();
        if (layer == 0 || n == 0 || layer >= bundle_.prompts.depth()) {
            return x;
        }
        return ag::concat_rows<S>({bundle_.prompts.text_tokens[static_cast<std::size_t>(layer)],
                                   ag::slice_rows(x, n, x.rows() - n)});
    }

    HostConfig host_;
    FrozenBackbone<S> backbone_;
    AdapterBundle<S> bundle_;
    Tokenizer tokenizer_;
    std::vector<std::string> classes_;
    std::vector<std::string> prompt_texts_;
};

}  // namespace peadapt
