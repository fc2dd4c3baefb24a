#pragma once

// Action-unit prompt text, a word-level tokenizer for the toy host, learnable
// prompt tokens and the text-to-vision coupling map.

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "peadapt/adapter.hpp"
#include "peadapt/core/autograd.hpp"
#include "peadapt/core/error.hpp"
#include "peadapt/core/rng.hpp"
#include "peadapt/core/strings.hpp"

namespace peadapt {

inline const std::array<std::string, 7>& expression_classes() {
    static const std::array<std::string, 7> names{"Happiness", "Sadness", "Neutral", "Anger",
                                                  "Surprise",  "Disgust", "Fear"};
    return names;
}

/// Expression class -> action-unit description.
class AUPromptTable {
public:
    static const AUPromptTable& canonical() {
        static const AUPromptTable table({
            {"Happiness", "Cheek Raiser, Lip Corner Puller."},
            {"Sadness", "Inner Brow Raiser, Brow Lowerer, Lip Corner Depressor"},
            {"Neutral", "Relaxed Muscles, Even Eyebrows, Closed Lips, Calm Eyes, Smooth Forehead"},
            {"Anger", "Brow Lowerer, Upper Lid Raiser, Lid Tightener, Lip Tightener"},
            {"Surprise", "Inner Brow Raiser, Outer Brow Raiser, Upper Lid Raiser, Jaw Drop"},
            {"Disgust", "Nose Wrinkler, Lip Corner Depressor, Lower Lip Depressor"},
            {"Fear",
             "Inner Brow Raiser, Outer Brow Raiser, Brow Lowerer, Upper Lid Raiser, Lid Tightener, Lip "
             "Stretcher, Jaw Drop"},
        });
        return table;
    }

    explicit AUPromptTable(std::map<std::string, std::string> entries) : entries_(std::move(entries)) {}

    bool contains(const std::string& cls) const { return entries_.count(cls) != 0; }

    const std::string& at(const std::string& cls) const {
        auto it = entries_.find(cls);
        if (it == entries_.end()) {
            throw LookupError("unknown expression class '" + cls + "'");
        }
        return it->second;
    }

    const std::map<std::string, std::string>& entries() const { return entries_; }

private:
    std::map<std::string, std::string> entries_;
};

enum class PromptMode { class_name, au_description, chatgpt_file, coop_template };

inline PromptMode parse_prompt_mode(const std::string& s) {
    if (s == "class_name") return PromptMode::class_name;
    if (s == "au_description") return PromptMode::au_description;
    if (s == "chatgpt_file") return PromptMode::chatgpt_file;
    if (s == "coop_template") return PromptMode::coop_template;
    throw ConfigError("unknown prompt mode '" + s + "'");
}

/// Reads a "ClassName<TAB>description" file. Every class in `required` must appear.
inline std::map<std::string, std::string> load_prompt_descriptions(const std::string& path,
                                                                   const std::vector<std::string>& required) {
    std::ifstream in(path);
    if (!in) {
        throw IngestionError("cannot open prompt description file '" + path + "'");
    }
    std::map<std::string, std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        if (trim(line).empty()) {
            continue;
        }
        const auto tab = line.find('\t');
        if (tab == std::string::npos) {
            throw IngestionError("prompt description line without a tab: '" + line + "'");
        }
        const std::string cls = trim(line.substr(0, tab));
        const std::string text = trim(line.substr(tab + 1));
        if (!text.empty()) {
            out[cls] = text;
        }
    }
    std::string missing;
    for (const auto& cls : required) {
        if (!out.count(cls)) {
            missing += (missing.empty() ? "" : ", ") + cls;
        }
    }
    if (!missing.empty()) {
        throw IngestionError("prompt description file '" + path + "' is missing classes: " + missing);
    }
    return out;
}

/// Prompt text for one class. `descriptions` is required for chatgpt_file mode.
inline std::string build_au_prompt(const std::string& class_name, const AUPromptTable& table, PromptMode mode,
                                   const std::map<std::string, std::string>* descriptions = nullptr) {
    const std::string& au = table.at(class_name);
    switch (mode) {
    case PromptMode::class_name:
        return class_name;
    case PromptMode::au_description:
        return au;
    case PromptMode::coop_template:
        // Learnable context tokens are prepended by the host; this is the class suffix.
        return class_name + ".";
    case PromptMode::chatgpt_file: {
        if (!descriptions) {
            throw IngestionError("chatgpt_file mode needs a loaded description file");
        }
        auto it = descriptions->find(class_name);
        if (it == descriptions->end()) {
            throw IngestionError("prompt description file is missing classes: " + class_name);
        }
        return it->second;
    }
    }
    throw ConfigError("unhandled prompt mode");
}

// ---------------------------------------------------------------------------
// Tokenizer

/// Word-level tokenizer: lower-cased alphanumeric words and single punctuation
/// marks. Known words get dense ids; others hash into the remaining id range.
class Tokenizer {
public:
    static constexpr int pad_id = 0;
    static constexpr int sot_id = 1;
    static constexpr int eot_id = 2;
    static constexpr int unk_id = 3;

    explicit Tokenizer(int vocab_size) : vocab_size_(vocab_size) {
        std::set<std::string> words;
        for (const auto& [cls, text] : AUPromptTable::canonical().entries()) {
            for (const auto& w : split(cls)) words.insert(w);
            for (const auto& w : split(text)) words.insert(w);
        }
        for (const char* w : {"a", "photo", "of", "the", "face", "expression", "person", "with", "and", ".", ","}) {
            words.insert(w);
        }
        int next = 4;
        for (const auto& w : words) {
            if (next >= vocab_size_) {
                break;
            }
            ids_[w] = next++;
        }
        first_hashed_ = next;
    }

    int vocab_size() const { return vocab_size_; }

    static std::vector<std::string> split(const std::string& text) {
        std::vector<std::string> out;
        std::string cur;
        for (char ch : text) {
            const auto c = static_cast<unsigned char>(ch);
            if (std::isalnum(c) || ch == '\'') {
                cur.push_back(static_cast<char>(std::tolower(c)));
                continue;
            }
            if (!cur.empty()) {
                out.push_back(cur);
                cur.clear();
            }
            if (std::ispunct(c)) {
                out.emplace_back(1, ch);
            }
        }
        if (!cur.empty()) {
            out.push_back(cur);
        }
        return out;
    }

    int word_id(const std::string& w) const {
        auto it = ids_.find(w);
        if (it != ids_.end()) {
            return it->second;
        }
        if (first_hashed_ < vocab_size_) {
            return first_hashed_ + static_cast<int>(fnv1a(w) % static_cast<std::uint64_t>(vocab_size_ - first_hashed_));
        }
        return unk_id;
    }

    /// [sot, words..., eot], truncated to `context` ids (eot always kept).
    std::vector<int> encode(const std::string& text, int context, bool* truncated = nullptr) const {
        std::vector<int> out{sot_id};
        for (const auto& w : split(text)) {
            out.push_back(word_id(w));
        }
        bool cut = false;
        if (static_cast<int>(out.size()) + 1 > context) {
            out.resize(static_cast<std::size_t>(std::max(1, context - 1)));
            cut = true;
        }
        out.push_back(eot_id);
        if (truncated) {
            *truncated = cut;
        }
        return out;
    }

private:
    int vocab_size_;
    int first_hashed_ = 4;
    std::map<std::string, int> ids_;
};

// ---------------------------------------------------------------------------
// Learnable prompt tokens

/// The prompt configurations compared in the textual-prompt ablation.
enum class PromptVariant { class_names, coop, coop_au, chatgpt, maple_au };

inline const char* to_string(PromptVariant v) {
    switch (v) {
    case PromptVariant::class_names: return "class_names";
    case PromptVariant::coop: return "coop";
    case PromptVariant::coop_au: return "coop_au";
    case PromptVariant::chatgpt: return "chatgpt";
    case PromptVariant::maple_au: return "maple_au";
    }
    return "?";
}

inline PromptVariant parse_prompt_variant(const std::string& s) {
    for (auto v : {PromptVariant::class_names, PromptVariant::coop, PromptVariant::coop_au, PromptVariant::chatgpt,
                   PromptVariant::maple_au}) {
        if (s == to_string(v)) {
            return v;
        }
    }
    throw ConfigError("unknown prompt variant '" + s + "'");
}

inline PromptMode text_mode_of(PromptVariant v) {
    switch (v) {
    case PromptVariant::class_names: return PromptMode::class_name;
    case PromptVariant::coop: return PromptMode::coop_template;
    case PromptVariant::coop_au: return PromptMode::au_description;
    case PromptVariant::chatgpt: return PromptMode::chatgpt_file;
    case PromptVariant::maple_au: return PromptMode::au_description;
    }
    return PromptMode::class_name;
}

inline bool has_learnable_tokens(PromptVariant v) { return v != PromptVariant::class_names; }
inline bool is_coupled(PromptVariant v) { return v == PromptVariant::maple_au; }

/// Learnable text tokens per injection depth and, when coupled, the affine
/// map that derives the vision tokens from them.
template <typename S>
struct PromptState {
    std::vector<ag::Var<S>> text_tokens;  // depth entries of N x d_text
    std::vector<ag::Var<S>> coupling_w;   // d_vision x d_text
    std::vector<ag::Var<S>> coupling_b;   // 1 x d_vision
    std::vector<Matrix<S>> vision_tokens; // derived: F(P_t) per depth

    Index depth() const { return static_cast<Index>(text_tokens.size()); }
    Index token_count() const { return text_tokens.empty() ? 0 : text_tokens.front().rows(); }
    bool coupled() const { return !coupling_w.empty(); }

    static PromptState init(Index tokens, Index depth, Index d_text, Index d_vision, bool coupled, Rng& rng) {
        if (tokens < 0 || depth < 0) {
            throw ConfigError("prompt token count and depth must be nonnegative");
        }
        PromptState st;
        if (tokens == 0 || depth == 0) {
            return st;
        }
        for (Index j = 0; j < depth; ++j) {
            Matrix<S> p(tokens, d_text);
            for (Index i = 0; i < p.size(); ++i) {
                p.data()[i] = static_cast<S>(rng.normal(0.0, 0.02));
            }
            st.text_tokens.push_back(detail::param<S>(std::move(p)));
            if (coupled) {
                const S bound = S(1) / std::sqrt(S(d_text));
                st.coupling_w.push_back(detail::param<S>(detail::uniform_matrix<S>(d_vision, d_text, bound, rng)));
                st.coupling_b.push_back(detail::param<S>(Matrix<S>::Zero(1, d_vision)));
            }
        }
        st.recouple();
        return st;
    }

    /// Graph-level vision tokens for depth j (gradient flows back into P_t).
    ag::Var<S> vision_tokens_var(Index j) const {
        return ag::linear(text_tokens[static_cast<std::size_t>(j)], coupling_w[static_cast<std::size_t>(j)],
                          coupling_b[static_cast<std::size_t>(j)]);
    }

    /// Recomputes the derived vision tokens from the current text tokens.
    void recouple() {
        vision_tokens.clear();
        if (!coupled()) {
            return;
        }
        ag::NoGradGuard ng;
        for (Index j = 0; j < depth(); ++j) {
            vision_tokens.push_back(vision_tokens_var(j).value());
        }
    }

    template <typename F>
    void visit(F&& f, const std::string& prefix) {
        for (std::size_t j = 0; j < text_tokens.size(); ++j) {
            const std::string p = prefix + ".depth" + std::to_string(j);
            f(p + ".text_tokens", text_tokens[j]);
            if (coupled()) {
                f(p + ".coupling.weight", coupling_w[j]);
                f(p + ".coupling.bias", coupling_b[j]);
            }
        }
    }
};

/// Returns `state` with its vision tokens re-derived through the coupling map.
template <typename S>
PromptState<S> couple_prompts(PromptState<S> state) {
    for (std::size_t j = 0; j < state.text_tokens.size() && state.coupled(); ++j) {
        check_dims("coupling weight", state.coupling_w[j].rows(), state.coupling_w[j].cols(), -1,
                   state.text_tokens[j].cols());
        check_dims("coupling bias", state.coupling_b[j].rows(), state.coupling_b[j].cols(), 1,
                   state.coupling_w[j].rows());
    }
    state.recouple();
    return state;
}

/// Prepends prompt tokens to a token sequence.
template <typename S>
Matrix<S> inject_prompts(const Matrix<S>& embeddings, const Matrix<S>& tokens) {
    if (tokens.rows() == 0) {
        return embeddings;
    }
    check_dims("prompt tokens", tokens.rows(), tokens.cols(), -1, embeddings.cols());
    Matrix<S> out(tokens.rows() + embeddings.rows(), embeddings.cols());
    out.topRows(tokens.rows()) = tokens;
    out.bottomRows(embeddings.rows()) = embeddings;
    return out;
}

template <typename S>
ag::Var<S> inject_prompts(const ag::Var<S>& embeddings, const ag::Var<S>& tokens) {
    if (!tokens.defined() || tokens.rows() == 0) {
        return embeddings;
    }
    check_dims("prompt tokens", tokens.rows(), tokens.cols(), -1, embeddings.cols());
    return ag::concat_rows<S>({tokens, embeddings});
}

}  // namespace peadapt
