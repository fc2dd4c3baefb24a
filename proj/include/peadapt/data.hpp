#pragma once

// Clip ingestion, frame sampling, preprocessing, batch mixing (Mixup / FMix)
// and a synthetic moving-blob dataset.
//
// Dataset layout:
//   root/classes.txt          one class name per line, index = line number
//   root/annotations.csv      header "clip_id,label,fold"; label is a class name or index
//   root/<clip_id>/*.ppm      frames, ordered by file name
//   root/boxes.csv            optional, "clip_id,frame,y0,x0,y1,x1" (synthetic data only)

#include <algorithm>
#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <unsupported/Eigen/FFT>

#include "peadapt/core/autograd.hpp"
#include "peadapt/core/error.hpp"
#include "peadapt/core/rng.hpp"
#include "peadapt/core/strings.hpp"
#include "peadapt/image.hpp"
#include "peadapt/prompt.hpp"

namespace peadapt {

namespace fs = std::filesystem;

enum class Split { train, eval };

// ---------------------------------------------------------------------------
// Frame sampling and preprocessing

/// T indices into a clip of `length` frames: a consecutive window (random start
/// in training, centred in evaluation), padded by repeating the last frame.
inline std::vector<Index> sample_frames(Index length, Index frames, Split mode, Rng* rng = nullptr) {
    if (length <= 0) {
        throw InputError("sample_frames: clip has no frames");
    }
    if (frames <= 0) {
        throw ConfigError("sample_frames: frame count must be positive");
    }
    Index start = 0;
    if (length > frames) {
        const Index slack = length - frames;
        start = (mode == Split::train && rng) ? static_cast<Index>(rng->integer(0, static_cast<long>(slack))) : slack / 2;
    }
    std::vector<Index> idx(static_cast<std::size_t>(frames));
    for (Index t = 0; t < frames; ++t) {
        idx[static_cast<std::size_t>(t)] = std::min(start + t, length - 1);
    }
    return idx;
}

/// Photometric and geometric jitter shared by every frame of one clip.
struct FrameJitter {
    bool flip = false;
    double crop_scale = 1.0;  // side of the crop relative to the short side
    double crop_y = 0.5;      // crop position in [0, 1] of the free range
    double crop_x = 0.5;
    float brightness = 1.0f;
    float contrast = 1.0f;
    float saturation = 1.0f;

    static FrameJitter draw(Rng& rng) {
        FrameJitter j;
        j.flip = rng.bernoulli(0.5);
        j.crop_scale = rng.uniform(0.8, 1.0);
        j.crop_y = rng.uniform();
        j.crop_x = rng.uniform();
        j.brightness = static_cast<float>(rng.uniform(0.8, 1.2));
        j.contrast = static_cast<float>(rng.uniform(0.8, 1.2));
        j.saturation = static_cast<float>(rng.uniform(0.8, 1.2));
        return j;
    }
};

/// Resizes/crops to size x size. Without jitter this is the deterministic
/// resize + centre crop used for evaluation.
inline Image preprocess_frame(const Image& img, int size, const FrameJitter* jitter = nullptr) {
    if (img.empty() || img.height <= 0 || img.width <= 0) {
        throw InputError("preprocess_frame: empty image");
    }
    if (!jitter) {
        return resize_center_crop(img, size);
    }
    const double side = std::min(img.height, img.width) * jitter->crop_scale;
    const double y0 = (img.height - side) * jitter->crop_y;
    const double x0 = (img.width - side) * jitter->crop_x;
    Image out = resample(img, y0, x0, side, side, size, size);
    if (jitter->flip) {
        out = flip_horizontal(out);
    }
    return color_jitter(out, jitter->brightness, jitter->contrast, jitter->saturation);
}

inline void normalize_frame(Image& img, const std::array<float, 3>& mean, const std::array<float, 3>& stddev) {
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        const int c = static_cast<int>(i % 3);
        img.data[i] = (img.data[i] - mean[c]) / stddev[c];
    }
}

// ---------------------------------------------------------------------------
// Batches and mixing

struct ClipBatch {
    std::vector<Video> frames;     // B clips of T frames
    Matrix<double> labels;         // B x C, rows on the simplex
    std::vector<std::string> ids;
    std::vector<int> hard_labels;  // original class per clip

    Index size() const { return static_cast<Index>(frames.size()); }
    Index classes() const { return labels.cols(); }

    std::vector<const Video*> clip_ptrs() const {
        std::vector<const Video*> out;
        for (const auto& v : frames) out.push_back(&v);
        return out;
    }

    static Matrix<double> one_hot(const std::vector<int>& labels, Index classes) {
        Matrix<double> y = Matrix<double>::Zero(static_cast<Index>(labels.size()), classes);
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] < 0 || labels[i] >= classes) {
                throw InputError("label " + std::to_string(labels[i]) + " outside the class set");
            }
            y(static_cast<Index>(i), labels[i]) = 1.0;
        }
        return y;
    }
};

struct AugmentConfig {
    double p_mixup_threshold = 0.4;
    double p_fmix_threshold = 0.7;
    double mixup_alpha = 0.4;
    double fmix_alpha = 1.0;
    double fmix_decay_power = 3.0;
    std::uint64_t rng_seed = 0;
    bool enabled = true;

    void validate() const {
        if (!(0.0 <= p_mixup_threshold && p_mixup_threshold <= p_fmix_threshold && p_fmix_threshold <= 1.0)) {
            throw ConfigError("augmentation thresholds must satisfy 0 <= mixup <= fmix <= 1");
        }
        if (!(mixup_alpha > 0.0) || !(fmix_alpha > 0.0) || !(fmix_decay_power > 0.0)) {
            throw ConfigError("mixup_alpha, fmix_alpha and fmix_decay_power must be positive");
        }
    }
};

enum class AugmentKind { mixup, fmix, none };

inline const char* to_string(AugmentKind k) {
    switch (k) {
    case AugmentKind::mixup: return "mixup";
    case AugmentKind::fmix: return "fmix";
    case AugmentKind::none: return "none";
    }
    return "?";
}

inline AugmentKind augmentation_for(double p, const AugmentConfig& cfg) {
    if (p < cfg.p_mixup_threshold) return AugmentKind::mixup;
    if (p < cfg.p_fmix_threshold) return AugmentKind::fmix;
    return AugmentKind::none;
}

inline AugmentKind choose_augmentation(Rng& rng, const AugmentConfig& cfg = {}) {
    return augmentation_for(rng.uniform(), cfg);
}

/// What a mixing step did, for logs and replay.
struct MixRecord {
    AugmentKind kind = AugmentKind::none;
    std::vector<double> lambda;  // one per clip: weight kept from the clip itself
    std::vector<long> perm;
};

namespace detail {

inline std::vector<long> mixing_partner(Index b, Rng& rng) { return rng.permutation(static_cast<long>(b)); }

inline bool enough_clips(const ClipBatch& batch, const char* what) {
    if (batch.size() < 2) {
        std::cerr << "warning: " << what << " needs at least two clips; batch left unchanged\n";
        return false;
    }
    return true;
}

}  // namespace detail

/// frames' = lambda * frames + (1 - lambda) * frames[perm], labels likewise.
inline ClipBatch mix_with(const ClipBatch& batch, double lambda, const std::vector<long>& perm) {
    ClipBatch out = batch;
    const float l = static_cast<float>(lambda);
    for (Index i = 0; i < batch.size(); ++i) {
        const auto& a = batch.frames[static_cast<std::size_t>(i)];
        const auto& b = batch.frames[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
        auto& o = out.frames[static_cast<std::size_t>(i)];
        for (std::size_t t = 0; t < a.size(); ++t) {
            for (std::size_t k = 0; k < a[t].data.size(); ++k) {
                o[t].data[k] = l * a[t].data[k] + (1.0f - l) * b[t].data[k];
            }
        }
        out.labels.row(i) = lambda * batch.labels.row(i) + (1.0 - lambda) * batch.labels.row(perm[static_cast<std::size_t>(i)]);
    }
    return out;
}

inline ClipBatch apply_mixup(const ClipBatch& batch, double alpha, Rng& rng, MixRecord* record = nullptr) {
    if (!detail::enough_clips(batch, "mixup")) {
        return batch;
    }
    const double lambda = rng.beta(alpha, alpha);
    const auto perm = detail::mixing_partner(batch.size(), rng);
    if (record) {
        record->kind = AugmentKind::mixup;
        record->lambda.assign(static_cast<std::size_t>(batch.size()), lambda);
        record->perm = perm;
    }
    return mix_with(batch, lambda, perm);
}

/// Binary mask (row-major h x w, entries 0/1) keeping the `keep` highest values
/// of a random field whose spectrum decays as 1 / frequency^decay_power.
inline std::vector<float> fmix_mask(int h, int w, double decay_power, double lambda, Rng& rng) {
    using Complex = std::complex<double>;
    std::vector<std::vector<Complex>> spec(static_cast<std::size_t>(h), std::vector<Complex>(static_cast<std::size_t>(w)));
    const double min_freq = 1.0 / std::max(h, w);
    for (int y = 0; y < h; ++y) {
        const double fy = static_cast<double>(y <= h / 2 ? y : y - h) / h;
        for (int x = 0; x < w; ++x) {
            const double fx = static_cast<double>(x <= w / 2 ? x : x - w) / w;
            const double f = std::max(std::sqrt(fy * fy + fx * fx), min_freq);
            const double amp = 1.0 / std::pow(f, decay_power);
            spec[static_cast<std::size_t>(y)][static_cast<std::size_t>(x)] = Complex(rng.normal(), rng.normal()) * amp;
        }
    }
    Eigen::FFT<double> fft;
    std::vector<Complex> tmp;
    for (auto& row : spec) {
        fft.inv(tmp, row);
        row = tmp;
    }
    std::vector<Complex> col(static_cast<std::size_t>(h));
    std::vector<double> field(static_cast<std::size_t>(h) * w);
    for (int x = 0; x < w; ++x) {
        for (int y = 0; y < h; ++y) col[static_cast<std::size_t>(y)] = spec[static_cast<std::size_t>(y)][static_cast<std::size_t>(x)];
        fft.inv(tmp, col);
        for (int y = 0; y < h; ++y) field[static_cast<std::size_t>(y) * w + x] = tmp[static_cast<std::size_t>(y)].real();
    }
    const std::size_t n = field.size();
    const auto keep = static_cast<std::size_t>(std::llround(std::clamp(lambda, 0.0, 1.0) * static_cast<double>(n)));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&field](std::size_t a, std::size_t b) { return field[a] > field[b]; });
    std::vector<float> mask(n, 0.0f);
    for (std::size_t i = 0; i < keep; ++i) mask[order[i]] = 1.0f;
    return mask;
}

/// Composites each clip with its partner through that clip's mask (applied to
/// every frame); labels mix by the mask's actual area.
inline ClipBatch composite_with(const ClipBatch& batch, const std::vector<std::vector<float>>& masks,
                                const std::vector<long>& perm, std::vector<double>* areas = nullptr) {
    ClipBatch out = batch;
    if (areas) areas->clear();
    for (Index i = 0; i < batch.size(); ++i) {
        const auto& mask = masks[static_cast<std::size_t>(i)];
        const auto& a = batch.frames[static_cast<std::size_t>(i)];
        const auto& b = batch.frames[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
        auto& o = out.frames[static_cast<std::size_t>(i)];
        for (std::size_t t = 0; t < a.size(); ++t) {
            if (mask.size() * 3 != a[t].data.size()) {
                throw ShapeError("fmix mask does not match the frame size");
            }
            for (std::size_t p = 0; p < mask.size(); ++p) {
                const bool keep = mask[p] != 0.0f;
                for (int c = 0; c < 3; ++c) o[t].data[p * 3 + c] = keep ? a[t].data[p * 3 + c] : b[t].data[p * 3 + c];
            }
        }
        const double area = std::accumulate(mask.begin(), mask.end(), 0.0) / static_cast<double>(mask.size());
        if (areas) areas->push_back(area);
        out.labels.row(i) = area * batch.labels.row(i) + (1.0 - area) * batch.labels.row(perm[static_cast<std::size_t>(i)]);
    }
    return out;
}

inline ClipBatch apply_fmix(const ClipBatch& batch, double alpha, double decay_power, Rng& rng,
                            MixRecord* record = nullptr, std::vector<std::vector<float>>* masks_out = nullptr) {
    if (!detail::enough_clips(batch, "fmix")) {
        return batch;
    }
    const auto perm = detail::mixing_partner(batch.size(), rng);
    const int h = batch.frames.front().front().height;
    const int w = batch.frames.front().front().width;
    std::vector<std::vector<float>> masks;
    for (Index i = 0; i < batch.size(); ++i) {
        masks.push_back(fmix_mask(h, w, decay_power, rng.beta(alpha, alpha), rng));
    }
    std::vector<double> areas;
    ClipBatch out = composite_with(batch, masks, perm, &areas);
    if (record) {
        record->kind = AugmentKind::fmix;
        record->lambda = areas;
        record->perm = perm;
    }
    if (masks_out) *masks_out = std::move(masks);
    return out;
}

/// One scheduled augmentation step: draw the branch, then mix.
inline ClipBatch augment_batch(const ClipBatch& batch, const AugmentConfig& cfg, Rng& rng, MixRecord* record = nullptr) {
    MixRecord local;
    MixRecord& rec = record ? *record : local;
    rec = MixRecord{};
    if (!cfg.enabled) {
        return batch;
    }
    switch (choose_augmentation(rng, cfg)) {
    case AugmentKind::mixup: return apply_mixup(batch, cfg.mixup_alpha, rng, &rec);
    case AugmentKind::fmix: return apply_fmix(batch, cfg.fmix_alpha, cfg.fmix_decay_power, rng, &rec);
    case AugmentKind::none: break;
    }
    return batch;
}

// ---------------------------------------------------------------------------
// Dataset on disk

enum class CorruptFramePolicy { skip, fail };

struct ClipRecord {
    std::string id;
    int label = 0;
    int fold = 0;
    std::vector<std::string> frame_paths;
};

struct Box {
    int y0, x0, y1, x1;  // inclusive-exclusive pixel bounds
    bool contains(int y, int x) const { return y >= y0 && y < y1 && x >= x0 && x < x1; }
};

struct Dataset {
    std::string root;
    std::vector<std::string> classes;
    std::vector<ClipRecord> clips;
    std::map<std::string, std::vector<Box>> boxes;  // per clip, per stored frame

    Index size() const { return static_cast<Index>(clips.size()); }

    std::vector<Index> indices_in_folds(const std::vector<int>& folds) const {
        std::vector<Index> out;
        for (Index i = 0; i < size(); ++i) {
            if (std::find(folds.begin(), folds.end(), clips[static_cast<std::size_t>(i)].fold) != folds.end()) out.push_back(i);
        }
        return out;
    }

    std::vector<int> fold_ids() const {
        std::vector<int> f;
        for (const auto& c : clips) f.push_back(c.fold);
        std::sort(f.begin(), f.end());
        f.erase(std::unique(f.begin(), f.end()), f.end());
        return f;
    }
};

namespace detail {

inline bool is_frame_file(const fs::path& p) {
    const auto ext = p.extension().string();
    return ext == ".ppm" || ext == ".pgm" || ext == ".pnm";
}

inline int parse_int(const std::string& s, const std::string& where) {
    try {
        std::size_t used = 0;
        const int v = std::stoi(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw IngestionError(where + ": expected an integer, got '" + s + "'");
    }
}

}  // namespace detail

inline Dataset load_dataset(const std::string& root) {
    Dataset ds;
    ds.root = root;
    const fs::path base(root);
    std::ifstream cls(base / "classes.txt");
    if (!cls) {
        throw IngestionError("dataset '" + root + "' has no classes.txt");
    }
    for (std::string line; std::getline(cls, line);) {
        if (!trim(line).empty()) ds.classes.push_back(trim(line));
    }
    if (ds.classes.size() < 2) {
        throw IngestionError("dataset '" + root + "' needs at least two classes");
    }
    std::ifstream ann(base / "annotations.csv");
    if (!ann) {
        throw IngestionError("dataset '" + root + "' has no annotations.csv");
    }
    std::string line;
    std::getline(ann, line);
    if (trim(line) != "clip_id,label,fold") {
        throw IngestionError("annotations.csv must start with the header 'clip_id,label,fold'");
    }
    int lineno = 1;
    while (std::getline(ann, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        const auto f = split(trim(line), ',');
        const std::string where = "annotations.csv line " + std::to_string(lineno);
        if (f.size() != 3) {
            throw IngestionError(where + ": expected 3 fields");
        }
        ClipRecord rec;
        rec.id = trim(f[0]);
        const std::string label = trim(f[1]);
        auto it = std::find(ds.classes.begin(), ds.classes.end(), label);
        rec.label = it != ds.classes.end() ? static_cast<int>(it - ds.classes.begin()) : detail::parse_int(label, where);
        if (rec.label < 0 || rec.label >= static_cast<int>(ds.classes.size())) {
            throw IngestionError(where + ": label '" + label + "' outside the class set");
        }
        rec.fold = detail::parse_int(trim(f[2]), where);
        const fs::path dir = base / rec.id;
        if (!fs::is_directory(dir)) {
            throw IngestionError(where + ": clip directory '" + dir.string() + "' not found");
        }
        for (const auto& e : fs::directory_iterator(dir)) {
            if (e.is_regular_file() && detail::is_frame_file(e.path())) rec.frame_paths.push_back(e.path().string());
        }
        std::sort(rec.frame_paths.begin(), rec.frame_paths.end());
        if (rec.frame_paths.empty()) {
            throw IngestionError("clip '" + rec.id + "' has no frames");
        }
        ds.clips.push_back(std::move(rec));
    }
    if (ds.clips.empty()) {
        throw IngestionError("dataset '" + root + "' is empty");
    }
    std::ifstream bx(base / "boxes.csv");
    if (bx) {
        std::getline(bx, line);
        while (std::getline(bx, line)) {
            const auto f = split(trim(line), ',');
            if (f.size() != 6) continue;
            auto& v = ds.boxes[f[0]];
            const auto frame = static_cast<std::size_t>(std::stoi(f[1]));
            if (v.size() <= frame) v.resize(frame + 1, Box{0, 0, 0, 0});
            v[frame] = Box{std::stoi(f[2]), std::stoi(f[3]), std::stoi(f[4]), std::stoi(f[5])};
        }
    }
    return ds;
}

/// Per-clip stream: depends only on (seed, clip id, epoch).
inline Rng clip_rng(std::uint64_t seed, const std::string& clip_id, std::uint64_t epoch) {
    return Rng(derive_seed({seed, fnv1a(clip_id), epoch}));
}

struct LoadedClip {
    Video frames;
    std::vector<Index> source_frames;  // index into the clip's stored frames
};

/// Reads, samples, preprocesses and normalises one clip.
inline LoadedClip load_clip(const ClipRecord& rec, Index frames, int size, const std::array<float, 3>& mean,
                            const std::array<float, 3>& stddev, Split mode, std::uint64_t seed, std::uint64_t epoch,
                            CorruptFramePolicy policy = CorruptFramePolicy::skip) {
    std::vector<Image> images;
    std::vector<Index> stored;
    for (std::size_t i = 0; i < rec.frame_paths.size(); ++i) {
        try {
            images.push_back(read_pnm(rec.frame_paths[i]));
            stored.push_back(static_cast<Index>(i));
        } catch (const IoError& e) {
            if (policy == CorruptFramePolicy::fail) {
                throw IngestionError(std::string("corrupt frame in clip '") + rec.id + "': " + e.what());
            }
            std::cerr << "warning: skipping corrupt frame: " << e.what() << "\n";
        }
    }
    if (images.empty()) {
        throw IngestionError("clip '" + rec.id + "' has no readable frames");
    }
    Rng rng = clip_rng(seed, rec.id, epoch);
    const auto idx = sample_frames(static_cast<Index>(images.size()), frames, mode, &rng);
    FrameJitter jitter;
    if (mode == Split::train) jitter = FrameJitter::draw(rng);
    LoadedClip out;
    for (Index i : idx) {
        Image f = preprocess_frame(images[static_cast<std::size_t>(i)], size, mode == Split::train ? &jitter : nullptr);
        normalize_frame(f, mean, stddev);
        out.frames.push_back(std::move(f));
        out.source_frames.push_back(stored[static_cast<std::size_t>(i)]);
    }
    return out;
}

struct ClipLoadOptions {
    Index frames = 8;
    int image_size = 64;
    std::array<float, 3> mean{0.5f, 0.5f, 0.5f};
    std::array<float, 3> stddev{0.5f, 0.5f, 0.5f};
    std::uint64_t seed = 0;
    CorruptFramePolicy policy = CorruptFramePolicy::skip;
};

inline ClipBatch make_batch(const Dataset& ds, const std::vector<Index>& which, const ClipLoadOptions& opt, Split mode,
                            std::uint64_t epoch) {
    if (which.empty()) {
        throw InputError("make_batch: no clips selected");
    }
    ClipBatch b;
    for (Index i : which) {
        const auto& rec = ds.clips.at(static_cast<std::size_t>(i));
        b.frames.push_back(
            load_clip(rec, opt.frames, opt.image_size, opt.mean, opt.stddev, mode, opt.seed, epoch, opt.policy).frames);
        b.ids.push_back(rec.id);
        b.hard_labels.push_back(rec.label);
    }
    b.labels = ClipBatch::one_hot(b.hard_labels, static_cast<Index>(ds.classes.size()));
    return b;
}

// ---------------------------------------------------------------------------
// Synthetic dataset

struct SynthConfig {
    int classes = 2;
    int clips_per_class = 32;
    int frames = 8;
    int image_size = 64;
    int folds = 5;
    double noise = 0.03;
    std::uint64_t seed = 0;
};

namespace detail {

inline std::string synth_class_name(int k) {
    const auto& names = expression_classes();
    return k < static_cast<int>(names.size()) ? names[static_cast<std::size_t>(k)] : "Class" + std::to_string(k);
}

}  // namespace detail

/// Each clip shows a bright blob moving across a dark noisy background in a
/// class-specific direction, with class-specific elongation and tint.
inline Dataset generate_synthetic_dataset(const std::string& dir, const SynthConfig& cfg) {
    if (cfg.classes < 2) {
        throw ConfigError("synthetic dataset needs at least two classes");
    }
    if (cfg.clips_per_class < 1 || cfg.frames < 1 || cfg.image_size < 8 || cfg.folds < 1) {
        throw ConfigError("synthetic dataset sizes must be positive (image_size >= 8)");
    }
    const fs::path base(dir);
    if (fs::exists(base) && !fs::is_empty(base)) {
        throw IoError("refusing to write the synthetic dataset into non-empty directory '" + dir + "'");
    }
    fs::create_directories(base);
    {
        std::ofstream cls(base / "classes.txt");
        for (int k = 0; k < cfg.classes; ++k) cls << detail::synth_class_name(k) << "\n";
    }
    std::ofstream ann(base / "annotations.csv");
    ann << "clip_id,label,fold\n";
    std::ofstream boxes(base / "boxes.csv");
    boxes << "clip_id,frame,y0,x0,y1,x1\n";
    const double pi = std::acos(-1.0);
    const int n = cfg.image_size;
    int serial = 0;
    for (int i = 0; i < cfg.clips_per_class; ++i) {
        for (int k = 0; k < cfg.classes; ++k, ++serial) {
            std::ostringstream id;
            id << "clip_" << std::setw(4) << std::setfill('0') << serial;
            Rng rng(derive_seed({cfg.seed, static_cast<std::uint64_t>(serial), 0x5171ULL}));
            const int length = cfg.frames + static_cast<int>(rng.integer(0, cfg.frames / 2));
            const double angle = 2.0 * pi * k / cfg.classes;
            const double dy = std::sin(angle), dx = std::cos(angle);
            const double radius = n * 0.12;
            const double elong = 1.0 + 0.6 * (k % 3) / 2.0;
            const double travel = n * 0.45;
            const double cy0 = n / 2.0 + rng.uniform(-n * 0.05, n * 0.05);
            const double cx0 = n / 2.0 + rng.uniform(-n * 0.05, n * 0.05);
            const std::array<float, 3> tint{0.6f + 0.4f * static_cast<float>(k % 2), 0.6f + 0.4f * static_cast<float>((k / 2) % 2),
                                            0.6f + 0.4f * static_cast<float>((k + 1) % 3 == 0)};
            const fs::path clip_dir = base / id.str();
            fs::create_directories(clip_dir);
            for (int t = 0; t < length; ++t) {
                const double progress = length > 1 ? static_cast<double>(t) / (length - 1) - 0.5 : 0.0;
                const double cy = cy0 + dy * travel * progress;
                const double cx = cx0 + dx * travel * progress;
                const double ry = radius * elong, rx = radius / elong;
                Image img(n, n);
                for (int y = 0; y < n; ++y) {
                    for (int x = 0; x < n; ++x) {
                        const double u = (y - cy) / ry, v = (x - cx) / rx;
                        const bool inside = u * u + v * v <= 1.0;
                        for (int c = 0; c < 3; ++c) {
                            const double bg = 0.12;
                            const double val = (inside ? tint[static_cast<std::size_t>(c)] : bg) + rng.normal(0.0, cfg.noise);
                            img.at(y, x, c) = static_cast<float>(std::clamp(val, 0.0, 1.0));
                        }
                    }
                }
                std::ostringstream name;
                name << "frame_" << std::setw(3) << std::setfill('0') << t << ".ppm";
                write_ppm((clip_dir / name.str()).string(), img);
                const int y0 = std::clamp(static_cast<int>(std::floor(cy - ry)), 0, n);
                const int y1 = std::clamp(static_cast<int>(std::ceil(cy + ry)) + 1, 0, n);
                const int x0 = std::clamp(static_cast<int>(std::floor(cx - rx)), 0, n);
                const int x1 = std::clamp(static_cast<int>(std::ceil(cx + rx)) + 1, 0, n);
                boxes << id.str() << "," << t << "," << y0 << "," << x0 << "," << y1 << "," << x1 << "\n";
            }
            ann << id.str() << "," << detail::synth_class_name(k) << "," << serial % cfg.folds << "\n";
        }
    }
    ann.close();
    boxes.close();
    return load_dataset(dir);
}

}  // namespace peadapt
