#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "oracles.hpp"

using namespace peadapt;
namespace fs = std::filesystem;

namespace {

const std::vector<std::string> kTwo{"Happiness", "Sadness"};

HostConfig small_host(Index frames = 4) {
    HostConfig h = HostConfig::toy();
    h.frames = frames;
    return h;
}

BundleConfig adapters_off() {
    BundleConfig b;
    b.sha_vision = b.tda = b.sha_text = b.ta = false;
    b.prompts_enabled = false;
    return b;
}

Video random_clip(const HostConfig& h, std::mt19937_64& g) {
    std::normal_distribution<float> n(0.0f, 1.0f);
    Video v;
    for (Index t = 0; t < h.frames; ++t) {
        Image im(static_cast<int>(h.image_size), static_cast<int>(h.image_size));
        for (auto& x : im.data) x = n(g);
        v.push_back(std::move(im));
    }
    return v;
}

template <typename S>
void randomize_bundle(Model<S>& m, std::mt19937_64& g, double scale = 0.3) {
    m.bundle().visit([&](const char*, const std::string&, ag::Var<S>& v) {
        std::normal_distribution<double> n(0.0, scale);
        for (Index i = 0; i < v.size(); ++i) v.mutable_value().data()[i] = static_cast<S>(n(g));
    });
    for (auto& t : m.bundle().tda) t.scale_b.mutable_value().setConstant(S(1.2));
    m.after_update();
}

/// Patch rows of one frame, channel-major within each patch.
oracle::M patches_of(const Image& im, long p) {
    const long g = im.height / p;
    oracle::M out(g * g, 3 * p * p);
    for (long gy = 0; gy < g; ++gy)
        for (long gx = 0; gx < g; ++gx)
            for (int c = 0; c < 3; ++c)
                for (long y = 0; y < p; ++y)
                    for (long x = 0; x < p; ++x)
                        out(gy * g + gx, c * p * p + y * p + x) =
                            im.at(static_cast<int>(gy * p + y), static_cast<int>(gx * p + x), c);
    return out;
}

/// Reference video encoder: frames processed jointly when `joint` (needed for
/// the temporal adapter), otherwise each frame on its own and the features
/// averaged at the end.
oracle::M reference_video(Model<double>& m, const Video& clip, bool joint) {
    auto& b = m.backbone();
    const auto& h = m.host();
    const long n_prompt = m.vision_prompt_count();
    const long seq = m.vision_seq_len();
    auto embed = [&](const Image& frame) {
        const oracle::M emb = oracle::affine(patches_of(frame, h.patch_size), oracle::from(b.patch_w.value()), nullptr);
        const oracle::M cls = oracle::from(b.class_emb.value()), pos = oracle::from(b.vis_pos.value());
        oracle::M tok(seq, h.vision_dim);
        for (long i = 0; i < n_prompt; ++i)
            for (long j = 0; j < h.vision_dim; ++j) tok(i, j) = m.bundle().prompts.vision_tokens[0](i, j);
        for (long i = 0; i < seq - n_prompt; ++i)
            for (long j = 0; j < h.vision_dim; ++j)
                tok(n_prompt + i, j) = (i == 0 ? cls(0, j) : emb(i - 1, j)) + pos(i, j);
        return oracle::layer_norm(tok, oracle::from(b.ln_pre_w.value()), oracle::from(b.ln_pre_b.value()));
    };
    auto run = [&](const std::vector<const Image*>& frames) {
        const long T = static_cast<long>(frames.size());
        oracle::M x(T * seq, h.vision_dim);
        for (long t = 0; t < T; ++t) {
            const auto e = embed(*frames[static_cast<std::size_t>(t)]);
            for (long i = 0; i < seq; ++i)
                for (long j = 0; j < h.vision_dim; ++j) x(t * seq + i, j) = e(i, j);
        }
        for (long l = 0; l < h.layers_v; ++l) {
            const auto w = oracle::read(b.vblocks[static_cast<std::size_t>(l)]);
            std::optional<oracle::Bottleneck> sha;
            std::optional<oracle::Temporal> tda;
            if (!m.bundle().sha_v.empty()) sha = oracle::read(m.bundle().sha_v[static_cast<std::size_t>(l)]);
            if (!m.bundle().tda.empty()) tda = oracle::read(m.bundle().tda[static_cast<std::size_t>(l)]);
            x = oracle::vision_block(x, T, h.heads_v, w, sha ? &*sha : nullptr, tda ? &*tda : nullptr,
                                     m.bundle_config().placement, n_prompt);
        }
        oracle::M cls(T, h.vision_dim);
        for (long t = 0; t < T; ++t)
            for (long j = 0; j < h.vision_dim; ++j) cls(t, j) = x(t * seq + n_prompt, j);
        return oracle::layer_norm(cls, oracle::from(b.ln_post_w.value()), oracle::from(b.ln_post_b.value()));
    };
    oracle::M feats(static_cast<long>(clip.size()), h.vision_dim);
    if (joint) {
        std::vector<const Image*> all;
        for (const auto& f : clip) all.push_back(&f);
        feats = run(all);
    } else {
        for (std::size_t t = 0; t < clip.size(); ++t) {
            const auto one = run({&clip[t]});
            for (long j = 0; j < h.vision_dim; ++j) feats(static_cast<long>(t), j) = one(0, j);
        }
    }
    oracle::M mean(1, h.vision_dim);
    for (long t = 0; t < feats.rows; ++t)
        for (long j = 0; j < feats.cols; ++j) mean(0, j) += feats(t, j) / static_cast<double>(feats.rows);
    oracle::M z = oracle::right_mul(mean, oracle::from(b.vis_proj.value()));
    double nrm = 0;
    for (double v : z.v) nrm += v * v;
    for (double& v : z.v) v /= std::sqrt(nrm);
    return z;
}

oracle::M reference_text_block(Model<double>& m, const oracle::M& x, Index layer) {
    const auto w = oracle::read(m.backbone().tblocks[static_cast<std::size_t>(layer)]);
    const oracle::M a = oracle::affine(
        oracle::attention(oracle::affine(oracle::layer_norm(x, w.ln1w, w.ln1b), w.qkvw, &w.qkvb), m.host().heads_t, true),
        w.outw, &w.outb);
    oracle::M h1 = oracle::add(x, a);
    if (!m.bundle().sha_t.empty()) h1 = oracle::add(h1, oracle::bottleneck(a, oracle::read(m.bundle().sha_t[static_cast<std::size_t>(layer)])));
    const oracle::M mlp = oracle::affine(
        oracle::map(oracle::affine(oracle::layer_norm(h1, w.ln2w, w.ln2b), w.fcw, &w.fcb), oracle::quick_gelu), w.pw, &w.pb);
    oracle::M h2 = oracle::add(h1, mlp);
    if (!m.bundle().ta.empty()) h2 = oracle::add(h2, oracle::bottleneck(mlp, oracle::read(m.bundle().ta[static_cast<std::size_t>(layer)])));
    return h2;
}

double row_norm(const Matrix<double>& m, Index r) { return m.row(r).norm(); }

}  // namespace

TEST(HostConfig, PresetsAndPatchCount) {
    const auto toy = HostConfig::toy();
    EXPECT_EQ(toy.vision_dim, 64);
    EXPECT_EQ(toy.joint_dim, 32);
    EXPECT_EQ(toy.patches(), 16);
    EXPECT_EQ(toy.frames, 8);
    const auto full = HostConfig::full();
    EXPECT_EQ(full.vision_dim, 768);
    EXPECT_EQ(full.text_dim, 512);
    EXPECT_EQ(full.patches(), 196);
    EXPECT_EQ(full.frames, 16);
    auto bad = toy;
    bad.image_size = 60;
    EXPECT_THROW(bad.validate(), ConfigError);
    EXPECT_NE(toy.digest(), full.digest());
}

TEST(VisionBlock, DisabledPathMatchesPlainBlockOracle) {
    std::mt19937_64 g(1);
    Model<double> m(small_host(), adapters_off(), kTwo);
    const Index seq = m.vision_seq_len();
    const Matrix<double> x = oracle::random_matrix(4 * seq, 64, g);
    const auto y = m.vision_block(ag::constant(x), 1, 4).value();
    const auto ref = oracle::vision_block(oracle::from(x), 4, m.host().heads_v, oracle::read(m.backbone().vblocks[1]),
                                          nullptr, nullptr, ScalePlacement::none, 0);
    EXPECT_LT(oracle::max_abs_diff(y, ref), 1e-10);
}

TEST(VisionBlock, ZeroInitAdaptersAreIdentityFloat32) {
    std::mt19937_64 g(2);
    BundleConfig on;
    on.prompts_enabled = false;
    Model<float> with(small_host(), on, kTwo);
    Model<float> without(small_host(), adapters_off(), kTwo);
    const Index seq = with.vision_seq_len();
    const Matrix<float> x = oracle::random_matrix(4 * seq, 64, g).cast<float>();
    for (Index l = 0; l < 2; ++l) {
        const auto a = with.vision_block(ag::constant(x), l, 4).value();
        const auto b = without.vision_block(ag::constant(x), l, 4).value();
        EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-5f);
    }
}

TEST(VisionBlock, StraightLineOracleWithRandomAdapters) {
    std::mt19937_64 g(3);
    for (auto cell : {CellKind::gru, CellKind::lstm, CellKind::rnn, CellKind::vanilla}) {
        for (auto where : {ScalePlacement::post_up_projection, ScalePlacement::input_level,
                           ScalePlacement::recurrent_output, ScalePlacement::none}) {
            BundleConfig b;
            b.prompts_enabled = false;
            b.cell = cell;
            b.placement = where;
            Model<double> m(small_host(), b, kTwo);
            randomize_bundle(m, g);
            const Index seq = m.vision_seq_len();
            const Matrix<double> x = oracle::random_matrix(4 * seq, 64, g);
            const auto y = m.vision_block(ag::constant(x), 0, 4).value();
            const auto sha = oracle::read(m.bundle().sha_v[0]);
            const auto tda = oracle::read(m.bundle().tda[0]);
            const auto ref = oracle::vision_block(oracle::from(x), 4, m.host().heads_v,
                                                  oracle::read(m.backbone().vblocks[0]), &sha, &tda, where, 0);
            EXPECT_LT(oracle::max_abs_diff(y, ref), 1e-10) << to_string(cell) << "/" << to_string(where);
        }
    }
}

TEST(VisionBlock, LayerOutOfRange) {
    Model<double> m(small_host(), adapters_off(), kTwo);
    const auto x = ag::constant<double>(Matrix<double>::Zero(4 * m.vision_seq_len(), 64));
    EXPECT_THROW(m.vision_block(x, 2, 4), ShapeError);
    EXPECT_THROW(m.vision_block(x, -1, 4), ShapeError);
    EXPECT_THROW(m.vision_block(ag::constant<double>(Matrix<double>::Zero(5, 64)), 0, 4), ShapeError);
}

TEST(EncodeVideo, MatchesPerFrameReferenceWithoutTemporalAdapter) {
    std::mt19937_64 g(4);
    BundleConfig b;
    b.tda = false;
    Model<double> m(small_host(), b, kTwo);
    randomize_bundle(m, g, 0.1);
    const Video c1 = random_clip(m.host(), g), c2 = random_clip(m.host(), g);
    ag::NoGradGuard ng;
    const auto fv = m.encode_videos({&c1, &c2}).value();
    EXPECT_LT(oracle::max_abs_diff(Matrix<double>(fv.row(0)), reference_video(m, c1, false)), 1e-6);
    EXPECT_LT(oracle::max_abs_diff(Matrix<double>(fv.row(1)), reference_video(m, c2, false)), 1e-6);
}

TEST(EncodeVideo, MatchesJointReferenceWithEveryAdapterAndPrompts) {
    std::mt19937_64 g(5);
    Model<double> m(small_host(), BundleConfig{}, kTwo);
    ASSERT_EQ(m.vision_prompt_count(), 2);
    randomize_bundle(m, g, 0.1);
    const Video c = random_clip(m.host(), g);
    ag::NoGradGuard ng;
    EXPECT_LT(oracle::max_abs_diff(m.encode_video(c).value(), reference_video(m, c, true)), 1e-10);
}

TEST(EncodeVideo, IdenticalFramesGiveSingleFrameEmbedding) {
    std::mt19937_64 g(6);
    BundleConfig b;
    b.tda = false;
    Model<double> m(small_host(), b, kTwo);
    Video one = random_clip(m.host(), g);
    Video same(4, one[0]);
    ag::NoGradGuard ng;
    const auto f = m.frame_features(same).value();
    const auto pooled = m.encode_video(same).value();
    const auto single = m.pool_and_project(ag::constant<double>(Matrix<double>(f.row(0)))).value();
    EXPECT_LT((pooled - single).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(EncodeVideo, UnitNormBatchInvarianceAndFrameOrder) {
    std::mt19937_64 g(7);
    Model<double> with_tda(small_host(), BundleConfig{}, kTwo);
    randomize_bundle(with_tda, g, 0.2);
    BundleConfig no_tda;
    no_tda.tda = false;
    Model<double> without(small_host(), no_tda, kTwo);
    randomize_bundle(without, g, 0.2);
    const Video a = random_clip(with_tda.host(), g), b = random_clip(with_tda.host(), g);
    ag::NoGradGuard ng;
    const auto batch = with_tda.encode_videos({&a, &b}).value();
    const auto alone = with_tda.encode_video(b).value();
    EXPECT_NEAR(row_norm(batch, 0), 1.0, 1e-6);
    EXPECT_NEAR(row_norm(batch, 1), 1.0, 1e-6);
    EXPECT_LT((batch.row(1) - alone).cwiseAbs().maxCoeff(), 1e-6);

    Video rev(a.rbegin(), a.rend());
    EXPECT_LT((without.encode_video(a).value() - without.encode_video(rev).value()).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_GT((with_tda.encode_video(a).value() - with_tda.encode_video(rev).value()).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(EncodeVideo, WrongShapesAreInputErrors) {
    std::mt19937_64 g(8);
    Model<double> m(small_host(), adapters_off(), kTwo);
    Video c = random_clip(m.host(), g);
    c.pop_back();
    EXPECT_THROW(m.encode_video(c), InputError);
    Video d = random_clip(m.host(), g);
    d[1] = Image(32, 32);
    EXPECT_THROW(m.encode_video(d), InputError);
}

TEST(EncodeText, DeterministicUnitNormAndStraightLine) {
    std::mt19937_64 g(9);
    BundleConfig b;
    b.prompt_variant = PromptVariant::coop_au;
    Model<double> m(small_host(), b, kTwo);
    randomize_bundle(m, g, 0.1);
    ag::NoGradGuard ng;
    const auto ft = m.encode_text({"Cheek Raiser, Lip Corner Puller.", "Cheek Raiser, Lip Corner Puller."}).value();
    EXPECT_TRUE(ft.row(0) == ft.row(1));
    EXPECT_NEAR(row_norm(ft, 0), 1.0, 1e-6);

    const auto ids = m.tokenizer().encode("Jaw Drop", static_cast<int>(m.host().context_length));
    const long n = static_cast<long>(ids.size()), np = m.text_prompt_count();
    const auto& bb = m.backbone();
    oracle::M x(np + n, m.host().text_dim);
    for (long i = 0; i < np; ++i)
        for (long j = 0; j < x.cols; ++j) x(i, j) = m.bundle().prompts.text_tokens[0].value()(i, j);
    for (long i = 0; i < n; ++i)
        for (long j = 0; j < x.cols; ++j)
            x(np + i, j) = bb.tok_emb.value()(ids[static_cast<std::size_t>(i)], j) + bb.txt_pos.value()(i, j);
    for (Index l = 0; l < m.host().layers_t; ++l) x = reference_text_block(m, x, l);
    oracle::M eot = oracle::layer_norm(oracle::rows_of(x, np + n - 1, 1), oracle::from(bb.ln_final_w.value()),
                                       oracle::from(bb.ln_final_b.value()));
    oracle::M z = oracle::right_mul(eot, oracle::from(bb.txt_proj.value()));
    double nrm = 0;
    for (double v : z.v) nrm += v * v;
    for (double& v : z.v) v /= std::sqrt(nrm);
    EXPECT_LT(oracle::max_abs_diff(m.encode_prompt("Jaw Drop").value(), z), 1e-10);
}

TEST(EncodeText, ZeroInitAdaptersMatchFrozenEncoder) {
    BundleConfig on;
    on.prompts_enabled = false;
    Model<float> with(small_host(), on, kTwo);
    Model<float> without(small_host(), adapters_off(), kTwo);
    ag::NoGradGuard ng;
    const auto a = with.encode_class_prompts().value();
    const auto b = without.encode_class_prompts().value();
    EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-5f);
    EXPECT_THROW(with.encode_text({"   "}), InputError);
}

TEST(EncodeText, LongPromptIsTruncated) {
    Model<double> m(small_host(), adapters_off(), kTwo);
    std::string text;
    for (int i = 0; i < 100; ++i) text += "Brow ";
    ag::NoGradGuard ng;
    EXPECT_NEAR(m.encode_prompt(text).value().norm(), 1.0, 1e-9);
}

TEST(Audit, ToyAllOffIsZeroAndConserves) {
    Model<float> off(small_host(), adapters_off(), kTwo);
    const auto a = off.audit();
    EXPECT_EQ(a.trainable, 0);
    EXPECT_EQ(a.frozen, off.backbone().count());
    EXPECT_EQ(a.frozen, backbone_param_count(off.host()));

    Model<float> on(small_host(), BundleConfig{}, kTwo);
    const auto b = on.audit();
    EXPECT_EQ(b.trainable + b.frozen, b.total);
    Index sum = 0;
    for (const auto& [fam, n] : b.by_family) sum += n;
    EXPECT_EQ(sum, b.trainable);
}

TEST(Audit, FullPresetClosedFormAndUnderSixPercent) {
    const HostConfig full = HostConfig::full();
    auto bundle = AdapterBundle<float>::init(full, BundleConfig{});
    const auto a = audit_trainable(bundle, full);
    const Index dv = 768, dt = 512, hv = 96, ht = 64, L = 12;
    const Index sha_v = 2 * dv * hv + hv + dv;
    const Index tda = sha_v + 2 * 3 * hv * hv + 2 * 3 * hv + dv + 1;
    const Index sha_t = 2 * dt * ht + ht + dt;
    const Index prompts = 2 * dt + dv * dt + dv;
    EXPECT_EQ(a.by_family.at("sha_vision"), L * sha_v);
    EXPECT_EQ(a.by_family.at("tda"), L * tda);
    EXPECT_EQ(a.by_family.at("sha_text"), L * sha_t);
    EXPECT_EQ(a.by_family.at("ta"), L * sha_t);
    EXPECT_EQ(a.by_family.at("prompts"), prompts);
    EXPECT_EQ(a.trainable, L * (sha_v + tda + 2 * sha_t) + prompts);
    EXPECT_LT(a.fraction, 0.06);

    BundleConfig r16;
    r16.reduction = 16;
    auto b16 = AdapterBundle<float>::init(full, r16);
    EXPECT_LT(audit_trainable(b16, full).trainable, a.trainable);
}

TEST(Audit, SharingCountsOnce) {
    BundleConfig shared;
    shared.share_across_layers = true;
    Model<float> m(small_host(), shared, kTwo);
    Model<float> plain(small_host(), BundleConfig{}, kTwo);
    EXPECT_EQ(plain.audit().by_family.at("sha_vision"), 2 * m.audit().by_family.at("sha_vision"));
}

TEST(Freeze, BackboneIsFrozenAndCannotBeUnfrozen) {
    Model<float> m(small_host(), BundleConfig{}, kTwo);
    EXPECT_TRUE(m.backbone().frozen());
    for (const auto& [name, v] : m.backbone().arrays()) EXPECT_FALSE(v.requires_grad()) << name;
    EXPECT_THROW(m.backbone().unfreeze(), UnsupportedOperation);
}

TEST(Import, ExportedStateDictRoundTrips) {
    const auto dir = fs::temp_directory_path() / "peadapt_host_import";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const HostConfig h = small_host();
    auto src = FrozenBackbone<float>::random(h);
    export_backbone_state_dict(src, (dir / "w.bin").string(), (dir / "map.txt").string());

    HostConfig other = h;
    other.backbone_seed = 99;
    auto dst = FrozenBackbone<float>::random(other);
    import_pretrained((dir / "w.bin").string(), dst, (dir / "map.txt").string());
    for (std::size_t i = 0; i < src.arrays().size(); ++i) {
        EXPECT_TRUE(src.arrays()[i].second.value() == dst.arrays()[i].second.value()) << src.arrays()[i].first;
    }
    dst.to_container().save((dir / "internal.bin").string());
    auto again = FrozenBackbone<float>::random(other);
    import_pretrained((dir / "internal.bin").string(), again);
    for (std::size_t i = 0; i < src.arrays().size(); ++i) {
        EXPECT_TRUE(src.arrays()[i].second.value() == again.arrays()[i].second.value());
    }

    HostConfig loaded = h;
    loaded.pretrained_path = (dir / "w.bin").string();
    loaded.pretrained_manifest = (dir / "map.txt").string();
    loaded.backbone_seed = 5;
    Model<float> m(loaded, BundleConfig{}, kTwo);
    EXPECT_TRUE(m.backbone().patch_w.value() == src.patch_w.value());
    EXPECT_TRUE(m.backbone().frozen());
    fs::remove_all(dir);
}

TEST(Import, MissingArrayIsNamedExactly) {
    const auto dir = fs::temp_directory_path() / "peadapt_host_missing";
    fs::remove_all(dir);
    fs::create_directories(dir);
    auto src = FrozenBackbone<float>::random(small_host());
    const NamedArrays full = src.to_container();
    NamedArrays partial;
    for (const auto& n : full.names()) {
        if (n != "text.blocks.1.mlp.fc.bias") partial.put(n, full.at(n));
    }
    partial.save((dir / "p.bin").string());
    auto dst = FrozenBackbone<float>::random(small_host());
    try {
        import_pretrained((dir / "p.bin").string(), dst);
        FAIL();
    } catch (const IngestionError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("missing array 'text.blocks.1.mlp.fc.bias'"), std::string::npos) << msg;
        EXPECT_EQ(msg.find("missing array", msg.find("missing array") + 1), std::string::npos) << msg;
    }
    EXPECT_THROW(import_pretrained((dir / "absent.bin").string(), dst), Error);
    fs::remove_all(dir);
}
