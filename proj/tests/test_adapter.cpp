#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"

using namespace peadapt;

namespace {

const std::vector<CellKind> kCells{CellKind::vanilla, CellKind::rnn, CellKind::lstm, CellKind::gru};
const std::vector<ScalePlacement> kPlacements{ScalePlacement::none, ScalePlacement::input_level,
                                              ScalePlacement::recurrent_output, ScalePlacement::post_up_projection};

AdapterConfig small(CellKind cell = CellKind::gru, ScalePlacement p = ScalePlacement::post_up_projection) {
    return AdapterConfig{8, 2, p, cell, 1};
}

TemporalAdapter<double> random_temporal(const AdapterConfig& cfg, std::mt19937_64& g) {
    Rng rng(g());
    auto p = TemporalAdapter<double>::init(cfg, rng);
    oracle::randomize(p, g);
    // Keep the scale pre-activation away from the ReLU kink.
    p.scale_w.mutable_value() *= 0.1;
    p.scale_b.mutable_value().setConstant(1.5);
    return p;
}

}  // namespace

TEST(AdapterConfig, HiddenWidth) {
    EXPECT_EQ((AdapterConfig{768, 8}).hidden_dim(), 96);
    EXPECT_EQ((AdapterConfig{512, 8}).hidden_dim(), 64);
    EXPECT_EQ((AdapterConfig{10, 3}).hidden_dim(), 3);
    EXPECT_THROW((AdapterConfig{4, 8}).validate(), ConfigError);
    EXPECT_THROW(parse_cell_kind("transformer"), ConfigError);
    EXPECT_THROW(parse_scale_placement("everywhere"), ConfigError);
}

TEST(Bottleneck, ZeroUpProjectionGivesZeroDelta) {
    Rng rng(1);
    auto p = BottleneckAdapter<double>::init(AdapterConfig{16, 4}, rng);
    std::mt19937_64 g(2);
    const auto x = oracle::random_matrix(5, 16, g);
    EXPECT_EQ(sha_forward(x, p).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(ta_forward(x, p).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Bottleneck, MatchesScalarOracle) {
    std::mt19937_64 g(3);
    Rng rng(4);
    auto p = BottleneckAdapter<double>::init(AdapterConfig{8, 2}, rng);
    oracle::randomize(p, g);
    const auto x = oracle::random_matrix(3, 8, g);
    EXPECT_LT(oracle::max_abs_diff(sha_forward(x, p), oracle::bottleneck(oracle::from(x), oracle::read(p))), 1e-12);
    EXPECT_LT(oracle::max_abs_diff(ta_forward(x, p), oracle::bottleneck(oracle::from(x), oracle::read(p))), 1e-12);
}

TEST(Bottleneck, IndependentInstancesDiffer) {
    std::mt19937_64 g(5);
    Rng rng(6);
    auto sha = BottleneckAdapter<double>::init(AdapterConfig{8, 2}, rng);
    auto ta = BottleneckAdapter<double>::init(AdapterConfig{8, 2}, rng);
    oracle::randomize(sha, g);
    oracle::randomize(ta, g);
    const auto x = oracle::random_matrix(3, 8, g);
    EXPECT_GT((sha_forward(x, sha) - ta_forward(x, ta)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Bottleneck, DimensionMismatchNamesBothSizes) {
    Rng rng(7);
    auto p = BottleneckAdapter<double>::init(AdapterConfig{8, 2}, rng);
    try {
        sha_forward(Matrix<double>(Matrix<double>::Zero(2, 6)), p);
        FAIL();
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("8"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("6"), std::string::npos);
    }
}

TEST(DynamicScale, RectifiedAffine) {
    std::mt19937_64 g(8);
    auto p = random_temporal(small(), g);
    const auto x = oracle::random_matrix(4, 8, g);
    p.scale_w.mutable_value().setZero();
    p.scale_b.mutable_value().setConstant(0.7);
    EXPECT_TRUE((dynamic_scale(x, p).array() == 0.7).all());
    p.scale_b.mutable_value().setConstant(-1.0);
    EXPECT_EQ(dynamic_scale(x, p).cwiseAbs().maxCoeff(), 0.0);
    oracle::randomize(p, g);
    const auto ref = oracle::scale(oracle::from(x), oracle::read(p));
    EXPECT_LT(oracle::max_abs_diff(dynamic_scale(x, p), ref), 1e-12);
    EXPECT_GE(dynamic_scale(x, p).minCoeff(), 0.0);
}

TEST(Temporal, MatchesUnrolledOracleForEveryCellAndPlacement) {
    std::mt19937_64 g(9);
    for (auto cell : kCells) {
        for (auto where : kPlacements) {
            auto cfg = small(cell, where);
            auto p = random_temporal(cfg, g);
            const auto x = oracle::random_matrix(4, 8, g);
            const auto ref = oracle::temporal(oracle::from(x), oracle::read(p), where);
            EXPECT_LT(oracle::max_abs_diff(tda_forward(x, p, cfg), ref), 1e-10)
                << to_string(cell) << "/" << to_string(where);
        }
    }
}

TEST(Temporal, ZeroScaleAnnihilates) {
    std::mt19937_64 g(10);
    auto cfg = small();
    auto p = random_temporal(cfg, g);
    p.scale_w.mutable_value().setZero();
    p.scale_b.mutable_value().setZero();
    EXPECT_EQ(tda_forward(oracle::random_matrix(4, 8, g), p, cfg).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Temporal, EmptySequenceAndCellMismatch) {
    std::mt19937_64 g(11);
    auto cfg = small();
    auto p = random_temporal(cfg, g);
    EXPECT_THROW(tda_forward(Matrix<double>(0, 8), p, cfg), InputError);
    EXPECT_THROW(tda_forward(Matrix<double>(Matrix<double>::Zero(2, 8)), p, small(CellKind::lstm)), ConfigError);
}

TEST(Temporal, HomogeneousInScale) {
    std::mt19937_64 g(12);
    auto cfg = small();
    auto p = random_temporal(cfg, g);
    const auto x = oracle::random_matrix(4, 8, g);
    const auto base = tda_forward(x, p, cfg);
    p.scale_w.mutable_value() *= 2.5;
    p.scale_b.mutable_value() *= 2.5;
    EXPECT_LT((tda_forward(x, p, cfg) - 2.5 * base).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Temporal, DeterministicBitwise) {
    std::mt19937_64 g(13);
    auto cfg = small(CellKind::lstm);
    auto p = random_temporal(cfg, g);
    const auto x = oracle::random_matrix(4, 8, g);
    EXPECT_TRUE(tda_forward(x, p, cfg) == tda_forward(x, p, cfg));
}

TEST(Temporal, CausalAndOrderSensitiveUnlessVanilla) {
    std::mt19937_64 g(14);
    for (auto cell : kCells) {
        auto cfg = small(cell);
        auto p = random_temporal(cfg, g);
        const auto x = oracle::random_matrix(4, 8, g);
        const auto y = tda_forward(x, p, cfg);
        auto xf = x;
        xf.row(3) += oracle::random_matrix(1, 8, g);
        const auto yf = tda_forward(xf, p, cfg);
        EXPECT_EQ((y.topRows(3) - yf.topRows(3)).cwiseAbs().maxCoeff(), 0.0) << to_string(cell);

        Matrix<double> xp(4, 8);
        const std::vector<int> perm{2, 0, 3, 1};
        for (int i = 0; i < 4; ++i) xp.row(i) = x.row(perm[static_cast<std::size_t>(i)]);
        const auto yp = tda_forward(xp, p, cfg);
        double diff = 0;
        for (int i = 0; i < 4; ++i) diff = std::max(diff, (yp.row(i) - y.row(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff());
        if (cell == CellKind::vanilla) {
            EXPECT_EQ(diff, 0.0);
        } else {
            EXPECT_GT(diff, 1e-9) << to_string(cell);
        }
    }
}

TEST(Temporal, ParallelStreamsMatchSeparateRuns) {
    std::mt19937_64 g(15);
    auto cfg = small();
    auto p = random_temporal(cfg, g);
    const auto a = oracle::random_matrix(3, 8, g), b = oracle::random_matrix(3, 8, g);
    Matrix<double> both(6, 8);
    for (int t = 0; t < 3; ++t) {
        both.row(2 * t) = a.row(t);
        both.row(2 * t + 1) = b.row(t);
    }
    ag::NoGradGuard ng;
    const auto y = temporal_delta(ag::constant(both), 3, 2, p, cfg.scale_placement).value();
    const auto ya = tda_forward(a, p, cfg), yb = tda_forward(b, p, cfg);
    for (int t = 0; t < 3; ++t) {
        EXPECT_LT((y.row(2 * t) - ya.row(t)).cwiseAbs().maxCoeff(), 1e-12);
        EXPECT_LT((y.row(2 * t + 1) - yb.row(t)).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(Gradients, AllAdapterParametersMatchFiniteDifferences) {
    std::mt19937_64 g(16);
    for (auto cell : kCells) {
        for (auto where : kPlacements) {
            auto cfg = small(cell, where);
            auto p = random_temporal(cfg, g);
            const auto x = ag::constant(oracle::random_matrix(4, 8, g));
            const auto w = oracle::random_matrix(4, 8, g);
            auto loss = [&] { return ag::weighted_sum(temporal_delta(x, 4, 1, p, where), w); };
            p.visit([&](const std::string& name, ag::Var<double>& v) {
                EXPECT_LT(oracle::fd_check(v, loss), 1e-4) << to_string(cell) << "/" << to_string(where) << " " << name;
            }, "tda");
        }
    }
    Rng rng(17);
    auto b = BottleneckAdapter<double>::init(AdapterConfig{8, 2}, rng);
    oracle::randomize(b, g);
    const auto x = ag::constant(oracle::random_matrix(3, 8, g));
    const auto w = oracle::random_matrix(3, 8, g);
    auto loss = [&] { return ag::weighted_sum(bottleneck_delta(x, b), w); };
    b.visit([&](const std::string& name, ag::Var<double>& v) { EXPECT_LT(oracle::fd_check(v, loss), 1e-4) << name; }, "sha");
}

TEST(Counting, ClosedForms) {
    Rng rng(18);
    auto sha = BottleneckAdapter<float>::init(AdapterConfig{768, 8}, rng);
    EXPECT_EQ(count_params(sha), 148320);
    auto ta = BottleneckAdapter<float>::init(AdapterConfig{512, 8}, rng);
    EXPECT_EQ(count_params(ta), 66112);
    auto tda = TemporalAdapter<float>::init(AdapterConfig{768, 8}, rng);
    const Index d = 768, h = 96;
    const Index expected = (h * d + h) + (d * h + d) + 2 * (3 * h * h) + 2 * (3 * h) + (d + 1);
    EXPECT_EQ(count_params(tda), expected);
    Index summed = 0;
    tda.visit([&summed](const std::string&, ag::Var<float>& v) { summed += v.rows() * v.cols(); }, "");
    EXPECT_EQ(count_params(tda), summed);
}
