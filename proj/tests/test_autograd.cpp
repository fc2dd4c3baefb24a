#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"

using namespace peadapt;
using V = ag::Var<double>;

namespace {

std::mt19937_64 gen(11);

V leaf(long r, long c, double s = 1.0) { return V(oracle::random_matrix(r, c, gen, s), true); }

/// Scalar probe of an op output with fixed random weights.
template <typename F>
auto probe(F&& f, long r, long c) {
    auto w = oracle::random_matrix(r, c, gen);
    return [f, w]() { return ag::weighted_sum(f(), w); };
}

}  // namespace

TEST(Autograd, MatmulAndLinear) {
    auto a = leaf(3, 4), b = leaf(4, 5), w = leaf(5, 4), bias = leaf(1, 5);
    auto f1 = probe([&] { return ag::matmul(a, b); }, 3, 5);
    EXPECT_LT(oracle::fd_check(a, f1), 1e-6);
    EXPECT_LT(oracle::fd_check(b, f1), 1e-6);
    auto f2 = probe([&] { return ag::linear(a, w, bias); }, 3, 5);
    EXPECT_LT(oracle::fd_check(w, f2), 1e-6);
    EXPECT_LT(oracle::fd_check(bias, f2), 1e-6);
    EXPECT_LT(oracle::fd_check(a, f2), 1e-6);
    auto f3 = probe([&] { return ag::matmul_nt(a, w); }, 3, 5);
    EXPECT_LT(oracle::fd_check(w, f3), 1e-6);
}

TEST(Autograd, Elementwise) {
    auto x = leaf(3, 4);
    for (auto op : {+[](const V& v) { return ag::gelu(v); }, +[](const V& v) { return ag::quick_gelu(v); },
                    +[](const V& v) { return ag::tanh(v); }, +[](const V& v) { return ag::sigmoid(v); },
                    +[](const V& v) { return ag::exp(v); }}) {
        auto f = probe([&] { return op(x); }, 3, 4);
        EXPECT_LT(oracle::fd_check(x, f), 1e-6);
    }
}

TEST(Autograd, LayerNormAndNormalize) {
    auto x = leaf(3, 6), g = leaf(1, 6), b = leaf(1, 6);
    auto f = probe([&] { return ag::layer_norm(x, g, b); }, 3, 6);
    EXPECT_LT(oracle::fd_check(x, f), 1e-5);
    EXPECT_LT(oracle::fd_check(g, f), 1e-6);
    EXPECT_LT(oracle::fd_check(b, f), 1e-6);
    auto f2 = probe([&] { return ag::normalize_rows(x); }, 3, 6);
    EXPECT_LT(oracle::fd_check(x, f2), 1e-6);
}

TEST(Autograd, AttentionMatchesScalarOracle) {
    for (bool causal : {false, true}) {
        auto qkv = leaf(8, 12);
        const auto y = ag::attention(qkv, 4, 2, causal);
        for (long g = 0; g < 2; ++g) {
            const auto ref = oracle::attention(oracle::from(qkv.value().middleRows(g * 4, 4)), 2, causal);
            EXPECT_LT(oracle::max_abs_diff(y.value().middleRows(g * 4, 4), ref), 1e-12);
        }
        auto f = probe([&] { return ag::attention(qkv, 4, 2, causal); }, 8, 4);
        EXPECT_LT(oracle::fd_check(qkv, f), 1e-5);
    }
}

TEST(Autograd, AttentionTapGradientsMatchFiniteDifferences) {
    auto qkv = V(oracle::random_matrix(3, 6, gen), false);
    ag::AttentionTap<double> tap;
    const auto w = oracle::random_matrix(3, 2, gen);
    auto out = ag::attention(qkv, 3, 1, false, &tap);
    ag::backward(ag::weighted_sum(out, w));
    ASSERT_EQ(tap.probs.size(), 1u);
    // d(loss)/dP = dOut * V^T
    const Matrix<double> v = qkv.value().rightCols(2);
    const Matrix<double> expect = w * v.transpose();
    EXPECT_LT((tap.grads[0] - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Autograd, StructuralOps) {
    auto x = leaf(5, 3), y = leaf(2, 3), s = leaf(5, 1), c = leaf(1, 1);
    auto f1 = probe([&] { return ag::concat_rows<double>({x, y}); }, 7, 3);
    EXPECT_LT(oracle::fd_check(y, f1), 1e-6);
    auto f2 = probe([&] { return ag::gather_rows(x, {4, 0, 4}); }, 3, 3);
    EXPECT_LT(oracle::fd_check(x, f2), 1e-6);
    auto f3 = probe([&] { return ag::add_at_rows(x, y, {1, 3}); }, 5, 3);
    EXPECT_LT(oracle::fd_check(x, f3), 1e-6);
    EXPECT_LT(oracle::fd_check(y, f3), 1e-6);
    auto f4 = probe([&] { return ag::mul_rows(x, s); }, 5, 3);
    EXPECT_LT(oracle::fd_check(s, f4), 1e-6);
    auto f5 = probe([&] { return ag::mul_scalar(x, c); }, 5, 3);
    EXPECT_LT(oracle::fd_check(c, f5), 1e-6);
    auto f6 = probe([&] { return ag::mean_rows(x); }, 1, 3);
    EXPECT_LT(oracle::fd_check(x, f6), 1e-6);
    auto f7 = probe([&] { return ag::slice_cols(x, 1, 2); }, 5, 2);
    EXPECT_LT(oracle::fd_check(x, f7), 1e-6);
}

TEST(Autograd, SoftCrossEntropy) {
    auto z = leaf(4, 3);
    Matrix<double> y(4, 3);
    y << 1, 0, 0, 0.5, 0.5, 0, 0, 0, 1, 0.2, 0.3, 0.5;
    auto loss = [&] { return ag::soft_cross_entropy(z, y); };
    EXPECT_LT(oracle::fd_check(z, loss), 1e-6);
    // Shift invariance per row.
    const double before = loss().value()(0, 0);
    z.mutable_value().array() += 3.25;
    EXPECT_NEAR(loss().value()(0, 0), before, 1e-12);
}

TEST(Autograd, NoGradGuardRecordsNothing) {
    auto x = leaf(2, 2);
    ag::NoGradGuard ng;
    auto y = ag::matmul(x, x);
    EXPECT_FALSE(y.requires_grad());
}

TEST(Autograd, SharedSubexpressionAccumulates) {
    auto x = leaf(2, 2);
    auto f = [&] { return ag::sum(ag::add(ag::mul(x, x), x)); };
    EXPECT_LT(oracle::fd_check(x, f), 1e-8);
}
