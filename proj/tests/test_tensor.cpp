#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "gradcheck.hpp"
#include "spdl/tensor.hpp"

using namespace spdl;

namespace {

Tensor<double> rand_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    return Tensor<double>::uniform(std::move(shape), lo, hi, rng);
}

}  // namespace

// ---------------------------------------------------------------------------
// Forward oracles
// ---------------------------------------------------------------------------

TEST(Matmul, SmallIntegerExact) {
    Tensor<double> a({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor<double> b({3, 2}, {7, 8, 9, 10, 11, 12});
    Tensor<double> c = matmul(a, b);
    const std::vector<double> expect = {58, 64, 139, 154};
    for (int i = 0; i < 4; ++i) {
        EXPECT_EQ(c.data()[i], expect[(size_t)i]);
    }
}

TEST(Matmul, MatchesTripleLoopReference) {
    Rng rng(11);
    const int m = 17, k = 23, n = 13;
    auto a = rand_tensor({m, k}, rng);
    auto b = rand_tensor({k, n}, rng);
    Tensor<double> c = matmul(a, b);
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double acc = 0;
            for (int p = 0; p < k; ++p) {
                acc += a.data()[i * k + p] * b.data()[p * n + j];
            }
            EXPECT_NEAR(c.data()[i * n + j], acc, 1e-12);
        }
    }
}

TEST(Matmul, ShapeMismatchThrows) {
    Tensor<double> a({2, 3});
    Tensor<double> b({4, 2});
    EXPECT_THROW(matmul(a, b), ShapeError);
}

// Each output row is a fixed-order accumulation over its own inputs, so a
// row of a batched product is bit-identical to the same row computed alone.
// The greedy-losslessness guarantee rests on this.
TEST(Matmul, RowResultIndependentOfBatch) {
    Rng rng(21);
    const int m = 9, k = 64, n = 32;
    auto a = rand_tensor({m, k}, rng);
    auto b = rand_tensor({k, n}, rng);
    Tensor<double> full = matmul(a, b);
    for (int i = 0; i < m; ++i) {
        Tensor<double> row({1, k});
        std::memcpy(row.data(), a.data() + (int64_t)i * k, sizeof(double) * k);
        Tensor<double> single = matmul(row, b);
        EXPECT_EQ(0, std::memcmp(single.data(), full.data() + (int64_t)i * n, sizeof(double) * n));
    }
}

TEST(Matmul, BitwiseDeterministic) {
    Rng rng(31);
    auto a = rand_tensor({8, 16}, rng);
    auto b = rand_tensor({16, 8}, rng);
    Tensor<double> c1 = matmul(a, b);
    Tensor<double> c2 = matmul(a, b);
    EXPECT_EQ(0, std::memcmp(c1.data(), c2.data(), sizeof(double) * (size_t)c1.numel()));
}

TEST(Transpose, RoundTrip) {
    Rng rng(41);
    auto a = rand_tensor({5, 7}, rng);
    Tensor<double> t = transpose(transpose(a));
    EXPECT_EQ(0, std::memcmp(a.data(), t.data(), sizeof(double) * (size_t)a.numel()));
}

TEST(AddBias, BroadcastsOverRows) {
    Tensor<double> x({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor<double> b({3}, {10, 20, 30});
    Tensor<double> y = add_bias(x, b);
    const std::vector<double> expect = {11, 22, 33, 14, 25, 36};
    for (int i = 0; i < 6; ++i) {
        EXPECT_EQ(y.data()[i], expect[(size_t)i]);
    }
}

TEST(RmsNorm, ScalarOracle) {
    // x=[3,4], w=[2,0.5], eps=1e-5; values frozen from a scalar reference.
    Tensor<double> x({1, 2}, {3, 4});
    Tensor<double> w({2}, {2, 0.5});
    Tensor<double> y = rms_norm(x, w, 1e-5);
    EXPECT_NEAR(y.data()[0], 1.6970555960256115, 1e-15);
    EXPECT_NEAR(y.data()[1], 0.56568519867520384, 1e-15);
}

TEST(RmsNorm, EpsMustBePositive) {
    Tensor<double> x({1, 2}, {1, 2});
    Tensor<double> w({2}, {1, 1});
    EXPECT_THROW(rms_norm(x, w, 0.0), ArgumentError);
}

TEST(Softmax, FrozenOracle) {
    Tensor<double> x({1, 3}, {1, 2, 3});
    Tensor<double> p = softmax(x, 1.0);
    EXPECT_NEAR(p.data()[0], 0.090030573170380462, 1e-15);
    EXPECT_NEAR(p.data()[1], 0.24472847105479764, 1e-15);
    EXPECT_NEAR(p.data()[2], 0.66524095577482178, 1e-15);
    Tensor<double> p2 = softmax(x, 2.0);
    EXPECT_NEAR(p2.data()[0], 0.18632372322584759, 1e-15);
    EXPECT_NEAR(p2.data()[1], 0.30719588571849837, 1e-15);
    EXPECT_NEAR(p2.data()[2], 0.50648039105565401, 1e-15);
}

TEST(Softmax, ShiftInvariantAndNormalized) {
    Rng rng(51);
    auto x = rand_tensor({4, 9}, rng, -5, 5);
    Tensor<double> p = softmax(x, 1.0);
    Tensor<double> shifted(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) {
        shifted.data()[i] = x.data()[i] + 100.0;
    }
    Tensor<double> ps = softmax(shifted, 1.0);
    for (int64_t i = 0; i < x.numel(); ++i) {
        EXPECT_NEAR(p.data()[i], ps.data()[i], 1e-12);
    }
    for (int64_t i = 0; i < x.rows(); ++i) {
        double s = 0;
        for (int j = 0; j < x.cols(); ++j) {
            s += p.data()[i * x.cols() + j];
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Softmax, NonPositiveTemperatureThrows) {
    Tensor<double> x({1, 2}, {0, 1});
    EXPECT_THROW(softmax(x, 0.0), ArgumentError);
    EXPECT_THROW(softmax(x, -1.0), ArgumentError);
}

// Wide rows in single precision must still normalize tightly enough to pass
// the distribution check downstream.
TEST(Softmax, WideFloatRowsStayNormalized) {
    Rng rng(71);
    Tensor<float> x = Tensor<float>::uniform({200, 64}, -6.0f, 6.0f, rng);
    Tensor<float> p = softmax(x, 1.0f);
    for (int64_t i = 0; i < p.rows(); ++i) {
        double s = 0.0;
        for (int64_t j = 0; j < p.cols(); ++j) {
            s += (double)p.data()[i * p.cols() + j];
        }
        EXPECT_NEAR(s, 1.0, 1e-6);
    }
    EXPECT_GE(soft_cross_entropy(p, x).item(), 0.0f);
}

TEST(MaskedSoftmax, FullyVisibleMatchesSoftmaxBitwise) {
    Rng rng(61);
    auto x = rand_tensor({3, 6}, rng, -4, 4);
    Tensor<double> dense = softmax(x, 1.0);
    Tensor<double> masked = masked_softmax(x, [](int64_t, int64_t) { return true; });
    EXPECT_EQ(0, std::memcmp(dense.data(), masked.data(), sizeof(double) * (size_t)x.numel()));
}

TEST(MaskedSoftmax, HiddenColumnsAreExactlyZero) {
    Rng rng(71);
    auto x = rand_tensor({2, 5}, rng);
    auto vis = [](int64_t, int64_t j) { return j % 2 == 0; };
    Tensor<double> p = masked_softmax(x, vis);
    for (int64_t i = 0; i < 2; ++i) {
        double s = 0;
        for (int j = 0; j < 5; ++j) {
            if (j % 2 == 1) {
                EXPECT_EQ(p.data()[i * 5 + j], 0.0);
            }
            s += p.data()[i * 5 + j];
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

// The value of a visible column must not depend on what the hidden columns
// contain: tree attention relies on this to equal per-path chain attention.
TEST(MaskedSoftmax, VisibleColumnsMatchCompactedRow) {
    Rng rng(81);
    auto x = rand_tensor({1, 6}, rng, -3, 3);
    const std::vector<int> vis_cols = {0, 2, 3, 5};
    auto vis = [&](int64_t, int64_t j) {
        return std::find(vis_cols.begin(), vis_cols.end(), (int)j) != vis_cols.end();
    };
    Tensor<double> p = masked_softmax(x, vis);
    Tensor<double> compact({1, (int)vis_cols.size()});
    for (size_t j = 0; j < vis_cols.size(); ++j) {
        compact.data()[j] = x.data()[vis_cols[j]];
    }
    Tensor<double> pc = masked_softmax(compact, [](int64_t, int64_t) { return true; });
    for (size_t j = 0; j < vis_cols.size(); ++j) {
        EXPECT_EQ(p.data()[vis_cols[j]], pc.data()[j]);
    }
}

TEST(MaskedSoftmax, EmptyRowThrows) {
    Tensor<double> x({1, 3}, {1, 2, 3});
    EXPECT_THROW(masked_softmax(x, [](int64_t, int64_t) { return false; }), ArgumentError);
}

TEST(Silu, KnownPoints) {
    Tensor<double> x({4}, {0.0, 20.0, -20.0, 1.0});
    Tensor<double> y = silu(x);
    EXPECT_EQ(y.data()[0], 0.0);
    EXPECT_NEAR(y.data()[1], 20.0, 1e-7);
    EXPECT_NEAR(y.data()[2], 0.0, 1e-7);
    EXPECT_NEAR(y.data()[3], 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
}

TEST(CosineSimilarity, Extremes) {
    Tensor<double> q({4, 3}, {1, 2, 3, 1, 0, 0, 1, 1, 0, 0, 0, 0});
    Tensor<double> k({4, 3}, {2, 4, 6, -1, 0, 0, 1, -1, 0, 5, 5, 5});
    Tensor<double> s = cosine_similarity(q, k);
    EXPECT_NEAR(s.data()[0], 1.0, 1e-7);   // parallel
    EXPECT_NEAR(s.data()[1], -1.0, 1e-7);  // antiparallel
    EXPECT_NEAR(s.data()[2], 0.0, 1e-12);  // orthogonal
    EXPECT_EQ(s.data()[3], 0.0);           // zero row guarded, no NaN
}

TEST(MulRows, ScalesEachRow) {
    Tensor<double> v({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor<double> s({2}, {2, -1});
    Tensor<double> y = mul_rows(v, s);
    const std::vector<double> expect = {2, 4, 6, -4, -5, -6};
    for (int i = 0; i < 6; ++i) {
        EXPECT_EQ(y.data()[i], expect[(size_t)i]);
    }
}

TEST(ConcatSlice, RoundTrip) {
    Rng rng(91);
    auto a = rand_tensor({3, 4}, rng);
    auto b = rand_tensor({3, 2}, rng);
    Tensor<double> cat = concat_cols(a, b);
    ASSERT_EQ(cat.dim(1), 6);
    Tensor<double> a2 = slice_cols(cat, 0, 4);
    Tensor<double> b2 = slice_cols(cat, 4, 6);
    EXPECT_EQ(0, std::memcmp(a.data(), a2.data(), sizeof(double) * (size_t)a.numel()));
    EXPECT_EQ(0, std::memcmp(b.data(), b2.data(), sizeof(double) * (size_t)b.numel()));
}

TEST(SelectRows, GathersAndChecksBounds) {
    Tensor<double> x({3, 2}, {1, 2, 3, 4, 5, 6});
    Tensor<double> y = select_rows(x, {2, 0, 2});
    const std::vector<double> expect = {5, 6, 1, 2, 5, 6};
    for (int i = 0; i < 6; ++i) {
        EXPECT_EQ(y.data()[i], expect[(size_t)i]);
    }
    EXPECT_THROW(select_rows(x, {3}), ArgumentError);
}

TEST(EmbedRows, LookupAndVocabCheck) {
    Tensor<double> table({4, 2}, {0, 1, 10, 11, 20, 21, 30, 31});
    Tensor<double> e = embed_rows(table, {3, 1});
    EXPECT_EQ(e.data()[0], 30.0);
    EXPECT_EQ(e.data()[3], 11.0);
    EXPECT_THROW(embed_rows(table, {4}), DataError);
    EXPECT_THROW(embed_rows(table, {-1}), DataError);
}

TEST(Rope, PositionZeroIsIdentity) {
    Rng rng(101);
    auto x = rand_tensor({2, 8}, rng);
    Tensor<double> y = rope(x, {0, 0}, 2, 10000.0);
    EXPECT_EQ(0, std::memcmp(x.data(), y.data(), sizeof(double) * (size_t)x.numel()));
}

TEST(Rope, PreservesPerHeadNorm) {
    Rng rng(111);
    auto x = rand_tensor({1, 8}, rng);
    Tensor<double> y = rope(x, {7}, 2, 10000.0);
    for (int h = 0; h < 2; ++h) {
        double nx = 0, ny = 0;
        for (int j = 0; j < 4; ++j) {
            nx += x.data()[h * 4 + j] * x.data()[h * 4 + j];
            ny += y.data()[h * 4 + j] * y.data()[h * 4 + j];
        }
        EXPECT_NEAR(nx, ny, 1e-12);
    }
}

// Attention scores built on rotated q/k depend only on relative offset.
TEST(Rope, DotDependsOnRelativePositionOnly) {
    Rng rng(121);
    auto q = rand_tensor({1, 8}, rng);
    auto k = rand_tensor({1, 8}, rng);
    auto dot_at = [&](int pq, int pk) {
        Tensor<double> rq = rope(q, {pq}, 1, 10000.0);
        Tensor<double> rk = rope(k, {pk}, 1, 10000.0);
        double d = 0;
        for (int j = 0; j < 8; ++j) {
            d += rq.data()[j] * rk.data()[j];
        }
        return d;
    };
    EXPECT_NEAR(dot_at(9, 4), dot_at(24, 19), 1e-9);
    EXPECT_NEAR(dot_at(3, 0), dot_at(103, 100), 1e-9);
}

TEST(Rope, OddHeadDimThrows) {
    Tensor<double> x({1, 6});
    EXPECT_THROW(rope(x, {0}, 2, 10000.0), ShapeError);
}

TEST(SmoothL1, FrozenOracle) {
    // deltas {2, 0.5, -3, 1}
    Tensor<double> a({4}, {2, 0.5, -3, 1});
    Tensor<double> b({4}, {0, 0, 0, 0});
    EXPECT_NEAR(smooth_l1(a, b, 1.0).item(), 1.15625, 1e-15);
    EXPECT_NEAR(smooth_l1(a, b, 2.0).item(), 0.828125, 1e-15);
    // continuity at the quadratic/linear boundary
    Tensor<double> c({1}, {1.0}), z({1}, {0.0});
    EXPECT_NEAR(smooth_l1(c, z, 1.0).item(), 0.5, 1e-15);
}

TEST(SoftCrossEntropy, OneHotWithLargeMarginNearZero) {
    Tensor<double> p({1, 4}, {0, 0, 1, 0});
    Tensor<double> q({1, 4}, {0, 0, 50, 0});
    EXPECT_LT(soft_cross_entropy(p, q).item(), 1e-6);
}

TEST(SoftCrossEntropy, UniformTeacherGivesLogV) {
    Tensor<double> p({1, 7}, std::vector<double>(7, 1.0 / 7.0));
    Tensor<double> q({1, 7}, {3, -1, 0.5, 2, 2, 2, -4});
    // uniform teacher against uniform logits is exactly ln V
    Tensor<double> q0({1, 7}, std::vector<double>(7, 0.42));
    EXPECT_NEAR(soft_cross_entropy(p, q0).item(), 1.9459101490553132, 1e-12);
    // any logits give at least ln V
    EXPECT_GE(soft_cross_entropy(p, q).item(), 1.9459101490553132 - 1e-12);
}

TEST(SoftCrossEntropy, RejectsUnnormalizedTeacher) {
    Tensor<double> p({1, 3}, {0.5, 0.2, 0.2});
    Tensor<double> q({1, 3}, {0, 0, 0});
    EXPECT_THROW(soft_cross_entropy(p, q), DataError);
}

TEST(CrossEntropy, FrozenOracle) {
    Tensor<double> q({1, 3}, {0.5, -1.0, 2.0});
    EXPECT_NEAR(cross_entropy(q, {2}).item(), 0.24131129665715711, 1e-15);
    EXPECT_THROW(cross_entropy(q, {3}), DataError);
    EXPECT_THROW(cross_entropy(q, {0, 1}), ShapeError);
}

TEST(ArgmaxRow, LowestIndexWinsTies) {
    const double row[] = {1.0, 3.0, 3.0, 2.0};
    EXPECT_EQ(argmax_row(row, 4), 1);
}

// ---------------------------------------------------------------------------
// Tape mechanics
// ---------------------------------------------------------------------------

TEST(Tape, NothingRecordedOutsideScope) {
    Tensor<double> x({2, 2}, {1, 2, 3, 4});
    x.set_requires_grad();
    Graph<double> g;
    Tensor<double> y = mul(x, x);  // no scope active
    EXPECT_EQ(g.size(), 0u);
    EXPECT_FALSE(y.requires_grad());
}

TEST(Tape, SumBackwardGivesOnes) {
    Tensor<double> x({3}, {5, -2, 7});
    x.set_requires_grad();
    Graph<double> g;
    {
        auto scope = g.record();
        g.backward(sum(x));
    }
    for (int i = 0; i < 3; ++i) {
        EXPECT_EQ(x.grad()[i], 1.0);
    }
}

TEST(Tape, RepeatedBackwardAccumulates) {
    Tensor<double> x({2}, {3, 4});
    x.set_requires_grad();
    Graph<double> g;
    Tensor<double> loss;
    {
        auto scope = g.record();
        loss = sum(mul(x, x));
    }
    g.backward(loss);
    EXPECT_EQ(x.grad()[0], 6.0);
    g.backward(loss);
    EXPECT_EQ(x.grad()[0], 12.0);
}

TEST(Tape, ReusedTensorSumsContributions) {
    Tensor<double> x({1}, {3});
    x.set_requires_grad();
    Graph<double> g;
    {
        auto scope = g.record();
        // y = x*x + x  =>  dy/dx = 2x + 1 = 7
        g.backward(add(mul(x, x), sum(x).reshape({1})));
    }
    EXPECT_EQ(x.grad()[0], 7.0);
}

TEST(Tape, BackwardRequiresScalar) {
    Tensor<double> x({2}, {1, 2});
    Graph<double> g;
    EXPECT_THROW(g.backward(x), ArgumentError);
}

TEST(Tape, OpNamesRecorded) {
    Tensor<double> x({2}, {1, 2});
    x.set_requires_grad();
    Graph<double> g;
    {
        auto scope = g.record();
        sum(silu(x));
    }
    EXPECT_TRUE(g.contains_op("silu"));
    EXPECT_TRUE(g.contains_op("sum"));
    EXPECT_FALSE(g.contains_op("matmul"));
}

TEST(Tape, NestedScopesRestorePrevious) {
    Graph<double> outer, inner;
    EXPECT_EQ(Graph<double>::active(), nullptr);
    {
        auto s1 = outer.record();
        EXPECT_EQ(Graph<double>::active(), &outer);
        {
            auto s2 = inner.record();
            EXPECT_EQ(Graph<double>::active(), &inner);
        }
        EXPECT_EQ(Graph<double>::active(), &outer);
    }
    EXPECT_EQ(Graph<double>::active(), nullptr);
}

TEST(CheckedMode, FlagsNonFinite) {
    checked_mode() = true;
    Tensor<double> a({1}, {1e308});
    EXPECT_THROW(mul(a, a), NumericError);
    checked_mode() = false;
    Tensor<double> ok = mul(a, a);  // silently inf when disabled
    EXPECT_TRUE(std::isinf(ok.data()[0]));
}

// ---------------------------------------------------------------------------
// Gradient checks, one kernel at a time
// ---------------------------------------------------------------------------

TEST(Gradcheck, Matmul) {
    Rng rng(201);
    for (int rep = 0; rep < 5; ++rep) {
        auto a = rand_tensor({4, 6}, rng);
        auto b = rand_tensor({6, 3}, rng);
        auto w = rand_tensor({4, 3}, rng);
        expect_gradients_match([&] { return sum(mul(matmul(a, b), w)); }, {a, b});
    }
}

TEST(Gradcheck, Elementwise) {
    Rng rng(211);
    for (int rep = 0; rep < 5; ++rep) {
        auto a = rand_tensor({3, 4}, rng);
        auto b = rand_tensor({3, 4}, rng);
        auto w = rand_tensor({3, 4}, rng);
        expect_gradients_match([&] { return sum(mul(add(a, b), w)); }, {a, b});
        expect_gradients_match([&] { return sum(mul(sub(a, b), w)); }, {a, b});
        expect_gradients_match([&] { return sum(mul(mul(a, b), w)); }, {a, b});
        expect_gradients_match([&] { return sum(mul(scale(a, 2.5), w)); }, {a});
        expect_gradients_match([&] { return mean(mul(silu(a), w)); }, {a});
    }
}

TEST(Gradcheck, AddBiasAndTranspose) {
    Rng rng(221);
    for (int rep = 0; rep < 5; ++rep) {
        auto x = rand_tensor({3, 5}, rng);
        auto b = rand_tensor({5}, rng);
        auto w = rand_tensor({3, 5}, rng);
        expect_gradients_match([&] { return sum(mul(add_bias(x, b), w)); }, {x, b});
        auto wt = rand_tensor({5, 3}, rng);
        expect_gradients_match([&] { return sum(mul(transpose(x), wt)); }, {x});
    }
}

TEST(Gradcheck, RmsNorm) {
    Rng rng(231);
    for (int rep = 0; rep < 5; ++rep) {
        auto x = rand_tensor({3, 6}, rng, -2, 2);
        auto w = rand_tensor({6}, rng, 0.5, 1.5);
        auto m = rand_tensor({3, 6}, rng);
        expect_gradients_match([&] { return sum(mul(rms_norm(x, w, 1e-5), m)); }, {x, w});
    }
}

TEST(Gradcheck, Softmax) {
    Rng rng(241);
    for (int rep = 0; rep < 5; ++rep) {
        auto x = rand_tensor({3, 5}, rng, -2, 2);
        auto w = rand_tensor({3, 5}, rng);
        expect_gradients_match([&] { return sum(mul(softmax(x, 1.0), w)); }, {x});
        expect_gradients_match([&] { return sum(mul(softmax(x, 0.7), w)); }, {x});
        auto vis = [](int64_t i, int64_t j) { return j <= i + 2; };
        expect_gradients_match([&] { return sum(mul(masked_softmax(x, vis), w)); }, {x});
    }
}

TEST(Gradcheck, CosineSimilarity) {
    Rng rng(251);
    for (int rep = 0; rep < 5; ++rep) {
        auto q = rand_tensor({4, 6}, rng, -2, 2);
        auto k = rand_tensor({4, 6}, rng, -2, 2);
        auto w = rand_tensor({4}, rng);
        expect_gradients_match([&] { return sum(mul(cosine_similarity(q, k), w)); }, {q, k});
    }
}

TEST(Gradcheck, RowAndColumnOps) {
    Rng rng(261);
    for (int rep = 0; rep < 5; ++rep) {
        auto v = rand_tensor({4, 3}, rng);
        auto s = rand_tensor({4}, rng);
        auto w = rand_tensor({4, 3}, rng);
        expect_gradients_match([&] { return sum(mul(mul_rows(v, s), w)); }, {v, s});

        auto a = rand_tensor({3, 4}, rng);
        auto b = rand_tensor({3, 2}, rng);
        auto wc = rand_tensor({3, 6}, rng);
        expect_gradients_match([&] { return sum(mul(concat_cols(a, b), wc)); }, {a, b});

        auto ws = rand_tensor({3, 2}, rng);
        expect_gradients_match([&] { return sum(mul(slice_cols(a, 1, 3), ws)); }, {a});

        std::vector<int> idx = {2, 0, 0, 1};
        auto wr = rand_tensor({4, 4}, rng);
        expect_gradients_match([&] { return sum(mul(select_rows(a, idx), wr)); }, {a});

        auto table = rand_tensor({5, 3}, rng);
        std::vector<int> ids = {4, 1, 1, 0};
        auto we = rand_tensor({4, 3}, rng);
        expect_gradients_match([&] { return sum(mul(embed_rows(table, ids), we)); }, {table});
    }
}

TEST(Gradcheck, Rope) {
    Rng rng(271);
    for (int rep = 0; rep < 5; ++rep) {
        auto x = rand_tensor({3, 8}, rng);
        auto w = rand_tensor({3, 8}, rng);
        std::vector<int> pos = {0, 5, 11};
        expect_gradients_match([&] { return sum(mul(rope(x, pos, 2, 10000.0), w)); }, {x});
    }
}

TEST(Gradcheck, Losses) {
    Rng rng(281);
    for (int rep = 0; rep < 5; ++rep) {
        auto a = rand_tensor({3, 4}, rng, -2, 2);
        auto b = rand_tensor({3, 4}, rng, -2, 2);
        expect_gradients_match([&] { return smooth_l1(a, b, 1.0); }, {a, b});
        expect_gradients_match([&] { return smooth_l1(a, b, 0.25); }, {a, b});

        auto logits = rand_tensor({3, 5}, rng, -2, 2);
        Tensor<double> teacher = softmax(rand_tensor({3, 5}, rng, -2, 2), 1.0);
        expect_gradients_match([&] { return soft_cross_entropy(teacher, logits); }, {logits});

        std::vector<int> targets = {4, 0, 2};
        expect_gradients_match([&] { return cross_entropy(logits, targets); }, {logits});
    }
}

// A composed stack touching most kernels at once; catches wrong chain-rule
// plumbing between ops that individual checks miss.
TEST(Gradcheck, ComposedPipeline) {
    Rng rng(291);
    auto x = rand_tensor({4, 8}, rng, -1, 1);
    auto w1 = rand_tensor({8, 8}, rng, -0.5, 0.5);
    auto b1 = rand_tensor({8}, rng, -0.1, 0.1);
    auto nw = rand_tensor({8}, rng, 0.8, 1.2);
    auto w2 = rand_tensor({8, 5}, rng, -0.5, 0.5);
    Tensor<double> teacher = softmax(rand_tensor({4, 5}, rng, -1, 1), 1.0);
    std::vector<int> pos = {3, 1, 0, 7};
    auto loss = [&] {
        Tensor<double> h = rms_norm(x, nw, 1e-5);
        h = add_bias(matmul(h, w1), b1);
        h = rope(silu(h), pos, 2, 10000.0);
        Tensor<double> logits = matmul(h, w2);
        return add(soft_cross_entropy(teacher, logits),
                   scale(smooth_l1(h, rms_norm(x, nw, 1e-5), 1.0), 0.5));
    };
    expect_gradients_match(loss, {x, w1, b1, nw, w2}, 1e-5, 1e-3);
}
