// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "lingreg/importance.hpp"
#include "lingreg/mask.hpp"
#include "support.hpp"

namespace lingreg {
namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.vocab_size = 10;
    c.dim = 8;
    c.layers = 1;
    c.heads = 2;
    c.ffn_dim = 8;
    c.max_seq_len = 8;
    return c;
}

std::vector<float> random_grad(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> d(0.f, 1.f);
    std::vector<float> g(n);
    for (auto& x : g) x = d(rng);
    return g;
}

TEST(Importance, ScalarQuadraticClosedForm) {
    // L(w) = 0.5 (w x - y)^2 with x = 1, y = 0
    auto L = [](double w) { return 0.5 * w * w; };
    testing::TapeD tp(true);
    Var w = tp.leaf(testing::TensorD({1, 1}, {2.0}));
    Var x = tp.constant(testing::TensorD({1, 1}, {1.0}));
    Var r = tp.matmul(w, x);
    Var loss = tp.reshape(tp.scale(tp.hadamard(r, r), 0.5), Shape{});
    tp.backward(loss);
    const double g = tp.grad(w)[0];
    EXPECT_DOUBLE_EQ(g, 2.0);

    ParameterStore store(small_config());
    const ParamCoord c{0, MatrixKind::attn_q, 0, 0};
    store.at(c) = 2.0f;
    std::vector<float> grad(store.size(), 0.f);
    grad[store.layout().offset_of(c)] = static_cast<float>(g);
    ImportanceMap map(store.config());
    map.accumulate_step(store, grad);
    EXPECT_DOUBLE_EQ(map.at(c), 4.0);
    EXPECT_DOUBLE_EQ(std::abs(L(2.0) - L(0.0)), 2.0);
}

TEST(Importance, ZeroParameterOrGradientContributesNothing) {
    ParameterStore store = init_model(small_config());
    ImportanceMap map(store.config());
    map.accumulate_step(store, std::vector<float>(store.size(), 0.f));
    for (double s : map.scores()) EXPECT_EQ(s, 0.0);
    EXPECT_EQ(map.steps(), 1u);

    ParameterStore zero(small_config());
    ImportanceMap map2(zero.config());
    map2.accumulate_step(zero, random_grad(zero.size(), 1));
    for (double s : map2.scores()) EXPECT_EQ(s, 0.0);
}

TEST(Importance, CoverageExcludesEmbeddingAndHead) {
    const Layout l = ImportanceMap::covered_layout(small_config());
    EXPECT_FALSE(l.find(MatrixId{-1, MatrixKind::embedding}).has_value());
    EXPECT_FALSE(l.find(MatrixId{-1, MatrixKind::lm_head}).has_value());
    EXPECT_TRUE(l.find(MatrixId{-1, MatrixKind::final_norm}).has_value());
    EXPECT_TRUE(l.find(MatrixId{0, MatrixKind::ffn_down}).has_value());
}

TEST(Importance, KIdenticalStepsEqualKTimesOne) {
    const ParameterStore store = init_model(small_config());
    const auto g = random_grad(store.size(), 2);
    ImportanceMap one(store.config()), many(store.config());
    one.accumulate_step(store, g);
    for (int i = 0; i < 4; ++i) many.accumulate_step(store, g);
    EXPECT_EQ(many.steps(), 4u);
    for (std::size_t i = 0; i < one.scores().size(); ++i) EXPECT_NEAR(many.scores()[i], 4 * one.scores()[i], 1e-12 * (1 + many.scores()[i]));
}

TEST(Importance, MergeIsElementwiseSum) {
    const ParameterStore store = init_model(small_config());
    ImportanceMap a(store.config()), b(store.config()), c(store.config());
    a.accumulate_step(store, random_grad(store.size(), 3));
    b.accumulate_step(store, random_grad(store.size(), 4));
    c.accumulate_step(store, random_grad(store.size(), 5));
    a.languages() = {"t0"};
    b.languages() = {"t1"};

    const ImportanceMap single[] = {a};
    EXPECT_EQ(merge(single), a);

    const ImportanceMap ab[] = {a, b}, ba[] = {b, a};
    const ImportanceMap mab = merge(ab), mba = merge(ba);
    for (std::size_t i = 0; i < mab.scores().size(); ++i) {
        EXPECT_EQ(mab.scores()[i], a.scores()[i] + b.scores()[i]);
        EXPECT_EQ(mab.scores()[i], mba.scores()[i]);
    }
    EXPECT_EQ(mab.languages(), (std::vector<std::string>{"t0", "t1"}));
    EXPECT_EQ(mab.steps(), 2u);

    const ImportanceMap left[] = {mab, c};
    const ImportanceMap bc[] = {b, c};
    const ImportanceMap right[] = {a, merge(bc)};
    const ImportanceMap l = merge(left), r = merge(right);
    for (std::size_t i = 0; i < l.scores().size(); ++i) EXPECT_NEAR(l.scores()[i], r.scores()[i], 1e-15);

    ModelConfig other = small_config();
    other.dim = 4;
    other.ffn_dim = 4;
    const ImportanceMap bad[] = {a, ImportanceMap(other)};
    EXPECT_THROW(merge(bad), std::invalid_argument);
}

TEST(Importance, AccumulateRejectsShapeMismatch) {
    const ParameterStore store = init_model(small_config());
    ImportanceMap map(store.config());
    EXPECT_THROW(map.accumulate_step(store, std::vector<float>(3)), std::invalid_argument);
}

TEST(Importance, ExactImportanceRestoresStore) {
    auto store = init_model(small_config()).cast<double>();
    for (auto& v : store.values()) v *= 50;
    const std::vector<Sequence> eval{{1, 2, 3, 4, 5}, {9, 8, 7, 6, 5}};
    const auto before = store;
    const ParamCoord c{0, MatrixKind::attn_v, 3, 2};
    const double s = exact_importance(store, eval, c);
    EXPECT_GT(s, 0.0);
    EXPECT_TRUE(store == before);
    store.at(c) = 0.0;
    EXPECT_EQ(exact_importance(store, eval, c), 0.0);
}

TEST(Importance, DimScoresCountMaskHits) {
    const ModelConfig cfg = small_config();
    const MatrixId q{0, MatrixKind::attn_q};
    RegionMask mask = RegionMask::empty_for(cfg);
    for (std::size_t s : dim_scores(mask, q, Axis::col).hits) EXPECT_EQ(s, 0u);

    for (std::size_t r = 0; r < cfg.dim; ++r) mask.set({0, MatrixKind::attn_q, r, 3});
    EXPECT_EQ(dim_scores(mask, q, Axis::col).hits[3], cfg.dim);

    std::mt19937_64 rng(8);
    RegionMask sparse = RegionMask::empty_for(cfg);
    std::vector<std::size_t> col_count(cfg.dim, 0), row_count(cfg.dim, 0);
    for (std::size_t r = 0; r < cfg.dim; ++r) {
        for (std::size_t c = 0; c < cfg.dim; ++c) {
            if (rng() % 3 == 0) {
                sparse.set({0, MatrixKind::attn_q, r, c});
                ++col_count[c];
                ++row_count[r];
            }
        }
    }
    EXPECT_EQ(dim_scores(sparse, q, Axis::col).hits, col_count);
    EXPECT_EQ(dim_scores(sparse, q, Axis::row).hits, row_count);
    EXPECT_THROW(dim_scores(sparse, MatrixId{-1, MatrixKind::embedding}, Axis::row), std::exception);
    EXPECT_THROW(parse_axis("diag"), std::invalid_argument);
}

TEST(Importance, TierRankingAndTieBreaks) {
    DimScore s;
    s.hits = {3, 5, 5, 0, 1, 2, 2, 4, 0, 1};
    s.key = {0, 1, 2, 0, 0, 0, 0, 0, 0, 0};
    EXPECT_EQ(s.ranked(), (std::vector<std::size_t>{2, 1, 7, 0, 5, 6, 4, 9, 3, 8}));
    EXPECT_EQ(s.tier(Tier::top, 2), (std::vector<std::size_t>{2, 1}));
    EXPECT_EQ(s.tier(Tier::bottom, 2), (std::vector<std::size_t>{3, 8}));
    EXPECT_EQ(s.tier(Tier::middle, 2), (std::vector<std::size_t>{5, 6}));
}

TEST(Importance, NormalizeSumsToOne) {
    const ParameterStore store = init_model(small_config());
    ImportanceMap map(store.config());
    map.normalize();
    for (double v : map.scores()) EXPECT_EQ(v, 0.0);
    map.accumulate_step(store, random_grad(store.size(), 6));
    map.normalize();
    double sum = 0;
    for (double v : map.scores()) sum += v;
    EXPECT_NEAR(sum, 1.0, 1e-12);
}

}  // namespace
}  // namespace lingreg
