// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "lingreg/regions.hpp"
#include "lingreg/trainer.hpp"

namespace lingreg {
namespace {

SuiteOptions small_suite() {
    SuiteOptions o;
    o.vocab_size = 96;
    o.lexicon_size = 8;
    o.lexical_classes = 4;
    o.shared_size = 8;
    o.seq_len = 16;
    return o;
}

ModelConfig small_model() {
    ModelConfig c;
    c.vocab_size = 96;
    c.dim = 16;
    c.layers = 1;
    c.heads = 2;
    c.ffn_dim = 24;
    c.max_seq_len = 16;
    c.seed = 5;
    return c;
}

struct Fixture {
    std::vector<LanguageSpec> suite = build_language_suite(3, small_suite());
    std::vector<Corpus> corpora;
    Corpus eval;
    Fixture() {
        for (int i = 0; i < 3; ++i) corpora.push_back(generate(suite[i], 64, 10 + i));
        eval = generate(suite[0], 16, 99);
    }
};

TrainConfig quick(std::size_t steps, double lr = 3e-3) {
    TrainConfig t;
    t.steps = steps;
    t.lr = lr;
    t.batch_size = 4;
    t.checkpoints = 2;
    return t;
}

TEST(Trainer, ZeroStepsKeepsInit) {
    Fixture f;
    const ParameterStore init = init_model(small_model());
    const EvalSet evals[] = {{"t0", &f.eval}};
    const TrainResult r = pretrain(init, f.corpora, quick(0), evals);
    EXPECT_TRUE(r.store == init);
    ASSERT_EQ(r.record.checkpoints.size(), 1u);
    EXPECT_EQ(r.record.checkpoints[0].step, 0u);
    EXPECT_TRUE(r.record.train_loss.empty());
}

TEST(Trainer, LossDecreasesAndRunsAreDeterministic) {
    Fixture f;
    const ParameterStore init = init_model(small_model());
    const TrainResult a = pretrain(init, f.corpora, quick(40));
    const TrainResult b = pretrain(init, f.corpora, quick(40));
    EXPECT_TRUE(a.store == b.store);
    EXPECT_EQ(a.record.train_loss, b.record.train_loss);
    ASSERT_EQ(a.record.train_loss.size(), 40u);
    const double first = std::accumulate(a.record.train_loss.begin(), a.record.train_loss.begin() + 5, 0.0);
    const double last = std::accumulate(a.record.train_loss.end() - 5, a.record.train_loss.end(), 0.0);
    EXPECT_LT(last, first);
    EXPECT_EQ(a.record.checkpoints.size(), 3u);
    EXPECT_EQ(a.record.checkpoints.back().step, 40u);
    EXPECT_EQ(a.record.checkpoints.back().sequences_seen, 160u);
}

TEST(Trainer, FrozenCoordinatesNeverMove) {
    Fixture f;
    const ModelConfig c = small_model();
    const ParameterStore start = init_model(c);
    const RegionMask mask = select_random(c, 0.3, 4);
    const TrainResult r = finetune(start, f.corpora[1], quick(15, 1e-2), &mask);
    for (const auto& coord : mask.coords()) EXPECT_EQ(r.store.at(coord), start.at(coord));
    std::size_t moved = 0;
    for (std::size_t i = 0; i < start.size(); ++i) moved += r.store.values()[i] != start.values()[i];
    EXPECT_GT(moved, start.size() / 2);
}

TEST(Trainer, FreezingEveryMatrixLeavesStoreIdentical) {
    Fixture f;
    const ModelConfig c = small_model();
    const ParameterStore start = init_model(c);
    RegionMask all;
    for (const Slot& s : start.layout().slots()) {
        MatrixMask m(s.rows, s.cols);
        m.bits.set();
        all.matrices()[s.id] = m;
    }
    const TrainResult r = finetune(start, f.corpora[0], quick(5, 1e-2), &all);
    EXPECT_TRUE(r.store == start);
}

TEST(Trainer, AdamWithZeroLearningRateAndFrozenMoments) {
    TrainConfig cfg;
    cfg.lr = 0.0;
    Adam zero(4, cfg);
    std::vector<float> p{1, 2, 3, 4};
    const std::vector<float> g{0.5f, -1, 2, 0};
    zero.step(p, g);
    EXPECT_EQ(p, (std::vector<float>{1, 2, 3, 4}));

    cfg.lr = 0.1;
    Adam adam(4, cfg);
    adam.set_frozen({0, 1, 0, 1});
    adam.step(p, g);
    EXPECT_EQ(p[1], 2.0f);
    EXPECT_EQ(p[3], 4.0f);
    EXPECT_EQ(adam.first_moment()[1], 0.0f);
    EXPECT_EQ(adam.second_moment()[1], 0.0f);
    // first bias-corrected step moves by lr * sign(g)
    EXPECT_NEAR(p[0], 1.0f - 0.1f, 1e-6);
    EXPECT_NEAR(p[2], 3.0f - 0.1f, 1e-6);
    EXPECT_THROW(adam.set_frozen({1}), std::invalid_argument);
}

TEST(Trainer, ImportanceAccumulatesDuringFinetune) {
    Fixture f;
    TrainConfig cfg = quick(6);
    cfg.accumulate_importance = true;
    const TrainResult r = finetune(init_model(small_model()), f.corpora[2], cfg, nullptr, {}, "t2");
    ASSERT_TRUE(r.importance.has_value());
    EXPECT_EQ(r.importance->steps(), 6u);
    EXPECT_EQ(r.importance->languages(), std::vector<std::string>{"t2"});
    double total = 0;
    for (double s : r.importance->scores()) {
        EXPECT_GE(s, 0.0);
        total += s;
    }
    EXPECT_GT(total, 0.0);
}

TEST(Trainer, UniformModelHasPerplexityV) {
    Fixture f;
    ParameterStore s = init_model(small_model());
    auto head = s.matrix(MatrixId{-1, MatrixKind::lm_head});
    std::fill(head.begin(), head.end(), 0.0f);
    EXPECT_NEAR(eval_ppl(s, f.eval), 96.0, 1e-9 * 96);
}

TEST(Trainer, PerfectModelHasPerplexityOne) {
    ModelConfig c = small_model();
    ParameterStore s(c);
    for (const Slot& sl : s.layout().slots())
        if (is_norm(sl.id.kind)) std::ranges::fill(s.matrix(sl.id), 1.0f);
    for (std::size_t i = 0; i < c.dim; ++i) {
        s.at({-1, MatrixKind::embedding, 7, i}) = 1.0f;
        s.at({-1, MatrixKind::lm_head, 7, i}) = 10.0f;
    }
    Corpus corpus;
    corpus.sequences = {Sequence(16, 7), Sequence(16, 7)};
    EXPECT_NEAR(eval_ppl(s, corpus), 1.0, 1e-12);
}

TEST(Trainer, FixedLogitsMatchHandComputation) {
    // Every token embeds to the same vector and the layers are zero, so the
    // logits at every position are lm_head * normalized(e).
    ModelConfig c = small_model();
    c.vocab_size = 4;
    ParameterStore s(c);
    for (const Slot& sl : s.layout().slots())
        if (is_norm(sl.id.kind)) std::ranges::fill(s.matrix(sl.id), 1.0f);
    for (std::size_t w = 0; w < 4; ++w)
        for (std::size_t i = 0; i < c.dim; ++i) s.at({-1, MatrixKind::embedding, w, i}) = 2.0f;
    const double z[4] = {0.5, -1.0, 2.0, 0.0};
    for (std::size_t w = 0; w < 4; ++w) s.at({-1, MatrixKind::lm_head, w, 0}) = static_cast<float>(z[w]);
    // normalized(e) has every entry 1 / sqrt(1 + eps / 4)
    const double n0 = 2.0 / std::sqrt(4.0 + c.norm_eps);
    double lse = 0;
    for (double v : z) lse += std::exp(v * n0);
    lse = std::log(lse);
    Corpus corpus;
    corpus.sequences = {{0, 1, 2, 3}, {3, 3, 2, 0}};
    // targets: 1,2,3 and 3,2,0
    const int targets[] = {1, 2, 3, 3, 2, 0};
    double nll = 0;
    for (int t : targets) nll += lse - z[t] * n0;
    EXPECT_NEAR(eval_ppl(s, corpus), std::exp(nll / 6), 1e-5);
}

TEST(Trainer, UntrainedModelNearVocabularySize) {
    Fixture f;
    const double ppl = eval_ppl(init_model(small_model()), f.eval);
    EXPECT_GT(ppl, 96.0 / 2);
    EXPECT_LT(ppl, 96.0 * 2);
}

TEST(Trainer, EvalIsPure) {
    Fixture f;
    const ParameterStore s = init_model(small_model());
    const ParameterStore copy = s;
    EXPECT_EQ(eval_ppl(s, f.eval), eval_ppl(s, f.eval));
    EXPECT_TRUE(s == copy);
    Corpus empty;
    EXPECT_THROW(eval_ppl(s, empty), std::invalid_argument);
}

TEST(Trainer, GreedyGeneration) {
    Fixture f;
    const ParameterStore s = pretrain(init_model(small_model()), f.corpora, quick(10)).store;
    const Sequence prompt{1, 2, 3};
    EXPECT_EQ(generate(s, prompt, 0), prompt);
    const Sequence a = generate(s, prompt, 8);
    EXPECT_EQ(a, generate(s, prompt, 8));
    EXPECT_EQ(a.size(), 11u);
    EXPECT_TRUE(std::equal(prompt.begin(), prompt.end(), a.begin()));
    EXPECT_THROW(generate(s, prompt, 14), std::invalid_argument);
}

TEST(Trainer, RepetitionRate) {
    const Token none[] = {1, 2, 3, 4};
    const Token loop[] = {5, 5, 5, 5, 5};
    const Token some[] = {1, 2, 1, 2, 3};
    EXPECT_EQ(repetition_rate(none), 0.0);
    EXPECT_EQ(repetition_rate(loop), 0.75);
    EXPECT_EQ(repetition_rate(some), 0.25);
}

TEST(Trainer, RejectsBadConfigs) {
    Fixture f;
    TrainConfig bad = quick(1);
    bad.lr = 0;
    EXPECT_THROW(pretrain(init_model(small_model()), f.corpora, bad), std::invalid_argument);
    EXPECT_THROW(pretrain(init_model(small_model()), {}, quick(1)), std::invalid_argument);
}

TEST(Trainer, DivergenceReportsStep) {
    Fixture f;
    ParameterStore s = init_model(small_model());
    s.values()[s.layout().slot(MatrixId{0, MatrixKind::attn_q}).offset] = std::nanf("");
    try {
        pretrain(s, f.corpora, quick(3));
        FAIL() << "expected divergence";
    } catch (const TrainingDiverged& e) {
        EXPECT_EQ(e.step(), 0u);
    }
}

}  // namespace
}  // namespace lingreg
