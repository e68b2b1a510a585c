// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <random>
#include <tuple>
#include <vector>

#include <gtest/gtest.h>

#include "lingreg/model.hpp"
#include "support.hpp"

namespace lingreg {
namespace {

using StoreD = BasicParameterStore<double>;

ModelConfig tiny_config(std::size_t layers = 1) {
    ModelConfig c;
    c.vocab_size = 6;
    c.dim = 4;
    c.layers = layers;
    c.heads = 2;
    c.ffn_dim = 4;
    c.max_seq_len = 8;
    c.seed = 3;
    return c;
}

StoreD random_store(const ModelConfig& c, std::uint64_t seed, double scale = 0.5) {
    StoreD s(c);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, scale);
    for (auto& v : s.values()) v = n(rng);
    return s;
}

// Straight-line loops over one sequence, written independently of the tape.
std::vector<double> reference_logits(const StoreD& s, const Sequence& seq) {
    const ModelConfig& c = s.config();
    const std::size_t T = seq.size(), d = c.dim, H = c.heads, hd = c.head_dim(), F = c.ffn_dim, V = c.vocab_size;
    auto M = [&](int l, MatrixKind k) { return s.matrix(MatrixId{l, k}); };
    auto rms = [&](const std::vector<double>& x, std::span<const double> w) {
        std::vector<double> y(d);
        double ss = 0;
        for (double v : x) ss += v * v;
        const double inv = 1.0 / std::sqrt(ss / d + c.norm_eps);
        for (std::size_t i = 0; i < d; ++i) y[i] = x[i] * inv * w[i];
        return y;
    };
    auto vecmat = [](const std::vector<double>& x, std::span<const double> W, std::size_t cols) {
        std::vector<double> y(cols, 0.0);
        for (std::size_t i = 0; i < x.size(); ++i)
            for (std::size_t j = 0; j < cols; ++j) y[j] += x[i] * W[i * cols + j];
        return y;
    };
    auto rope = [&](std::vector<double> x, std::size_t pos) {
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = 0; i < hd / 2; ++i) {
                const double a = pos * std::pow(c.rope_base, -2.0 * i / hd);
                const double x1 = x[h * hd + i], x2 = x[h * hd + hd / 2 + i];
                x[h * hd + i] = x1 * std::cos(a) - x2 * std::sin(a);
                x[h * hd + hd / 2 + i] = x1 * std::sin(a) + x2 * std::cos(a);
            }
        }
        return x;
    };

    std::vector<std::vector<double>> x(T, std::vector<double>(d));
    auto emb = M(-1, MatrixKind::embedding);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t i = 0; i < d; ++i) x[t][i] = emb[seq[t] * d + i];

    for (int l = 0; l < static_cast<int>(c.layers); ++l) {
        std::vector<std::vector<double>> q(T), k(T), v(T);
        for (std::size_t t = 0; t < T; ++t) {
            auto hn = rms(x[t], M(l, MatrixKind::input_norm));
            q[t] = rope(vecmat(hn, M(l, MatrixKind::attn_q), d), t);
            k[t] = rope(vecmat(hn, M(l, MatrixKind::attn_k), d), t);
            v[t] = vecmat(hn, M(l, MatrixKind::attn_v), d);
        }
        for (std::size_t t = 0; t < T; ++t) {
            std::vector<double> ctx(d, 0.0);
            for (std::size_t h = 0; h < H; ++h) {
                std::vector<double> sc(t + 1);
                double mx = -1e300;
                for (std::size_t u = 0; u <= t; ++u) {
                    double dot = 0;
                    for (std::size_t i = 0; i < hd; ++i) dot += q[t][h * hd + i] * k[u][h * hd + i];
                    sc[u] = dot / std::sqrt(double(hd));
                    mx = std::max(mx, sc[u]);
                }
                double z = 0;
                for (auto& e : sc) z += (e = std::exp(e - mx));
                for (std::size_t u = 0; u <= t; ++u)
                    for (std::size_t i = 0; i < hd; ++i) ctx[h * hd + i] += sc[u] / z * v[u][h * hd + i];
            }
            auto o = vecmat(ctx, M(l, MatrixKind::attn_o), d);
            for (std::size_t i = 0; i < d; ++i) x[t][i] += o[i];
        }
        for (std::size_t t = 0; t < T; ++t) {
            auto hn = rms(x[t], M(l, MatrixKind::post_attn_norm));
            auto g = vecmat(hn, M(l, MatrixKind::ffn_gate), F);
            auto u = vecmat(hn, M(l, MatrixKind::ffn_up), F);
            for (std::size_t j = 0; j < F; ++j) g[j] = g[j] / (1 + std::exp(-g[j])) * u[j];
            auto dn = vecmat(g, M(l, MatrixKind::ffn_down), d);
            for (std::size_t i = 0; i < d; ++i) x[t][i] += dn[i];
        }
    }
    std::vector<double> logits(T * V, 0.0);
    auto head = M(-1, MatrixKind::lm_head);
    for (std::size_t t = 0; t < T; ++t) {
        auto hn = rms(x[t], M(-1, MatrixKind::final_norm));
        for (std::size_t w = 0; w < V; ++w)
            for (std::size_t i = 0; i < d; ++i) logits[t * V + w] += hn[i] * head[w * d + i];
    }
    return logits;
}

TEST(Model, ParameterCountMatchesClosedForm) {
    ModelConfig c;
    EXPECT_EQ(parameter_count(c), 263744u);
    EXPECT_EQ(ParameterStore(c).size(), 263744u);
    const ModelConfig t = tiny_config(2);
    // 2*6*4 + 4 + 2*(4*16 + 3*4*4 + 2*4)
    EXPECT_EQ(ParameterStore(t).size(), 292u);
}

TEST(Model, LayoutOffsetsRoundTrip) {
    const Layout layout = Layout::full(tiny_config(2));
    for (std::size_t f = 0; f < layout.total(); ++f) EXPECT_EQ(layout.offset_of(layout.coord_of(f)), f);
}

TEST(Model, ForwardMatchesHandReference) {
    for (auto [layers, heads, seq] : {std::tuple{1u, 1u, Sequence{3, 0, 5}}, std::tuple{1u, 2u, Sequence{1, 4, 0, 5, 2}},
                                      std::tuple{2u, 2u, Sequence{2, 2, 1, 0, 4, 3}}}) {
        ModelConfig c = tiny_config(layers);
        c.heads = heads;
        const StoreD s = random_store(c, 11 + layers + heads);
        const auto got = forward<double>(s, seq);
        const auto want = reference_logits(s, seq);
        ASSERT_EQ(got.numel(), want.size());
        for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-10) << i;
    }
}

TEST(Model, CausalMasking) {
    const StoreD s = random_store(tiny_config(2), 5);
    const Sequence a{1, 2, 3, 4, 5, 0}, b{1, 2, 3, 0, 0, 1};
    const auto la = forward<double>(s, a), lb = forward<double>(s, b);
    const std::size_t V = s.config().vocab_size;
    for (std::size_t i = 0; i < 3 * V; ++i) EXPECT_EQ(la[i], lb[i]);
    bool differs = false;
    for (std::size_t i = 3 * V; i < la.numel(); ++i) differs = differs || la[i] != lb[i];
    EXPECT_TRUE(differs);
}

TEST(Model, ZeroLmHeadGivesUniformLoss) {
    StoreD s = random_store(tiny_config(), 6);
    auto head = s.matrix(MatrixId{-1, MatrixKind::lm_head});
    std::fill(head.begin(), head.end(), 0.0);
    const std::vector<Sequence> batch{{0, 1, 2, 3}, {5, 5, 4, 3}};
    EXPECT_NEAR(loss<double>(s, batch), std::log(6.0), 1e-12);
}

TEST(Model, FullModelGradientMatchesFiniteDifferences) {
    for (std::size_t layers : {1u, 2u}) {
        const StoreD s = random_store(tiny_config(layers), 7, 0.4);
        const std::vector<Sequence> batch{{0, 3, 1, 5, 2}, {4, 4, 2, 0, 1}};
        const auto lg = loss_and_grad<double>(s, batch);
        StoreD w = s;
        double worst = 0;
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double saved = w.values()[j];
            const double h = 1e-4 * std::max(1.0, std::abs(saved));
            w.values()[j] = saved + h;
            const double up = loss<double>(w, batch);
            w.values()[j] = saved - h;
            const double down = loss<double>(w, batch);
            w.values()[j] = saved;
            worst = std::max(worst, testing::rel_error(lg.grad[j], (up - down) / (2 * h)));
        }
        EXPECT_LE(worst, 1e-4) << layers << " layers";
    }
}

TEST(Model, InitIsDeterministicAndNormsAreOne) {
    const ModelConfig c = tiny_config(2);
    const ParameterStore a = init_model(c), b = init_model(c);
    EXPECT_EQ(a, b);
    for (auto v : a.matrix(MatrixId{1, MatrixKind::post_attn_norm})) EXPECT_EQ(v, 1.0f);
    ModelConfig c2 = c;
    c2.seed = 4;
    EXPECT_FALSE(init_model(c2) == a);
}

TEST(Model, RejectsBadInputs) {
    const ParameterStore s = init_model(tiny_config());
    const std::vector<Sequence> too_long{Sequence(9, 1)};
    EXPECT_THROW(loss<float>(s, too_long), std::invalid_argument);
    const std::vector<Sequence> bad_token{{0, 6}};
    EXPECT_THROW(loss<float>(s, bad_token), std::invalid_argument);
    ModelConfig c = tiny_config();
    c.heads = 3;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    EXPECT_THROW(MatrixId::parse("attn.q"), std::invalid_argument);
    EXPECT_EQ(MatrixId::parse("layer2.ffn.down"), (MatrixId{2, MatrixKind::ffn_down}));
}

}  // namespace
}  // namespace lingreg
