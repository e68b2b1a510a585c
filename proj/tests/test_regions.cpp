// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <numeric>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "lingreg/regions.hpp"

namespace lingreg {
namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.vocab_size = 12;
    c.dim = 8;
    c.layers = 2;
    c.heads = 2;
    c.ffn_dim = 12;
    c.max_seq_len = 8;
    return c;
}

ImportanceMap random_map(const ModelConfig& c, std::uint64_t seed) {
    ImportanceMap map(c);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& s : map.scores()) s = u(rng);
    return map;
}

RegionMask random_mask(const ModelConfig& c, double p, std::uint64_t seed) {
    RegionMask m = RegionMask::empty_for(c);
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution b(p);
    for (auto& [id, mm] : m.matrices())
        for (std::size_t i = 0; i < mm.size(); ++i)
            if (b(rng)) mm.bits.set(i);
    return m;
}

bool same_outside(const ParameterStore& a, const ParameterStore& b, const RegionMask& allowed) {
    for (std::size_t f = 0; f < a.size(); ++f) {
        const ParamCoord c = a.layout().coord_of(f);
        const bool covered = allowed.has_matrix(c.matrix()) && allowed.contains(c);
        if (!covered && a.values()[f] != b.values()[f]) return false;
    }
    return true;
}

TEST(Mask, EmptyForCoversWeightMatricesOnly) {
    const RegionMask m = RegionMask::empty_for(small_config());
    EXPECT_EQ(m.matrices().size(), 2u * 7u);
    EXPECT_FALSE(m.has_matrix(MatrixId{-1, MatrixKind::embedding}));
    EXPECT_FALSE(m.has_matrix(MatrixId{0, MatrixKind::input_norm}));
    EXPECT_TRUE(m.empty());
}

TEST(Select, RatioZeroAndOne) {
    const auto map = random_map(small_config(), 1);
    EXPECT_TRUE(select_ratio(map, 0.0, SelectMode::top).empty());
    EXPECT_TRUE(select_random(small_config(), 0.0, 3).empty());
    const RegionMask full = select_ratio(map, 1.0, SelectMode::bottom);
    for (const auto& [id, m] : full.matrices()) EXPECT_EQ(m.count(), m.size());
    EXPECT_THROW(select_ratio(map, 1.5, SelectMode::top), std::invalid_argument);
}

TEST(Select, FourByFourSortingOracle) {
    ModelConfig c = small_config();
    c.dim = 4;
    c.heads = 2;
    c.ffn_dim = 4;
    c.layers = 1;
    ImportanceMap map(c);
    // attn.q gets a shuffled 1..16; everything else stays 0
    std::vector<double> scores(16);
    std::iota(scores.begin(), scores.end(), 1.0);
    std::mt19937_64 rng(4);
    std::shuffle(scores.begin(), scores.end(), rng);
    const Slot& q = map.layout().slot(MatrixId{0, MatrixKind::attn_q});
    std::copy(scores.begin(), scores.end(), map.scores().begin() + static_cast<std::ptrdiff_t>(q.offset));

    std::vector<std::size_t> order(16);
    std::iota(order.begin(), order.end(), 0u);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
    const std::set<std::size_t> want(order.begin(), order.begin() + 4);

    const RegionMask top = select_ratio(map, 0.25, SelectMode::top);
    std::set<std::size_t> got;
    const auto& m = top.matrix(MatrixId{0, MatrixKind::attn_q});
    for (std::size_t i = 0; i < 16; ++i)
        if (m.bits.test(i)) got.insert(i);
    EXPECT_EQ(got, want);
}

TEST(Select, TiesResolveToLowerIndex) {
    ModelConfig c = small_config();
    const ImportanceMap map(c);  // all zero
    const RegionMask top = select_ratio(map, 0.25, SelectMode::top);
    for (const auto& [id, m] : top.matrices()) {
        const std::size_t k = m.size() / 4;
        for (std::size_t i = 0; i < m.size(); ++i) EXPECT_EQ(m.bits.test(i), i < k) << id.name();
    }
}

TEST(Select, CountsAreFloorOfRatio) {
    const ModelConfig c = small_config();
    const auto map = random_map(c, 2);
    for (double r : {0.01, 0.03, 0.05, 0.1, 0.33}) {
        for (const RegionMask& mask : {select_ratio(map, r, SelectMode::top), select_ratio(map, r, SelectMode::bottom),
                                       select_random(c, r, 5)}) {
            for (const auto& [id, m] : mask.matrices())
                EXPECT_EQ(m.count(), static_cast<std::size_t>(std::floor(r * static_cast<double>(m.size()))));
        }
    }
}

TEST(Select, RandomIsDeterministicUnderSeed) {
    const ModelConfig c = small_config();
    EXPECT_EQ(select_random(c, 0.2, 9), select_random(c, 0.2, 9));
    EXPECT_NE(select_random(c, 0.2, 9), select_random(c, 0.2, 10));
}

TEST(Select, TopAndBottomDisjoint) {
    const auto map = random_map(small_config(), 3);
    for (double r : {0.05, 0.25, 0.5}) {
        EXPECT_TRUE(mask_intersection(select_ratio(map, r, SelectMode::top), select_ratio(map, r, SelectMode::bottom))
                        .empty());
    }
}

TEST(Dedup, IdentityAnnihilationAndDisjointness) {
    const ModelConfig c = small_config();
    const RegionMask t = random_mask(c, 0.3, 1);
    EXPECT_EQ(dedup(t, {}).coords(), t.coords());
    const RegionMask cover[] = {random_mask(c, 0.5, 2), mask_union(t, random_mask(c, 0.1, 3))};
    EXPECT_TRUE(dedup(t, cover).empty());

    const RegionMask others[] = {random_mask(c, 0.2, 4), random_mask(c, 0.2, 5)};
    const RegionMask d = dedup(t, others);
    for (const auto& o : others) EXPECT_TRUE(mask_intersection(d, o).empty());
    EXPECT_EQ(d.provenance().mode, "dedup");
    EXPECT_FALSE(d.provenance().lineage.empty());
}

TEST(Dedup, SetAlgebraOracleOnFiveByFive) {
    ModelConfig c = small_config();
    const MatrixId id{0, MatrixKind::attn_q};
    RegionMask a = RegionMask::empty_for(c), b = a, e = a;
    // hand-picked coordinates inside the 5x5 top-left block
    const std::vector<std::pair<int, int>> pa{{0, 0}, {1, 1}, {2, 2}, {3, 3}, {4, 4}, {0, 4}, {2, 3}};
    const std::vector<std::pair<int, int>> pb{{1, 1}, {2, 3}, {4, 0}};
    const std::vector<std::pair<int, int>> pe{{0, 0}, {4, 4}, {3, 1}};
    for (auto [r, cc] : pa) a.set({0, MatrixKind::attn_q, std::size_t(r), std::size_t(cc)});
    for (auto [r, cc] : pb) b.set({0, MatrixKind::attn_q, std::size_t(r), std::size_t(cc)});
    for (auto [r, cc] : pe) e.set({0, MatrixKind::attn_q, std::size_t(r), std::size_t(cc)});
    std::set<std::pair<int, int>> want(pa.begin(), pa.end());
    for (auto p : pb) want.erase(p);
    for (auto p : pe) want.erase(p);
    const RegionMask others[] = {b, e};
    const RegionMask d = dedup(a, others);
    std::set<std::pair<int, int>> got;
    for (const auto& cc : d.coords()) got.insert({int(cc.row), int(cc.col)});
    EXPECT_EQ(got, want);
    EXPECT_EQ(d.count(id), 3u);
}

TEST(Dedup, RejectsIncompatible) {
    ModelConfig other = small_config();
    other.layers = 1;
    const RegionMask o[] = {RegionMask::empty_for(other)};
    EXPECT_THROW(dedup(RegionMask::empty_for(small_config()), o), std::invalid_argument);
}

TEST(MaskStats, InclusionExclusionAndRecount) {
    const ModelConfig c = small_config();
    for (std::uint64_t s = 0; s < 10; ++s) {
        const RegionMask a = random_mask(c, 0.1 + 0.05 * double(s), 10 + s), b = random_mask(c, 0.3, 30 + s);
        const PairStats p = mask_stats(a, b);
        EXPECT_EQ(p.union_size + p.intersection_size, p.a + p.b);
        EXPECT_EQ(p.union_size, mask_union(a, b).count());
        const MaskStats st = mask_stats(a);
        std::map<MatrixId, std::size_t> recount;
        for (const auto& coord : a.coords()) ++recount[coord.matrix()];
        std::size_t total = 0;
        for (const auto& [id, n] : st.per_matrix) {
            EXPECT_EQ(n, recount[id]);
            total += n;
        }
        EXPECT_EQ(total, st.total);
    }
    EXPECT_EQ(mask_stats(RegionMask::empty_for(c)).total, 0u);
}

TEST(Surgery, ApplyZero) {
    const ModelConfig c = small_config();
    const ParameterStore base = init_model(c);
    ParameterStore s = base;
    apply_zero(s, RegionMask::empty_for(c));
    EXPECT_TRUE(s == base);

    RegionMask full_q = RegionMask::empty_for(c);
    for (std::size_t r = 0; r < c.dim; ++r)
        for (std::size_t cc = 0; cc < c.dim; ++cc) full_q.set({0, MatrixKind::attn_q, r, cc});
    apply_zero(s, full_q);
    for (float v : s.matrix(MatrixId{0, MatrixKind::attn_q})) EXPECT_EQ(v, 0.0f);
    EXPECT_TRUE(same_outside(s, base, full_q));

    const RegionMask m = random_mask(c, 0.2, 7);
    ParameterStore z = base;
    apply_zero(z, m);
    for (const auto& coord : m.coords()) EXPECT_EQ(z.at(coord), 0.0f);
    EXPECT_TRUE(same_outside(z, base, m));
}

TEST(Surgery, ApplyZeroRejectsEmbedding) {
    const ModelConfig c = small_config();
    ParameterStore s = init_model(c);
    RegionMask m = RegionMask::empty_for(c);
    m.matrices()[MatrixId{-1, MatrixKind::embedding}] = MatrixMask(c.vocab_size, c.dim);
    m.matrices()[MatrixId{-1, MatrixKind::embedding}].set(0, 0);
    EXPECT_THROW(apply_zero(s, m), std::invalid_argument);
    EXPECT_TRUE(s == init_model(c));
}

TEST(Surgery, RemoveDimsDiffOracle) {
    const ModelConfig c = small_config();
    const ParameterStore base = init_model(c);
    ParameterStore s = base;
    remove_dims(s, DimRemovalSpec{});
    EXPECT_TRUE(s == base);

    DimRemovalSpec spec;
    for (int l = 0; l < 2; ++l) spec.removals.push_back({MatrixId{l, MatrixKind::ffn_down}, Axis::col, 5});
    remove_dims(s, spec);
    std::size_t changed = 0;
    for (std::size_t f = 0; f < s.size(); ++f) {
        const ParamCoord cc = s.layout().coord_of(f);
        const bool target = cc.kind == MatrixKind::ffn_down && cc.col == 5;
        if (target) {
            EXPECT_EQ(s.values()[f], 0.0f);
        } else {
            EXPECT_EQ(s.values()[f], base.values()[f]);
        }
        changed += s.values()[f] != base.values()[f];
    }
    EXPECT_EQ(changed, 2 * c.ffn_dim);
    EXPECT_EQ(dims_to_mask(c, spec).count(), 2 * c.ffn_dim);

    DimRemovalSpec bad;
    bad.removals.push_back({MatrixId{0, MatrixKind::attn_o}, Axis::row, c.dim});
    EXPECT_THROW(remove_dims(s, bad), std::out_of_range);
}

TEST(Surgery, PresetTargets) {
    const ModelConfig c = small_config();
    EXPECT_EQ(preset_targets(c, DimPreset::heads_and_ffn).size(), 2u * 5u);
    EXPECT_EQ(preset_targets(c, DimPreset::heads).size(), 2u * 4u);
    EXPECT_EQ(preset_targets(c, DimPreset::features).size(), 2u * 4u);
    EXPECT_EQ(preset_targets(c, DimPreset::ffn).size(), 2u * 3u);
    for (auto p : {DimPreset::heads_and_ffn, DimPreset::heads, DimPreset::features, DimPreset::ffn})
        EXPECT_EQ(parse_preset(preset_name(p)), p);
    EXPECT_THROW(parse_preset("rows"), std::invalid_argument);
}

TEST(Surgery, RankDimsExcludesResidualIndex) {
    const ModelConfig c = small_config();
    const auto map = random_map(c, 6);
    const RegionMask top = select_ratio(map, 0.2, SelectMode::top);
    const auto residual = rank_residual_dims(top, map);
    ASSERT_EQ(residual.size(), c.dim);
    const std::size_t outlier = residual.front();
    const std::size_t excl[] = {outlier};
    const DimRemovalSpec spec = rank_dims(top, map, DimPreset::heads_and_ffn, Tier::top, 3, excl);
    EXPECT_EQ(spec.removals.size(), 3u * 10u);
    for (const auto& r : spec.removals)
        if (is_residual_axis(r.matrix.kind, r.axis)) {
            EXPECT_NE(r.index, outlier);
        }
    const RegionMask m = dims_to_mask(c, spec);
    for (const auto& coord : m.coords()) {
        if (coord.kind == MatrixKind::ffn_down) {
            EXPECT_NE(coord.col, outlier);
        }
    }
    EXPECT_EQ(random_dims(c, DimPreset::heads_and_ffn, 2, 4).removals, random_dims(c, DimPreset::heads_and_ffn, 2, 4).removals);
}

TEST(Surgery, PerturbDimTouchesOnlyTargetColumns) {
    const ModelConfig c = small_config();
    const ParameterStore base = init_model(c);
    ParameterStore a = base, b = base;
    perturb_dim(a, 3, 17);
    perturb_dim(b, 3, 17);
    EXPECT_TRUE(a == b);
    for (std::size_t f = 0; f < a.size(); ++f) {
        const ParamCoord cc = a.layout().coord_of(f);
        const bool target = (cc.kind == MatrixKind::attn_o || cc.kind == MatrixKind::ffn_down) && cc.col == 3;
        if (!target) {
            EXPECT_EQ(a.values()[f], base.values()[f]);
        }
    }
    EXPECT_FALSE(a == base);
    EXPECT_THROW(perturb_dim(a, c.dim, 1), std::out_of_range);
}

TEST(Surgery, PerturbNormParam) {
    const ModelConfig c = small_config();
    ParameterStore base = init_model(c);
    base.at({1, MatrixKind::input_norm, 2, 0}) = 0.25f;
    ParameterStore s = base;
    perturb_norm_param(s, MatrixId{1, MatrixKind::input_norm}, 2, NormPerturb::multiply, 1.0);
    EXPECT_TRUE(s == base);
    perturb_norm_param(s, MatrixId{1, MatrixKind::input_norm}, 2, NormPerturb::reset_to_one);
    std::size_t diffs = 0;
    for (std::size_t f = 0; f < s.size(); ++f) diffs += s.values()[f] != base.values()[f];
    EXPECT_EQ(diffs, 1u);
    EXPECT_EQ(s.at({1, MatrixKind::input_norm, 2, 0}), 1.0f);
    EXPECT_THROW(perturb_norm_param(s, MatrixId{5, MatrixKind::input_norm}, 0, NormPerturb::reset_to_one), std::out_of_range);
    EXPECT_THROW(perturb_norm_param(s, MatrixId{0, MatrixKind::attn_q}, 0, NormPerturb::reset_to_one), std::invalid_argument);
    EXPECT_THROW(perturb_norm_param(s, MatrixId{0, MatrixKind::input_norm}, c.dim, NormPerturb::reset_to_one), std::out_of_range);
}

TEST(Surgery, EmbeddingAndHeadUntouchedByEverySurgery) {
    const ModelConfig c = small_config();
    const ParameterStore base = init_model(c);
    const auto map = random_map(c, 8);
    ParameterStore s = base;
    apply_zero(s, select_ratio(map, 1.0, SelectMode::top));
    remove_dims(s, random_dims(c, DimPreset::ffn, 3, 2));
    remove_dims(s, rank_dims(select_ratio(map, 0.1, SelectMode::top), map, DimPreset::features, Tier::top, 2));
    perturb_dim(s, 1, 3);
    perturb_norm_param(s, MatrixId{-1, MatrixKind::final_norm}, 0, NormPerturb::multiply, 5.0);
    for (auto k : {MatrixKind::embedding, MatrixKind::lm_head}) {
        const std::span<const float> x = s.matrix(MatrixId{-1, k}), y = base.matrix(MatrixId{-1, k});
        EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin()));
    }
}

}  // namespace
}  // namespace lingreg
