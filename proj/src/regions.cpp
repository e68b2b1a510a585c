// SPDX-License-Identifier: Apache-2.0

#include "lingreg/regions.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace lingreg {
namespace {

std::size_t ratio_count(double ratio, std::size_t entries) {
    if (!(ratio >= 0.0 && ratio <= 1.0)) throw std::invalid_argument("ratio must lie in [0,1]");
    return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(entries)));
}

void reject_excluded(MatrixId id) {
    if (id.kind == MatrixKind::embedding || id.kind == MatrixKind::lm_head) {
        throw std::invalid_argument("surgery on " + id.name() + " is not allowed");
    }
}

}  // namespace

RegionMask select_ratio(const ImportanceMap& map, double ratio, SelectMode mode) {
    RegionMask mask = RegionMask::empty_for(map.config());
    std::vector<std::size_t> idx;
    for (auto& [id, m] : mask.matrices()) {
        const auto scores = map.matrix(id);
        const std::size_t k = ratio_count(ratio, m.size());
        if (k == 0) continue;
        idx.resize(m.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        auto cmp = [&](std::size_t a, std::size_t b) {
            if (scores[a] != scores[b]) return mode == SelectMode::top ? scores[a] > scores[b] : scores[a] < scores[b];
            return a < b;
        };
        std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k - 1), idx.end(), cmp);
        for (std::size_t i = 0; i < k; ++i) m.bits.set(idx[i]);
    }
    mask.provenance() = MaskProvenance{mode == SelectMode::top ? "top" : "bottom", ratio,
                                       "importance over " + std::to_string(map.steps()) + " steps", 0, {}};
    for (const auto& lang : map.languages()) mask.provenance().lineage.push_back("lang:" + lang);
    return mask;
}

RegionMask select_random(const ModelConfig& config, double ratio, std::uint64_t seed) {
    RegionMask mask = RegionMask::empty_for(config);
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> idx;
    for (auto& [id, m] : mask.matrices()) {
        const std::size_t k = ratio_count(ratio, m.size());
        idx.resize(m.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        // partial Fisher-Yates: the first k slots become a uniform sample
        for (std::size_t i = 0; i < k; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
            std::swap(idx[i], idx[pick(rng)]);
            m.bits.set(idx[i]);
        }
    }
    mask.provenance() = MaskProvenance{"random", ratio, "uniform", seed, {}};
    return mask;
}

RegionMask dedup(const RegionMask& target, std::span<const RegionMask> others) {
    RegionMask out = target;
    for (const auto& other : others) {
        if (!target.compatible(other)) throw std::invalid_argument("dedup: mask shapes differ");
        for (auto& [id, m] : out.matrices()) m.bits -= other.matrix(id).bits;
    }
    auto& prov = out.provenance();
    prov.lineage.push_back("dedup:" + target.provenance().mode + "-minus-" + std::to_string(others.size()));
    for (const auto& other : others) {
        prov.lineage.push_back("minus:" + other.provenance().mode + "@" + other.provenance().source);
    }
    prov.mode = "dedup";
    return out;
}

void apply_zero(ParameterStore& store, const RegionMask& mask) {
    for (const auto& [id, m] : mask.matrices()) {
        if (m.count() == 0) continue;
        reject_excluded(id);
        const Slot& s = store.layout().slot(id);
        if (s.rows != m.rows || s.cols != m.cols) {
            throw std::invalid_argument("apply_zero: mask shape for " + id.name() + " does not match the model");
        }
    }
    for (const auto& [id, m] : mask.matrices()) {
        if (m.count() == 0) continue;
        auto values = store.matrix(id);
        for (auto i = m.bits.find_first(); i != boost::dynamic_bitset<std::uint64_t>::npos; i = m.bits.find_next(i)) {
            values[i] = 0.0f;
        }
    }
}

std::string_view preset_name(DimPreset p) {
    switch (p) {
        case DimPreset::heads_and_ffn: return "attn.o-rows+attn.kqv-cols+ffn.down-cols";
        case DimPreset::heads: return "attn.o-rows+attn.kqv-cols";
        case DimPreset::features: return "attn.o-cols+attn.kqv-rows";
        case DimPreset::ffn: return "ffn.up/gate-rows+ffn.down-cols";
    }
    return "?";
}

DimPreset parse_preset(std::string_view s) {
    for (auto p : {DimPreset::heads_and_ffn, DimPreset::heads, DimPreset::features, DimPreset::ffn}) {
        if (preset_name(p) == s) return p;
    }
    if (s == "1" || s == "heads-ffn") return DimPreset::heads_and_ffn;
    if (s == "2" || s == "heads") return DimPreset::heads;
    if (s == "3" || s == "features") return DimPreset::features;
    if (s == "4" || s == "ffn") return DimPreset::ffn;
    throw std::invalid_argument("unknown dimension preset '" + std::string(s) + "'");
}

std::vector<DimTarget> preset_targets(const ModelConfig& config, DimPreset preset) {
    std::vector<DimTarget> out;
    for (std::size_t l = 0; l < config.layers; ++l) {
        const int li = static_cast<int>(l);
        auto add = [&](MatrixKind k, Axis a) { out.push_back(DimTarget{MatrixId{li, k}, a}); };
        switch (preset) {
            case DimPreset::heads_and_ffn:
                add(MatrixKind::attn_o, Axis::row);
                for (auto k : {MatrixKind::attn_q, MatrixKind::attn_k, MatrixKind::attn_v}) add(k, Axis::col);
                add(MatrixKind::ffn_down, Axis::col);
                break;
            case DimPreset::heads:
                add(MatrixKind::attn_o, Axis::row);
                for (auto k : {MatrixKind::attn_q, MatrixKind::attn_k, MatrixKind::attn_v}) add(k, Axis::col);
                break;
            case DimPreset::features:
                add(MatrixKind::attn_o, Axis::col);
                for (auto k : {MatrixKind::attn_q, MatrixKind::attn_k, MatrixKind::attn_v}) add(k, Axis::row);
                break;
            case DimPreset::ffn:
                add(MatrixKind::ffn_up, Axis::row);
                add(MatrixKind::ffn_gate, Axis::row);
                add(MatrixKind::ffn_down, Axis::col);
                break;
        }
    }
    return out;
}

bool is_residual_axis(MatrixKind kind, Axis axis) {
    switch (kind) {
        case MatrixKind::attn_q:
        case MatrixKind::attn_k:
        case MatrixKind::attn_v:
        case MatrixKind::ffn_gate:
        case MatrixKind::ffn_up: return axis == Axis::row;
        case MatrixKind::attn_o:
        case MatrixKind::ffn_down: return axis == Axis::col;
        default: return false;
    }
}

DimRemovalSpec rank_dims(const RegionMask& top_mask, const ImportanceMap& map, DimPreset preset, Tier tier,
                         std::size_t count, std::span<const std::size_t> exclude_residual) {
    DimRemovalSpec spec;
    spec.dims_per_matrix = count;
    spec.preset = preset;
    for (const auto& target : preset_targets(map.config(), preset)) {
        const DimScore score = dim_scores(top_mask, target.matrix, target.axis, &map);
        std::vector<std::size_t> order = score.ranked();
        if (is_residual_axis(target.matrix.kind, target.axis) && !exclude_residual.empty()) {
            std::erase_if(order, [&](std::size_t i) {
                return std::find(exclude_residual.begin(), exclude_residual.end(), i) != exclude_residual.end();
            });
        }
        const std::size_t k = std::min(count, order.size());
        std::size_t start = 0;
        if (tier == Tier::bottom) start = order.size() - k;
        if (tier == Tier::middle) start = (order.size() - k) / 2;
        for (std::size_t i = start; i < start + k; ++i) {
            spec.removals.push_back(DimRemoval{target.matrix, target.axis, order[i]});
        }
    }
    return spec;
}

DimRemovalSpec random_dims(const ModelConfig& config, DimPreset preset, std::size_t count, std::uint64_t seed) {
    DimRemovalSpec spec;
    spec.dims_per_matrix = count;
    spec.preset = preset;
    std::mt19937_64 rng(seed);
    for (const auto& target : preset_targets(config, preset)) {
        auto [rows, cols] = matrix_shape(config, target.matrix.kind);
        const std::size_t n = target.axis == Axis::row ? rows : cols;
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        const std::size_t k = std::min(count, n);
        for (std::size_t i = 0; i < k; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, n - 1);
            std::swap(idx[i], idx[pick(rng)]);
            spec.removals.push_back(DimRemoval{target.matrix, target.axis, idx[i]});
        }
    }
    return spec;
}

void remove_dims(ParameterStore& store, const DimRemovalSpec& spec) {
    for (const auto& r : spec.removals) {
        reject_excluded(r.matrix);
        const Slot& s = store.layout().slot(r.matrix);
        const std::size_t n = r.axis == Axis::row ? s.rows : s.cols;
        if (r.index >= n) {
            throw std::out_of_range("remove_dims: " + std::string(axis_name(r.axis)) + " " + std::to_string(r.index) +
                                    " outside " + r.matrix.name());
        }
    }
    for (const auto& r : spec.removals) {
        const Slot& s = store.layout().slot(r.matrix);
        auto m = store.matrix(r.matrix);
        if (r.axis == Axis::row) {
            std::fill_n(m.begin() + static_cast<std::ptrdiff_t>(r.index * s.cols), s.cols, 0.0f);
        } else {
            for (std::size_t row = 0; row < s.rows; ++row) m[row * s.cols + r.index] = 0.0f;
        }
    }
}

RegionMask dims_to_mask(const ModelConfig& config, const DimRemovalSpec& spec) {
    RegionMask mask = RegionMask::empty_for(config);
    for (const auto& r : spec.removals) {
        auto& m = mask.matrix(r.matrix);
        const std::size_t n = r.axis == Axis::row ? m.rows : m.cols;
        if (r.index >= n) throw std::out_of_range("dims_to_mask: index outside " + r.matrix.name());
        if (r.axis == Axis::row) {
            for (std::size_t c = 0; c < m.cols; ++c) m.set(r.index, c);
        } else {
            for (std::size_t row = 0; row < m.rows; ++row) m.set(row, r.index);
        }
    }
    mask.provenance().mode = "dims";
    if (spec.preset) mask.provenance().source = std::string(preset_name(*spec.preset));
    return mask;
}

std::vector<std::size_t> rank_residual_dims(const RegionMask& top_mask, const ImportanceMap& map) {
    const ModelConfig& cfg = map.config();
    DimScore total{MatrixId{}, Axis::col, std::vector<std::size_t>(cfg.dim, 0), std::vector<double>(cfg.dim, 0.0)};
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        for (auto k : {MatrixKind::attn_o, MatrixKind::ffn_down}) {
            const DimScore s = dim_scores(top_mask, MatrixId{static_cast<int>(l), k}, Axis::col, &map);
            for (std::size_t i = 0; i < cfg.dim; ++i) {
                total.hits[i] += s.hits[i];
                total.key[i] += s.key[i];
            }
        }
    }
    return total.ranked();
}

void perturb_dim(ParameterStore& store, std::size_t dim, std::uint64_t seed) {
    const ModelConfig& cfg = store.config();
    if (dim >= cfg.dim) {
        throw std::out_of_range("perturb_dim: dimension " + std::to_string(dim) + " >= model dim " +
                                std::to_string(cfg.dim));
    }
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, cfg.init_scale / std::sqrt(static_cast<double>(cfg.dim)));
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        for (auto k : {MatrixKind::attn_o, MatrixKind::ffn_down}) {
            const MatrixId id{static_cast<int>(l), k};
            const Slot& s = store.layout().slot(id);
            auto m = store.matrix(id);
            for (std::size_t row = 0; row < s.rows; ++row) m[row * s.cols + dim] = static_cast<float>(normal(rng));
        }
    }
}

void perturb_norm_param(ParameterStore& store, MatrixId norm, std::size_t dim, NormPerturb mode, double factor) {
    if (!is_norm(norm.kind)) throw std::invalid_argument("perturb_norm_param: " + norm.name() + " is not a norm");
    if (norm.kind != MatrixKind::final_norm &&
        (norm.layer < 0 || static_cast<std::size_t>(norm.layer) >= store.config().layers)) {
        throw std::out_of_range("perturb_norm_param: layer " + std::to_string(norm.layer) + " out of range");
    }
    if (dim >= store.config().dim) throw std::out_of_range("perturb_norm_param: dim " + std::to_string(dim));
    if (!std::isfinite(factor)) throw std::invalid_argument("perturb_norm_param: factor must be finite");
    float& v = store.at(ParamCoord{norm.layer, norm.kind, dim, 0});
    if (mode == NormPerturb::reset_to_one) {
        v = 1.0f;
    } else {
        v = static_cast<float>(static_cast<double>(v) * factor);
    }
}

}  // namespace lingreg
