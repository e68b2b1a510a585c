// SPDX-License-Identifier: Apache-2.0

#include "lingreg/importance.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace lingreg {

ImportanceMap::ImportanceMap(const ModelConfig& config)
    : config_(config), layout_(covered_layout(config)), scores_(layout_.total(), 0.0) {}

Layout ImportanceMap::covered_layout(const ModelConfig& config) {
    return Layout::for_model(config, [](MatrixKind k) { return is_importance_covered(k); });
}

std::span<const double> ImportanceMap::matrix(MatrixId id) const {
    const Slot& s = layout_.slot(id);
    return std::span<const double>(scores_).subspan(s.offset, s.size());
}

void ImportanceMap::accumulate_step(const ParameterStore& store, std::span<const float> grad) {
    if (!(store.config() == config_)) throw std::invalid_argument("accumulate_step: store shape differs from map");
    if (grad.size() != store.size()) {
        throw std::invalid_argument("accumulate_step: gradient has " + std::to_string(grad.size()) +
                                    " entries, store has " + std::to_string(store.size()));
    }
    const auto values = store.values();
    const Layout& full = store.layout();
    for (const Slot& s : layout_.slots()) {
        const Slot& src = full.slot(s.id);
        double* dst = scores_.data() + s.offset;
        for (std::size_t i = 0; i < s.size(); ++i) {
            const double g = grad[src.offset + i];
            const double theta = values[src.offset + i];
            dst[i] += std::abs(g * theta);
        }
    }
    ++steps_;
}

void ImportanceMap::normalize() {
    const double total = std::accumulate(scores_.begin(), scores_.end(), 0.0);
    if (total <= 0) return;
    for (auto& s : scores_) s /= total;
}

ImportanceMap merge(std::span<const ImportanceMap> maps) {
    if (maps.empty()) throw std::invalid_argument("merge: no maps given");
    ImportanceMap out = maps.front();
    for (std::size_t m = 1; m < maps.size(); ++m) {
        const auto& other = maps[m];
        if (!(other.layout() == out.layout())) throw std::invalid_argument("merge: map shapes differ");
        auto dst = out.scores();
        auto src = other.scores();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
        out.set_steps(out.steps() + other.steps());
        for (const auto& lang : other.languages()) out.languages().push_back(lang);
    }
    return out;
}

Axis parse_axis(std::string_view s) {
    if (s == "row") return Axis::row;
    if (s == "col" || s == "column") return Axis::col;
    throw std::invalid_argument("unknown axis '" + std::string(s) + "'");
}

std::vector<std::size_t> DimScore::ranked() const {
    std::vector<std::size_t> idx(hits.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (hits[a] != hits[b]) return hits[a] > hits[b];
        if (key[a] != key[b]) return key[a] > key[b];
        return a < b;
    });
    return idx;
}

std::vector<std::size_t> DimScore::tier(Tier which, std::size_t count) const {
    const auto order = ranked();
    count = std::min(count, order.size());
    std::size_t start = 0;
    switch (which) {
        case Tier::top: start = 0; break;
        case Tier::bottom: start = order.size() - count; break;
        case Tier::middle: start = (order.size() - count) / 2; break;
    }
    return {order.begin() + static_cast<std::ptrdiff_t>(start),
            order.begin() + static_cast<std::ptrdiff_t>(start + count)};
}

namespace {

void fill_keys(DimScore& out, const ImportanceMap& map, std::size_t rows, std::size_t cols) {
    const auto scores = map.matrix(out.matrix);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            out.key[out.axis == Axis::row ? r : c] += scores[r * cols + c];
        }
    }
}

}  // namespace

DimScore dim_scores(const RegionMask& mask, MatrixId matrix, Axis axis, const ImportanceMap* map) {
    const MatrixMask& m = mask.matrix(matrix);
    const std::size_t n = axis == Axis::row ? m.rows : m.cols;
    DimScore out{matrix, axis, std::vector<std::size_t>(n, 0), std::vector<double>(n, 0.0)};
    for (auto i = m.bits.find_first(); i != boost::dynamic_bitset<std::uint64_t>::npos; i = m.bits.find_next(i)) {
        ++out.hits[axis == Axis::row ? i / m.cols : i % m.cols];
    }
    if (map) fill_keys(out, *map, m.rows, m.cols);
    return out;
}

DimScore dim_scores(const ImportanceMap& map, MatrixId matrix, Axis axis) {
    const Slot& s = map.layout().slot(matrix);
    const std::size_t n = axis == Axis::row ? s.rows : s.cols;
    DimScore out{matrix, axis, std::vector<std::size_t>(n, 0), std::vector<double>(n, 0.0)};
    fill_keys(out, map, s.rows, s.cols);
    return out;
}

}  // namespace lingreg
