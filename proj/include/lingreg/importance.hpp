// SPDX-License-Identifier: Apache-2.0
//
// First-order parameter importance.
//
// Each optimizer step contributes |g_j * theta_j| for every covered scalar,
// using the minibatch gradient and the parameters before the update. Maps from
// different languages are merged by plain elementwise summation.
// exact_importance() is the brute-force reference: the absolute change in
// evaluation loss when one scalar is set to zero.

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lingreg/mask.hpp"
#include "lingreg/model.hpp"

namespace lingreg {

class ImportanceMap {
public:
    ImportanceMap() = default;
    explicit ImportanceMap(const ModelConfig& config);

    /// Attention, feed-forward and norm parameters; embedding and lm-head are
    /// not tracked.
    static Layout covered_layout(const ModelConfig& config);

    const ModelConfig& config() const { return config_; }
    const Layout& layout() const { return layout_; }
    std::span<double> scores() { return scores_; }
    std::span<const double> scores() const { return scores_; }
    std::span<const double> matrix(MatrixId id) const;
    double at(const ParamCoord& c) const { return scores_[layout_.offset_of(c)]; }

    std::uint64_t steps() const { return steps_; }
    void set_steps(std::uint64_t s) { steps_ = s; }
    std::vector<std::string>& languages() { return languages_; }
    const std::vector<std::string>& languages() const { return languages_; }

    /// score_j += |g_j * theta_j|; `grad` is laid out like the store.
    void accumulate_step(const ParameterStore& store, std::span<const float> grad);

    /// Divides every score so the map sums to one (no-op on an all-zero map).
    void normalize();

    bool operator==(const ImportanceMap&) const = default;

private:
    ModelConfig config_;
    Layout layout_;
    std::vector<double> scores_;
    std::uint64_t steps_ = 0;
    std::vector<std::string> languages_;
};

/// Elementwise sum; language lists are concatenated in argument order.
ImportanceMap merge(std::span<const ImportanceMap> maps);

/// |L(D, theta) - L(D, theta | theta_j = 0)| on a fixed evaluation set. The
/// scalar is restored bit-identically before returning.
template <typename T>
double exact_importance(BasicParameterStore<T>& store, std::span<const Sequence> eval, const ParamCoord& coord) {
    T& slot = store.at(coord);
    const T saved = slot;
    if (saved == T{0}) return 0.0;
    const double base = static_cast<double>(loss<T>(store, eval));
    slot = T{0};
    double removed = 0;
    try {
        removed = static_cast<double>(loss<T>(store, eval));
    } catch (...) {
        slot = saved;
        throw;
    }
    slot = saved;
    return std::abs(base - removed);
}

enum class Axis : std::uint8_t { row, col };

inline std::string_view axis_name(Axis a) { return a == Axis::row ? "row" : "col"; }
Axis parse_axis(std::string_view s);

enum class Tier : std::uint8_t { top, middle, bottom };

struct DimScore {
    MatrixId matrix;
    Axis axis = Axis::row;
    std::vector<std::size_t> hits;  // masked coordinates per index
    std::vector<double> key;        // summed importance per index

    /// Indices by descending hits, then descending key, then ascending index.
    std::vector<std::size_t> ranked() const;

    /// `count` indices from the requested tier. Middle is taken from the
    /// centre of the ranking (the central 10% band when count is small).
    std::vector<std::size_t> tier(Tier which, std::size_t count) const;
};

/// Mask hits per row/column; the tie-break key comes from `map` when given.
DimScore dim_scores(const RegionMask& mask, MatrixId matrix, Axis axis, const ImportanceMap* map = nullptr);

/// Summed importance per row/column with zero hit counts.
DimScore dim_scores(const ImportanceMap& map, MatrixId matrix, Axis axis);

}  // namespace lingreg
