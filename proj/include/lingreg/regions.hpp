// SPDX-License-Identifier: Apache-2.0
//
// Region construction and model surgery: ratio/random selection, monolingual
// deduplication, zeroing, structured row/column removal and targeted
// perturbations. None of these operations touch embedding or lm-head.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lingreg/importance.hpp"
#include "lingreg/mask.hpp"
#include "lingreg/model.hpp"

namespace lingreg {

enum class SelectMode : std::uint8_t { top, bottom };

/// Per weight matrix, floor(ratio * entries) coordinates with the highest
/// (top) or lowest (bottom) scores. Ties resolve towards the lower flat index.
RegionMask select_ratio(const ImportanceMap& map, double ratio, SelectMode mode);

/// Per weight matrix, floor(ratio * entries) coordinates drawn uniformly
/// without replacement.
RegionMask select_random(const ModelConfig& config, double ratio, std::uint64_t seed);

/// target minus the union of `others`.
RegionMask dedup(const RegionMask& target, std::span<const RegionMask> others);

void apply_zero(ParameterStore& store, const RegionMask& mask);

enum class DimPreset : std::uint8_t {
    heads_and_ffn,    // attn.o rows + attn.q/k/v cols + ffn.down cols
    heads,            // attn.o rows + attn.q/k/v cols
    features,         // attn.o cols + attn.q/k/v rows
    ffn,              // ffn.up/gate rows + ffn.down cols
};

std::string_view preset_name(DimPreset p);
DimPreset parse_preset(std::string_view s);

struct DimTarget {
    MatrixId matrix;
    Axis axis = Axis::row;
};

/// Matrices and axes a preset removes along, for every layer.
std::vector<DimTarget> preset_targets(const ModelConfig& config, DimPreset preset);

struct DimRemoval {
    MatrixId matrix;
    Axis axis = Axis::row;
    std::size_t index = 0;

    bool operator==(const DimRemoval&) const = default;
};

struct DimRemovalSpec {
    std::vector<DimRemoval> removals;
    std::size_t dims_per_matrix = 0;
    std::optional<DimPreset> preset;
};

/// Builds a removal spec choosing `count` indices per target from the given
/// tier of the mask-hit ranking. Indices in `exclude_residual` are skipped on
/// axes that index the residual stream (used for the outlier ablation).
DimRemovalSpec rank_dims(const RegionMask& top_mask, const ImportanceMap& map, DimPreset preset, Tier tier,
                         std::size_t count, std::span<const std::size_t> exclude_residual = {});

/// Same targets with `count` indices per target drawn uniformly.
DimRemovalSpec random_dims(const ModelConfig& config, DimPreset preset, std::size_t count, std::uint64_t seed);

void remove_dims(ParameterStore& store, const DimRemovalSpec& spec);

/// Coordinates a removal spec would zero, as a mask.
RegionMask dims_to_mask(const ModelConfig& config, const DimRemovalSpec& spec);

/// True when (matrix, axis) indexes the residual stream dimension.
bool is_residual_axis(MatrixKind kind, Axis axis);

/// Residual-stream dimensions ranked by mask hits over attn.o and ffn.down
/// columns summed across layers (tie-break: summed importance, then index).
std::vector<std::size_t> rank_residual_dims(const RegionMask& top_mask, const ImportanceMap& map);

/// Redraws column `dim` of attn.o and ffn.down in every layer from the
/// initializer distribution.
void perturb_dim(ParameterStore& store, std::size_t dim, std::uint64_t seed);

enum class NormPerturb : std::uint8_t { reset_to_one, multiply };

void perturb_norm_param(ParameterStore& store, MatrixId norm, std::size_t dim, NormPerturb mode,
                        double factor = 10.0);

}  // namespace lingreg
