// SPDX-License-Identifier: Apache-2.0
//
// 3x3 neighbourhood density of a region within one matrix.
//
// Each cell holds the fraction of masked coordinates among its in-bounds 3x3
// neighbours (itself included). Edge and corner cells divide by the number of
// neighbours that exist, not by nine.

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "lingreg/mask.hpp"

namespace lingreg {

inline constexpr std::size_t kMaxImageSide = 512;

struct DensityMap {
    std::string matrix;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t block = 1;
    std::vector<double> values;  // row-major, each in [0, 1]

    double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
    double mean() const;
};

/// Unaveraged neighbourhood density of `id`.
DensityMap neighborhood_density(const RegionMask& mask, MatrixId id);

/// Mean over block x block tiles; partial tiles at the border average what
/// they cover.
DensityMap block_average(const DensityMap& map, std::size_t block);

/// Neighbourhood density followed by block averaging. The block factor is
/// raised if needed so neither side exceeds kMaxImageSide.
DensityMap viz_density(const RegionMask& mask, MatrixId id, std::size_t block = 1);

/// 8-bit binary graymap, value * 255 rounded.
void write_pgm(const DensityMap& map, const std::filesystem::path& path);
void write_density_csv(const DensityMap& map, const std::filesystem::path& path);

}  // namespace lingreg
