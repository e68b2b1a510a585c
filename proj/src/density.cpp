// SPDX-License-Identifier: Apache-2.0

#include "lingreg/density.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "lingreg/artifact_io.hpp"

namespace lingreg {

double DensityMap::mean() const {
    if (values.empty()) return 0.0;
    return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

DensityMap neighborhood_density(const RegionMask& mask, MatrixId id) {
    if (!mask.has_matrix(id)) throw std::invalid_argument("viz_density: mask has no matrix " + id.name());
    const MatrixMask& m = mask.matrix(id);
    DensityMap out{id.name(), m.rows, m.cols, 1, std::vector<double>(m.rows * m.cols, 0.0)};
    for (std::size_t r = 0; r < m.rows; ++r) {
        const std::size_t r0 = r == 0 ? 0 : r - 1, r1 = std::min(r + 1, m.rows - 1);
        for (std::size_t c = 0; c < m.cols; ++c) {
            const std::size_t c0 = c == 0 ? 0 : c - 1, c1 = std::min(c + 1, m.cols - 1);
            std::size_t hits = 0;
            for (std::size_t i = r0; i <= r1; ++i) {
                for (std::size_t j = c0; j <= c1; ++j) hits += m.test(i, j);
            }
            const std::size_t cells = (r1 - r0 + 1) * (c1 - c0 + 1);
            out.values[r * m.cols + c] = static_cast<double>(hits) / static_cast<double>(cells);
        }
    }
    return out;
}

DensityMap block_average(const DensityMap& map, std::size_t block) {
    if (block == 0) throw std::invalid_argument("viz_density: block factor must be positive");
    if (block == 1) return map;
    DensityMap out{map.matrix, (map.rows + block - 1) / block, (map.cols + block - 1) / block, map.block * block, {}};
    out.values.assign(out.rows * out.cols, 0.0);
    for (std::size_t br = 0; br < out.rows; ++br) {
        for (std::size_t bc = 0; bc < out.cols; ++bc) {
            double sum = 0;
            std::size_t n = 0;
            for (std::size_t r = br * block; r < std::min(map.rows, (br + 1) * block); ++r) {
                for (std::size_t c = bc * block; c < std::min(map.cols, (bc + 1) * block); ++c) {
                    sum += map.at(r, c);
                    ++n;
                }
            }
            out.values[br * out.cols + bc] = sum / static_cast<double>(n);
        }
    }
    return out;
}

DensityMap viz_density(const RegionMask& mask, MatrixId id, std::size_t block) {
    if (block == 0) throw std::invalid_argument("viz_density: block factor must be positive");
    DensityMap raw = neighborhood_density(mask, id);
    const std::size_t longest = std::max(raw.rows, raw.cols);
    const std::size_t needed = (longest + kMaxImageSide - 1) / kMaxImageSide;
    return block_average(raw, std::max(block, needed));
}

void write_pgm(const DensityMap& map, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ArtifactError("cannot write " + path.string());
    out << "P5\n" << map.cols << ' ' << map.rows << "\n255\n";
    for (double v : map.values) {
        const auto px = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
        out.put(static_cast<char>(px));
    }
}

void write_density_csv(const DensityMap& map, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ArtifactError("cannot write " + path.string());
    for (std::size_t r = 0; r < map.rows; ++r) {
        for (std::size_t c = 0; c < map.cols; ++c) {
            if (c) out << ',';
            out << format_double(map.at(r, c));
        }
        out << '\n';
    }
}

}  // namespace lingreg
