// SPDX-License-Identifier: Apache-2.0
//
// Parameter regions as per-matrix bitsets.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <boost/dynamic_bitset.hpp>

#include "lingreg/model.hpp"

namespace lingreg {

struct MatrixMask {
    std::size_t rows = 0;
    std::size_t cols = 0;
    boost::dynamic_bitset<std::uint64_t> bits;

    MatrixMask() = default;
    MatrixMask(std::size_t r, std::size_t c) : rows(r), cols(c), bits(r * c) {}

    bool test(std::size_t r, std::size_t c) const { return bits.test(r * cols + c); }
    void set(std::size_t r, std::size_t c) { bits.set(r * cols + c); }
    std::size_t count() const { return bits.count(); }
    std::size_t size() const { return rows * cols; }

    bool operator==(const MatrixMask&) const = default;
};

struct MaskProvenance {
    std::string mode;        // top, bottom, random, dedup, dims, ...
    double ratio = 0.0;
    std::string source;      // map path / language / description
    std::uint64_t seed = 0;
    std::vector<std::string> lineage;

    bool operator==(const MaskProvenance&) const = default;
};

class RegionMask {
public:
    RegionMask() = default;

    /// Empty mask over every attention and feed-forward weight matrix.
    static RegionMask empty_for(const ModelConfig& config);

    std::map<MatrixId, MatrixMask>& matrices() { return matrices_; }
    const std::map<MatrixId, MatrixMask>& matrices() const { return matrices_; }
    MaskProvenance& provenance() { return provenance_; }
    const MaskProvenance& provenance() const { return provenance_; }

    const MatrixMask& matrix(MatrixId id) const;
    MatrixMask& matrix(MatrixId id);
    bool has_matrix(MatrixId id) const { return matrices_.contains(id); }

    bool contains(const ParamCoord& c) const;
    void set(const ParamCoord& c);

    std::size_t count() const;
    std::size_t count(MatrixId id) const { return matrix(id).count(); }
    bool empty() const { return count() == 0; }

    /// Same matrices with the same shapes.
    bool compatible(const RegionMask& other) const;

    std::vector<ParamCoord> coords() const;

    bool operator==(const RegionMask&) const = default;

private:
    std::map<MatrixId, MatrixMask> matrices_;
    MaskProvenance provenance_;
};

RegionMask mask_union(const RegionMask& a, const RegionMask& b);
RegionMask mask_intersection(const RegionMask& a, const RegionMask& b);

struct MaskStats {
    std::map<MatrixId, std::size_t> per_matrix;
    std::size_t total = 0;
};

struct PairStats {
    std::size_t a = 0;
    std::size_t b = 0;
    std::size_t union_size = 0;
    std::size_t intersection_size = 0;
};

MaskStats mask_stats(const RegionMask& mask);
PairStats mask_stats(const RegionMask& a, const RegionMask& b);

}  // namespace lingreg
