// SPDX-License-Identifier: Apache-2.0

#include "lingreg/mask.hpp"

#include <stdexcept>

namespace lingreg {

RegionMask RegionMask::empty_for(const ModelConfig& config) {
    RegionMask mask;
    const Layout layout = Layout::full(config);
    for (const Slot& s : layout.slots()) {
        if (is_weight_matrix(s.id.kind)) mask.matrices_.emplace(s.id, MatrixMask(s.rows, s.cols));
    }
    return mask;
}

const MatrixMask& RegionMask::matrix(MatrixId id) const {
    auto it = matrices_.find(id);
    if (it == matrices_.end()) throw std::invalid_argument("mask has no matrix " + id.name());
    return it->second;
}

MatrixMask& RegionMask::matrix(MatrixId id) {
    auto it = matrices_.find(id);
    if (it == matrices_.end()) throw std::invalid_argument("mask has no matrix " + id.name());
    return it->second;
}

bool RegionMask::contains(const ParamCoord& c) const {
    auto it = matrices_.find(c.matrix());
    if (it == matrices_.end()) return false;
    if (c.row >= it->second.rows || c.col >= it->second.cols) return false;
    return it->second.test(c.row, c.col);
}

void RegionMask::set(const ParamCoord& c) {
    auto& m = matrix(c.matrix());
    if (c.row >= m.rows || c.col >= m.cols) {
        throw std::out_of_range("mask coordinate outside " + c.matrix().name());
    }
    m.set(c.row, c.col);
}

std::size_t RegionMask::count() const {
    std::size_t n = 0;
    for (const auto& [id, m] : matrices_) n += m.count();
    return n;
}

bool RegionMask::compatible(const RegionMask& other) const {
    if (matrices_.size() != other.matrices_.size()) return false;
    auto it = other.matrices_.begin();
    for (const auto& [id, m] : matrices_) {
        if (!(it->first == id) || it->second.rows != m.rows || it->second.cols != m.cols) return false;
        ++it;
    }
    return true;
}

std::vector<ParamCoord> RegionMask::coords() const {
    std::vector<ParamCoord> out;
    for (const auto& [id, m] : matrices_) {
        for (auto i = m.bits.find_first(); i != boost::dynamic_bitset<std::uint64_t>::npos; i = m.bits.find_next(i)) {
            out.push_back(ParamCoord{id.layer, id.kind, i / m.cols, i % m.cols});
        }
    }
    return out;
}

namespace {

template <typename Op>
RegionMask combine(const RegionMask& a, const RegionMask& b, Op op, const char* what) {
    if (!a.compatible(b)) throw std::invalid_argument(std::string(what) + ": masks have different shapes");
    RegionMask out = a;
    for (auto& [id, m] : out.matrices()) op(m.bits, b.matrix(id).bits);
    out.provenance() = MaskProvenance{what, 0.0, "", 0, {}};
    return out;
}

}  // namespace

RegionMask mask_union(const RegionMask& a, const RegionMask& b) {
    return combine(a, b, [](auto& x, const auto& y) { x |= y; }, "union");
}

RegionMask mask_intersection(const RegionMask& a, const RegionMask& b) {
    return combine(a, b, [](auto& x, const auto& y) { x &= y; }, "intersection");
}

MaskStats mask_stats(const RegionMask& mask) {
    MaskStats s;
    for (const auto& [id, m] : mask.matrices()) {
        const std::size_t c = m.count();
        s.per_matrix[id] = c;
        s.total += c;
    }
    return s;
}

PairStats mask_stats(const RegionMask& a, const RegionMask& b) {
    if (!a.compatible(b)) throw std::invalid_argument("mask_stats: masks have different shapes");
    PairStats p;
    p.a = a.count();
    p.b = b.count();
    for (const auto& [id, m] : a.matrices()) {
        const auto& other = b.matrix(id).bits;
        p.union_size += (m.bits | other).count();
        p.intersection_size += (m.bits & other).count();
    }
    return p;
}

}  // namespace lingreg
