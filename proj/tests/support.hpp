// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the unit tests.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "lingreg/tape.hpp"

namespace lingreg::testing {

using TapeD = Tape<double>;
using TensorD = Tensor<double>;

inline TensorD random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = u(rng);
    return TensorD(std::move(shape), std::move(v));
}

/// Reduces any output to a scalar through a fixed random projection so every
/// output element feeds the gradient with a distinct weight.
inline Var project_to_scalar(TapeD& tp, Var y, std::uint64_t seed = 99) {
    const std::size_t n = shape_numel(tp.shape(y));
    Var flat = tp.reshape(y, Shape{1, n});
    Var w = tp.constant(random_tensor(Shape{n, 1}, seed));
    return tp.reshape(tp.matmul(flat, w), Shape{});
}

/// Graph builder: leaves in, scalar out.
using Builder = std::function<Var(TapeD&, const std::vector<Var>&)>;

struct GradCheck {
    double max_rel = 0;
    std::size_t coords = 0;
};

inline double rel_error(double a, double b) {
    const double denom = std::max({std::abs(a), std::abs(b), 1e-6});
    return std::abs(a - b) / denom;
}

/// Central differences on every coordinate of every input, with step
/// 1e-4 * max(1, |x|).
inline GradCheck check_gradients(const std::vector<TensorD>& inputs, const Builder& build) {
    auto eval = [&](const std::vector<TensorD>& in) {
        TapeD tp(false);
        std::vector<Var> leaves;
        for (const auto& t : in) leaves.push_back(tp.leaf(t, false));
        return tp.value(build(tp, leaves))[0];
    };
    TapeD tp(true);
    std::vector<Var> leaves;
    for (const auto& t : inputs) leaves.push_back(tp.leaf(t));
    tp.backward(build(tp, leaves));

    GradCheck out;
    std::vector<TensorD> work = inputs;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const auto analytic = tp.grad(leaves[i]);
        for (std::size_t j = 0; j < work[i].numel(); ++j) {
            const double saved = work[i][j];
            const double h = 1e-4 * std::max(1.0, std::abs(saved));
            work[i][j] = saved + h;
            const double up = eval(work);
            work[i][j] = saved - h;
            const double down = eval(work);
            work[i][j] = saved;
            out.max_rel = std::max(out.max_rel, rel_error(analytic[j], (up - down) / (2 * h)));
            ++out.coords;
        }
    }
    return out;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("lingreg-" + tag + "-" + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

}  // namespace lingreg::testing
