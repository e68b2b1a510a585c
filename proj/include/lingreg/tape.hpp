// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over dense tensors.
//
// A Tape owns every tensor produced during one forward pass. Primitives append
// an entry holding the closure that propagates the output gradient to the
// inputs; backward() replays the entries in reverse, visiting each once.
// Entries are only recorded while tracing is enabled, so evaluation passes run
// the same code without retaining closures.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "lingreg/tensor.hpp"

namespace lingreg {

enum class OpKind : std::uint8_t {
    leaf,
    matmul,
    add,
    hadamard,
    scale,
    row_softmax,
    rms_norm,
    silu,
    embedding_gather,
    mean_cross_entropy,
    rotary,
    reshape,
    permute,
};

inline const char* op_name(OpKind op) {
    switch (op) {
        case OpKind::leaf: return "leaf";
        case OpKind::matmul: return "matmul";
        case OpKind::add: return "add";
        case OpKind::hadamard: return "hadamard";
        case OpKind::scale: return "scale";
        case OpKind::row_softmax: return "row_softmax";
        case OpKind::rms_norm: return "rms_norm";
        case OpKind::silu: return "silu";
        case OpKind::embedding_gather: return "embedding_gather";
        case OpKind::mean_cross_entropy: return "mean_cross_entropy";
        case OpKind::rotary: return "rotary";
        case OpKind::reshape: return "reshape";
        case OpKind::permute: return "permute";
    }
    return "?";
}

struct Var {
    std::size_t id = 0;
};

/// Target value for rows that do not contribute to the cross-entropy.
inline constexpr std::int32_t kIgnoreTarget = -1;

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// C (m x n) += op(A) * op(B), all row-major.
template <typename T>
void gemm_acc(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b,
              T* c) {
    using Map = Eigen::Map<const RowMat<T>>;
    Eigen::Map<RowMat<T>> cm(c, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    const auto mi = static_cast<Eigen::Index>(m);
    const auto ni = static_cast<Eigen::Index>(n);
    const auto ki = static_cast<Eigen::Index>(k);
    if (!trans_a && !trans_b) {
        cm.noalias() += Map(a, mi, ki) * Map(b, ki, ni);
    } else if (!trans_a && trans_b) {
        cm.noalias() += Map(a, mi, ki) * Map(b, ni, ki).transpose();
    } else if (trans_a && !trans_b) {
        cm.noalias() += Map(a, ki, mi).transpose() * Map(b, ki, ni);
    } else {
        cm.noalias() += Map(a, ki, mi).transpose() * Map(b, ni, ki).transpose();
    }
}

inline std::vector<std::size_t> strides_of(const Shape& shape) {
    std::vector<std::size_t> strides(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
    return strides;
}

// out[permuted index] = in[index]; out has shape in_shape permuted by perm.
template <typename T>
void permute_copy(const Shape& in_shape, std::span<const std::size_t> perm, const T* in, T* out, bool accumulate) {
    const std::size_t rank = in_shape.size();
    Shape out_shape(rank);
    for (std::size_t i = 0; i < rank; ++i) out_shape[i] = in_shape[perm[i]];
    const auto in_strides = strides_of(in_shape);
    // stride in the input for each output axis
    std::vector<std::size_t> src_stride(rank);
    for (std::size_t i = 0; i < rank; ++i) src_stride[i] = in_strides[perm[i]];
    std::vector<std::size_t> idx(rank, 0);
    const std::size_t n = shape_numel(in_shape);
    std::size_t src = 0;
    for (std::size_t o = 0; o < n; ++o) {
        if (accumulate) {
            out[o] += in[src];
        } else {
            out[o] = in[src];
        }
        for (std::size_t ax = rank; ax-- > 0;) {
            ++idx[ax];
            src += src_stride[ax];
            if (idx[ax] < out_shape[ax]) break;
            src -= src_stride[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

}  // namespace detail

template <typename T>
class Tape {
public:
    explicit Tape(bool tracing = true) : tracing_(tracing) {}

    bool tracing() const { return tracing_; }
    std::size_t size() const { return nodes_.size(); }
    std::size_t entry_count() const { return entries_.size(); }

    Var leaf(Tensor<T> value, bool requires_grad = true) {
        nodes_.push_back(Node{std::move(value), requires_grad && tracing_});
        return Var{nodes_.size() - 1};
    }

    Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

    const Tensor<T>& value(Var v) const { return node(v).tensor; }
    Tensor<T>& mutable_value(Var v) { return node(v).tensor; }
    const Shape& shape(Var v) const { return node(v).tensor.shape(); }

    /// Gradient of the last backward() target with respect to v; zeros when v
    /// did not influence it.
    std::vector<T> grad(Var v) const {
        const auto& t = node(v).tensor;
        if (t.has_grad()) return t.grad();
        return std::vector<T>(t.numel(), T{0});
    }

    // ------------------------------------------------------------------ ops

    /// Matrix product of rank-2 operands, or batched over the leading axis for
    /// rank-3 operands. The transposition flags apply to the two trailing axes.
    Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false) {
        const Shape sa = shape(a);
        const Shape sb = shape(b);
        const bool batched = sa.size() == 3;
        auto fail = [&] {
            throw std::invalid_argument(std::string("matmul: incompatible shapes ") + shape_str(sa) +
                                        (trans_a ? "^T" : "") + " x " + shape_str(sb) + (trans_b ? "^T" : ""));
        };
        if (sa.size() != sb.size() || (sa.size() != 2 && sa.size() != 3)) fail();
        if (batched && sa[0] != sb[0]) fail();
        const std::size_t off = batched ? 1 : 0;
        const std::size_t batch = batched ? sa[0] : 1;
        const std::size_t m = trans_a ? sa[off + 1] : sa[off];
        const std::size_t ka = trans_a ? sa[off] : sa[off + 1];
        const std::size_t kb = trans_b ? sb[off + 1] : sb[off];
        const std::size_t n = trans_b ? sb[off] : sb[off + 1];
        if (ka != kb) fail();
        const std::size_t k = ka;
        Shape out_shape = batched ? Shape{batch, m, n} : Shape{m, n};
        Tensor<T> out(out_shape);
        const std::size_t a_step = m * k, b_step = k * n, c_step = m * n;
        {
            const T* pa = value(a).data();
            const T* pb = value(b).data();
            for (std::size_t i = 0; i < batch; ++i) {
                detail::gemm_acc(trans_a, trans_b, m, n, k, pa + i * a_step, pb + i * b_step, out.data() + i * c_step);
            }
        }
        return record(OpKind::matmul, {a, b}, std::move(out), [=](Tape& self, std::size_t y) {
            const T* gy = self.nodes_[y].tensor.grad().data();
            if (self.wants_grad(a)) {
                T* ga = self.grad_buffer(a);
                const T* pb = self.value(b).data();
                for (std::size_t i = 0; i < batch; ++i) {
                    // dA = dY * op(B)^T, transposed back when A was transposed
                    if (!trans_a) {
                        detail::gemm_acc(false, !trans_b, m, k, n, gy + i * c_step, pb + i * b_step, ga + i * a_step);
                    } else {
                        detail::gemm_acc(trans_b, true, k, m, n, pb + i * b_step, gy + i * c_step, ga + i * a_step);
                    }
                }
            }
            if (self.wants_grad(b)) {
                T* gb = self.grad_buffer(b);
                const T* pa = self.value(a).data();
                for (std::size_t i = 0; i < batch; ++i) {
                    if (!trans_b) {
                        detail::gemm_acc(!trans_a, false, k, n, m, pa + i * a_step, gy + i * c_step, gb + i * b_step);
                    } else {
                        detail::gemm_acc(true, trans_a, n, k, m, gy + i * c_step, pa + i * a_step, gb + i * b_step);
                    }
                }
            }
        });
    }

    Var add(Var a, Var b) {
        require_same_shape("add", a, b);
        Tensor<T> out(shape(a));
        const auto& va = value(a).values();
        const auto& vb = value(b).values();
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] = va[i] + vb[i];
        return record(OpKind::add, {a, b}, std::move(out), [=](Tape& self, std::size_t y) {
            const auto& gy = self.nodes_[y].tensor.grad();
            for (Var v : {a, b}) {
                if (!self.wants_grad(v)) continue;
                T* g = self.grad_buffer(v);
                for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
            }
        });
    }

    Var hadamard(Var a, Var b) {
        require_same_shape("hadamard", a, b);
        Tensor<T> out(shape(a));
        const auto& va = value(a).values();
        const auto& vb = value(b).values();
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] = va[i] * vb[i];
        return record(OpKind::hadamard, {a, b}, std::move(out), [=](Tape& self, std::size_t y) {
            const auto& gy = self.nodes_[y].tensor.grad();
            if (self.wants_grad(a)) {
                T* g = self.grad_buffer(a);
                const auto& other = self.value(b).values();
                for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] * other[i];
            }
            if (self.wants_grad(b)) {
                T* g = self.grad_buffer(b);
                const auto& other = self.value(a).values();
                for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] * other[i];
            }
        });
    }

    Var scale(Var a, T factor) {
        Tensor<T> out(shape(a));
        const auto& va = value(a).values();
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] = va[i] * factor;
        return record(OpKind::scale, {a}, std::move(out), [=](Tape& self, std::size_t y) {
            if (!self.wants_grad(a)) return;
            const auto& gy = self.nodes_[y].tensor.grad();
            T* g = self.grad_buffer(a);
            for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] * factor;
        });
    }

    /// Softmax over the last axis. With `causal`, the trailing two axes form a
    /// square score matrix and entries above the diagonal get probability 0.
    Var row_softmax(Var a, bool causal = false) {
        const Shape s = shape(a);
        if (s.empty()) throw std::invalid_argument("row_softmax: scalar input");
        const std::size_t cols = s.back();
        if (causal && (s.size() < 2 || s[s.size() - 2] != cols)) {
            throw std::invalid_argument("row_softmax: causal mode needs square trailing axes, got " + shape_str(s));
        }
        const std::size_t rows = shape_numel(s) / cols;
        Tensor<T> out(s);
        const T* x = value(a).data();
        T* p = out.data();
        for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t limit = causal ? (r % cols) + 1 : cols;
            const T* xr = x + r * cols;
            T* pr = p + r * cols;
            T mx = xr[0];
            for (std::size_t c = 1; c < limit; ++c) mx = std::max(mx, xr[c]);
            T sum = 0;
            for (std::size_t c = 0; c < limit; ++c) {
                pr[c] = std::exp(xr[c] - mx);
                sum += pr[c];
            }
            const T inv = T{1} / sum;
            for (std::size_t c = 0; c < limit; ++c) pr[c] *= inv;
        }
        return record(OpKind::row_softmax, {a}, std::move(out), [=](Tape& self, std::size_t y) {
            if (!self.wants_grad(a)) return;
            const T* gy = self.nodes_[y].tensor.grad().data();
            const T* pv = self.nodes_[y].tensor.data();
            T* g = self.grad_buffer(a);
            for (std::size_t r = 0; r < rows; ++r) {
                const std::size_t limit = causal ? (r % cols) + 1 : cols;
                const T* pr = pv + r * cols;
                const T* gr = gy + r * cols;
                T dot = 0;
                for (std::size_t c = 0; c < limit; ++c) dot += pr[c] * gr[c];
                T* dr = g + r * cols;
                for (std::size_t c = 0; c < limit; ++c) dr[c] += pr[c] * (gr[c] - dot);
            }
        });
    }

    /// Root-mean-square normalisation of each row of x (rows x d) followed by
    /// an elementwise learned weight of length d.
    Var rms_norm(Var x, Var weight, T eps) {
        const Shape sx = shape(x);
        const Shape sw = shape(weight);
        if (sx.size() != 2 || sw.size() != 1 || sw[0] != sx[1]) {
            throw std::invalid_argument("rms_norm: expected [rows,d] and [d], got " + shape_str(sx) + " and " +
                                        shape_str(sw));
        }
        const std::size_t rows = sx[0], d = sx[1];
        Tensor<T> out(sx);
        std::vector<T> inv_rms(rows);
        const T* xv = value(x).data();
        const T* wv = value(weight).data();
        for (std::size_t r = 0; r < rows; ++r) {
            const T* xr = xv + r * d;
            T ss = 0;
            for (std::size_t c = 0; c < d; ++c) ss += xr[c] * xr[c];
            const T inv = T{1} / std::sqrt(ss / static_cast<T>(d) + eps);
            inv_rms[r] = inv;
            for (std::size_t c = 0; c < d; ++c) out[r * d + c] = xr[c] * inv * wv[c];
        }
        return record(OpKind::rms_norm, {x, weight}, std::move(out),
                      [=, inv_rms = std::move(inv_rms)](Tape& self, std::size_t y) {
                          const T* gy = self.nodes_[y].tensor.grad().data();
                          const T* xv2 = self.value(x).data();
                          const T* wv2 = self.value(weight).data();
                          T* gw = self.wants_grad(weight) ? self.grad_buffer(weight) : nullptr;
                          T* gx = self.wants_grad(x) ? self.grad_buffer(x) : nullptr;
                          for (std::size_t r = 0; r < rows; ++r) {
                              const T inv = inv_rms[r];
                              const T* xr = xv2 + r * d;
                              const T* gr = gy + r * d;
                              if (gw) {
                                  for (std::size_t c = 0; c < d; ++c) gw[c] += gr[c] * xr[c] * inv;
                              }
                              if (gx) {
                                  // n = x*inv; dn = gy*w; dx = inv * (dn - n * mean(dn*n))
                                  T dot = 0;
                                  for (std::size_t c = 0; c < d; ++c) dot += gr[c] * wv2[c] * xr[c] * inv;
                                  const T mean = dot / static_cast<T>(d);
                                  T* dr = gx + r * d;
                                  for (std::size_t c = 0; c < d; ++c) {
                                      dr[c] += inv * (gr[c] * wv2[c] - xr[c] * inv * mean);
                                  }
                              }
                          }
                      });
    }

    Var silu(Var a) {
        Tensor<T> out(shape(a));
        const auto& va = value(a).values();
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] = va[i] / (T{1} + std::exp(-va[i]));
        return record(OpKind::silu, {a}, std::move(out), [=](Tape& self, std::size_t y) {
            if (!self.wants_grad(a)) return;
            const auto& gy = self.nodes_[y].tensor.grad();
            const auto& xv = self.value(a).values();
            T* g = self.grad_buffer(a);
            for (std::size_t i = 0; i < gy.size(); ++i) {
                const T sig = T{1} / (T{1} + std::exp(-xv[i]));
                g[i] += gy[i] * sig * (T{1} + xv[i] * (T{1} - sig));
            }
        });
    }

    /// Rows of `table` (V x d) selected by ids, giving (ids.size() x d).
    Var embedding_gather(Var table, std::span<const std::int32_t> ids) {
        const Shape st = shape(table);
        if (st.size() != 2) throw std::invalid_argument("embedding_gather: table must be rank 2, got " + shape_str(st));
        if (ids.empty()) throw std::invalid_argument("embedding_gather: empty id list");
        const std::size_t vocab = st[0], d = st[1];
        for (auto id : ids) {
            if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
                throw std::invalid_argument("embedding_gather: id " + std::to_string(id) + " outside table " +
                                            shape_str(st));
            }
        }
        std::vector<std::int32_t> idv(ids.begin(), ids.end());
        Tensor<T> out(Shape{idv.size(), d});
        const T* tv = value(table).data();
        for (std::size_t r = 0; r < idv.size(); ++r) {
            std::copy_n(tv + static_cast<std::size_t>(idv[r]) * d, d, out.data() + r * d);
        }
        return record(OpKind::embedding_gather, {table}, std::move(out),
                      [=, idv = std::move(idv)](Tape& self, std::size_t y) {
                          if (!self.wants_grad(table)) return;
                          const T* gy = self.nodes_[y].tensor.grad().data();
                          T* g = self.grad_buffer(table);
                          for (std::size_t r = 0; r < idv.size(); ++r) {
                              T* dst = g + static_cast<std::size_t>(idv[r]) * d;
                              for (std::size_t c = 0; c < d; ++c) dst[c] += gy[r * d + c];
                          }
                      });
    }

    /// Mean over rows with a target of -log softmax(logits)[target]. Rows with
    /// kIgnoreTarget are skipped. Produces a scalar.
    Var mean_cross_entropy(Var logits, std::span<const std::int32_t> targets) {
        const Shape s = shape(logits);
        if (s.size() != 2 || s[0] != targets.size()) {
            throw std::invalid_argument("mean_cross_entropy: logits " + shape_str(s) + " vs " +
                                        std::to_string(targets.size()) + " targets");
        }
        const std::size_t rows = s[0], vocab = s[1];
        std::vector<std::int32_t> tv(targets.begin(), targets.end());
        std::size_t count = 0;
        for (auto t : tv) {
            if (t == kIgnoreTarget) continue;
            if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
                throw std::invalid_argument("mean_cross_entropy: target " + std::to_string(t) + " outside vocab " +
                                            std::to_string(vocab));
            }
            ++count;
        }
        if (count == 0) throw std::invalid_argument("mean_cross_entropy: no targets");
        const T* x = value(logits).data();
        std::vector<T> lse(rows, T{0});
        T total = 0;
        for (std::size_t r = 0; r < rows; ++r) {
            if (tv[r] == kIgnoreTarget) continue;
            const T* xr = x + r * vocab;
            T mx = *std::max_element(xr, xr + vocab);
            T sum = 0;
            for (std::size_t c = 0; c < vocab; ++c) sum += std::exp(xr[c] - mx);
            lse[r] = mx + std::log(sum);
            total += lse[r] - xr[tv[r]];
        }
        Tensor<T> out(Shape{}, {total / static_cast<T>(count)});
        return record(OpKind::mean_cross_entropy, {logits}, std::move(out),
                      [=, tv = std::move(tv), lse = std::move(lse)](Tape& self, std::size_t y) {
                          if (!self.wants_grad(logits)) return;
                          const T gscale = self.nodes_[y].tensor.grad()[0] / static_cast<T>(count);
                          const T* xv = self.value(logits).data();
                          T* g = self.grad_buffer(logits);
                          for (std::size_t r = 0; r < rows; ++r) {
                              if (tv[r] == kIgnoreTarget) continue;
                              const T* xr = xv + r * vocab;
                              T* gr = g + r * vocab;
                              for (std::size_t c = 0; c < vocab; ++c) gr[c] += gscale * std::exp(xr[c] - lse[r]);
                              gr[tv[r]] -= gscale;
                          }
                      });
    }

    /// Rotary position embedding on x (rows x d) split into heads of size
    /// head_dim; row r sits at position positions[r]. Within each head the
    /// first and second halves form the rotated pairs.
    Var rotary(Var x, std::span<const std::int32_t> positions, std::size_t head_dim, T base = T{10000}) {
        const Shape s = shape(x);
        if (s.size() != 2 || head_dim == 0 || head_dim % 2 != 0 || s[1] % head_dim != 0 ||
            positions.size() != s[0]) {
            throw std::invalid_argument("rotary: bad input " + shape_str(s) + " for head_dim " +
                                        std::to_string(head_dim) + " and " + std::to_string(positions.size()) +
                                        " positions");
        }
        const std::size_t rows = s[0], d = s[1], half = head_dim / 2;
        std::vector<T> cos_t(rows * half), sin_t(rows * half);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t i = 0; i < half; ++i) {
                const T freq = std::pow(base, -static_cast<T>(2 * i) / static_cast<T>(head_dim));
                const T angle = static_cast<T>(positions[r]) * freq;
                cos_t[r * half + i] = std::cos(angle);
                sin_t[r * half + i] = std::sin(angle);
            }
        }
        Tensor<T> out(s);
        const T* xv = value(x).data();
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t h = 0; h < d; h += head_dim) {
                for (std::size_t i = 0; i < half; ++i) {
                    const T c = cos_t[r * half + i], sn = sin_t[r * half + i];
                    const T x1 = xv[r * d + h + i], x2 = xv[r * d + h + half + i];
                    out[r * d + h + i] = x1 * c - x2 * sn;
                    out[r * d + h + half + i] = x1 * sn + x2 * c;
                }
            }
        }
        return record(OpKind::rotary, {x}, std::move(out),
                      [=, cos_t = std::move(cos_t), sin_t = std::move(sin_t)](Tape& self, std::size_t y) {
                          if (!self.wants_grad(x)) return;
                          const T* gy = self.nodes_[y].tensor.grad().data();
                          T* g = self.grad_buffer(x);
                          for (std::size_t r = 0; r < rows; ++r) {
                              for (std::size_t h = 0; h < d; h += head_dim) {
                                  for (std::size_t i = 0; i < half; ++i) {
                                      const T c = cos_t[r * half + i], sn = sin_t[r * half + i];
                                      const T g1 = gy[r * d + h + i], g2 = gy[r * d + h + half + i];
                                      g[r * d + h + i] += g1 * c + g2 * sn;
                                      g[r * d + h + half + i] += -g1 * sn + g2 * c;
                                  }
                              }
                          }
                      });
    }

    Var reshape(Var a, Shape new_shape) {
        if (shape_numel(new_shape) != value(a).numel()) {
            throw std::invalid_argument("reshape: cannot view " + shape_str(shape(a)) + " as " + shape_str(new_shape));
        }
        Tensor<T> out(std::move(new_shape), value(a).values());
        return record(OpKind::reshape, {a}, std::move(out), [=](Tape& self, std::size_t y) {
            if (!self.wants_grad(a)) return;
            const auto& gy = self.nodes_[y].tensor.grad();
            T* g = self.grad_buffer(a);
            for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
        });
    }

    /// Axis permutation; output axis i is input axis perm[i].
    Var permute(Var a, std::vector<std::size_t> perm) {
        const Shape s = shape(a);
        std::vector<std::size_t> check = perm;
        std::sort(check.begin(), check.end());
        bool ok = perm.size() == s.size();
        for (std::size_t i = 0; ok && i < check.size(); ++i) ok = check[i] == i;
        if (!ok) throw std::invalid_argument("permute: invalid axis order for shape " + shape_str(s));
        Shape out_shape(s.size());
        for (std::size_t i = 0; i < s.size(); ++i) out_shape[i] = s[perm[i]];
        Tensor<T> out(out_shape);
        detail::permute_copy<T>(s, perm, value(a).data(), out.data(), false);
        std::vector<std::size_t> inverse(perm.size());
        for (std::size_t i = 0; i < perm.size(); ++i) inverse[perm[i]] = i;
        return record(OpKind::permute, {a}, std::move(out),
                      [=, inverse = std::move(inverse)](Tape& self, std::size_t y) {
                          if (!self.wants_grad(a)) return;
                          const auto& yt = self.nodes_[y].tensor;
                          detail::permute_copy<T>(yt.shape(), inverse, yt.grad().data(), self.grad_buffer(a), true);
                      });
    }

    // ------------------------------------------------------------- backward

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    void backward(Var loss) {
        if (loss.id >= nodes_.size()) throw std::invalid_argument("backward: loss is not on this tape");
        auto& lt = nodes_[loss.id].tensor;
        if (lt.numel() != 1 || !lt.shape().empty()) {
            throw std::invalid_argument("backward: loss must be a scalar, got shape " + shape_str(lt.shape()));
        }
        if (!tracing_) throw std::invalid_argument("backward: tape was not tracing");
        if (!nodes_[loss.id].requires_grad) {
            throw std::invalid_argument("backward: loss does not depend on any traced leaf");
        }
        if (backward_done_) throw std::logic_error("backward: tape already consumed");
        backward_done_ = true;
        lt.ensure_grad();
        lt.grad()[0] = T{1};
        for (std::size_t e = entries_.size(); e-- > 0;) {
            const auto& entry = entries_[e];
            if (entry.output > loss.id) continue;
            if (!nodes_[entry.output].tensor.has_grad()) continue;
            entry.backward(*this, entry.output);
        }
    }

private:
    struct Node {
        Tensor<T> tensor;
        bool requires_grad = false;
    };

    struct Entry {
        OpKind op;
        std::vector<std::size_t> inputs;
        std::size_t output;
        std::function<void(Tape&, std::size_t)> backward;
    };

    Node& node(Var v) {
        if (v.id >= nodes_.size()) throw std::out_of_range("tape: unknown variable " + std::to_string(v.id));
        return nodes_[v.id];
    }
    const Node& node(Var v) const {
        if (v.id >= nodes_.size()) throw std::out_of_range("tape: unknown variable " + std::to_string(v.id));
        return nodes_[v.id];
    }

    bool wants_grad(Var v) const { return nodes_[v.id].requires_grad; }

    T* grad_buffer(Var v) {
        auto& t = nodes_[v.id].tensor;
        t.ensure_grad();
        return t.grad().data();
    }

    void require_same_shape(const char* op, Var a, Var b) const {
        if (shape(a) != shape(b)) {
            throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(shape(a)) + " vs " +
                                        shape_str(shape(b)));
        }
    }

    template <typename F>
    Var record(OpKind op, std::initializer_list<Var> inputs, Tensor<T> out, F&& back) {
        bool needs = false;
        for (Var v : inputs) needs = needs || nodes_[v.id].requires_grad;
        nodes_.push_back(Node{std::move(out), needs && tracing_});
        const std::size_t id = nodes_.size() - 1;
        if (tracing_ && needs) {
            std::vector<std::size_t> in;
            for (Var v : inputs) in.push_back(v.id);
            entries_.push_back(Entry{op, std::move(in), id, std::forward<F>(back)});
        }
        return Var{id};
    }

    bool tracing_;
    bool backward_done_ = false;
    std::vector<Node> nodes_;
    std::vector<Entry> entries_;
};

}  // namespace lingreg
