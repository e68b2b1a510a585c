// SPDX-License-Identifier: Apache-2.0
//
// LLaMA-shaped decoder-only language model at desk scale.
//
// Every trainable scalar lives in one flat buffer owned by the parameter
// store; a Layout maps (layer, matrix, row, col) coordinates onto offsets in
// that buffer so that importance maps, masks, optimizer state and gradients
// all share the same addressing.
//
// Weight matrices are stored input-major (y = x * W): attn.q/k/v/o are d x d,
// ffn.gate/up are d x F and ffn.down is F x d. With this orientation the
// columns of attn.q/k/v and the rows of attn.o split into contiguous head
// blocks, and the columns of attn.o and ffn.down index the residual stream.
// embedding and lm-head are V x d; logits are h * lm_head^T.

#pragma once

#include <cmath>
#include <compare>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "lingreg/tape.hpp"

namespace lingreg {

using Token = std::uint16_t;
using Sequence = std::vector<Token>;

struct ModelConfig {
    std::size_t vocab_size = 512;
    std::size_t dim = 64;
    std::size_t layers = 4;
    std::size_t heads = 4;
    std::size_t ffn_dim = 172;
    std::size_t max_seq_len = 64;
    double init_scale = 0.02;
    std::uint64_t seed = 1;
    double norm_eps = 1e-5;
    double rope_base = 10000.0;

    std::size_t head_dim() const { return dim / heads; }

    void validate() const {
        if (vocab_size == 0 || dim == 0 || layers == 0 || heads == 0 || ffn_dim == 0 || max_seq_len == 0) {
            throw std::invalid_argument("model config: all sizes must be positive");
        }
        if (dim % heads != 0) throw std::invalid_argument("model config: dim must be divisible by heads");
        if (head_dim() % 2 != 0) throw std::invalid_argument("model config: head dim must be even for rotary");
        if (ffn_dim < dim) throw std::invalid_argument("model config: ffn_dim must be >= dim");
        if (!(init_scale > 0)) throw std::invalid_argument("model config: init_scale must be positive");
        if (vocab_size > 65536) throw std::invalid_argument("model config: vocab must fit 16-bit token ids");
    }

    bool operator==(const ModelConfig&) const = default;
};

enum class MatrixKind : std::uint8_t {
    attn_q,
    attn_k,
    attn_v,
    attn_o,
    ffn_gate,
    ffn_up,
    ffn_down,
    input_norm,
    post_attn_norm,
    final_norm,
    embedding,
    lm_head,
};

inline constexpr std::string_view kind_name(MatrixKind k) {
    switch (k) {
        case MatrixKind::attn_q: return "attn.q";
        case MatrixKind::attn_k: return "attn.k";
        case MatrixKind::attn_v: return "attn.v";
        case MatrixKind::attn_o: return "attn.o";
        case MatrixKind::ffn_gate: return "ffn.gate";
        case MatrixKind::ffn_up: return "ffn.up";
        case MatrixKind::ffn_down: return "ffn.down";
        case MatrixKind::input_norm: return "input-norm";
        case MatrixKind::post_attn_norm: return "post-attn-norm";
        case MatrixKind::final_norm: return "final-norm";
        case MatrixKind::embedding: return "embedding";
        case MatrixKind::lm_head: return "lm-head";
    }
    return "?";
}

inline constexpr MatrixKind kLayerKinds[] = {
    MatrixKind::input_norm, MatrixKind::attn_q,         MatrixKind::attn_k,   MatrixKind::attn_v,
    MatrixKind::attn_o,     MatrixKind::post_attn_norm, MatrixKind::ffn_gate, MatrixKind::ffn_up,
    MatrixKind::ffn_down,
};

inline constexpr bool is_norm(MatrixKind k) {
    return k == MatrixKind::input_norm || k == MatrixKind::post_attn_norm || k == MatrixKind::final_norm;
}

inline constexpr bool is_layer_kind(MatrixKind k) {
    return k != MatrixKind::final_norm && k != MatrixKind::embedding && k != MatrixKind::lm_head;
}

/// Weight matrices eligible for ratio masks (attention and feed-forward).
inline constexpr bool is_weight_matrix(MatrixKind k) {
    return is_layer_kind(k) && !is_norm(k);
}

/// Tracked by importance maps: everything except embedding and lm-head.
inline constexpr bool is_importance_covered(MatrixKind k) {
    return k != MatrixKind::embedding && k != MatrixKind::lm_head;
}

inline MatrixKind parse_kind(std::string_view s) {
    for (int i = 0; i <= static_cast<int>(MatrixKind::lm_head); ++i) {
        auto k = static_cast<MatrixKind>(i);
        if (kind_name(k) == s) return k;
    }
    throw std::invalid_argument("unknown matrix name '" + std::string(s) + "'");
}

/// Names one matrix or vector of the model. layer is -1 for the globals.
struct MatrixId {
    int layer = -1;
    MatrixKind kind = MatrixKind::embedding;

    auto operator<=>(const MatrixId&) const = default;

    std::string name() const {
        if (layer < 0) return std::string(kind_name(kind));
        return "layer" + std::to_string(layer) + "." + std::string(kind_name(kind));
    }

    static MatrixId parse(std::string_view s) {
        if (s.starts_with("layer")) {
            const auto dot = s.find('.');
            if (dot == std::string_view::npos) throw std::invalid_argument("bad matrix id '" + std::string(s) + "'");
            const int layer = std::stoi(std::string(s.substr(5, dot - 5)));
            const auto kind = parse_kind(s.substr(dot + 1));
            if (!is_layer_kind(kind)) throw std::invalid_argument("'" + std::string(s) + "' is not a layer matrix");
            return {layer, kind};
        }
        const auto kind = parse_kind(s);
        if (is_layer_kind(kind)) throw std::invalid_argument("'" + std::string(s) + "' needs a layer prefix");
        return {-1, kind};
    }
};

struct ParamCoord {
    int layer = -1;
    MatrixKind kind = MatrixKind::embedding;
    std::size_t row = 0;
    std::size_t col = 0;

    MatrixId matrix() const { return {layer, kind}; }
    bool operator==(const ParamCoord&) const = default;
};

struct Slot {
    MatrixId id;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t offset = 0;

    std::size_t size() const { return rows * cols; }
};

inline std::pair<std::size_t, std::size_t> matrix_shape(const ModelConfig& c, MatrixKind k) {
    switch (k) {
        case MatrixKind::attn_q:
        case MatrixKind::attn_k:
        case MatrixKind::attn_v:
        case MatrixKind::attn_o: return {c.dim, c.dim};
        case MatrixKind::ffn_gate:
        case MatrixKind::ffn_up: return {c.dim, c.ffn_dim};
        case MatrixKind::ffn_down: return {c.ffn_dim, c.dim};
        case MatrixKind::input_norm:
        case MatrixKind::post_attn_norm:
        case MatrixKind::final_norm: return {c.dim, 1};
        case MatrixKind::embedding:
        case MatrixKind::lm_head: return {c.vocab_size, c.dim};
    }
    return {0, 0};
}

/// Ordered list of matrices with their offsets into a flat buffer.
class Layout {
public:
    Layout() = default;

    template <typename Pred>
    static Layout for_model(const ModelConfig& config, Pred&& include) {
        Layout layout;
        auto push = [&](MatrixId id) {
            if (!include(id.kind)) return;
            auto [r, c] = matrix_shape(config, id.kind);
            layout.slots_.push_back(Slot{id, r, c, layout.total_});
            layout.total_ += r * c;
        };
        push({-1, MatrixKind::embedding});
        for (std::size_t l = 0; l < config.layers; ++l) {
            for (auto k : kLayerKinds) push({static_cast<int>(l), k});
        }
        push({-1, MatrixKind::final_norm});
        push({-1, MatrixKind::lm_head});
        return layout;
    }

    static Layout full(const ModelConfig& config) {
        return for_model(config, [](MatrixKind) { return true; });
    }

    const std::vector<Slot>& slots() const { return slots_; }
    std::size_t total() const { return total_; }

    std::optional<std::size_t> find(MatrixId id) const {
        for (std::size_t i = 0; i < slots_.size(); ++i) {
            if (slots_[i].id == id) return i;
        }
        return std::nullopt;
    }

    const Slot& slot(MatrixId id) const {
        auto i = find(id);
        if (!i) throw std::invalid_argument("matrix " + id.name() + " is not part of this layout");
        return slots_[*i];
    }

    std::size_t offset_of(const ParamCoord& c) const {
        const Slot& s = slot(c.matrix());
        if (c.row >= s.rows || c.col >= s.cols) {
            throw std::out_of_range("coordinate (" + std::to_string(c.row) + "," + std::to_string(c.col) +
                                    ") outside " + c.matrix().name() + " of shape " + std::to_string(s.rows) + "x" +
                                    std::to_string(s.cols));
        }
        return s.offset + c.row * s.cols + c.col;
    }

    ParamCoord coord_of(std::size_t flat) const {
        for (const Slot& s : slots_) {
            if (flat < s.offset + s.size()) {
                const std::size_t local = flat - s.offset;
                return ParamCoord{s.id.layer, s.id.kind, local / s.cols, local % s.cols};
            }
        }
        throw std::out_of_range("flat index " + std::to_string(flat) + " beyond layout of " + std::to_string(total_));
    }

    bool operator==(const Layout& o) const {
        if (total_ != o.total_ || slots_.size() != o.slots_.size()) return false;
        for (std::size_t i = 0; i < slots_.size(); ++i) {
            const auto &a = slots_[i], &b = o.slots_[i];
            if (!(a.id == b.id) || a.rows != b.rows || a.cols != b.cols || a.offset != b.offset) return false;
        }
        return true;
    }

private:
    std::vector<Slot> slots_;
    std::size_t total_ = 0;
};

/// Closed-form scalar count for a config.
inline std::size_t parameter_count(const ModelConfig& c) {
    return 2 * c.vocab_size * c.dim + c.dim + c.layers * (4 * c.dim * c.dim + 3 * c.dim * c.ffn_dim + 2 * c.dim);
}

template <typename T>
class BasicParameterStore {
public:
    BasicParameterStore() = default;

    explicit BasicParameterStore(ModelConfig config)
        : config_(std::move(config)), layout_(Layout::full(config_)), values_(layout_.total(), T{0}) {
        config_.validate();
    }

    const ModelConfig& config() const { return config_; }
    const Layout& layout() const { return layout_; }
    std::size_t size() const { return values_.size(); }

    std::span<T> values() { return values_; }
    std::span<const T> values() const { return values_; }

    std::span<T> matrix(MatrixId id) {
        const Slot& s = layout_.slot(id);
        return std::span<T>(values_).subspan(s.offset, s.size());
    }
    std::span<const T> matrix(MatrixId id) const {
        const Slot& s = layout_.slot(id);
        return std::span<const T>(values_).subspan(s.offset, s.size());
    }

    T& at(const ParamCoord& c) { return values_[layout_.offset_of(c)]; }
    const T& at(const ParamCoord& c) const { return values_[layout_.offset_of(c)]; }

    template <typename U>
    BasicParameterStore<U> cast() const {
        BasicParameterStore<U> out(config_);
        auto dst = out.values();
        for (std::size_t i = 0; i < values_.size(); ++i) dst[i] = static_cast<U>(values_[i]);
        return out;
    }

    bool operator==(const BasicParameterStore& o) const {
        return config_ == o.config_ && values_ == o.values_;
    }

private:
    ModelConfig config_;
    Layout layout_;
    std::vector<T> values_;
};

using ParameterStore = BasicParameterStore<float>;

/// Zero-mean normal weights with standard deviation init_scale / sqrt(dim);
/// norm vectors start at exactly 1.
inline ParameterStore init_model(const ModelConfig& config) {
    ParameterStore store(config);
    std::mt19937_64 rng(config.seed);
    std::normal_distribution<double> normal(0.0, config.init_scale / std::sqrt(static_cast<double>(config.dim)));
    for (const Slot& s : store.layout().slots()) {
        auto m = store.matrix(s.id);
        if (is_norm(s.id.kind)) {
            std::fill(m.begin(), m.end(), 1.0f);
        } else {
            for (auto& v : m) v = static_cast<float>(normal(rng));
        }
    }
    return store;
}

template <typename T>
struct ModelGraph {
    Tape<T> tape;
    std::vector<Var> params;  // one per layout slot
    Var logits;               // (batch * length) x V
    std::optional<Var> loss;
};

namespace detail {

inline void check_batch(const ModelConfig& config, std::span<const Sequence> batch) {
    if (batch.empty()) throw std::invalid_argument("forward: empty batch");
    const std::size_t len = batch.front().size();
    if (len == 0) throw std::invalid_argument("forward: empty sequence");
    if (len > config.max_seq_len) {
        throw std::invalid_argument("forward: sequence length " + std::to_string(len) + " exceeds max " +
                                    std::to_string(config.max_seq_len));
    }
    for (const auto& seq : batch) {
        if (seq.size() != len) throw std::invalid_argument("forward: sequences in a batch must share a length");
        for (Token t : seq) {
            if (t >= config.vocab_size) {
                throw std::invalid_argument("forward: token id " + std::to_string(t) + " >= vocab " +
                                            std::to_string(config.vocab_size));
            }
        }
    }
}

}  // namespace detail

/// Builds the full forward graph for a batch of equal-length sequences. When
/// with_loss is set, the mean next-token negative log-likelihood over
/// positions 2..length is attached as `loss`.
template <typename T>
ModelGraph<T> build_graph(const BasicParameterStore<T>& store, std::span<const Sequence> batch, bool trace,
                          bool with_loss) {
    const ModelConfig& cfg = store.config();
    detail::check_batch(cfg, batch);
    const std::size_t b = batch.size();
    const std::size_t len = batch.front().size();
    if (with_loss && len < 2) throw std::invalid_argument("loss: sequence length must be at least 2");
    const std::size_t n = b * len, d = cfg.dim, h = cfg.heads, hd = cfg.head_dim();

    ModelGraph<T> g{Tape<T>(trace), {}, {}, std::nullopt};
    auto& tp = g.tape;
    const Layout& layout = store.layout();
    g.params.reserve(layout.slots().size());
    for (const Slot& s : layout.slots()) {
        auto m = store.matrix(s.id);
        Shape shape = is_norm(s.id.kind) ? Shape{s.rows} : Shape{s.rows, s.cols};
        g.params.push_back(tp.leaf(Tensor<T>(shape, std::vector<T>(m.begin(), m.end()))));
    }
    auto param = [&](int layer, MatrixKind k) { return g.params[*layout.find(MatrixId{layer, k})]; };

    std::vector<std::int32_t> ids(n), positions(n), targets(n, kIgnoreTarget);
    for (std::size_t s = 0; s < b; ++s) {
        for (std::size_t t = 0; t < len; ++t) {
            ids[s * len + t] = batch[s][t];
            positions[s * len + t] = static_cast<std::int32_t>(t);
            if (t + 1 < len) targets[s * len + t] = batch[s][t + 1];
        }
    }

    const T eps = static_cast<T>(cfg.norm_eps);
    const T attn_scale = T{1} / std::sqrt(static_cast<T>(hd));
    auto split_heads = [&](Var x) {
        Var r = tp.reshape(x, Shape{b, len, h, hd});
        r = tp.permute(r, {0, 2, 1, 3});
        return tp.reshape(r, Shape{b * h, len, hd});
    };

    Var x = tp.embedding_gather(param(-1, MatrixKind::embedding), ids);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const int li = static_cast<int>(l);
        Var hn = tp.rms_norm(x, param(li, MatrixKind::input_norm), eps);
        Var q = tp.matmul(hn, param(li, MatrixKind::attn_q));
        Var k = tp.matmul(hn, param(li, MatrixKind::attn_k));
        Var v = tp.matmul(hn, param(li, MatrixKind::attn_v));
        q = tp.rotary(q, positions, hd, static_cast<T>(cfg.rope_base));
        k = tp.rotary(k, positions, hd, static_cast<T>(cfg.rope_base));
        Var qh = split_heads(q), kh = split_heads(k), vh = split_heads(v);
        Var scores = tp.scale(tp.matmul(qh, kh, false, true), attn_scale);
        Var probs = tp.row_softmax(scores, true);
        Var ctx = tp.matmul(probs, vh);
        ctx = tp.reshape(ctx, Shape{b, h, len, hd});
        ctx = tp.permute(ctx, {0, 2, 1, 3});
        ctx = tp.reshape(ctx, Shape{n, d});
        x = tp.add(x, tp.matmul(ctx, param(li, MatrixKind::attn_o)));

        Var h2 = tp.rms_norm(x, param(li, MatrixKind::post_attn_norm), eps);
        Var gate = tp.matmul(h2, param(li, MatrixKind::ffn_gate));
        Var up = tp.matmul(h2, param(li, MatrixKind::ffn_up));
        Var mixed = tp.hadamard(tp.silu(gate), up);
        x = tp.add(x, tp.matmul(mixed, param(li, MatrixKind::ffn_down)));
    }
    Var final_h = tp.rms_norm(x, param(-1, MatrixKind::final_norm), eps);
    g.logits = tp.matmul(final_h, param(-1, MatrixKind::lm_head), false, true);
    if (with_loss) g.loss = tp.mean_cross_entropy(g.logits, targets);
    return g;
}

/// Logits (length x V) for a single sequence.
template <typename T>
Tensor<T> forward(const BasicParameterStore<T>& store, const Sequence& tokens) {
    std::vector<Sequence> batch{tokens};
    auto g = build_graph<T>(store, batch, false, false);
    return g.tape.value(g.logits);
}

/// Mean next-token negative log-likelihood of a batch.
template <typename T>
T loss(const BasicParameterStore<T>& store, std::span<const Sequence> batch) {
    auto g = build_graph<T>(store, batch, false, true);
    return g.tape.value(*g.loss)[0];
}

template <typename T>
struct LossAndGrad {
    T loss{};
    std::vector<T> grad;  // store layout
};

template <typename T>
LossAndGrad<T> loss_and_grad(const BasicParameterStore<T>& store, std::span<const Sequence> batch) {
    auto g = build_graph<T>(store, batch, true, true);
    g.tape.backward(*g.loss);
    LossAndGrad<T> out{g.tape.value(*g.loss)[0], std::vector<T>(store.size(), T{0})};
    const auto& slots = store.layout().slots();
    for (std::size_t i = 0; i < slots.size(); ++i) {
        auto gv = g.tape.grad(g.params[i]);
        std::copy(gv.begin(), gv.end(), out.grad.begin() + static_cast<std::ptrdiff_t>(slots[i].offset));
    }
    return out;
}

/// Sum of next-token negative log-likelihoods (accumulated in double) and the
/// number of predicted positions.
template <typename T>
std::pair<double, std::size_t> nll_sum(const BasicParameterStore<T>& store, std::span<const Sequence> batch) {
    auto g = build_graph<T>(store, batch, false, false);
    const auto& logits = g.tape.value(g.logits);
    const std::size_t vocab = store.config().vocab_size;
    const std::size_t len = batch.front().size();
    double total = 0;
    std::size_t count = 0;
    for (std::size_t s = 0; s < batch.size(); ++s) {
        for (std::size_t t = 0; t + 1 < len; ++t) {
            const T* row = logits.data() + (s * len + t) * vocab;
            double mx = row[0];
            for (std::size_t c = 1; c < vocab; ++c) mx = std::max(mx, static_cast<double>(row[c]));
            double sum = 0;
            for (std::size_t c = 0; c < vocab; ++c) sum += std::exp(static_cast<double>(row[c]) - mx);
            total += mx + std::log(sum) - static_cast<double>(row[batch[s][t + 1]]);
            ++count;
        }
    }
    return {total, count};
}

}  // namespace lingreg
