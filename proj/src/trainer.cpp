// SPDX-License-Identifier: Apache-2.0

#include "lingreg/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace lingreg {

Adam::Adam(std::size_t size, const TrainConfig& config)
    : lr_(config.lr), beta1_(config.beta1), beta2_(config.beta2), eps_(config.eps), m_(size, 0.0f), v_(size, 0.0f) {}

void Adam::set_frozen(std::vector<std::uint8_t> frozen) {
    if (!frozen.empty() && frozen.size() != m_.size()) throw std::invalid_argument("Adam: freeze flags size mismatch");
    frozen_ = std::move(frozen);
}

void Adam::step(std::span<float> params, std::span<const float> grad) {
    if (params.size() != m_.size() || grad.size() != m_.size()) throw std::invalid_argument("Adam: size mismatch");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const float step_size = static_cast<float>(lr_ * std::sqrt(bc2) / bc1);
    const float b1 = static_cast<float>(beta1_), b2 = static_cast<float>(beta2_);
    const float eps = static_cast<float>(eps_ * std::sqrt(bc2));
    const bool any_frozen = !frozen_.empty();
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (any_frozen && frozen_[i]) continue;
        const float g = grad[i];
        m_[i] = b1 * m_[i] + (1.0f - b1) * g;
        v_[i] = b2 * v_[i] + (1.0f - b2) * g * g;
        params[i] -= step_size * m_[i] / (std::sqrt(v_[i]) + eps);
    }
}

std::vector<std::uint8_t> freeze_flags(const ParameterStore& store, const RegionMask& mask) {
    std::vector<std::uint8_t> flags(store.size(), 0);
    for (const auto& [id, m] : mask.matrices()) {
        if (m.count() == 0) continue;
        const Slot& s = store.layout().slot(id);
        if (s.rows != m.rows || s.cols != m.cols) {
            throw std::invalid_argument("freeze mask shape for " + id.name() + " does not match the model");
        }
        for (auto i = m.bits.find_first(); i != boost::dynamic_bitset<std::uint64_t>::npos; i = m.bits.find_next(i)) {
            flags[s.offset + i] = 1;
        }
    }
    return flags;
}

double eval_ppl(const ParameterStore& store, const Corpus& corpus, std::size_t batch_size) {
    if (corpus.sequences.empty()) throw std::invalid_argument("eval_ppl: empty corpus");
    double total = 0;
    std::size_t count = 0;
    const auto& seqs = corpus.sequences;
    for (std::size_t i = 0; i < seqs.size(); i += batch_size) {
        const std::size_t n = std::min(batch_size, seqs.size() - i);
        auto [nll, c] = nll_sum<float>(store, std::span<const Sequence>(seqs).subspan(i, n));
        total += nll;
        count += c;
    }
    return std::exp(total / static_cast<double>(count));
}

Sequence generate(const ParameterStore& store, const Sequence& prompt, std::size_t n_new) {
    if (prompt.empty()) throw std::invalid_argument("generate: empty prompt");
    if (prompt.size() + n_new > store.config().max_seq_len) {
        throw std::invalid_argument("generate: prompt of " + std::to_string(prompt.size()) + " plus " +
                                    std::to_string(n_new) + " new tokens exceeds max length " +
                                    std::to_string(store.config().max_seq_len));
    }
    Sequence out = prompt;
    const std::size_t vocab = store.config().vocab_size;
    for (std::size_t i = 0; i < n_new; ++i) {
        const Tensor<float> logits = forward<float>(store, out);
        const float* last = logits.data() + (out.size() - 1) * vocab;
        const auto best = std::max_element(last, last + vocab) - last;
        out.push_back(static_cast<Token>(best));
    }
    return out;
}

double repetition_rate(std::span<const Token> tokens) {
    if (tokens.size() < 2) return 0.0;
    std::vector<std::pair<Token, Token>> seen;
    std::size_t repeats = 0;
    for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
        const std::pair<Token, Token> bigram{tokens[i], tokens[i + 1]};
        if (std::find(seen.begin(), seen.end(), bigram) != seen.end()) {
            ++repeats;
        } else {
            seen.push_back(bigram);
        }
    }
    return static_cast<double>(repeats) / static_cast<double>(tokens.size() - 1);
}

namespace {

// Steps after which a checkpoint is recorded: 0 plus every 1/n of the run.
std::vector<std::size_t> checkpoint_steps(std::size_t steps, std::size_t n) {
    std::vector<std::size_t> out{0};
    if (n == 0 || steps == 0) return out;
    for (std::size_t k = 1; k <= n; ++k) {
        const std::size_t s = (steps * k) / n;
        if (s > out.back()) out.push_back(s);
    }
    return out;
}

std::map<std::string, std::string> describe(const TrainConfig& c) {
    auto str = [](double v) {
        std::ostringstream os;
        os.precision(17);
        os << v;
        return os.str();
    };
    return {{"lr", str(c.lr)},
            {"batch_size", std::to_string(c.batch_size)},
            {"steps", std::to_string(c.steps)},
            {"beta1", str(c.beta1)},
            {"beta2", str(c.beta2)},
            {"eps", str(c.eps)},
            {"seed", std::to_string(c.seed)},
            {"accumulate_importance", c.accumulate_importance ? "true" : "false"},
            {"checkpoints", std::to_string(c.checkpoints)}};
}

// Cycles through a per-language shuffled order, reshuffling at each epoch.
class SequenceSampler {
public:
    SequenceSampler(std::span<const Corpus> corpora, std::uint64_t seed) : corpora_(corpora), rng_(seed) {
        for (const auto& c : corpora_) {
            if (c.sequences.empty()) throw std::invalid_argument("training corpus '" + c.language_name + "' is empty");
            std::vector<std::size_t> order(c.sequences.size());
            std::iota(order.begin(), order.end(), std::size_t{0});
            std::shuffle(order.begin(), order.end(), rng_);
            orders_.push_back(std::move(order));
            cursors_.push_back(0);
        }
    }

    std::vector<Sequence> next_batch(std::size_t batch_size) {
        std::vector<Sequence> batch;
        batch.reserve(batch_size);
        for (std::size_t i = 0; i < batch_size; ++i) {
            const std::size_t lang = next_lang_;
            next_lang_ = (next_lang_ + 1) % corpora_.size();
            auto& order = orders_[lang];
            if (cursors_[lang] == order.size()) {
                std::shuffle(order.begin(), order.end(), rng_);
                cursors_[lang] = 0;
            }
            batch.push_back(corpora_[lang].sequences[order[cursors_[lang]++]]);
        }
        return batch;
    }

private:
    std::span<const Corpus> corpora_;
    std::mt19937_64 rng_;
    std::vector<std::vector<std::size_t>> orders_;
    std::vector<std::size_t> cursors_;
    std::size_t next_lang_ = 0;
};

TrainResult run_training(ParameterStore store, std::span<const Corpus> corpora, const TrainConfig& config,
                         const RegionMask* freeze, std::span<const EvalSet> evals, std::string kind,
                         const std::string& language) {
    config.validate();
    if (corpora.empty()) throw std::invalid_argument(kind + ": no training corpora");
    const auto start = std::chrono::steady_clock::now();

    TrainResult result{std::move(store), RunRecord{}, std::nullopt};
    ParameterStore& params = result.store;
    result.record.kind = std::move(kind);
    result.record.config = describe(config);
    if (!language.empty()) result.record.config["language"] = language;
    if (config.accumulate_importance) {
        result.importance.emplace(params.config());
        if (!language.empty()) result.importance->languages().push_back(language);
    }

    Adam optimizer(params.size(), config);
    if (freeze) {
        optimizer.set_frozen(freeze_flags(params, *freeze));
        result.record.config["freeze_count"] = std::to_string(freeze->count());
    }
    SequenceSampler sampler(corpora, config.seed);
    const auto marks = checkpoint_steps(config.steps, config.checkpoints);
    std::size_t next_mark = 0;
    double interval_loss = 0;
    std::size_t interval_steps = 0;

    auto record_checkpoint = [&](std::size_t step) {
        CheckpointRecord cp;
        cp.step = step;
        cp.sequences_seen = step * config.batch_size;
        cp.train_loss = interval_steps ? interval_loss / static_cast<double>(interval_steps) : 0.0;
        for (const auto& e : evals) cp.ppl[e.name] = eval_ppl(params, *e.corpus);
        result.record.checkpoints.push_back(std::move(cp));
        interval_loss = 0;
        interval_steps = 0;
    };

    for (std::size_t step = 0; step <= config.steps; ++step) {
        if (next_mark < marks.size() && marks[next_mark] == step) {
            record_checkpoint(step);
            ++next_mark;
        }
        if (step == config.steps) break;
        const auto batch = sampler.next_batch(config.batch_size);
        auto lg = loss_and_grad<float>(params, batch);
        if (!std::isfinite(lg.loss)) throw TrainingDiverged(step, lg.loss);
        if (result.importance) result.importance->accumulate_step(params, lg.grad);
        optimizer.step(params.values(), lg.grad);
        result.record.train_loss.push_back(lg.loss);
        interval_loss += lg.loss;
        ++interval_steps;
    }
    result.record.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

}  // namespace

TrainResult pretrain(ParameterStore init, std::span<const Corpus> corpora, const TrainConfig& config,
                     std::span<const EvalSet> evals) {
    return run_training(std::move(init), corpora, config, nullptr, evals, "pretrain", {});
}

TrainResult finetune(ParameterStore start, const Corpus& corpus, const TrainConfig& config, const RegionMask* freeze,
                     std::span<const EvalSet> evals, const std::string& language) {
    return run_training(std::move(start), std::span<const Corpus>(&corpus, 1), config, freeze, evals, "finetune",
                        language.empty() ? corpus.language_name : language);
}

}  // namespace lingreg
