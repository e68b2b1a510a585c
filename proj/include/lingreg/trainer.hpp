// SPDX-License-Identifier: Apache-2.0
//
// Pre-training, further pre-training with freeze masks, perplexity and
// greedy decoding.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lingreg/corpus.hpp"
#include "lingreg/importance.hpp"
#include "lingreg/mask.hpp"
#include "lingreg/model.hpp"

namespace lingreg {

struct TrainConfig {
    double lr = 3e-3;
    std::size_t batch_size = 16;
    std::size_t steps = 1000;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    std::uint64_t seed = 1;
    bool accumulate_importance = false;
    std::size_t checkpoints = 10;  // evaluations spread evenly over the run

    void validate() const {
        if (!(lr > 0)) throw std::invalid_argument("train config: learning rate must be positive");
        if (batch_size == 0) throw std::invalid_argument("train config: batch size must be positive");
        if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) {
            throw std::invalid_argument("train config: moment decays must lie in [0,1)");
        }
    }
};

struct CheckpointRecord {
    std::size_t step = 0;
    std::size_t sequences_seen = 0;
    double train_loss = 0.0;  // mean over the steps since the previous checkpoint
    std::map<std::string, double> ppl;

    bool operator==(const CheckpointRecord&) const = default;
};

struct RunRecord {
    std::string kind;                      // pretrain / finetune
    std::vector<CheckpointRecord> checkpoints;
    std::vector<double> train_loss;        // one per step
    std::map<std::string, std::string> config;
    double wall_seconds = 0.0;
};

/// Named evaluation corpora scored at every checkpoint.
struct EvalSet {
    std::string name;
    const Corpus* corpus = nullptr;
};

struct TrainResult {
    ParameterStore store;
    RunRecord record;
    std::optional<ImportanceMap> importance;
};

class TrainingDiverged : public std::runtime_error {
public:
    TrainingDiverged(std::size_t step, double loss)
        : std::runtime_error("training diverged at step " + std::to_string(step) + " (loss " + std::to_string(loss) +
                             ")"),
          step_(step) {}
    std::size_t step() const { return step_; }

private:
    std::size_t step_;
};

/// Adaptive moment estimation without weight decay. Coordinates flagged in the
/// freeze vector are skipped entirely, including their moment buffers.
class Adam {
public:
    Adam(std::size_t size, const TrainConfig& config);

    void set_frozen(std::vector<std::uint8_t> frozen);
    void step(std::span<float> params, std::span<const float> grad);
    std::uint64_t steps() const { return t_; }

    std::span<const float> first_moment() const { return m_; }
    std::span<const float> second_moment() const { return v_; }

private:
    double lr_, beta1_, beta2_, eps_;
    std::vector<float> m_, v_;
    std::vector<std::uint8_t> frozen_;
    std::uint64_t t_ = 0;
};

/// Flat freeze flags over the store layout for the coordinates of `mask`.
std::vector<std::uint8_t> freeze_flags(const ParameterStore& store, const RegionMask& mask);

/// Minimises mean NLL over language-interleaved batches.
TrainResult pretrain(ParameterStore init, std::span<const Corpus> corpora, const TrainConfig& config,
                     std::span<const EvalSet> evals = {});

/// Single-language further pre-training; masked coordinates never move.
TrainResult finetune(ParameterStore start, const Corpus& corpus, const TrainConfig& config,
                     const RegionMask* freeze = nullptr, std::span<const EvalSet> evals = {},
                     const std::string& language = {});

/// exp(mean NLL over positions 2..T of every sequence).
double eval_ppl(const ParameterStore& store, const Corpus& corpus, std::size_t batch_size = 32);

/// Greedy argmax continuation; ties go to the lowest token id.
Sequence generate(const ParameterStore& store, const Sequence& prompt, std::size_t n_new);

/// Fraction of 2-grams in `tokens` that already occurred earlier in it.
double repetition_rate(std::span<const Token> tokens);

}  // namespace lingreg
