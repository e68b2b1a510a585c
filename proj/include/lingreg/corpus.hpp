// SPDX-License-Identifier: Apache-2.0
//
// Synthetic languages with controllable relatedness.
//
// Each language emits an order-2 Markov chain over token classes: eight
// lexical classes drawn from the language's private lexicon plus one function
// class drawn from a shared token pool common to every language. Siblings copy
// the transition table and class structure of their parent and replace a
// fraction (1 - overlap) of the lexicon with fresh tokens. A small noise rate
// lets every vocabulary id occur in every language, so no id is entirely
// unseen during training.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lingreg/model.hpp"

namespace lingreg {

struct SuiteOptions {
    std::size_t vocab_size = 512;
    std::size_t lexicon_size = 40;
    std::size_t shared_size = 32;
    std::size_t lexical_classes = 8;
    std::size_t successors = 2;      // next-class candidates per context
    double top_successor_prob = 0.7;  // mass on the first candidate
    double sibling_overlap = 0.5;
    double shared_grammar = 0.0;  // chance a root language's context row comes from the common table
    std::size_t seq_len = 64;
    double noise_rate = 0.02;  // chance a position emits a uniform token from the whole vocabulary
};

struct LanguageSpec {
    int id = 0;
    std::string name;
    int family = 0;
    bool training = false;
    std::optional<int> sibling_of;
    double overlap = 0.0;
    std::size_t seq_len = 64;
    std::size_t vocab_size = 512;
    double noise_rate = 0.0;

    // Lexicon laid out class-major: class c owns slots [c*per, (c+1)*per).
    std::vector<Token> lexicon;
    std::vector<Token> shared;
    std::vector<double> lexical_slot_weights;  // per slot within a class
    std::vector<double> shared_weights;        // per shared token
    std::size_t class_count = 0;               // lexical classes + function class
    std::vector<double> transition;            // [prev2][prev1][next], rows sum to 1

    std::size_t function_class() const { return class_count - 1; }
    std::size_t per_class() const { return lexicon.size() / (class_count - 1); }
    double transition_prob(std::size_t c2, std::size_t c1, std::size_t next) const {
        return transition[(c2 * class_count + c1) * class_count + next];
    }
};

struct Corpus {
    int language = 0;
    std::string language_name;
    std::uint64_t seed = 0;
    std::size_t seq_len = 0;
    std::vector<Sequence> sequences;

    bool operator==(const Corpus&) const = default;
};

/// Ten languages: t0..t5 for training, s0/s1 held-out siblings of t0/t1 and
/// u0/u1 unrelated evaluation-only languages.
std::vector<LanguageSpec> build_language_suite(std::uint64_t seed, const SuiteOptions& options = {});

Corpus generate(const LanguageSpec& spec, std::size_t n_sequences, std::uint64_t seed);

const LanguageSpec& find_language(std::span<const LanguageSpec> suite, std::string_view name);

/// Perplexity of `eval` under add-one smoothed unigram frequencies of `train`.
double unigram_perplexity(const Corpus& train, const Corpus& eval, std::size_t vocab_size);

}  // namespace lingreg
