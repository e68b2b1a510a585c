// SPDX-License-Identifier: Apache-2.0

#include "lingreg/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace lingreg {
namespace {

std::vector<double> zipf_weights(std::size_t n) {
    std::vector<double> w(n);
    for (std::size_t i = 0; i < n; ++i) w[i] = 1.0 / static_cast<double>(i + 1);
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    for (auto& x : w) x /= total;
    return w;
}

std::vector<double> random_transition(std::size_t classes, const SuiteOptions& opt, std::mt19937_64& rng) {
    std::vector<double> table(classes * classes * classes, 0.0);
    std::vector<std::size_t> order(classes);
    for (std::size_t ctx = 0; ctx < classes * classes; ++ctx) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        double* row = table.data() + ctx * classes;
        const std::size_t k = std::min(opt.successors, classes);
        if (k == 1) {
            row[order[0]] = 1.0;
            continue;
        }
        row[order[0]] = opt.top_successor_prob;
        for (std::size_t i = 1; i < k; ++i) row[order[i]] = (1.0 - opt.top_successor_prob) / static_cast<double>(k - 1);
    }
    return table;
}

// Slots ordered by emission weight, cycling through classes: (c0,s0), (c1,s0), ...
std::vector<std::size_t> slots_by_weight(std::size_t classes, std::size_t per_class) {
    std::vector<std::size_t> out;
    for (std::size_t s = 0; s < per_class; ++s) {
        for (std::size_t c = 0; c < classes; ++c) out.push_back(c * per_class + s);
    }
    return out;
}

std::size_t sample(std::span<const double> weights, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double r = u(rng);
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (r < weights[i]) return i;
        r -= weights[i];
    }
    // rounding slack lands on the last positive weight
    for (std::size_t i = weights.size(); i-- > 0;) {
        if (weights[i] > 0) return i;
    }
    return 0;
}

}  // namespace

std::vector<LanguageSpec> build_language_suite(std::uint64_t seed, const SuiteOptions& opt) {
    if (opt.lexical_classes == 0 || opt.lexicon_size % opt.lexical_classes != 0) {
        throw std::invalid_argument("suite: lexicon size must be a positive multiple of the class count");
    }
    if (!(opt.noise_rate >= 0.0 && opt.noise_rate < 1.0)) throw std::invalid_argument("suite: noise rate must lie in [0,1)");
    if (!(opt.shared_grammar >= 0.0 && opt.shared_grammar <= 1.0)) {
        throw std::invalid_argument("suite: shared grammar fraction must lie in [0,1]");
    }
    if (!(opt.sibling_overlap >= 0.0 && opt.sibling_overlap <= 1.0)) {
        throw std::invalid_argument("suite: sibling overlap must lie in [0,1]");
    }
    const std::size_t per_class = opt.lexicon_size / opt.lexical_classes;
    const std::size_t shared_slots =
        static_cast<std::size_t>(std::ceil(opt.sibling_overlap * static_cast<double>(opt.lexicon_size)));
    const std::size_t needed = opt.shared_size + 8 * opt.lexicon_size + 2 * (opt.lexicon_size - shared_slots);
    if (needed > opt.vocab_size) {
        throw std::invalid_argument("suite: needs " + std::to_string(needed) + " token ids but vocab is " +
                                    std::to_string(opt.vocab_size));
    }

    std::mt19937_64 rng(seed);
    // Grammar rows common to every root language. Own stream, so a suite
    // without sharing is identical to one built before the option existed.
    std::mt19937_64 grammar_rng(seed ^ 0x6772616d6d6172ULL);
    const std::size_t classes = opt.lexical_classes + 1;
    const std::vector<double> universal =
        opt.shared_grammar > 0 ? random_transition(classes, opt, grammar_rng) : std::vector<double>{};
    std::vector<Token> shared(opt.shared_size);
    std::iota(shared.begin(), shared.end(), Token{0});
    Token next_free = static_cast<Token>(opt.shared_size);
    auto fresh = [&](std::size_t n) {
        std::vector<Token> out(n);
        for (auto& t : out) t = next_free++;
        return out;
    };

    auto make_root = [&](int id, std::string name, bool training) {
        LanguageSpec spec;
        spec.id = id;
        spec.name = std::move(name);
        spec.family = id;
        spec.training = training;
        spec.seq_len = opt.seq_len;
        spec.vocab_size = opt.vocab_size;
        spec.noise_rate = opt.noise_rate;
        spec.lexicon = fresh(opt.lexicon_size);
        std::shuffle(spec.lexicon.begin(), spec.lexicon.end(), rng);
        spec.shared = shared;
        spec.shared_weights = zipf_weights(opt.shared_size);
        std::shuffle(spec.shared_weights.begin(), spec.shared_weights.end(), rng);
        spec.lexical_slot_weights = zipf_weights(per_class);
        spec.class_count = classes;
        spec.transition = random_transition(classes, opt, rng);
        if (opt.shared_grammar > 0) {
            std::bernoulli_distribution common(opt.shared_grammar);
            for (std::size_t ctx = 0; ctx < classes * classes; ++ctx) {
                if (!common(grammar_rng)) continue;
                std::copy_n(universal.begin() + ctx * classes, classes, spec.transition.begin() + ctx * classes);
            }
        }
        return spec;
    };
    auto make_sibling = [&](const LanguageSpec& parent, int id, std::string name) {
        LanguageSpec spec = parent;
        spec.id = id;
        spec.name = std::move(name);
        spec.training = false;
        spec.sibling_of = parent.id;
        spec.overlap = opt.sibling_overlap;
        const auto order = slots_by_weight(opt.lexical_classes, per_class);
        auto replacement = fresh(opt.lexicon_size - shared_slots);
        for (std::size_t i = shared_slots; i < order.size(); ++i) spec.lexicon[order[i]] = replacement[i - shared_slots];
        return spec;
    };

    std::vector<LanguageSpec> suite;
    for (int i = 0; i < 6; ++i) suite.push_back(make_root(i, "t" + std::to_string(i), true));
    suite.push_back(make_sibling(suite[0], 6, "s0"));
    suite.push_back(make_sibling(suite[1], 7, "s1"));
    suite.push_back(make_root(8, "u0", false));
    suite.push_back(make_root(9, "u1", false));
    return suite;
}

Corpus generate(const LanguageSpec& spec, std::size_t n_sequences, std::uint64_t seed) {
    Corpus corpus;
    corpus.language = spec.id;
    corpus.language_name = spec.name;
    corpus.seed = seed;
    corpus.seq_len = spec.seq_len;
    corpus.sequences.reserve(n_sequences);

    std::seed_seq seq{seed, static_cast<std::uint64_t>(spec.id), std::uint64_t{0x6c616e67}};
    std::mt19937_64 rng(seq);
    const std::size_t classes = spec.class_count;
    const std::size_t per = spec.per_class();
    std::uniform_int_distribution<std::size_t> any_class(0, classes - 1);
    std::uniform_int_distribution<std::size_t> any_token(0, spec.vocab_size - 1);
    std::bernoulli_distribution noisy(spec.noise_rate);

    auto emit = [&](std::size_t cls) -> Token {
        if (spec.noise_rate > 0 && noisy(rng)) return static_cast<Token>(any_token(rng));
        if (cls == spec.function_class()) return spec.shared[sample(spec.shared_weights, rng)];
        return spec.lexicon[cls * per + sample(spec.lexical_slot_weights, rng)];
    };

    for (std::size_t n = 0; n < n_sequences; ++n) {
        Sequence s(spec.seq_len);
        std::size_t c2 = any_class(rng), c1 = any_class(rng);
        for (std::size_t t = 0; t < spec.seq_len; ++t) {
            std::size_t cls;
            if (t == 0) {
                cls = c2;
            } else if (t == 1) {
                cls = c1;
            } else {
                cls = sample(std::span<const double>(spec.transition).subspan((c2 * classes + c1) * classes, classes),
                             rng);
                c2 = c1;
                c1 = cls;
            }
            s[t] = emit(cls);
        }
        corpus.sequences.push_back(std::move(s));
    }
    return corpus;
}

const LanguageSpec& find_language(std::span<const LanguageSpec> suite, std::string_view name) {
    for (const auto& spec : suite) {
        if (spec.name == name) return spec;
    }
    throw std::invalid_argument("unknown language '" + std::string(name) + "'");
}

double unigram_perplexity(const Corpus& train, const Corpus& eval, std::size_t vocab_size) {
    std::vector<double> counts(vocab_size, 1.0);
    double total = static_cast<double>(vocab_size);
    for (const auto& s : train.sequences) {
        for (Token t : s) {
            counts.at(t) += 1.0;
            total += 1.0;
        }
    }
    double nll = 0;
    std::size_t n = 0;
    // same positions as the model is scored on: 2..T
    for (const auto& s : eval.sequences) {
        for (std::size_t i = 1; i < s.size(); ++i) {
            nll -= std::log(counts.at(s[i]) / total);
            ++n;
        }
    }
    if (n == 0) throw std::invalid_argument("unigram_perplexity: empty evaluation corpus");
    return std::exp(nll / static_cast<double>(n));
}

}  // namespace lingreg
