// SPDX-License-Identifier: Apache-2.0

#include "lingreg/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

#include <zlib.h>

#include "lingreg/artifact_io.hpp"

namespace lingreg {
namespace fs = std::filesystem;

namespace {

std::uint32_t crc_of(std::string_view s) {
    return static_cast<std::uint32_t>(
        crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(s.data()), static_cast<uInt>(s.size())));
}

std::string hex32(std::uint32_t v) {
    char buf[9];
    std::snprintf(buf, sizeof buf, "%08x", v);
    return buf;
}

template <typename T, typename F>
std::string join(const std::vector<T>& xs, F&& fmt) {
    std::string out;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (i) out += ',';
        out += fmt(xs[i]);
    }
    return out;
}

std::string join_doubles(const std::vector<double>& xs) { return join(xs, format_double); }
std::string join_strings(const std::vector<std::string>& xs) {
    return join(xs, [](const std::string& s) { return s; });
}
template <typename T>
std::string join_uints(const std::vector<T>& xs) {
    return join(xs, [](T v) { return std::to_string(v); });
}

struct Field {
    std::string key;
    std::function<void(ExperimentConfig&, const std::string&)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

#define LG_UINT(KEY, MEMBER)                                                                             \
    Field {                                                                                              \
        KEY, [](ExperimentConfig& c, const std::string& v) { c.MEMBER = parse_uint(v, KEY); },           \
            [](const ExperimentConfig& c) { return std::to_string(c.MEMBER); }                           \
    }
#define LG_DOUBLE(KEY, MEMBER)                                                                           \
    Field {                                                                                              \
        KEY, [](ExperimentConfig& c, const std::string& v) { c.MEMBER = parse_double(v, KEY); },         \
            [](const ExperimentConfig& c) { return format_double(c.MEMBER); }                            \
    }
#define LG_STRING(KEY, MEMBER)                                                                           \
    Field {                                                                                              \
        KEY, [](ExperimentConfig& c, const std::string& v) { c.MEMBER = v; },                            \
            [](const ExperimentConfig& c) { return std::string(c.MEMBER); }                              \
    }

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        LG_STRING("experiment", name),
        Field{"out", [](ExperimentConfig& c, const std::string& v) { c.out_dir = v; },
              [](const ExperimentConfig& c) { return c.out_dir.string(); }},
        LG_UINT("suite-seed", suite_seed),
        Field{"seeds",
              [](ExperimentConfig& c, const std::string& v) {
                  c.seeds.clear();
                  for (const auto& s : split_list(v)) c.seeds.push_back(parse_uint(s, "seeds"));
              },
              [](const ExperimentConfig& c) { return join_uints(c.seeds); }},
        LG_UINT("vocab-size", model.vocab_size),
        LG_UINT("dim", model.dim),
        LG_UINT("layers", model.layers),
        LG_UINT("heads", model.heads),
        LG_UINT("ffn-dim", model.ffn_dim),
        LG_UINT("max-seq-len", model.max_seq_len),
        LG_DOUBLE("init-scale", model.init_scale),
        LG_UINT("lexicon-size", suite.lexicon_size),
        LG_UINT("shared-size", suite.shared_size),
        LG_UINT("successors", suite.successors),
        LG_DOUBLE("top-successor-prob", suite.top_successor_prob),
        LG_DOUBLE("sibling-overlap", suite.sibling_overlap),
        LG_DOUBLE("shared-grammar", suite.shared_grammar),
        LG_DOUBLE("noise-rate", suite.noise_rate),
        LG_UINT("train-sequences", train_sequences),
        LG_UINT("finetune-sequences", finetune_sequences),
        LG_UINT("eval-sequences", eval_sequences),
        LG_UINT("batch-size", batch_size),
        LG_UINT("pretrain-steps", pretrain_steps),
        LG_DOUBLE("pretrain-lr", pretrain_lr),
        LG_UINT("pretrain-checkpoints", pretrain_checkpoints),
        Field{"base-checkpoint",
              [](ExperimentConfig& c, const std::string& v) {
                  if (v.empty()) {
                      c.base_checkpoint.reset();
                  } else {
                      c.base_checkpoint = v;
                  }
              },
              [](const ExperimentConfig& c) { return c.base_checkpoint ? c.base_checkpoint->string() : ""; }},
        Field{"accum-steps",
              [](ExperimentConfig& c, const std::string& v) {
                  c.accum_steps.clear();
                  for (const auto& s : split_list(v)) c.accum_steps.push_back(parse_uint(s, "accum-steps"));
              },
              [](const ExperimentConfig& c) { return join_uints(c.accum_steps); }},
        LG_DOUBLE("accum-lr", accum_lr),
        Field{"normalize-maps",
              [](ExperimentConfig& c, const std::string& v) {
                  KeyValues kv;
                  kv.set("normalize-maps", v);
                  c.normalize_maps = kv.get_bool("normalize-maps", false);
              },
              [](const ExperimentConfig& c) { return std::string(c.normalize_maps ? "true" : "false"); }},
        Field{"ratios",
              [](ExperimentConfig& c, const std::string& v) {
                  c.ratios.clear();
                  for (const auto& s : split_list(v)) c.ratios.push_back(parse_double(s, "ratios"));
              },
              [](const ExperimentConfig& c) { return join_doubles(c.ratios); }},
        Field{"dim-preset", [](ExperimentConfig& c, const std::string& v) { c.dim_preset = parse_preset(v); },
              [](const ExperimentConfig& c) { return std::string(preset_name(c.dim_preset)); }},
        Field{"dim-counts",
              [](ExperimentConfig& c, const std::string& v) {
                  c.dim_counts.clear();
                  for (const auto& s : split_list(v)) c.dim_counts.push_back(parse_uint(s, "dim-counts"));
              },
              [](const ExperimentConfig& c) { return join_uints(c.dim_counts); }},
        LG_DOUBLE("dim-ratio", dim_ratio),
        LG_UINT("random-trials", random_trials),
        LG_DOUBLE("norm-factor", norm_factor),
        LG_UINT("prompt-count", prompt_count),
        LG_UINT("prompt-len", prompt_len),
        LG_UINT("generate-new", generate_new),
        LG_DOUBLE("relearn-ratio", relearn_ratio),
        LG_STRING("relearn-a", relearn_a),
        LG_STRING("relearn-b", relearn_b),
        LG_DOUBLE("relearn-lr", relearn_lr),
        LG_UINT("relearn-steps", relearn_steps),
        LG_DOUBLE("mono-ratio", mono_ratio),
        Field{"mono-targets", [](ExperimentConfig& c, const std::string& v) { c.mono_targets = split_list(v); },
              [](const ExperimentConfig& c) { return join_strings(c.mono_targets); }},
        LG_DOUBLE("cf-ratio", cf_ratio),
        LG_STRING("cf-target", cf_target),
        LG_DOUBLE("cf-lr", cf_lr),
        LG_UINT("cf-steps", cf_steps),
        LG_UINT("cf-checkpoints", cf_checkpoints),
        LG_DOUBLE("viz-ratio", viz_ratio),
        LG_UINT("viz-block", viz_block),
        Field{"viz-layer",
              [](ExperimentConfig& c, const std::string& v) {
                  c.viz_layer = v == "all" ? -1 : static_cast<int>(parse_uint(v, "viz-layer"));
              },
              [](const ExperimentConfig& c) {
                  return c.viz_layer < 0 ? std::string("all") : std::to_string(c.viz_layer);
              }},
    };
    return table;
}

#undef LG_UINT
#undef LG_DOUBLE
#undef LG_STRING

bool is_known_experiment(std::string_view name) {
    return std::find(std::begin(kExperimentNames), std::end(kExperimentNames), name) != std::end(kExperimentNames);
}

void check_ratio(double r, std::string_view what) {
    if (!(r >= 0.0 && r <= 1.0)) throw ConfigError(std::string(what) + " must lie in [0,1]");
}

}  // namespace

// --- config -------------------------------------------------------------------

ExperimentConfig ExperimentConfig::from(const KeyValues& kv) {
    ExperimentConfig c;
    for (const auto& [key, value] : kv.entries()) {
        const auto it = std::find_if(fields().begin(), fields().end(), [&](const Field& f) { return f.key == key; });
        if (it == fields().end()) throw ConfigError("unknown config key '" + key + "'");
        try {
            it->set(c, value);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(key + ": " + e.what());
        }
    }
    c.validate();
    return c;
}

std::vector<std::string> ExperimentConfig::known_keys() {
    std::vector<std::string> out;
    for (const auto& f : fields()) out.push_back(f.key);
    return out;
}

KeyValues ExperimentConfig::to_kv() const {
    KeyValues kv;
    for (const auto& f : fields()) kv.set(f.key, f.get(*this));
    return kv;
}

void ExperimentConfig::validate() const {
    if (!is_known_experiment(name)) throw ConfigError("unknown experiment '" + name + "'");
    try {
        model.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (seeds.empty()) throw ConfigError("seeds: at least one seed is required");
    if (batch_size == 0) throw ConfigError("batch-size must be positive");
    if (eval_sequences == 0) throw ConfigError("eval-sequences must be positive");
    if (finetune_sequences == 0 || train_sequences == 0) throw ConfigError("corpus sizes must be positive");
    if (accum_steps.empty()) throw ConfigError("accum-steps: at least one run length is required");
    for (double r : ratios) check_ratio(r, "ratios");
    for (double r : {dim_ratio, relearn_ratio, mono_ratio, cf_ratio, viz_ratio}) check_ratio(r, "region ratio");
    for (double lr : {pretrain_lr, accum_lr, relearn_lr, cf_lr}) {
        if (!(lr > 0)) throw ConfigError("learning rates must be positive");
    }
    if (!std::isfinite(norm_factor)) throw ConfigError("norm-factor must be finite");
    if (viz_block == 0) throw ConfigError("viz-block must be positive");
    if (viz_layer >= 0 && static_cast<std::size_t>(viz_layer) >= model.layers) {
        throw ConfigError("viz-layer " + std::to_string(viz_layer) + " exceeds layer count");
    }
    if (prompt_len == 0 || prompt_len + generate_new > model.max_seq_len) {
        throw ConfigError("prompt-len + generate-new must fit in max-seq-len");
    }
    if (base_checkpoint && !fs::exists(*base_checkpoint)) {
        throw ConfigError("base checkpoint not found: " + base_checkpoint->string());
    }
}

double geomean(const PplRow& row, std::span<const std::string> langs) {
    if (langs.empty()) throw std::invalid_argument("geomean: no languages");
    double s = 0;
    for (const auto& l : langs) s += std::log(row.at(l));
    return std::exp(s / static_cast<double>(langs.size()));
}

// --- workspace ----------------------------------------------------------------

Workspace::Workspace(ExperimentConfig config, std::uint64_t seed) : config_(std::move(config)), seed_(seed) {
    config_.model.seed = seed;
    config_.suite.vocab_size = config_.model.vocab_size;
    config_.suite.seq_len = config_.model.max_seq_len;
    if (config_.base_checkpoint) {
        base_ = load_checkpoint(*config_.base_checkpoint);
        config_.model = base_->config();
    }
    suite_ = build_language_suite(config_.suite_seed, config_.suite);

    std::ostringstream key;
    key << config_lines(config_.model) << "lexicon=" << config_.suite.lexicon_size
        << " shared=" << config_.suite.shared_size << " succ=" << config_.suite.successors
        << " top=" << format_double(config_.suite.top_successor_prob)
        << " overlap=" << format_double(config_.suite.sibling_overlap)
        << " grammar=" << format_double(config_.suite.shared_grammar)
        << " noise=" << format_double(config_.suite.noise_rate) << " suite_seed=" << config_.suite_seed
        << " train=" << config_.train_sequences << " eval=" << config_.eval_sequences
        << " batch=" << config_.batch_size << " steps=" << config_.pretrain_steps
        << " lr=" << format_double(config_.pretrain_lr) << " cps=" << config_.pretrain_checkpoints
        << " base=" << (config_.base_checkpoint ? fs::absolute(*config_.base_checkpoint).string() : "");
    dir_ = config_.out_dir / "workspace" / ("seed" + std::to_string(seed) + "-" + hex32(crc_of(key.str())));
    key_ = key.str();
}

std::vector<std::string> Workspace::training_languages() const {
    std::vector<std::string> out;
    for (const auto& s : suite_) {
        if (s.training) out.push_back(s.name);
    }
    return out;
}

std::vector<std::string> Workspace::all_languages() const {
    std::vector<std::string> out;
    for (const auto& s : suite_) out.push_back(s.name);
    return out;
}

std::vector<std::string> Workspace::unrelated_to(std::string_view target) const {
    const int family = language(target).family;
    std::vector<std::string> out;
    for (const auto& s : suite_) {
        if (s.family != family) out.push_back(s.name);
    }
    return out;
}

std::optional<std::string> Workspace::sibling_of(std::string_view target) const {
    const LanguageSpec& t = language(target);
    for (const auto& s : suite_) {
        if (s.name != t.name && s.family == t.family) return s.name;
    }
    return std::nullopt;
}

const Corpus& Workspace::corpus(std::map<std::string, Corpus, std::less<>>& cache, std::string_view lang,
                                std::size_t count, std::uint64_t salt) {
    if (auto it = cache.find(lang); it != cache.end()) return it->second;
    const LanguageSpec& spec = language(lang);
    auto [it, _] = cache.emplace(std::string(lang), generate(spec, count, config_.suite_seed * 1000003ULL + salt));
    return it->second;
}

const Corpus& Workspace::train_corpus(std::string_view lang) {
    return corpus(train_, lang, config_.train_sequences, 1);
}
const Corpus& Workspace::finetune_corpus(std::string_view lang) {
    return corpus(finetune_, lang, config_.finetune_sequences, 2);
}
const Corpus& Workspace::eval_corpus(std::string_view lang) { return corpus(eval_, lang, config_.eval_sequences, 3); }

std::vector<EvalSet> Workspace::eval_sets(std::span<const std::string> langs) {
    std::vector<EvalSet> out;
    for (const auto& l : langs) out.push_back(EvalSet{l, &eval_corpus(l)});
    return out;
}

double Workspace::unigram_ppl(std::string_view lang) {
    if (auto it = unigram_.find(lang); it != unigram_.end()) return it->second;
    const double v = unigram_perplexity(train_corpus(lang), eval_corpus(lang), config_.model.vocab_size);
    unigram_.emplace(std::string(lang), v);
    return v;
}

std::uint64_t Workspace::derived_seed(std::string_view purpose) const {
    return seed_ * 0x9E3779B97F4A7C15ULL ^ (static_cast<std::uint64_t>(crc_of(purpose)) << 17);
}

TrainConfig Workspace::finetune_config(double lr, std::size_t steps) const {
    TrainConfig t;
    t.lr = lr;
    t.steps = steps;
    t.batch_size = config_.batch_size;
    t.seed = seed_;
    return t;
}

const ParameterStore& Workspace::base() {
    if (base_) return *base_;
    const fs::path ckpt = dir_ / "base.ckpt";
    const fs::path rec = dir_ / "base.record.jsonl";
    if (fs::exists(ckpt) && fs::exists(rec)) {
        base_ = load_checkpoint(ckpt);
        base_record_ = load_record(rec);
        return *base_;
    }
    std::vector<Corpus> corpora;
    for (const auto& l : training_languages()) corpora.push_back(train_corpus(l));
    TrainConfig t;
    t.lr = config_.pretrain_lr;
    t.steps = config_.pretrain_steps;
    t.batch_size = config_.batch_size;
    t.seed = seed_;
    t.checkpoints = config_.pretrain_checkpoints;
    const auto langs = all_languages();
    const auto evals = eval_sets(langs);
    TrainResult r = pretrain(init_model(config_.model), corpora, t, evals);
    fs::create_directories(dir_);
    std::ofstream(dir_ / "workspace.txt") << key_ << '\n';
    save_checkpoint(r.store, ckpt);
    save_record(r.record, rec);
    write_record_summary(r.record, dir_ / "base.summary.csv");
    base_ = std::move(r.store);
    base_record_ = std::move(r.record);
    return *base_;
}

const RunRecord& Workspace::base_record() {
    base();
    if (!base_record_) base_record_ = RunRecord{"external", {}, {}, {}, 0.0};
    return *base_record_;
}

const PplRow& Workspace::base_ppl() {
    if (!base_ppl_) base_ppl_ = evaluate(base());
    return *base_ppl_;
}

const ImportanceMap& Workspace::language_map(std::string_view lang, std::size_t steps) {
    const auto key = std::make_pair(std::string(lang), steps);
    if (auto it = maps_.find(key); it != maps_.end()) return it->second;
    std::ostringstream tag;
    tag << "lr=" << format_double(config_.accum_lr) << " batch=" << config_.batch_size
        << " ft=" << config_.finetune_sequences;
    const fs::path path =
        dir_ / ("map-" + std::string(lang) + "-" + std::to_string(steps) + "-" + hex32(crc_of(tag.str())) + ".imp");
    if (fs::exists(path)) return maps_.emplace(key, load_importance(path)).first->second;

    TrainConfig t = finetune_config(config_.accum_lr, steps);
    t.accumulate_importance = true;
    t.checkpoints = 0;
    t.seed = derived_seed("accumulate-" + std::string(lang));
    TrainResult r = finetune(base(), finetune_corpus(lang), t, nullptr, {}, std::string(lang));
    save_importance(*r.importance, path);
    return maps_.emplace(key, std::move(*r.importance)).first->second;
}

const ImportanceMap& Workspace::merged_map(std::size_t steps) {
    if (auto it = merged_.find(steps); it != merged_.end()) return it->second;
    std::vector<ImportanceMap> maps;
    for (const auto& l : training_languages()) {
        maps.push_back(language_map(l, steps));
        if (config_.normalize_maps) maps.back().normalize();
    }
    return merged_.emplace(steps, merge(maps)).first->second;
}

PplRow Workspace::evaluate(const ParameterStore& store, std::span<const std::string> langs) {
    PplRow out;
    for (const auto& l : langs) out[l] = eval_ppl(store, eval_corpus(l));
    return out;
}

void Workspace::keep(const RegionMask& mask, const std::string& name) const {
    if (artifacts_) save_mask(mask, *artifacts_ / (name + ".mask"));
}

void Workspace::keep(const ParameterStore& store, const std::string& name) const {
    if (artifacts_) save_checkpoint(store, *artifacts_ / (name + ".ckpt"));
}

// --- experiments --------------------------------------------------------------

namespace {

std::string ratio_tag(double r) { return format_double(r); }

ParameterStore zeroed(const ParameterStore& base, const RegionMask& mask) {
    ParameterStore s = base;
    apply_zero(s, mask);
    return s;
}

}  // namespace

std::vector<CoreRegionCell> core_region(Workspace& ws) {
    const auto& cfg = ws.config();
    const auto langs = ws.training_languages();
    const ParameterStore& base = ws.base();
    const PplRow base_row = ws.evaluate(base, langs);
    std::vector<CoreRegionCell> cells;
    for (std::size_t steps : cfg.accum_steps) {
        const ImportanceMap& map = ws.merged_map(steps);
        for (double ratio : cfg.ratios) {
            CoreRegionCell cell{ratio, steps, base_row, {}, {}, {}};
            const std::string tag = "core-" + std::to_string(steps) + "-" + ratio_tag(ratio);
            RegionMask top = select_ratio(map, ratio, SelectMode::top);
            RegionMask bottom = select_ratio(map, ratio, SelectMode::bottom);
            RegionMask random = select_random(map.config(), ratio, ws.derived_seed("random-region-" + tag));
            ws.keep(top, tag + "-top");
            ws.keep(bottom, tag + "-bottom");
            ws.keep(random, tag + "-random");
            cell.top = ws.evaluate(zeroed(base, top), langs);
            cell.bottom = ws.evaluate(zeroed(base, bottom), langs);
            cell.random = ws.evaluate(zeroed(base, random), langs);
            cells.push_back(std::move(cell));
        }
    }
    return cells;
}

RelearnResult relearn(Workspace& ws) {
    const auto& cfg = ws.config();
    RelearnResult r;
    r.a = cfg.relearn_a;
    r.b = cfg.relearn_b;
    ws.language(r.a);
    ws.language(r.b);
    const auto langs = ws.all_languages();
    const std::vector<std::string> pair{r.a, r.b};
    r.base = ws.base_ppl();
    const RegionMask top = select_ratio(ws.merged_map(cfg.accum_steps.front()), cfg.relearn_ratio, SelectMode::top);
    ws.keep(top, "relearn-top");
    const ParameterStore cut = zeroed(ws.base(), top);
    r.zeroed = ws.evaluate(cut, langs);

    TrainConfig t = ws.finetune_config(cfg.relearn_lr, cfg.relearn_steps);
    t.seed = ws.derived_seed("relearn");
    const auto evals = ws.eval_sets(pair);
    TrainResult frozen = finetune(cut, ws.finetune_corpus(r.a), t, &top, evals);
    r.frozen = ws.evaluate(frozen.store, langs);
    r.frozen_record = std::move(frozen.record);
    ws.keep(frozen.store, "relearn-frozen");
    TrainResult open = finetune(cut, ws.finetune_corpus(r.a), t, nullptr, evals);
    r.unfrozen = ws.evaluate(open.store, langs);
    r.unfrozen_record = std::move(open.record);
    ws.keep(open.store, "relearn-unfrozen");
    return r;
}

DimsResult dims(Workspace& ws) {
    const auto& cfg = ws.config();
    const auto langs = ws.training_languages();
    const ParameterStore& base = ws.base();
    const ImportanceMap& map = ws.merged_map(cfg.accum_steps.front());
    const RegionMask top_mask = select_ratio(map, cfg.dim_ratio, SelectMode::top);
    ws.keep(top_mask, "dims-source");
    DimsResult out;
    out.base = ws.evaluate(base, langs);
    for (std::size_t count : cfg.dim_counts) {
        for (auto [tier, label] : {std::pair{Tier::top, "top"}, std::pair{Tier::middle, "middle"},
                                   std::pair{Tier::bottom, "bottom"}}) {
            const DimRemovalSpec spec = rank_dims(top_mask, map, cfg.dim_preset, tier, count);
            ParameterStore s = base;
            remove_dims(s, spec);
            out.cells.push_back(DimsCell{count, label, ws.evaluate(s, langs)});
        }
        PplRow logsum;
        for (std::size_t trial = 0; trial < cfg.random_trials; ++trial) {
            const auto spec = random_dims(base.config(), cfg.dim_preset, count,
                                          ws.derived_seed("random-dims-" + std::to_string(count) + "-" +
                                                          std::to_string(trial)));
            ParameterStore s = base;
            remove_dims(s, spec);
            for (const auto& [l, v] : ws.evaluate(s, langs)) logsum[l] += std::log(v);
        }
        if (cfg.random_trials > 0) {
            for (auto& [l, v] : logsum) v = std::exp(v / static_cast<double>(cfg.random_trials));
            out.cells.push_back(DimsCell{count, "random", logsum});
        }
    }
    return out;
}

namespace {

GenerationStats generation_stats(Workspace& ws, const ParameterStore& store) {
    const auto& cfg = ws.config();
    const auto langs = ws.training_languages();
    GenerationStats g;
    if (cfg.prompt_count == 0) return g;
    double total = 0;
    for (std::size_t i = 0; i < cfg.prompt_count; ++i) {
        const Corpus& c = ws.eval_corpus(langs[i % langs.size()]);
        const Sequence& src = c.sequences[(i / langs.size()) % c.sequences.size()];
        const Sequence prompt(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(cfg.prompt_len));
        Sequence out = generate(store, prompt, cfg.generate_new);
        total += repetition_rate(std::span<const Token>(out).subspan(cfg.prompt_len));
        g.outputs.push_back(std::move(out));
    }
    g.repetition = total / static_cast<double>(cfg.prompt_count);
    return g;
}

}  // namespace

SingleDimResult single_dim(Workspace& ws) {
    const auto& cfg = ws.config();
    const auto langs = ws.training_languages();
    const ParameterStore& base = ws.base();
    const ImportanceMap& map = ws.merged_map(cfg.accum_steps.front());
    const RegionMask top_mask = select_ratio(map, cfg.dim_ratio, SelectMode::top);
    SingleDimResult r;
    r.base = ws.evaluate(base, langs);
    r.top_dim = rank_residual_dims(top_mask, map).front();
    const std::uint64_t perturb_seed = ws.derived_seed("perturb-dim");
    ParameterStore s = base;
    perturb_dim(s, r.top_dim, perturb_seed);
    r.top = ws.evaluate(s, langs);
    r.base_gen = generation_stats(ws, base);
    r.top_gen = generation_stats(ws, s);

    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < base.config().dim; ++i) {
        if (i != r.top_dim) pool.push_back(i);
    }
    std::mt19937_64 rng(ws.derived_seed("random-dim-choice"));
    std::shuffle(pool.begin(), pool.end(), rng);
    for (std::size_t t = 0; t < std::min(cfg.random_trials, pool.size()); ++t) {
        ParameterStore p = base;
        perturb_dim(p, pool[t], perturb_seed);
        r.random_dims.push_back(pool[t]);
        r.random.push_back(ws.evaluate(p, langs));
    }
    return r;
}

NormParamResult norm_param(Workspace& ws) {
    const auto& cfg = ws.config();
    const auto langs = ws.training_languages();
    const ParameterStore& base = ws.base();
    const ImportanceMap& map = ws.merged_map(cfg.accum_steps.front());
    const ModelConfig& mc = base.config();

    std::vector<MatrixId> norms;
    for (std::size_t l = 0; l < mc.layers; ++l) {
        norms.push_back({static_cast<int>(l), MatrixKind::input_norm});
        norms.push_back({static_cast<int>(l), MatrixKind::post_attn_norm});
    }
    norms.push_back({-1, MatrixKind::final_norm});

    MatrixId best_id = norms.front();
    std::size_t best_dim = 0;
    double best = -1;
    for (const auto& id : norms) {
        const auto scores = map.matrix(id);
        for (std::size_t i = 0; i < scores.size(); ++i) {
            if (scores[i] > best) {
                best = scores[i];
                best_id = id;
                best_dim = i;
            }
        }
    }

    NormParamResult r;
    r.base = ws.evaluate(base, langs);
    auto run = [&](const std::string& label, MatrixId id, std::size_t dim) {
        for (auto mode : {NormPerturb::reset_to_one, NormPerturb::multiply}) {
            ParameterStore s = base;
            perturb_norm_param(s, id, dim, mode, cfg.norm_factor);
            r.rows.push_back(NormPerturbRow{label, id, dim, mode, ws.evaluate(s, langs)});
        }
    };
    run("top", best_id, best_dim);
    std::mt19937_64 rng(ws.derived_seed("random-norm"));
    std::uniform_int_distribution<std::size_t> pick_norm(0, norms.size() - 1), pick_dim(0, mc.dim - 1);
    for (std::size_t t = 0; t < cfg.random_trials; ++t) {
        MatrixId id = norms[pick_norm(rng)];
        std::size_t dim = pick_dim(rng);
        if (id == best_id && dim == best_dim) dim = (dim + 1) % mc.dim;
        run("random", id, dim);
    }
    return r;
}

OutlierResult outlier_ablation(Workspace& ws) {
    const auto& cfg = ws.config();
    const auto langs = ws.training_languages();
    const ParameterStore& base = ws.base();
    const ImportanceMap& map = ws.merged_map(cfg.accum_steps.front());
    const RegionMask top_mask = select_ratio(map, cfg.dim_ratio, SelectMode::top);
    OutlierResult r;
    r.base = ws.evaluate(base, langs);
    r.outlier = rank_residual_dims(top_mask, map).front();

    // Every residual-stream line the preset removes along, at the outlier index.
    DimRemovalSpec outlier_lines;
    for (const auto& t : preset_targets(base.config(), cfg.dim_preset)) {
        if (is_residual_axis(t.matrix.kind, t.axis)) outlier_lines.removals.push_back({t.matrix, t.axis, r.outlier});
    }
    const RegionMask excluded = dims_to_mask(base.config(), outlier_lines);
    const std::vector<std::size_t> skip{r.outlier};

    for (std::size_t count : cfg.dim_counts) {
        const auto with = rank_dims(top_mask, map, cfg.dim_preset, Tier::top, count);
        const auto without = rank_dims(top_mask, map, cfg.dim_preset, Tier::top, count, skip);
        const RegionMask without_mask = dims_to_mask(base.config(), without);
        ws.keep(without_mask, "outlier-without-" + std::to_string(count));
        OutlierCell cell;
        cell.count = count;
        cell.disjoint = mask_intersection(without_mask, excluded).count() == 0;
        ParameterStore a = base, b = base;
        remove_dims(a, with);
        remove_dims(b, without);
        cell.with_outlier = ws.evaluate(a, langs);
        cell.without_outlier = ws.evaluate(b, langs);
        r.cells.push_back(std::move(cell));
    }
    return r;
}

namespace {

struct MonoRegion {
    RegionMask region;
    std::vector<RegionMask> others;
};

MonoRegion build_monolingual(Workspace& ws, std::string_view target, double ratio, std::size_t steps) {
    MonoRegion out;
    const RegionMask own = select_ratio(ws.language_map(target, steps), ratio, SelectMode::top);
    for (const auto& l : ws.training_languages()) {
        if (l == target) continue;
        const ImportanceMap& m = ws.language_map(l, steps);
        out.others.push_back(select_ratio(m, ratio, SelectMode::top));
        out.others.push_back(select_ratio(m, ratio, SelectMode::bottom));
    }
    out.region = dedup(own, out.others);
    out.region.provenance().source = std::string(target);
    return out;
}

}  // namespace

RegionMask monolingual_region(Workspace& ws, std::string_view target, double ratio, std::size_t accum_steps) {
    return build_monolingual(ws, target, ratio, accum_steps).region;
}

MonolingualResult monolingual(Workspace& ws) {
    const auto& cfg = ws.config();
    MonolingualResult r;
    r.base = ws.base_ppl();
    const auto langs = ws.all_languages();
    for (const auto& target : cfg.mono_targets) {
        if (!ws.language(target).training) {
            throw std::invalid_argument("monolingual target '" + target + "' is not a training language");
        }
        MonoRegion mono = build_monolingual(ws, target, cfg.mono_ratio, cfg.accum_steps.front());
        ws.keep(mono.region, "mono-" + target);
        MonolingualCell cell;
        cell.target = target;
        cell.sibling = ws.sibling_of(target);
        cell.unrelated = ws.unrelated_to(target);
        cell.region_size = mono.region.count();
        cell.disjoint = std::all_of(mono.others.begin(), mono.others.end(), [&](const RegionMask& o) {
            return mask_intersection(mono.region, o).count() == 0;
        });
        cell.removed = ws.evaluate(zeroed(ws.base(), mono.region), langs);
        r.cells.push_back(std::move(cell));
    }
    return r;
}

FreezeCfResult freeze_cf(Workspace& ws) {
    const auto& cfg = ws.config();
    FreezeCfResult r;
    r.target = cfg.cf_target;
    ws.language(r.target);
    for (const auto& l : ws.training_languages()) {
        if (l != r.target) r.nontarget.push_back(l);
    }
    std::vector<std::string> langs{r.target};
    langs.insert(langs.end(), r.nontarget.begin(), r.nontarget.end());
    const auto evals = ws.eval_sets(langs);
    const RegionMask top = select_ratio(ws.merged_map(cfg.accum_steps.front()), cfg.cf_ratio, SelectMode::top);
    ws.keep(top, "freeze-cf-top");
    TrainConfig t = ws.finetune_config(cfg.cf_lr, cfg.cf_steps);
    t.checkpoints = cfg.cf_checkpoints;
    t.seed = ws.derived_seed("freeze-cf");
    TrainResult full = finetune(ws.base(), ws.finetune_corpus(r.target), t, nullptr, evals);
    TrainResult frozen = finetune(ws.base(), ws.finetune_corpus(r.target), t, &top, evals);
    ws.keep(full.store, "freeze-cf-full");
    ws.keep(frozen.store, "freeze-cf-frozen");
    r.full = std::move(full.record);
    r.frozen = std::move(frozen.record);
    return r;
}

VizOutput visualize(Workspace& ws, const fs::path& out_dir) {
    const auto& cfg = ws.config();
    const ModelConfig& mc = ws.base().config();
    const RegionMask top = select_ratio(ws.merged_map(cfg.accum_steps.front()), cfg.viz_ratio, SelectMode::top);
    ws.keep(top, "viz-top");
    VizOutput out;
    std::ostringstream manifest;
    manifest << "format=lingreg-density\nversion=" << kFormatVersion << '\n'
             << "statistic=fraction of region members among in-bounds 3x3 neighbours, self included\n"
             << "normalization=divide by the number of in-bounds neighbours (9 interior, 6 edge, 4 corner)\n"
             << "ratio=" << format_double(cfg.viz_ratio) << '\n';
    for (std::size_t l = 0; l < mc.layers; ++l) {
        if (cfg.viz_layer >= 0 && static_cast<int>(l) != cfg.viz_layer) continue;
        for (MatrixKind k : kLayerKinds) {
            if (!is_weight_matrix(k)) continue;
            const MatrixId id{static_cast<int>(l), k};
            DensityMap raw = neighborhood_density(top, id);
            const double density =
                static_cast<double>(top.matrix(id).count()) / static_cast<double>(top.matrix(id).size());
            out.density_error = std::max(out.density_error, std::abs(raw.mean() - density));
            DensityMap shown = viz_density(top, id, cfg.viz_block);
            write_pgm(shown, out_dir / (id.name() + ".pgm"));
            write_density_csv(shown, out_dir / (id.name() + ".csv"));
            manifest << "matrix=" << id.name() << ' ' << shown.rows << ' ' << shown.cols << " block=" << shown.block
                     << " density=" << format_double(density) << '\n';
            out.maps.push_back(std::move(shown));
        }
    }
    fs::create_directories(out_dir);
    std::ofstream(out_dir / "density.manifest") << manifest.str();
    return out;
}

// --- tables -------------------------------------------------------------------

namespace {

class Table {
public:
    explicit Table(std::vector<std::string> header) : header_(std::move(header)) {}

    void add(std::vector<std::string> row) {
        if (row.size() != header_.size()) throw std::logic_error("table row width mismatch");
        rows_.push_back(std::move(row));
    }

    void write(const fs::path& path) const {
        fs::create_directories(path.parent_path());
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw ArtifactError("cannot write " + path.string());
        out << join_strings(header_) << '\n';
        for (const auto& r : rows_) out << join_strings(r) << '\n';
    }

private:
    std::vector<std::string> header_;
    std::vector<std::vector<std::string>> rows_;
};

// Non-finite metrics are written as-is and reported once per cell.
std::string metric(double v, const std::string& where) {
    if (!std::isfinite(v)) std::cerr << "warning: non-finite metric in " << where << '\n';
    return format_double(v);
}

std::string seed_str(const Workspace& ws) { return std::to_string(ws.seed()); }

void write_core(Workspace& ws, Table& t) {
    const auto langs = ws.training_languages();
    for (const auto& c : core_region(ws)) {
        auto emit = [&](const std::string& lang, double b, double top, double bottom, double rnd) {
            const std::string where = "core-region ratio " + format_double(c.ratio) + " " + lang;
            t.add({seed_str(ws), format_double(c.ratio), std::to_string(c.accum_steps * ws.config().batch_size),
                   lang, metric(b, where), metric(top, where), metric(bottom, where), metric(rnd, where)});
        };
        for (const auto& l : langs) emit(l, c.base.at(l), c.top.at(l), c.bottom.at(l), c.random.at(l));
        emit("geomean", geomean(c.base, langs), geomean(c.top, langs), geomean(c.bottom, langs),
             geomean(c.random, langs));
    }
}

void write_relearn(Workspace& ws, Table& t) {
    const RelearnResult r = relearn(ws);
    for (const auto& l : ws.all_languages()) {
        const std::string role = l == r.a ? "trained" : l == r.b ? "held" : "other";
        t.add({seed_str(ws), l, role, metric(r.base.at(l), "relearn"), metric(r.zeroed.at(l), "relearn"),
               metric(r.frozen.at(l), "relearn"), metric(r.unfrozen.at(l), "relearn")});
    }
}

void write_dims(Workspace& ws, Table& t) {
    const auto langs = ws.training_languages();
    const DimsResult r = dims(ws);
    const std::string preset(preset_name(ws.config().dim_preset));
    for (const auto& c : r.cells) {
        for (const auto& l : langs) {
            t.add({seed_str(ws), preset, std::to_string(c.count), c.tier, l, metric(r.base.at(l), "dims"),
                   metric(c.ppl.at(l), "dims")});
        }
        t.add({seed_str(ws), preset, std::to_string(c.count), c.tier, "geomean",
               metric(geomean(r.base, langs), "dims"), metric(geomean(c.ppl, langs), "dims")});
    }
}

void write_single_dim(Workspace& ws, Table& t, Table& gen) {
    const auto langs = ws.training_languages();
    const SingleDimResult r = single_dim(ws);
    auto emit = [&](const std::string& variant, std::size_t dim, const PplRow& row) {
        for (const auto& l : langs) {
            t.add({seed_str(ws), variant, std::to_string(dim), l, metric(r.base.at(l), "single-dim"),
                   metric(row.at(l), "single-dim")});
        }
        t.add({seed_str(ws), variant, std::to_string(dim), "geomean", metric(geomean(r.base, langs), "single-dim"),
               metric(geomean(row, langs), "single-dim")});
    };
    emit("top", r.top_dim, r.top);
    for (std::size_t i = 0; i < r.random.size(); ++i) emit("random", r.random_dims[i], r.random[i]);
    auto emit_gen = [&](const std::string& variant, const GenerationStats& g) {
        for (std::size_t i = 0; i < g.outputs.size(); ++i) {
            std::string toks;
            for (std::size_t j = 0; j < g.outputs[i].size(); ++j) {
                if (j) toks += ' ';
                toks += std::to_string(g.outputs[i][j]);
            }
            gen.add({seed_str(ws), variant, std::to_string(i), format_double(g.repetition), toks});
        }
    };
    emit_gen("base", r.base_gen);
    emit_gen("top-perturbed", r.top_gen);
}

void write_norm(Workspace& ws, Table& t) {
    const auto langs = ws.training_languages();
    const NormParamResult r = norm_param(ws);
    for (const auto& row : r.rows) {
        const std::string mode = row.mode == NormPerturb::reset_to_one
                                     ? "reset-to-1"
                                     : "multiply-" + format_double(ws.config().norm_factor);
        t.add({seed_str(ws), row.label, row.norm.name(), std::to_string(row.dim), mode,
               metric(geomean(r.base, langs), "norm-param"), metric(geomean(row.ppl, langs), "norm-param")});
    }
}

void write_outlier(Workspace& ws, Table& t) {
    const auto langs = ws.training_languages();
    const OutlierResult r = outlier_ablation(ws);
    for (const auto& c : r.cells) {
        for (auto [variant, row] : {std::pair<std::string, const PplRow*>{"with", &c.with_outlier},
                                    std::pair<std::string, const PplRow*>{"without", &c.without_outlier}}) {
            t.add({seed_str(ws), std::to_string(r.outlier), std::to_string(c.count), variant,
                   c.disjoint ? "true" : "false", metric(geomean(r.base, langs), "outlier-ablation"),
                   metric(geomean(*row, langs), "outlier-ablation")});
        }
    }
}

void write_mono(Workspace& ws, Table& t) {
    const MonolingualResult r = monolingual(ws);
    for (const auto& c : r.cells) {
        for (const auto& l : ws.all_languages()) {
            std::string rel = "unrelated";
            if (l == c.target) rel = "self";
            else if (c.sibling && l == *c.sibling) rel = "sibling";
            const double base = r.base.at(l), removed = c.removed.at(l);
            t.add({seed_str(ws), c.target, std::to_string(c.region_size), c.disjoint ? "true" : "false", l, rel,
                   metric(base, "monolingual"), metric(removed, "monolingual"), format_double(removed / base)});
        }
    }
}

void write_cf(Workspace& ws, Table& t) {
    const FreezeCfResult r = freeze_cf(ws);
    for (auto [variant, rec] : {std::pair<std::string, const RunRecord*>{"full", &r.full},
                                std::pair<std::string, const RunRecord*>{"frozen", &r.frozen}}) {
        const PplRow& first = rec->checkpoints.front().ppl;
        for (const auto& cp : rec->checkpoints) {
            t.add({seed_str(ws), variant, std::to_string(cp.step), std::to_string(cp.sequences_seen),
                   metric(first.at(r.target), "freeze-cf"), metric(cp.ppl.at(r.target), "freeze-cf"),
                   metric(geomean(first, r.nontarget), "freeze-cf"),
                   metric(geomean(cp.ppl, r.nontarget), "freeze-cf")});
        }
    }
}

}  // namespace

std::vector<fs::path> run_experiment(const ExperimentConfig& config) {
    config.validate();
    const fs::path root = config.out_dir / config.name;
    fs::create_directories(root);
    std::ofstream(root / "config.txt") << config.to_kv().dump();

    std::vector<fs::path> written;
    auto finish = [&](const Table& t, const std::string& file) {
        t.write(root / file);
        written.push_back(root / file);
    };

    Table core({"seed", "ratio", "samples", "language", "base", "top", "bottom", "random"});
    Table relearn_t({"seed", "language", "role", "base", "zeroed", "freeze_relearn", "unfreeze_relearn"});
    Table dims_t({"seed", "preset", "count", "tier", "language", "base", "removed"});
    Table single({"seed", "variant", "dim", "language", "base", "perturbed"});
    Table gen({"seed", "variant", "prompt", "repetition_mean", "tokens"});
    Table norm({"seed", "label", "norm", "dim", "mode", "base", "perturbed"});
    Table outlier({"seed", "outlier_dim", "count", "variant", "disjoint", "base", "removed"});
    Table mono({"seed", "target", "region_size", "disjoint", "language", "relation", "base", "removed",
                "ratio_to_base"});
    Table cf({"seed", "variant", "step", "sequences", "base_target", "target", "base_nontarget",
              "nontarget_geomean"});

    for (std::uint64_t seed : config.seeds) {
        Workspace ws(config, seed);
        const fs::path artifacts = root / ("seed" + std::to_string(seed));
        ws.set_artifact_dir(artifacts);
        const auto& n = config.name;
        if (n == "core-region") write_core(ws, core);
        else if (n == "relearn") write_relearn(ws, relearn_t);
        else if (n == "dims") write_dims(ws, dims_t);
        else if (n == "single-dim") write_single_dim(ws, single, gen);
        else if (n == "norm-param") write_norm(ws, norm);
        else if (n == "outlier-ablation") write_outlier(ws, outlier);
        else if (n == "monolingual") write_mono(ws, mono);
        else if (n == "freeze-cf") write_cf(ws, cf);
        else if (n == "visualize") visualize(ws, artifacts / "density");
    }

    const auto& n = config.name;
    if (n == "core-region") finish(core, "core-region.csv");
    else if (n == "relearn") finish(relearn_t, "relearn.csv");
    else if (n == "dims") finish(dims_t, "dims.csv");
    else if (n == "single-dim") {
        finish(single, "single-dim.csv");
        finish(gen, "generation.csv");
    } else if (n == "norm-param") finish(norm, "norm-param.csv");
    else if (n == "outlier-ablation") finish(outlier, "outlier-ablation.csv");
    else if (n == "monolingual") finish(mono, "monolingual.csv");
    else if (n == "freeze-cf") finish(cf, "freeze-cf.csv");
    return written;
}

}  // namespace lingreg
