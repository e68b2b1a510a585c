// SPDX-License-Identifier: Apache-2.0
//
// Scripted experiments over a shared per-seed workspace.
//
// A Workspace owns the synthetic suite, its corpora, the pre-trained base
// checkpoint and the per-language importance maps for one seed. Expensive
// artifacts are cached on disk under a directory keyed by every setting that
// influences them, so experiments that share a seed reuse one pre-training run.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lingreg/config.hpp"
#include "lingreg/corpus.hpp"
#include "lingreg/density.hpp"
#include "lingreg/importance.hpp"
#include "lingreg/mask.hpp"
#include "lingreg/model.hpp"
#include "lingreg/regions.hpp"
#include "lingreg/trainer.hpp"

namespace lingreg {

inline constexpr std::string_view kExperimentNames[] = {"core-region", "relearn",     "dims",
                                                        "single-dim",  "norm-param",  "outlier-ablation",
                                                        "monolingual", "freeze-cf",   "visualize"};

struct ExperimentConfig {
    std::string name = "core-region";
    std::filesystem::path out_dir = "runs";
    ModelConfig model;
    SuiteOptions suite;
    std::uint64_t suite_seed = 7;
    std::vector<std::uint64_t> seeds{1};

    std::size_t train_sequences = 20000;  // per language, pre-training
    std::size_t finetune_sequences = 2000;
    std::size_t eval_sequences = 500;
    std::size_t batch_size = 16;
    std::size_t pretrain_steps = 1500;
    double pretrain_lr = 3e-3;
    std::size_t pretrain_checkpoints = 10;

    std::vector<std::size_t> accum_steps{200};  // one merged map per entry
    double accum_lr = 3e-4;
    bool normalize_maps = false;

    std::vector<double> ratios{0.01, 0.03, 0.05};

    DimPreset dim_preset = DimPreset::heads_and_ffn;
    std::vector<std::size_t> dim_counts{1, 3, 5};
    double dim_ratio = 0.05;
    std::size_t random_trials = 3;

    double norm_factor = 10.0;
    std::size_t prompt_count = 8;
    std::size_t prompt_len = 8;
    std::size_t generate_new = 24;

    double relearn_ratio = 0.01;
    std::string relearn_a = "t0";
    std::string relearn_b = "t1";
    double relearn_lr = 3e-4;
    std::size_t relearn_steps = 300;

    double mono_ratio = 0.01;
    std::vector<std::string> mono_targets{"t0", "t1"};

    double cf_ratio = 0.05;
    std::string cf_target = "t0";
    double cf_lr = 3e-3;
    std::size_t cf_steps = 300;
    std::size_t cf_checkpoints = 10;

    std::optional<std::filesystem::path> base_checkpoint;  // skip pre-training

    double viz_ratio = 0.05;
    std::size_t viz_block = 1;
    int viz_layer = -1;  // -1: every layer

    /// Unknown keys are rejected.
    static ExperimentConfig from(const KeyValues& kv);
    static std::vector<std::string> known_keys();
    KeyValues to_kv() const;
    void validate() const;
};

using PplRow = std::map<std::string, double>;

/// exp(mean log ppl) over `langs`.
double geomean(const PplRow& row, std::span<const std::string> langs);

class Workspace {
public:
    Workspace(ExperimentConfig config, std::uint64_t seed);

    const ExperimentConfig& config() const { return config_; }
    std::uint64_t seed() const { return seed_; }
    const std::filesystem::path& dir() const { return dir_; }
    std::span<const LanguageSpec> suite() const { return suite_; }
    const LanguageSpec& language(std::string_view name) const { return find_language(suite_, name); }

    std::vector<std::string> training_languages() const;
    std::vector<std::string> all_languages() const;
    /// Languages outside the family of `target` (its sibling/parent excluded).
    std::vector<std::string> unrelated_to(std::string_view target) const;
    std::optional<std::string> sibling_of(std::string_view target) const;

    const Corpus& train_corpus(std::string_view lang);
    const Corpus& finetune_corpus(std::string_view lang);
    const Corpus& eval_corpus(std::string_view lang);
    std::vector<EvalSet> eval_sets(std::span<const std::string> langs);
    double unigram_ppl(std::string_view lang);

    const ParameterStore& base();
    const RunRecord& base_record();
    const PplRow& base_ppl();

    const ImportanceMap& language_map(std::string_view lang, std::size_t steps);
    const ImportanceMap& merged_map(std::size_t steps);

    PplRow evaluate(const ParameterStore& store, std::span<const std::string> langs);
    PplRow evaluate(const ParameterStore& store) { return evaluate(store, all_languages()); }

    /// Seed for a named random choice, derived from the workspace seed.
    std::uint64_t derived_seed(std::string_view purpose) const;

    TrainConfig finetune_config(double lr, std::size_t steps) const;

    /// When set, experiments save their masks and modified checkpoints here.
    void set_artifact_dir(std::filesystem::path dir) { artifacts_ = std::move(dir); }
    void keep(const RegionMask& mask, const std::string& name) const;
    void keep(const ParameterStore& store, const std::string& name) const;

private:
    ExperimentConfig config_;
    std::uint64_t seed_;
    std::filesystem::path dir_;
    std::string key_;
    std::vector<LanguageSpec> suite_;
    std::map<std::string, Corpus, std::less<>> train_, finetune_, eval_;
    std::map<std::string, double, std::less<>> unigram_;
    std::optional<ParameterStore> base_;
    std::optional<RunRecord> base_record_;
    std::optional<PplRow> base_ppl_;
    std::map<std::pair<std::string, std::size_t>, ImportanceMap> maps_;
    std::map<std::size_t, ImportanceMap> merged_;
    std::optional<std::filesystem::path> artifacts_;

    const Corpus& corpus(std::map<std::string, Corpus, std::less<>>& cache, std::string_view lang,
                         std::size_t count, std::uint64_t salt);
};

// --- experiment outputs -----------------------------------------------------

struct CoreRegionCell {
    double ratio = 0;
    std::size_t accum_steps = 0;
    PplRow base, top, bottom, random;
};
std::vector<CoreRegionCell> core_region(Workspace& ws);

struct RelearnResult {
    std::string a, b;
    PplRow base, zeroed, frozen, unfrozen;
    RunRecord frozen_record, unfrozen_record;
};
RelearnResult relearn(Workspace& ws);

struct DimsCell {
    std::size_t count = 0;
    std::string tier;  // top / middle / bottom / random
    PplRow ppl;        // random: geometric mean over trials per language
};
struct DimsResult {
    PplRow base;
    std::vector<DimsCell> cells;
};
DimsResult dims(Workspace& ws);

struct GenerationStats {
    double repetition = 0;  // mean repetition rate of the continuations
    std::vector<Sequence> outputs;
};
struct SingleDimResult {
    PplRow base;
    std::size_t top_dim = 0;
    PplRow top;
    std::vector<std::size_t> random_dims;
    std::vector<PplRow> random;
    GenerationStats base_gen, top_gen;
};
SingleDimResult single_dim(Workspace& ws);

struct NormPerturbRow {
    std::string label;  // top / random
    MatrixId norm;
    std::size_t dim = 0;
    NormPerturb mode = NormPerturb::reset_to_one;
    PplRow ppl;
};
struct NormParamResult {
    PplRow base;
    std::vector<NormPerturbRow> rows;
};
NormParamResult norm_param(Workspace& ws);

struct OutlierCell {
    std::size_t count = 0;
    PplRow with_outlier, without_outlier;
    bool disjoint = false;  // w/o mask never touches the excluded dimension
};
struct OutlierResult {
    std::size_t outlier = 0;
    PplRow base;
    std::vector<OutlierCell> cells;
};
OutlierResult outlier_ablation(Workspace& ws);

struct MonolingualCell {
    std::string target;
    std::optional<std::string> sibling;
    std::vector<std::string> unrelated;
    std::size_t region_size = 0;
    bool disjoint = false;  // region shares nothing with the subtracted masks
    PplRow removed;
};
struct MonolingualResult {
    PplRow base;
    std::vector<MonolingualCell> cells;
};
MonolingualResult monolingual(Workspace& ws);

/// S*_l: the top region of `target` minus every other training language's
/// top and bottom regions at the same ratio.
RegionMask monolingual_region(Workspace& ws, std::string_view target, double ratio, std::size_t accum_steps);

struct FreezeCfResult {
    std::string target;
    std::vector<std::string> nontarget;
    RunRecord full, frozen;
};
FreezeCfResult freeze_cf(Workspace& ws);

struct VizOutput {
    std::vector<DensityMap> maps;
    double density_error = 0;  // worst |map mean - mask density| over emitted matrices
};
VizOutput visualize(Workspace& ws, const std::filesystem::path& out_dir);

/// Runs `config.name` for every configured seed and writes the CSV tables and
/// intermediate artifacts under out_dir/<name>/. Returns the table paths.
std::vector<std::filesystem::path> run_experiment(const ExperimentConfig& config);

}  // namespace lingreg
