// SPDX-License-Identifier: Apache-2.0
//
// lingreg: command-line front end for region localisation experiments.

#include <cmath>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lingreg/artifact_io.hpp"
#include "lingreg/config.hpp"
#include "lingreg/density.hpp"
#include "lingreg/experiments.hpp"
#include "lingreg/regions.hpp"
#include "lingreg/runtime.hpp"
#include "lingreg/trainer.hpp"

namespace {

using namespace lingreg;

// Shared settings: --config FILE plus one long flag per config key. Flags win
// over the file.
struct Settings {
    std::string config_file;
    std::map<std::string, std::string> flags;

    void attach(CLI::App* cmd) {
        cmd->add_option("--config", config_file, "key=value settings file")->check(CLI::ExistingFile);
        for (const auto& key : ExperimentConfig::known_keys()) cmd->add_option("--" + key, flags[key]);
    }

    ExperimentConfig resolve(const std::string& experiment = {}) const {
        KeyValues kv = config_file.empty() ? KeyValues{} : KeyValues::load(config_file);
        for (const auto& [k, v] : flags) {
            if (!v.empty()) kv.set(k, v);
        }
        if (!experiment.empty() && !kv.has("experiment")) kv.set("experiment", experiment);
        return ExperimentConfig::from(kv);
    }
};

std::uint64_t first_seed(const ExperimentConfig& c) { return c.seeds.front(); }

Sequence parse_tokens(const std::string& text) {
    Sequence out;
    std::istringstream in(text);
    long v = 0;
    while (in >> v) {
        if (v < 0 || v > 65535) throw std::invalid_argument("token id out of range: " + std::to_string(v));
        out.push_back(static_cast<Token>(v));
    }
    if (!in.eof()) throw std::invalid_argument("prompt must be space separated token ids");
    return out;
}

// Language corpora either come from a file or are regenerated from the suite.
const Corpus& pick_corpus(Workspace& ws, const std::string& language, const std::string& file,
                          std::optional<Corpus>& holder, bool for_eval) {
    if (!file.empty()) {
        holder = load_corpus(file);
        return *holder;
    }
    if (language.empty()) throw std::invalid_argument("either --language or --corpus is required");
    return for_eval ? ws.eval_corpus(language) : ws.finetune_corpus(language);
}

DimRemovalSpec parse_spec(const std::string& text) {
    // layer0.ffn.down:col:5,layer1.attn.o:row:3
    DimRemovalSpec spec;
    for (const auto& item : split_list(text)) {
        const auto a = item.find(':');
        const auto b = item.rfind(':');
        if (a == std::string::npos || a == b) throw std::invalid_argument("bad removal '" + item + "'");
        spec.removals.push_back(DimRemoval{MatrixId::parse(item.substr(0, a)), parse_axis(item.substr(a + 1, b - a - 1)),
                                           parse_uint(item.substr(b + 1), "removal index")});
    }
    return spec;
}

}  // namespace

int main(int argc, char** argv) {
    tune_allocator();
    CLI::App app{"Linguistic region localisation in a micro decoder-only model"};
    app.require_subcommand(1);

    // pretrain
    Settings pre_s;
    std::string pre_out, pre_record, pre_corpora;
    auto* pre = app.add_subcommand("pretrain", "pre-train a base model on the training languages");
    pre_s.attach(pre);
    pre->add_option("--out-checkpoint", pre_out, "checkpoint path")->required();
    pre->add_option("--record", pre_record, "run record path (JSON lines)");
    pre->add_option("--save-corpora", pre_corpora, "directory for the generated training corpora");

    // importance
    Settings imp_s;
    std::string imp_ckpt, imp_lang, imp_out;
    std::vector<std::string> imp_merge;
    auto* imp = app.add_subcommand("importance", "accumulate |g*theta| over a further pre-training run, or merge maps");
    imp_s.attach(imp);
    imp->add_option("--checkpoint", imp_ckpt, "starting checkpoint");
    imp->add_option("--language", imp_lang, "language to train on");
    imp->add_option("--merge", imp_merge, "maps to sum instead of training");
    imp->add_option("--out-map", imp_out, "output map path")->required();

    // select
    std::string sel_map, sel_mode = "top", sel_out;
    double sel_ratio = 0.01;
    std::uint64_t sel_seed = 1;
    auto* sel = app.add_subcommand("select", "build a ratio mask from an importance map");
    sel->add_option("--map", sel_map, "importance map")->required();
    sel->add_option("--ratio", sel_ratio, "fraction per matrix")->check(CLI::Range(0.0, 1.0));
    sel->add_option("--mode", sel_mode, "top, bottom or random")->check(CLI::IsMember({"top", "bottom", "random"}));
    sel->add_option("--seed", sel_seed, "seed for random selection");
    sel->add_option("--out-mask", sel_out, "output mask")->required();

    // dedup
    std::string dd_target, dd_out;
    std::vector<std::string> dd_others;
    auto* dd = app.add_subcommand("dedup", "subtract other regions from a target region");
    dd->add_option("--target", dd_target, "target mask")->required();
    dd->add_option("--others", dd_others, "masks to subtract");
    dd->add_option("--out-mask", dd_out, "output mask")->required();

    // ablate
    std::string ab_ckpt, ab_mask, ab_out;
    auto* ab = app.add_subcommand("ablate", "zero every coordinate of a mask");
    ab->add_option("--checkpoint", ab_ckpt)->required();
    ab->add_option("--mask", ab_mask)->required();
    ab->add_option("--out-checkpoint", ab_out)->required();

    // remove-dims
    std::string rd_ckpt, rd_mask, rd_map, rd_preset = "heads-ffn", rd_tier = "top", rd_spec, rd_out;
    std::size_t rd_count = 1;
    std::uint64_t rd_seed = 1;
    auto* rd = app.add_subcommand("remove-dims", "zero whole rows/columns");
    rd->add_option("--checkpoint", rd_ckpt)->required();
    rd->add_option("--mask", rd_mask, "region used to rank dimensions");
    rd->add_option("--map", rd_map, "importance map for tie-breaks");
    rd->add_option("--preset", rd_preset, "heads-ffn, heads, features or ffn");
    rd->add_option("--tier", rd_tier, "top, middle, bottom or random")
        ->check(CLI::IsMember({"top", "middle", "bottom", "random"}));
    rd->add_option("--count", rd_count, "dimensions per matrix");
    rd->add_option("--seed", rd_seed, "seed for the random tier");
    rd->add_option("--spec", rd_spec, "explicit list matrix:axis:index,...");
    rd->add_option("--out-checkpoint", rd_out)->required();

    // perturb-dim
    std::string pd_ckpt, pd_out;
    std::size_t pd_dim = 0;
    std::uint64_t pd_seed = 1;
    auto* pd = app.add_subcommand("perturb-dim", "redraw one residual dimension of attn.o and ffn.down");
    pd->add_option("--checkpoint", pd_ckpt)->required();
    pd->add_option("--dim", pd_dim)->required();
    pd->add_option("--seed", pd_seed);
    pd->add_option("--out-checkpoint", pd_out)->required();

    // perturb-norm
    std::string pn_ckpt, pn_norm, pn_mode = "reset", pn_out;
    std::size_t pn_dim = 0;
    double pn_factor = 10.0;
    auto* pn = app.add_subcommand("perturb-norm", "modify one scalar of a norm vector");
    pn->add_option("--checkpoint", pn_ckpt)->required();
    pn->add_option("--norm", pn_norm, "e.g. layer1.input-norm or final-norm")->required();
    pn->add_option("--dim", pn_dim)->required();
    pn->add_option("--mode", pn_mode)->check(CLI::IsMember({"reset", "multiply"}));
    pn->add_option("--factor", pn_factor);
    pn->add_option("--out-checkpoint", pn_out)->required();

    // finetune
    Settings ft_s;
    std::string ft_ckpt, ft_lang, ft_corpus, ft_freeze, ft_out, ft_record, ft_map;
    double ft_lr = 3e-4;
    std::size_t ft_steps = 200;
    auto* ft = app.add_subcommand("finetune", "further pre-training on one language");
    ft_s.attach(ft);
    ft->add_option("--checkpoint", ft_ckpt)->required();
    ft->add_option("--language", ft_lang);
    ft->add_option("--corpus", ft_corpus, "corpus file instead of a suite language");
    ft->add_option("--freeze", ft_freeze, "mask of coordinates that never move");
    ft->add_option("--lr", ft_lr);
    ft->add_option("--steps", ft_steps);
    ft->add_option("--out-checkpoint", ft_out)->required();
    ft->add_option("--record", ft_record);
    ft->add_option("--out-map", ft_map, "also accumulate importance into this map");

    // eval
    Settings ev_s;
    std::string ev_ckpt, ev_corpus;
    std::vector<std::string> ev_langs;
    auto* ev = app.add_subcommand("eval", "perplexity per language (CSV on stdout)");
    ev_s.attach(ev);
    ev->add_option("--checkpoint", ev_ckpt)->required();
    ev->add_option("--language", ev_langs, "languages (default: all)");
    ev->add_option("--corpus", ev_corpus, "corpus file instead of suite languages");

    // generate
    std::string gen_ckpt, gen_prompt;
    std::size_t gen_n = 16;
    auto* gen = app.add_subcommand("generate", "greedy continuation of a prompt");
    gen->add_option("--checkpoint", gen_ckpt)->required();
    gen->add_option("--prompt", gen_prompt, "space separated token ids")->required();
    gen->add_option("--n-new", gen_n);

    // experiment
    Settings ex_s;
    auto* ex = app.add_subcommand("experiment", "run a named experiment end to end");
    ex_s.attach(ex);

    // visualize
    std::string vz_mask, vz_matrix, vz_out;
    std::size_t vz_block = 1;
    auto* vz = app.add_subcommand("visualize", "3x3 neighbourhood density of one matrix of a mask");
    vz->add_option("--mask", vz_mask)->required();
    vz->add_option("--matrix", vz_matrix, "e.g. layer0.attn.q")->required();
    vz->add_option("--block", vz_block);
    vz->add_option("--out-prefix", vz_out, "writes PREFIX.pgm and PREFIX.csv")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (pre->parsed()) {
            const ExperimentConfig cfg = pre_s.resolve();
            Workspace ws(cfg, first_seed(cfg));
            std::vector<Corpus> corpora;
            for (const auto& l : ws.training_languages()) {
                corpora.push_back(ws.train_corpus(l));
                if (!pre_corpora.empty()) save_corpus(corpora.back(), std::filesystem::path(pre_corpora) / (l + ".corpus"));
            }
            TrainConfig t;
            t.lr = cfg.pretrain_lr;
            t.steps = cfg.pretrain_steps;
            t.batch_size = cfg.batch_size;
            t.seed = first_seed(cfg);
            t.checkpoints = cfg.pretrain_checkpoints;
            ModelConfig mc = cfg.model;
            mc.seed = first_seed(cfg);
            const auto langs = ws.all_languages();
            const TrainResult r = pretrain(init_model(mc), corpora, t, ws.eval_sets(langs));
            save_checkpoint(r.store, pre_out);
            if (!pre_record.empty()) {
                save_record(r.record, pre_record);
                write_record_summary(r.record, pre_record + ".csv");
            }
            std::cout << "final train loss " << r.record.train_loss.back() << '\n';
        } else if (imp->parsed()) {
            if (!imp_merge.empty()) {
                std::vector<ImportanceMap> maps;
                for (const auto& m : imp_merge) maps.push_back(load_importance(m));
                save_importance(merge(maps), imp_out);
            } else {
                if (imp_ckpt.empty() || imp_lang.empty()) {
                    throw std::invalid_argument("importance needs --checkpoint and --language (or --merge)");
                }
                const ExperimentConfig cfg = imp_s.resolve();
                Workspace ws(cfg, first_seed(cfg));
                TrainConfig t = ws.finetune_config(cfg.accum_lr, cfg.accum_steps.front());
                t.accumulate_importance = true;
                t.checkpoints = 0;
                const TrainResult r = finetune(load_checkpoint(imp_ckpt), ws.finetune_corpus(imp_lang), t);
                save_importance(*r.importance, imp_out);
            }
        } else if (sel->parsed()) {
            const ImportanceMap map = load_importance(sel_map);
            RegionMask m = sel_mode == "random" ? select_random(map.config(), sel_ratio, sel_seed)
                                                : select_ratio(map, sel_ratio,
                                                               sel_mode == "top" ? SelectMode::top : SelectMode::bottom);
            m.provenance().source = sel_map;
            save_mask(m, sel_out);
            std::cout << "selected " << m.count() << " coordinates\n";
        } else if (dd->parsed()) {
            std::vector<RegionMask> others;
            for (const auto& o : dd_others) others.push_back(load_mask(o));
            RegionMask out = dedup(load_mask(dd_target), others);
            save_mask(out, dd_out);
            std::cout << "kept " << out.count() << " coordinates\n";
        } else if (ab->parsed()) {
            ParameterStore s = load_checkpoint(ab_ckpt);
            apply_zero(s, load_mask(ab_mask));
            save_checkpoint(s, ab_out);
        } else if (rd->parsed()) {
            ParameterStore s = load_checkpoint(rd_ckpt);
            DimRemovalSpec spec;
            if (!rd_spec.empty()) {
                spec = parse_spec(rd_spec);
            } else if (rd_tier == "random") {
                spec = random_dims(s.config(), parse_preset(rd_preset), rd_count, rd_seed);
            } else {
                if (rd_mask.empty() || rd_map.empty()) throw std::invalid_argument("ranked removal needs --mask and --map");
                const Tier tier = rd_tier == "top" ? Tier::top : rd_tier == "middle" ? Tier::middle : Tier::bottom;
                spec = rank_dims(load_mask(rd_mask), load_importance(rd_map), parse_preset(rd_preset), tier, rd_count);
            }
            remove_dims(s, spec);
            save_checkpoint(s, rd_out);
            for (const auto& r : spec.removals) {
                std::cout << r.matrix.name() << ':' << axis_name(r.axis) << ':' << r.index << '\n';
            }
        } else if (pd->parsed()) {
            ParameterStore s = load_checkpoint(pd_ckpt);
            perturb_dim(s, pd_dim, pd_seed);
            save_checkpoint(s, pd_out);
        } else if (pn->parsed()) {
            ParameterStore s = load_checkpoint(pn_ckpt);
            perturb_norm_param(s, MatrixId::parse(pn_norm), pn_dim,
                               pn_mode == "reset" ? NormPerturb::reset_to_one : NormPerturb::multiply, pn_factor);
            save_checkpoint(s, pn_out);
        } else if (ft->parsed()) {
            const ExperimentConfig cfg = ft_s.resolve();
            Workspace ws(cfg, first_seed(cfg));
            std::optional<Corpus> holder;
            const Corpus& corpus = pick_corpus(ws, ft_lang, ft_corpus, holder, false);
            TrainConfig t = ws.finetune_config(ft_lr, ft_steps);
            t.accumulate_importance = !ft_map.empty();
            std::optional<RegionMask> freeze;
            if (!ft_freeze.empty()) freeze = load_mask(ft_freeze);
            const auto langs = ws.all_languages();
            const TrainResult r = finetune(load_checkpoint(ft_ckpt), corpus, t, freeze ? &*freeze : nullptr,
                                           ws.eval_sets(langs));
            save_checkpoint(r.store, ft_out);
            if (!ft_record.empty()) {
                save_record(r.record, ft_record);
                write_record_summary(r.record, ft_record + ".csv");
            }
            if (r.importance) save_importance(*r.importance, ft_map);
        } else if (ev->parsed()) {
            const ExperimentConfig cfg = ev_s.resolve();
            Workspace ws(cfg, first_seed(cfg));
            const ParameterStore s = load_checkpoint(ev_ckpt);
            std::cout << "language,ppl\n";
            if (!ev_corpus.empty()) {
                const Corpus c = load_corpus(ev_corpus);
                std::cout << c.language_name << ',' << format_double(eval_ppl(s, c)) << '\n';
            } else {
                const auto langs = ev_langs.empty() ? ws.all_languages() : ev_langs;
                for (const auto& l : langs) std::cout << l << ',' << format_double(eval_ppl(s, ws.eval_corpus(l))) << '\n';
            }
        } else if (gen->parsed()) {
            const Sequence out = generate(load_checkpoint(gen_ckpt), parse_tokens(gen_prompt), gen_n);
            for (std::size_t i = 0; i < out.size(); ++i) std::cout << (i ? " " : "") << out[i];
            std::cout << '\n';
        } else if (ex->parsed()) {
            const ExperimentConfig cfg = ex_s.resolve();
            for (const auto& p : run_experiment(cfg)) std::cout << p.string() << '\n';
        } else if (vz->parsed()) {
            const DensityMap m = viz_density(load_mask(vz_mask), MatrixId::parse(vz_matrix), vz_block);
            write_pgm(m, vz_out + ".pgm");
            write_density_csv(m, vz_out + ".csv");
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
