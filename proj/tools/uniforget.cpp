// uniforget: command-line front end for corpus synthesis, base training,
// mask pruning, retraining, sampling, evaluation and the full pipeline.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "uniforget/io.hpp"
#include "uniforget/pipeline.hpp"

namespace uf = uniforget;

namespace {

enum Exit : int { ok = 0, failure = 1, config = 2, numeric = 3, io = 4 };

void setup_logging() {
    auto logger = spdlog::stderr_color_mt("uniforget");
    logger->set_pattern("%H:%M:%S %^%l%$ %v");
    spdlog::set_default_logger(logger);
    spdlog::set_level(spdlog::level::info);
    if (const char* lvl = std::getenv("UNIFORGET_LOG")) {
        const auto parsed = spdlog::level::from_str(lvl);
        // from_str maps unknown names to "off"; only honour real names.
        if (parsed != spdlog::level::off || std::string(lvl) == "off") spdlog::set_level(parsed);
    }
}

uf::RunConfig config_or_default(const std::string& path) { return path.empty() ? uf::RunConfig{} : uf::load_run_config(path); }

std::uint64_t pick_seed(const uf::RunConfig& cfg, const std::optional<std::uint64_t>& seed) {
    return seed.value_or(cfg.seeds.front());
}

struct Args {
    std::string config, out, corpus, base, masks, weights, ckpt, level, log, figures, kinds;
    std::optional<std::uint64_t> seed;
    std::optional<double> beta;
    std::optional<int> k, dup;
    int condition = 0, n = 1, steps = 0;
};

void cmd_corpus(const Args& a) {
    auto cfg = config_or_default(a.config);
    auto cc = cfg.corpus_for(pick_seed(cfg, a.seed));
    if (a.k && *a.k != cc.n_exemplars) {
        cc.n_exemplars = *a.k;
        cc.trigger_ids.clear();
    }
    if (a.dup) cc.duplication = *a.dup;
    cc.validate();
    const auto corpus = uf::synth_corpus(cc);
    uf::save_corpus(a.out, corpus, cc);
    spdlog::info("corpus: {} rows, {} exemplars, rms norm {:.4f} -> {}", corpus.dataset.size(), corpus.registry.exemplars.size(),
                 corpus.registry.rms_norm, a.out);
}

void cmd_train_base(const Args& a) {
    const auto cfg = config_or_default(a.config);
    const auto corpus = uf::load_corpus(a.corpus);
    const auto spec = cfg.spec_for(corpus.dataset);
    const auto tc = cfg.train_for(pick_seed(cfg, a.seed));
    const auto res = uf::train_base(corpus.dataset, spec, tc);
    if (!a.log.empty()) uf::atomic_write(a.log, uf::train_loss_csv(res.log));
    uf::save_params(a.out, res.params, uf::json{{"conditions", uf::conditions_json(corpus.dataset)}, {"final_loss", res.log.final_loss()}});
    spdlog::info("train-base: {} steps, final loss {:.5f} -> {}", tc.steps, res.log.final_loss(), a.out);
}

void cmd_prune(const Args& a) {
    const auto cfg = config_or_default(a.config);
    uf::json meta;
    const auto base = uf::load_params(a.base, &meta);
    const auto neutral = uf::neutral_from_meta(meta);
    const double beta = a.beta.value_or(uf::beta_preset(a.level));
    auto pc = cfg.prune_for(pick_seed(cfg, a.seed), beta, a.kinds.empty() ? cfg.prune.kinds : uf::KindSet::parse(a.kinds));
    spdlog::info("prune: level {} beta {} kinds {}", a.level, beta, pc.kinds.to_string());
    const auto res = uf::prune(base, neutral, pc);
    if (!a.log.empty()) uf::atomic_write(a.log, res.log.csv());
    uf::save_masks(a.out, res.mask, uf::json{{"label", a.level}, {"beta", beta}});
    std::cout << uf::deactivation_csv(uf::deactivation_ratios(uf::load_masks(a.out)));
}

void cmd_retrain(const Args& a) {
    const auto cfg = config_or_default(a.config);
    uf::json meta;
    const auto base = uf::load_params(a.base, &meta);
    const auto mask = uf::load_masks(a.masks);
    auto pc = cfg.prune_for(pick_seed(cfg, a.seed), cfg.prune.beta, mask.enabled);
    const auto res = uf::retrain(base, mask, uf::neutral_from_meta(meta), pc);
    if (!a.log.empty()) uf::atomic_write(a.log, res.log.csv());
    meta["masks"] = a.masks;
    uf::save_params(a.out, res.params, meta);
    spdlog::info("retrain: reconstruction {:.5f} -> {:.5f}", res.log.rows.front().reconstruction, res.log.rows.back().reconstruction);
}

void cmd_sample(const Args& a) {
    uf::require(a.n >= 1, "sample: --n must be >= 1");
    uf::require(a.steps >= 1, "sample: --steps must be >= 1");
    const auto params = uf::load_params(a.ckpt);
    std::optional<uf::HardMask> hard;
    if (!a.masks.empty()) hard = uf::binarize(uf::load_masks(a.masks));
    uf::require(a.condition >= 0 && a.condition < params.spec.cond_vocab, "sample: condition id outside the model vocabulary");
    const std::uint64_t seed = a.seed.value_or(0);
    const auto set = uf::generate(params, hard ? &*hard : nullptr, uf::Condition{a.condition}, a.n, a.steps, seed);
    uf::write_json(a.out, uf::json{{"format_version", uf::format_version},
                                   {"condition", a.condition},
                                   {"n", a.n},
                                   {"seed", seed},
                                   {"sampler_steps", a.steps},
                                   {"masked", hard.has_value()},
                                   {"samples", uf::to_json(set)}});
}

void cmd_eval(const Args& a) {
    const auto cfg = config_or_default(a.config);
    const auto base = uf::load_params(a.base);
    const auto corpus = uf::load_corpus(a.corpus);
    std::vector<uf::EvalModel> models;
    if (!a.masks.empty()) {
        uf::json meta;
        auto mask = uf::load_masks(a.masks, &meta);
        const auto label = meta.value("label", std::string("masked"));
        if (a.weights.empty()) {
            models.push_back({label, base, mask});
        } else {
            models.push_back({"retrained_" + label, uf::load_params(a.weights), mask});
        }
    } else {
        uf::require(a.weights.empty(), "eval: --weights needs --masks");
    }
    const auto rep = uf::evaluate(base, corpus, models, cfg.eval, pick_seed(cfg, a.seed), a.figures);
    uf::write_json(a.out, uf::to_json(rep));
    for (const auto& [label, r] : rep.reproduction) spdlog::info("eval: reproduction[{}] = {:.4f}", label, r);
}

void cmd_pipeline(const Args& a) {
    const auto cfg = config_or_default(a.config);
    const auto res = uf::run_pipeline(cfg, a.out);
    std::cout << res.summary.dump(2) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    setup_logging();
    CLI::App app{"uniforget: de-memorization of a conditional flow model by learned pruning masks"};
    app.require_subcommand(1);
    Args a;

    auto* corpus = app.add_subcommand("corpus", "synthesize the planted-exemplar corpus");
    corpus->add_option("--config", a.config, "run config JSON (corpus section)");
    corpus->add_option("--out", a.out, "output directory")->required();
    corpus->add_option("--seed", a.seed, "corpus seed");
    corpus->add_option("--k", a.k, "number of exemplars K");
    corpus->add_option("--dup", a.dup, "duplication count D");

    auto* train = app.add_subcommand("train-base", "train the unmasked velocity model");
    train->add_option("--config", a.config, "run config JSON (model, train sections)");
    train->add_option("--corpus", a.corpus, "corpus directory")->required();
    train->add_option("--out", a.out, "output checkpoint")->required();
    train->add_option("--log", a.log, "training loss CSV");
    train->add_option("--seed", a.seed, "training seed");

    auto* prune = app.add_subcommand("prune", "learn pruning masks on neutral conditions");
    prune->add_option("--base", a.base, "base checkpoint")->required();
    prune->add_option("--level", a.level, "weak | medium | strong")->required()->check(CLI::IsMember({"weak", "medium", "strong"}));
    prune->add_option("--beta", a.beta, "explicit sparsity weight (overrides the level preset)");
    prune->add_option("--kinds", a.kinds, "comma-separated mask kinds (ffn,attn,norm)");
    prune->add_option("--out", a.out, "output mask checkpoint")->required();
    prune->add_option("--log", a.log, "objective log CSV");
    prune->add_option("--config", a.config, "run config JSON (prune section)");
    prune->add_option("--seed", a.seed, "pruning seed");

    auto* retrain = app.add_subcommand("retrain", "fine-tune weights under a fixed binarized mask");
    retrain->add_option("--base", a.base, "base checkpoint")->required();
    retrain->add_option("--masks", a.masks, "mask checkpoint")->required();
    retrain->add_option("--out", a.out, "output checkpoint")->required();
    retrain->add_option("--log", a.log, "reconstruction log CSV");
    retrain->add_option("--config", a.config, "run config JSON (prune section)");
    retrain->add_option("--seed", a.seed, "retraining seed");

    auto* sample = app.add_subcommand("sample", "draw z_N samples for one condition");
    sample->add_option("--ckpt", a.ckpt, "weights checkpoint")->required();
    sample->add_option("--masks", a.masks, "optional mask checkpoint (binarized)");
    sample->add_option("--condition", a.condition, "condition id")->required();
    sample->add_option("--n", a.n, "number of samples")->required();
    sample->add_option("--seed", a.seed, "sampling seed");
    sample->add_option("--steps", a.steps, "Euler steps N")->default_val(4);
    sample->add_option("--out", a.out, "output JSON")->required();

    auto* eval = app.add_subcommand("eval", "measure reproduction, decoupling, magnitude and quality");
    eval->add_option("--base", a.base, "base checkpoint")->required();
    eval->add_option("--masks", a.masks, "optional mask checkpoint");
    eval->add_option("--weights", a.weights, "optional retrained weights used with --masks");
    eval->add_option("--corpus", a.corpus, "corpus directory")->required();
    eval->add_option("--out", a.out, "report JSON")->required();
    eval->add_option("--figures", a.figures, "figure directory (SVG + CSV)");
    eval->add_option("--config", a.config, "run config JSON (eval section)");
    eval->add_option("--seed", a.seed, "evaluation seed");

    auto* pipeline = app.add_subcommand("pipeline", "run every stage for every seed (resumable)");
    pipeline->add_option("--config", a.config, "run config JSON; omitted fields take defaults");
    pipeline->add_option("--out", a.out, "output directory")->required();

    auto* defaults = app.add_subcommand("defaults", "print the default run config");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? Exit::ok : Exit::config;
    }

    try {
        if (*corpus) cmd_corpus(a);
        else if (*train) cmd_train_base(a);
        else if (*prune) cmd_prune(a);
        else if (*retrain) cmd_retrain(a);
        else if (*sample) cmd_sample(a);
        else if (*eval) cmd_eval(a);
        else if (*pipeline) cmd_pipeline(a);
        else if (*defaults) std::cout << uf::to_json(uf::RunConfig{}).dump(2) << "\n";
    } catch (const uf::ConfigError& e) {
        spdlog::error("config: {}", e.what());
        return Exit::config;
    } catch (const uf::NumericError& e) {
        spdlog::error("numeric: {}", e.what());
        return Exit::numeric;
    } catch (const uf::IoError& e) {
        spdlog::error("io: {}", e.what());
        return Exit::io;
    } catch (const std::filesystem::filesystem_error& e) {
        spdlog::error("io: {}", e.what());
        return Exit::io;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return Exit::failure;
    }
    return Exit::ok;
}
