#pragma once

#include <chrono>
#include <csignal>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <fcntl.h>
#include <sys/types.h>
#include <unistd.h>

#include <spdlog/spdlog.h>

#include "uniforget/analysis.hpp"
#include "uniforget/figures.hpp"
#include "uniforget/flownet.hpp"
#include "uniforget/io.hpp"
#include "uniforget/maskengine.hpp"
#include "uniforget/memoria.hpp"
#include "uniforget/pruner.hpp"

namespace uniforget {

struct EvalConfig {
    double tau_rel = 0.1;
    int n_per_trigger = 50;
    int n_per_neutral = 100;
    int sampler_steps = 4;
    int holdout_per_condition = 100;

    void validate() const {
        require(tau_rel > 0.0, "eval: tau_rel must be > 0");
        require(n_per_trigger >= 1 && n_per_neutral >= 1 && holdout_per_condition >= 1, "eval: sample counts must be >= 1");
        require(sampler_steps >= 1, "eval: sampler_steps must be >= 1");
    }
};

/// Everything one `pipeline` invocation needs. Per-seed configs are derived by
/// substituting each entry of `seeds` into the corpus, train and prune seeds.
struct RunConfig {
    std::vector<std::uint64_t> seeds{1, 2, 3};
    CorpusConfig corpus;
    ModelSpec model;
    bool auto_data_scale = true;  // data_scale taken from the corpus
    TrainConfig train;
    PruneConfig prune;
    std::map<std::string, double> levels{{"weak", beta_preset(DememorizationLevel::weak)},
                                         {"medium", beta_preset(DememorizationLevel::medium)},
                                         {"strong", beta_preset(DememorizationLevel::strong)}};
    KindSet ablation_kinds{MaskKind::attn};
    std::string ablation_level = "medium";
    std::vector<std::string> retrain_levels{"strong"};
    EvalConfig eval;

    void validate() const {
        require(!seeds.empty(), "run config: seeds must not be empty");
        corpus.validate();
        model.validate();
        train.validate();
        prune.validate();
        eval.validate();
        require(model.latent_dim == corpus.dim, "run config: model.latent_dim must equal corpus.dim");
        require(model.cond_vocab >= corpus.vocab_size(), "run config: model.cond_vocab does not cover every condition id");
        require(!levels.empty(), "run config: levels must not be empty");
        for (const auto& [name, beta] : levels) {
            parse_level(name);
            require(beta >= 0.0, "run config: level beta must be >= 0");
        }
        require(levels.count(ablation_level) == 1, "run config: ablation level '" + ablation_level + "' is not in levels");
        require(!ablation_kinds.empty(), "run config: ablation kinds must not be empty");
        for (const auto& l : retrain_levels) {
            require(levels.count(l) == 1, "run config: retrain level '" + l + "' is not in levels");
        }
    }

    CorpusConfig corpus_for(std::uint64_t seed) const {
        auto c = corpus;
        c.seed = seed;
        return c;
    }
    TrainConfig train_for(std::uint64_t seed) const {
        auto t = train;
        t.seed = seed;
        return t;
    }
    PruneConfig prune_for(std::uint64_t seed, double beta, KindSet kinds) const {
        auto p = prune;
        p.seed = seed;
        p.beta = beta;
        p.kinds = kinds;
        return p;
    }
    ModelSpec spec_for(const Dataset& ds) const {
        auto s = model;
        if (auto_data_scale) s.data_scale = coordinate_scale(ds);
        return s;
    }
};

inline json to_json(const EvalConfig& e) {
    return json{{"tau_rel", e.tau_rel},
                {"n_per_trigger", e.n_per_trigger},
                {"n_per_neutral", e.n_per_neutral},
                {"sampler_steps", e.sampler_steps},
                {"holdout_per_condition", e.holdout_per_condition}};
}

inline EvalConfig eval_config_from_json(const json& j) {
    detail::reject_unknown(j, {"tau_rel", "n_per_trigger", "n_per_neutral", "sampler_steps", "holdout_per_condition"}, "eval");
    EvalConfig e;
    detail::take(j, "tau_rel", e.tau_rel);
    detail::take(j, "n_per_trigger", e.n_per_trigger);
    detail::take(j, "n_per_neutral", e.n_per_neutral);
    detail::take(j, "sampler_steps", e.sampler_steps);
    detail::take(j, "holdout_per_condition", e.holdout_per_condition);
    e.validate();
    return e;
}

inline json to_json(const RunConfig& r) {
    auto model = to_json(r.model);
    if (r.auto_data_scale) model["data_scale"] = "auto";
    json levels = json::object();
    for (const auto& [k, v] : r.levels) levels[k] = v;
    return json{{"format_version", format_version},
                {"seeds", r.seeds},
                {"corpus", to_json(r.corpus)},
                {"model", model},
                {"train", to_json(r.train)},
                {"prune", to_json(r.prune)},
                {"levels", levels},
                {"ablation", json{{"kinds", r.ablation_kinds.to_string()}, {"level", r.ablation_level}}},
                {"retrain", json{{"levels", r.retrain_levels}}},
                {"eval", to_json(r.eval)}};
}

/// Missing sections and fields keep their defaults; unknown fields are errors.
inline RunConfig run_config_from_json(const json& j) {
    detail::reject_unknown(j, {"format_version", "seeds", "corpus", "model", "train", "prune", "levels", "ablation", "retrain", "eval"},
                           "config");
    if (j.contains("format_version") && j["format_version"] != format_version) {
        throw ConfigError("config: unsupported format_version " + j["format_version"].dump());
    }
    RunConfig r;
    detail::take(j, "seeds", r.seeds);
    if (j.contains("corpus")) r.corpus = corpus_config_from_json(j["corpus"]);
    if (j.contains("model")) {
        auto m = j["model"];
        if (m.is_object() && m.contains("data_scale") && m["data_scale"].is_string()) {
            if (m["data_scale"] != "auto") throw ConfigError("model.data_scale must be a number or \"auto\"");
            m.erase("data_scale");
        } else if (m.is_object() && m.contains("data_scale")) {
            r.auto_data_scale = false;
        }
        r.model = model_spec_from_json(m);
    }
    if (j.contains("train")) r.train = train_config_from_json(j["train"]);
    if (j.contains("prune")) r.prune = prune_config_from_json(j["prune"]);
    if (j.contains("levels")) {
        r.levels.clear();
        detail::take(j, "levels", r.levels);
    }
    if (j.contains("ablation")) {
        const auto& a = j["ablation"];
        detail::reject_unknown(a, {"kinds", "level"}, "ablation");
        std::string kinds = r.ablation_kinds.to_string();
        detail::take(a, "kinds", kinds);
        r.ablation_kinds = KindSet::parse(kinds);
        detail::take(a, "level", r.ablation_level);
    }
    if (j.contains("retrain")) {
        detail::reject_unknown(j["retrain"], {"levels"}, "retrain");
        detail::take(j["retrain"], "levels", r.retrain_levels);
    }
    if (j.contains("eval")) r.eval = eval_config_from_json(j["eval"]);
    r.validate();
    return r;
}

inline RunConfig load_run_config(const fs::path& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": malformed JSON: " + e.what());
    }
    return run_config_from_json(j);
}

// ---------------------------------------------------------------- logs

inline std::string train_loss_csv(const TrainLog& log) {
    std::string out = "step,loss\n";
    char buf[64];
    for (std::size_t i = 0; i < log.loss.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g\n", i, log.loss[i]);
        out += buf;
    }
    return out;
}

inline json conditions_json(const Dataset& ds) {
    json out = json::array();
    for (const auto& c : ds.conditions) out.push_back(json{{"id", c.id}, {"tag", c.is_trigger() ? "trigger" : "neutral"}});
    return out;
}

/// Neutral prompt set recorded in a base checkpoint's metadata.
inline NeutralPromptSet neutral_from_meta(const json& meta) {
    NeutralPromptSet set;
    if (!meta.contains("conditions")) {
        throw ConfigError("checkpoint metadata lists no conditions; cannot select neutral prompts");
    }
    for (const auto& c : meta["conditions"]) {
        if (c.at("tag") == "neutral") set.conditions.push_back({c.at("id").get<int>(), ConditionTag::neutral});
    }
    set.validate();
    return set;
}

// ------------------------------------------------------------- evaluation

/// A model to evaluate against the base: weights plus an optional mask (hard
/// binarized for evaluation).
struct EvalModel {
    std::string label;
    Parameters params;
    std::optional<MaskSet> mask;
};

namespace detail {

inline void check_report_finite(const Report& r) {
    for (const auto* m : {&r.reproduction, &r.magnitude_shift, &r.decoupling, &r.quality, &r.projection_variance}) {
        for (const auto& [k, v] : *m) {
            if (!std::isfinite(v)) throw NumericError("evaluation produced a non-finite value for '" + k + "'");
        }
    }
}

}  // namespace detail

/// Metrics of `models` relative to `base`. Labels used in the report:
///   reproduction[untrained|base|<label>]
///   quality[base|<label>]                    Fréchet distance to held-out neutral draws
///   decoupling[trigger:<label>|neutral:<label>]  base vs model, same z_0 draws
///   magnitude_shift[base|<label>]            W1(trigger norms, neutral norms) of that model
///   magnitude_shift[<label>:vs_base_neutral] W1(model trigger norms, base neutral norms)
/// Figures (SVG + CSV) go to `figures` when it is non-empty.
inline Report evaluate(const Parameters& base, const Corpus& corpus, const std::vector<EvalModel>& models, const EvalConfig& ec,
                       std::uint64_t seed, const fs::path& figures = {}) {
    ec.validate();
    const auto& ds = corpus.dataset;
    require(ds.dim == base.spec.latent_dim, "eval: corpus dimension does not match the model");
    const auto neutral = neutral_conditions(ds).conditions;
    const auto triggers = trigger_conditions(ds);
    require(!neutral.empty() && !triggers.empty(), "eval: corpus needs both neutral and trigger conditions");
    Report rep;
    rep.seed = seed;
    const int N = ec.sampler_steps;
    const LatentSet held(ds.dim, holdout_neutral(ds, ec.holdout_per_condition, seed));

    rep.reproduction["untrained"] =
        reproduction_rate(build_model(base.spec, seed), nullptr, corpus.registry, ec.tau_rel, ec.n_per_trigger, N, seed);
    rep.reproduction["base"] = reproduction_rate(base, nullptr, corpus.registry, ec.tau_rel, ec.n_per_trigger, N, seed);
    const auto tb = generate(NetField(base, nullptr), triggers, ec.n_per_trigger, N, seed);
    const auto nb = generate(NetField(base, nullptr), neutral, ec.n_per_neutral, N, seed);
    rep.quality["base"] = frechet_quality(nb, held);
    const auto pb_t = magnitude_profile(tb), pb_n = magnitude_profile(nb);
    rep.magnitude_shift["base"] = magnitude_shift(pb_t, pb_n);

    for (const auto& m : models) {
        std::optional<HardMask> hard;
        if (m.mask) {
            hard = binarize(*m.mask);
            rep.deactivation[m.label] = deactivation_ratios(*m.mask);
        }
        const Gates* g = hard ? &*hard : nullptr;
        NetField field(m.params, g);
        rep.reproduction[m.label] = reproduction_rate(field, corpus.registry, ec.tau_rel, ec.n_per_trigger, N, seed);
        const auto tm = generate(field, triggers, ec.n_per_trigger, N, seed);
        const auto nm = generate(field, neutral, ec.n_per_neutral, N, seed);
        rep.quality[m.label] = frechet_quality(nm, held);
        rep.decoupling["trigger:" + m.label] = decoupling_score(tb, tm);
        rep.decoupling["neutral:" + m.label] = decoupling_score(nb, nm);
        const auto pt = magnitude_profile(tm), pn = magnitude_profile(nm);
        rep.magnitude_shift[m.label] = magnitude_shift(pt, pn);
        rep.magnitude_shift[m.label + ":vs_base_neutral"] = magnitude_shift(pt, pb_n);
        const auto proj_t = project2d(tb, tm);
        const auto proj_n = project2d(nb, nm);
        rep.projection_variance["trigger:" + m.label] = proj_t.explained_variance;
        rep.projection_variance["neutral:" + m.label] = proj_n.explained_variance;
        if (!figures.empty()) {
            const std::string lb = "base", lm = m.label;
            atomic_write(figures / ("projection_trigger_" + lm + ".svg"), projection_svg(proj_t, "trigger latents: base vs " + lm, lb, lm));
            atomic_write(figures / ("projection_trigger_" + lm + ".csv"), projection_csv(proj_t, lb, lm));
            atomic_write(figures / ("projection_neutral_" + lm + ".svg"), projection_svg(proj_n, "neutral latents: base vs " + lm, lb, lm));
            atomic_write(figures / ("projection_neutral_" + lm + ".csv"), projection_csv(proj_n, lb, lm));
            const std::vector<LatentSet> sets{tb, nb, tm, nm};
            const auto profiles = pooled_profiles(sets);
            const std::vector<std::string> names{"base trigger", "base neutral", lm + " trigger", lm + " neutral"};
            atomic_write(figures / ("magnitude_" + lm + ".svg"), magnitude_svg(profiles, names, "||z_N|| distributions: " + lm));
            atomic_write(figures / ("magnitude_" + lm + ".csv"), magnitude_csv(profiles, names));
        }
    }
    detail::check_report_finite(rep);
    return rep;
}

// --------------------------------------------------------------- pipeline

/// Exclusive ownership of an output directory for the lifetime of the object.
/// A lock left behind by a dead process is taken over.
class DirLock {
public:
    explicit DirLock(const fs::path& dir) : path_(dir / ".lock") {
        std::error_code ec;
        fs::create_directories(dir, ec);
        if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
        for (int attempt = 0; attempt < 2; ++attempt) {
            const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
            if (fd >= 0) {
                const auto pid = std::to_string(::getpid());
                [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
                ::close(fd);
                return;
            }
            long owner = 0;
            try {
                owner = std::stol(read_file(path_));
            } catch (...) {
            }
            if (owner > 0 && ::kill(static_cast<pid_t>(owner), 0) == 0) {
                throw IoError(dir.string() + " is locked by running process " + std::to_string(owner));
            }
            fs::remove(path_, ec);
        }
        throw IoError("cannot lock " + dir.string());
    }
    ~DirLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    fs::path path_;
};

/// stage -> digest of the inputs that produced its outputs. A stage is reused
/// on rerun only if its digest matches and all of its outputs exist.
class StageLedger {
public:
    explicit StageLedger(fs::path file) : file_(std::move(file)) {
        if (fs::exists(file_)) {
            const auto j = read_json(file_);
            check_version(j, file_.string());
            stages_ = j.value("stages", json::object());
        }
    }

    bool fresh(const std::string& stage, const std::string& dig, const std::vector<fs::path>& outputs) const {
        if (!stages_.contains(stage) || stages_[stage] != dig) return false;
        for (const auto& p : outputs) {
            if (!fs::exists(p)) return false;
        }
        return true;
    }

    void record(const std::string& stage, const std::string& dig) {
        stages_[stage] = dig;
        write_json(file_, json{{"format_version", format_version}, {"stages", stages_}});
    }

    const json& stages() const { return stages_; }

private:
    fs::path file_;
    json stages_ = json::object();
};

struct SeedOutcome {
    std::uint64_t seed = 0;
    fs::path dir;
    Report report;
    std::vector<std::string> reused;  // stages skipped because their digest matched
};

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

/// corpus -> base training -> pruning at every level -> ablation -> retrain ->
/// evaluation for one seed, under `dir`. Every checkpoint is reloaded from
/// disk before use so downstream stages see exactly the stored float32 values.
inline SeedOutcome run_seed(const RunConfig& cfg, std::uint64_t seed, const fs::path& dir) {
    SeedOutcome out;
    out.seed = seed;
    out.dir = dir;
    StageLedger ledger(dir / "stages.json");
    const auto t0 = std::chrono::steady_clock::now();
    auto stage = [&](const std::string& name, const json& inputs, const std::vector<fs::path>& outputs, auto&& body) {
        const auto dig = digest(inputs);
        out.report.digests[name] = dig;
        if (ledger.fresh(name, dig, outputs)) {
            out.reused.push_back(name);
            spdlog::info("[seed {}] {}: up to date ({})", seed, name, dig);
            return dig;
        }
        const auto ts = std::chrono::steady_clock::now();
        body();
        ledger.record(name, dig);
        spdlog::info("[seed {}] {}: done in {:.1f}s", seed, name, detail::seconds_since(ts));
        return dig;
    };

    const auto corpus_cfg = cfg.corpus_for(seed);
    const auto corpus_dir = dir / "corpus";
    const auto d_corpus = stage("corpus", json{{"stage", "corpus"}, {"config", to_json(corpus_cfg)}},
                                {corpus_dir / "dataset.ckpt", corpus_dir / "registry.json"},
                                [&] { save_corpus(corpus_dir, synth_corpus(corpus_cfg), corpus_cfg); });
    const auto corpus = load_corpus(corpus_dir);
    const auto neutral = neutral_conditions(corpus.dataset);

    const auto spec = cfg.spec_for(corpus.dataset);
    const auto train_cfg = cfg.train_for(seed);
    const auto base_path = dir / "base.ckpt";
    const auto d_base = stage("base", json{{"stage", "base"}, {"corpus", d_corpus}, {"model", to_json(spec)}, {"train", to_json(train_cfg)}},
                              {base_path, dir / "train_loss.csv"}, [&] {
                                  const auto res = train_base(corpus.dataset, spec, train_cfg);
                                  atomic_write(dir / "train_loss.csv", train_loss_csv(res.log));
                                  save_params(base_path, res.params,
                                              json{{"conditions", conditions_json(corpus.dataset)}, {"final_loss", res.log.final_loss()}});
                              });
    const auto base = load_params(base_path);

    std::vector<EvalModel> models;
    std::map<std::string, MaskSet> masks;
    auto prune_stage = [&](const std::string& label, double beta, KindSet kinds) {
        const auto pc = cfg.prune_for(seed, beta, kinds);
        const auto mpath = dir / ("masks_" + label + ".ckpt");
        const auto d = stage("prune_" + label, json{{"stage", "prune"}, {"base", d_base}, {"prune", to_json(pc)}},
                             {mpath, dir / ("prune_" + label + ".csv"), dir / ("deactivation_" + label + ".csv")}, [&] {
                                 const auto res = prune(base, neutral, pc);
                                 atomic_write(dir / ("prune_" + label + ".csv"), res.log.csv());
                                 save_masks(mpath, res.mask, json{{"label", label}, {"beta", beta}});
                                 atomic_write(dir / ("deactivation_" + label + ".csv"), deactivation_csv(deactivation_ratios(load_masks(mpath))));
                             });
        masks[label] = load_masks(mpath);
        models.push_back({label, base, masks[label]});
        return d;
    };
    std::map<std::string, std::string> prune_digests;
    for (const auto& [level, beta] : cfg.levels) prune_digests[level] = prune_stage(level, beta, cfg.prune.kinds);
    prune_stage("ablation", cfg.levels.at(cfg.ablation_level), cfg.ablation_kinds);

    for (const auto& level : cfg.retrain_levels) {
        const auto pc = cfg.prune_for(seed, cfg.levels.at(level), cfg.prune.kinds);
        const auto rpath = dir / ("retrained_" + level + ".ckpt");
        stage("retrain_" + level, json{{"stage", "retrain"}, {"masks", prune_digests.at(level)}, {"prune", to_json(pc)}},
              {rpath, dir / ("retrain_" + level + ".csv")}, [&] {
                  const auto res = retrain(base, masks.at(level), neutral, pc);
                  atomic_write(dir / ("retrain_" + level + ".csv"), res.log.csv());
                  save_params(rpath, res.params, json{{"conditions", conditions_json(corpus.dataset)}, {"masks", "masks_" + level + ".ckpt"}});
              });
        models.push_back({"retrained_" + level, load_params(rpath), masks.at(level)});
    }

    json eval_inputs{{"stage", "eval"}, {"eval", to_json(cfg.eval)}, {"upstream", out.report.digests}};
    const auto report_path = dir / "report.json";
    stage("eval", eval_inputs, {report_path}, [&] {
        const auto rep = evaluate(base, corpus, models, cfg.eval, seed, dir / "figures");
        auto j = to_json(rep);
        j["digests"] = out.report.digests;
        write_json(report_path, j);
    });
    const auto saved = read_json(report_path);
    check_version(saved, report_path.string());
    out.report = report_from_json(saved);
    spdlog::info("[seed {}] finished in {:.1f}s", seed, detail::seconds_since(t0));
    return out;
}

struct PipelineOutcome {
    std::vector<SeedOutcome> seeds;
    json summary;
};

inline json summarize(const std::vector<SeedOutcome>& seeds) {
    json per_seed = json::array();
    std::map<std::string, double> mean_rate;
    for (const auto& s : seeds) {
        json deact = json::object();
        for (const auto& [label, d] : s.report.deactivation) deact[label] = d.total.ratio;
        json rates = json::object();
        for (const auto& [label, r] : s.report.reproduction) {
            rates[label] = r;
            mean_rate[label] += r / static_cast<double>(seeds.size());
        }
        per_seed.push_back(json{{"seed", s.seed}, {"dir", s.dir.filename().string()}, {"reproduction", rates}, {"deactivation_total", deact}});
    }
    json means = json::object();
    for (const auto& [k, v] : mean_rate) means[k] = v;
    return json{{"format_version", format_version}, {"seeds", per_seed}, {"mean_reproduction", means}};
}

/// The whole experiment under `out`: config.json (defaults echoed), one
/// seed_<s>/ directory per seed, summary.json. Resumable; see StageLedger.
inline PipelineOutcome run_pipeline(const RunConfig& cfg, const fs::path& out) {
    cfg.validate();
    DirLock lock(out);
    write_json(out / "config.json", to_json(cfg));
    PipelineOutcome res;
    for (auto seed : cfg.seeds) {
        res.seeds.push_back(run_seed(cfg, seed, out / ("seed_" + std::to_string(seed))));
    }
    res.summary = summarize(res.seeds);
    write_json(out / "summary.json", res.summary);
    return res;
}

}  // namespace uniforget
