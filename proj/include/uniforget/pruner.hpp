#pragma once

#include <cstdint>
#include <cstdio>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "uniforget/errors.hpp"
#include "uniforget/flownet.hpp"
#include "uniforget/maskengine.hpp"
#include "uniforget/memoria.hpp"
#include "uniforget/optim.hpp"
#include "uniforget/rng.hpp"

namespace uniforget {

enum class DememorizationLevel : std::uint8_t { weak, medium, strong };

inline DememorizationLevel parse_level(std::string_view name) {
    if (name == "weak") return DememorizationLevel::weak;
    if (name == "medium") return DememorizationLevel::medium;
    if (name == "strong") return DememorizationLevel::strong;
    throw ConfigError("unknown de-memorization level '" + std::string(name) + "' (expected weak, medium or strong)");
}

inline std::string_view to_string(DememorizationLevel level) {
    switch (level) {
        case DememorizationLevel::weak: return "weak";
        case DememorizationLevel::medium: return "medium";
        case DememorizationLevel::strong: return "strong";
    }
    return "?";
}

inline double beta_preset(DememorizationLevel level) {
    switch (level) {
        case DememorizationLevel::weak: return 1.0;
        case DememorizationLevel::medium: return 2.0;
        case DememorizationLevel::strong: return 5.0;
    }
    throw ConfigError("unknown de-memorization level");
}

inline double beta_preset(std::string_view name) { return beta_preset(parse_level(name)); }

struct PruneConfig {
    double beta = 2.0;
    int steps = 2000;
    double lr = 5e-2;          // mask logits
    double retrain_lr = 3e-4;  // network weights during retrain
    int batch = 16;            // neutral conditions per step
    int sampler_steps = 4;     // N
    std::uint64_t seed = 0;
    bool recompute = false;
    KindSet kinds{MaskKind::ffn, MaskKind::norm};
    double gamma = 0.4;
    double delta = 1.0;
    double initial_gate = default_initial_gate_value;
    int checkpoint_every = 0;  // 0 disables mask snapshots

    void validate() const {
        require(beta >= 0.0, "prune: beta must be >= 0");
        require(steps >= 0, "prune: steps must be >= 0");
        require(lr > 0.0 && retrain_lr > 0.0, "prune: learning rates must be > 0");
        require(batch >= 1, "prune: batch must be >= 1");
        require(sampler_steps >= 1, "prune: sampler steps N must be >= 1");
        require(!kinds.empty(), "prune: at least one mask kind must be enabled");
        require(gamma > 0.0, "prune: gamma must be > 0");
        require(checkpoint_every >= 0, "prune: checkpoint_every must be >= 0");
    }
};

struct ObjectiveValue {
    double reconstruction = 0.0;  // mean over the batch of ||z_N^masked - z_N^ref||^2 / N_l
    double sparsity = 0.0;        // ||sigma_hat(M)||_1 / |M|, unscaled
    double objective = 0.0;       // reconstruction + beta * sparsity
};

namespace detail {

inline void check_neutral(std::span<const Condition> conds) {
    require(!conds.empty(), "pruning objective: empty condition batch");
    for (const auto& c : conds) {
        require(!c.is_trigger(), "pruning objective: trigger condition " + std::to_string(c.id) +
                                     " in batch; only neutral conditions may drive pruning");
    }
}

}  // namespace detail

/// Reconstruction term between the reference sampler (ref, ungated) and the
/// gated sampler (params, gates). One z_0 is drawn per condition and fed to
/// both. Gradients w.r.t. gate values and/or params go to `sink`.
inline double reconstruction_term(const Parameters& ref, const Parameters& params, const Gates* gates,
                                  std::span<const Condition> conds, int steps, NoiseSource& noise, GradSink sink,
                                  BackpropMode mode = BackpropMode::retain_all, UnrolledStats* stats = nullptr) {
    detail::check_neutral(conds);
    require(ref.spec == params.spec, "reconstruction: reference and model specs differ");
    const auto d = static_cast<std::size_t>(params.spec.latent_dim);
    const bool want_grad = !sink.params.empty() || sink.gates != nullptr;
    const double scale = 1.0 / (static_cast<double>(conds.size()) * static_cast<double>(d));
    UnrolledEuler masked(params, gates, steps, mode);
    NetField ref_field(ref, nullptr);
    Latent z0(d), g(d);
    double total = 0.0;
    for (const auto& c : conds) {
        noise.normal(z0);
        const auto target = euler_sample(ref_field, z0, steps, c).z;
        const auto& out = masked.forward(z0, c);
        double se = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double r = out[i] - target[i];
            se += r * r;
            g[i] = 2.0 * r * scale;
        }
        total += se * scale;
        if (want_grad) {
            masked.backward(g, sink);
        }
    }
    if (stats != nullptr) {
        *stats = masked.stats();
    }
    return total;
}

/// Gradients of pruning_objective.
struct ObjectiveGrad {
    GateArrays logits;           // d/dM, zero on disabled kinds
    std::vector<double> params;  // d/dparams, empty unless requested
};

/// (1/N_l) ||F_{u_theta}(z0, N, c) - F_u(z0, N, c)||^2 averaged over the batch,
/// plus beta * ||sigma_hat(M)||_1 / |M|. The masked sampler runs `params`
/// gated by relax(mask); the reference runs `ref` ungated.
inline ObjectiveValue pruning_objective(const Parameters& ref, const Parameters& params, const MaskSet& mask,
                                        std::span<const Condition> conds, double beta, int steps, NoiseSource& noise,
                                        ObjectiveGrad* grad = nullptr, bool grad_params = false,
                                        BackpropMode mode = BackpropMode::retain_all, UnrolledStats* stats = nullptr) {
    require(mask.spec == params.spec, "pruning objective: mask built for a different model spec");
    const auto relaxed = relax(mask);
    ObjectiveValue val;
    GateArrays gate_grad;
    std::vector<double> param_grad;
    GradSink sink;
    if (grad != nullptr) {
        sink.gates = &gate_grad;
        if (grad_params) {
            param_grad.assign(params.values.size(), 0.0);
            sink.params = param_grad;
        }
    }
    val.reconstruction = reconstruction_term(ref, params, &relaxed, conds, steps, noise, sink, mode, stats);
    val.sparsity = sparsity_penalty(mask);
    val.objective = val.reconstruction + beta * val.sparsity;
    if (grad != nullptr) {
        grad->logits = relax_backward(mask, relaxed, gate_grad);
        const auto pen = sparsity_penalty_grad(mask);
        for (auto k : mask.enabled.kinds()) {
            for (std::size_t i = 0; i < grad->logits[k].size(); ++i) grad->logits[k][i] += beta * pen[k][i];
        }
        grad->params = std::move(param_grad);
    }
    return val;
}

struct PruneLogRow {
    int step = 0;
    double reconstruction = 0.0;
    double sparsity_term = 0.0;  // beta * penalty
    double objective = 0.0;
};

struct PruneLog {
    std::vector<PruneLogRow> rows;

    std::string csv() const {
        std::string out = "step,reconstruction_term,sparsity_term,objective\n";
        char buf[128];
        for (const auto& r : rows) {
            std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g\n", r.step, r.reconstruction, r.sparsity_term, r.objective);
            out += buf;
        }
        return out;
    }
};

struct PruneResult {
    MaskSet mask;
    PruneLog log;
};

namespace detail {

inline void draw_conditions(const NeutralPromptSet& neutral, SeededNoise& picker, int batch, std::vector<Condition>& out) {
    out.clear();
    const auto n = neutral.conditions.size();
    for (int b = 0; b < batch; ++b) {
        auto i = static_cast<std::size_t>(picker.uniform() * static_cast<double>(n));
        out.push_back(neutral.conditions[std::min(i, n - 1)]);
    }
}

inline std::vector<double> flatten(const GateArrays& g) {
    std::vector<double> out;
    for (auto k : all_mask_kinds) out.insert(out.end(), g[k].begin(), g[k].end());
    return out;
}

inline void unflatten(std::span<const double> flat, GateArrays& g) {
    std::size_t o = 0;
    for (auto k : all_mask_kinds) {
        for (auto& v : g[k]) v = flat[o++];
    }
}

inline void check_finite(const ObjectiveValue& v, int step, std::string_view what) {
    if (!std::isfinite(v.objective)) {
        throw NumericError(std::string(what) + ": non-finite objective at step " + std::to_string(step));
    }
}

}  // namespace detail

/// Learns mask logits on neutral conditions only; `ref` stays frozen and is
/// also the weight set of the masked model. Each step draws `batch` conditions
/// uniformly from `neutral` and fresh z_0 noise. The log has steps + 1 rows:
/// one per update (evaluated before it) and a final evaluation.
inline PruneResult prune(const Parameters& ref, const NeutralPromptSet& neutral, const PruneConfig& cfg,
                         const std::function<void(int, const MaskSet&)>& on_checkpoint = {}) {
    cfg.validate();
    neutral.validate();
    PruneResult res;
    res.mask = init_maskset(ref.spec, cfg.kinds, logit_for_gate_value(cfg.initial_gate, cfg.gamma, cfg.delta), cfg.gamma, cfg.delta);
    if (cfg.steps == 0) {
        return res;
    }
    SeededNoise picker(derive_seed(cfg.seed, streams::prune));
    SeededNoise noise(derive_seed(cfg.seed, streams::noise));
    const auto mode = cfg.recompute ? BackpropMode::recompute : BackpropMode::retain_all;
    auto flat = detail::flatten(res.mask.logits);
    RmsProp opt(flat.size(), cfg.lr);
    std::vector<Condition> batch;
    ObjectiveGrad grad;
    for (int step = 0; step <= cfg.steps; ++step) {
        detail::draw_conditions(neutral, picker, cfg.batch, batch);
        const bool update = step < cfg.steps;
        const auto val = pruning_objective(ref, ref, res.mask, batch, cfg.beta, cfg.sampler_steps, noise,
                                           update ? &grad : nullptr, false, mode);
        detail::check_finite(val, step, "prune");
        res.log.rows.push_back({step, val.reconstruction, cfg.beta * val.sparsity, val.objective});
        if (!update) {
            break;
        }
        const auto g = detail::flatten(grad.logits);
        opt.step(flat, g);
        detail::unflatten(flat, res.mask.logits);
        if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && on_checkpoint) {
            on_checkpoint(step + 1, res.mask);
        }
    }
    return res;
}

struct RetrainResult {
    Parameters params;
    PruneLog log;  // sparsity_term is always 0
};

/// Full-parameter fine-tuning under the hard-binarized mask: minimizes the
/// reconstruction term against the frozen original `ref` with the same
/// schedule as pruning (beta is not used). The mask itself is not modified.
inline RetrainResult retrain(const Parameters& ref, const MaskSet& mask, const NeutralPromptSet& neutral, const PruneConfig& cfg) {
    cfg.validate();
    neutral.validate();
    RetrainResult res{ref, {}};
    if (cfg.steps == 0) {
        return res;
    }
    const auto hard = binarize(mask);
    SeededNoise picker(derive_seed(cfg.seed, streams::retrain));
    SeededNoise noise(derive_seed(cfg.seed, derive_seed(streams::retrain, streams::noise)));
    const auto mode = cfg.recompute ? BackpropMode::recompute : BackpropMode::retain_all;
    RmsProp opt(res.params.values.size(), cfg.retrain_lr);
    std::vector<double> grad(res.params.values.size());
    std::vector<Condition> batch;
    for (int step = 0; step <= cfg.steps; ++step) {
        detail::draw_conditions(neutral, picker, cfg.batch, batch);
        const bool update = step < cfg.steps;
        std::fill(grad.begin(), grad.end(), 0.0);
        GradSink sink;
        if (update) sink.params = grad;
        ObjectiveValue val;
        val.reconstruction = reconstruction_term(ref, res.params, &hard, batch, cfg.sampler_steps, noise, sink, mode);
        val.objective = val.reconstruction;
        detail::check_finite(val, step, "retrain");
        res.log.rows.push_back({step, val.reconstruction, 0.0, val.objective});
        if (!update) {
            break;
        }
        opt.step(res.params.values, grad);
    }
    return res;
}

}  // namespace uniforget
