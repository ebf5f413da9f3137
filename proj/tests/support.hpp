#pragma once

// Helpers shared by the unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "uniforget/pruner.hpp"

namespace uftest {

using namespace uniforget;

inline constexpr double fd_step = 1e-4;
inline constexpr double fd_rel_tol = 1e-4;
inline constexpr double fd_abs_floor = 1e-8;

/// Central difference of f along one coordinate; the coordinate is restored.
inline double central_difference(const std::function<double()>& f, double& x, double h = fd_step) {
    const double x0 = x;
    x = x0 + h;
    const double fp = f();
    x = x0 - h;
    const double fm = f();
    x = x0;
    return (fp - fm) / (2.0 * h);
}

inline bool grad_agrees(double fd, double analytic) {
    const double diff = std::abs(fd - analytic);
    return diff <= fd_abs_floor || diff <= fd_rel_tol * std::max(std::abs(fd), std::abs(analytic));
}

struct GradCheck {
    int checked = 0;
    int failed = 0;
    double worst_rel = 0.0;  // over coordinates with |gradient| > 1e-6
    std::string first_failure;

    void add(const std::string& what, double fd, double analytic) {
        ++checked;
        const double diff = std::abs(fd - analytic);
        const double scale = std::max(std::abs(fd), std::abs(analytic));
        if (scale > 1e-6) worst_rel = std::max(worst_rel, diff / scale);
        if (!grad_agrees(fd, analytic)) {
            if (failed++ == 0) first_failure = what + ": fd " + std::to_string(fd) + " analytic " + std::to_string(analytic);
        }
    }
    bool ok() const { return checked > 0 && failed == 0; }
};

/// Distinct indices in [0, n), deterministic in `seed`.
inline std::vector<std::size_t> pick_indices(std::size_t n, std::size_t count, std::uint64_t seed) {
    SeededNoise rng(seed);
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    std::shuffle(all.begin(), all.end(), rng.engine());
    all.resize(std::min(count, n));
    return all;
}

/// A 2-block model away from its zero-initialized corners (head, modulation),
/// so every parameter family carries gradient.
inline Parameters lively_model(ModelSpec spec, std::uint64_t seed) {
    auto p = build_model(spec, seed);
    SeededNoise rng(derive_seed(seed, 99));
    auto fill = [&](const std::string& key, double bound) {
        for (auto& v : p.view(key)) v = bound * (2.0 * rng.uniform() - 1.0);
    };
    for (const auto& s : p.layout.slots) {
        if (s.key.find("mod") != std::string::npos) fill(s.key, 0.3);
    }
    fill("head.w", 0.5);
    fill("head.b", 0.1);
    return p;
}

/// Small corpus with the model's latent width, quick to build.
inline Corpus small_corpus(std::uint64_t seed, int dim = 32) {
    CorpusConfig cc;
    cc.dim = dim;
    cc.seed = seed;
    cc.samples_per_neutral = 20;
    cc.duplication = 10;
    return synth_corpus(cc);
}

/// Logits spread over the sensitive range of the relaxed sigmoid.
inline MaskSet random_maskset(const ModelSpec& spec, KindSet kinds, std::uint64_t seed) {
    auto m = init_maskset(spec, kinds);
    SeededNoise rng(seed);
    for (auto k : all_mask_kinds) {
        for (auto& v : m.logits[k]) v = 3.0 * (2.0 * rng.uniform() - 1.0);
    }
    return m;
}

/// Gradient suite for flow_matching_loss: params and mask logits.
inline GradCheck check_flow_matching_grad(const ModelSpec& spec, std::uint64_t seed, std::size_t n_coords) {
    auto p = lively_model(spec, seed);
    const auto corpus = small_corpus(seed, spec.latent_dim);
    std::vector<LabeledSample> batch;
    for (std::size_t i = 0; i < 6; ++i) batch.push_back(corpus.dataset.sample(i * corpus.dataset.size() / 6));
    auto mask = random_maskset(spec, {MaskKind::ffn, MaskKind::attn, MaskKind::norm}, derive_seed(seed, 1));

    const std::uint64_t noise_seed = derive_seed(seed, 2);
    auto loss = [&] {
        const auto relaxed = relax(mask);
        SeededNoise n(noise_seed);
        return flow_matching_loss(p, &relaxed, batch, n);
    };
    std::vector<double> g(p.values.size(), 0.0);
    GateArrays gg;
    const auto relaxed = relax(mask);
    {
        SeededNoise n(noise_seed);
        flow_matching_loss_grad(p, &relaxed, batch, n, {g, &gg});
    }
    const auto glog = relax_backward(mask, relaxed, gg);

    GradCheck out;
    for (auto i : pick_indices(p.values.size(), n_coords, derive_seed(seed, 3))) {
        out.add("param " + std::to_string(i), central_difference(loss, p.values[i]), g[i]);
    }
    for (auto k : all_mask_kinds) {
        for (auto i : pick_indices(mask.logits[k].size(), 4, derive_seed(seed, 4))) {
            out.add("logit " + std::string(to_string(k)) + " " + std::to_string(i), central_difference(loss, mask.logits[k][i]),
                    glog[k][i]);
        }
    }
    return out;
}

/// Gradient suite for pruning_objective through the unrolled sampler with N=2:
/// mask logits and (for retraining) params of the masked model.
inline GradCheck check_objective_grad(const ModelSpec& spec, std::uint64_t seed, std::size_t n_coords, double beta = 2.0) {
    const auto ref = lively_model(spec, seed);
    auto params = ref;
    const auto corpus = small_corpus(seed, spec.latent_dim);
    const auto neutral = neutral_conditions(corpus.dataset);
    const std::vector<Condition> conds(neutral.conditions.begin(), neutral.conditions.begin() + 3);
    auto mask = random_maskset(spec, {MaskKind::ffn, MaskKind::attn, MaskKind::norm}, derive_seed(seed, 5));

    const std::uint64_t noise_seed = derive_seed(seed, 6);
    auto obj = [&] {
        SeededNoise n(noise_seed);
        return pruning_objective(ref, params, mask, conds, beta, 2, n).objective;
    };
    ObjectiveGrad grad;
    {
        SeededNoise n(noise_seed);
        pruning_objective(ref, params, mask, conds, beta, 2, n, &grad, true);
    }
    GradCheck out;
    std::vector<std::pair<MaskKind, std::size_t>> coords;
    for (auto k : all_mask_kinds) {
        for (std::size_t i = 0; i < mask.logits[k].size(); ++i) coords.emplace_back(k, i);
    }
    for (auto c : pick_indices(coords.size(), n_coords, derive_seed(seed, 7))) {
        const auto [k, i] = coords[c];
        out.add("logit " + std::string(to_string(k)) + " " + std::to_string(i), central_difference(obj, mask.logits[k][i]),
                grad.logits[k][i]);
    }
    for (auto i : pick_indices(params.values.size(), n_coords / 2, derive_seed(seed, 8))) {
        out.add("param " + std::to_string(i), central_difference(obj, params.values[i]), grad.params[i]);
    }
    return out;
}

}  // namespace uftest
