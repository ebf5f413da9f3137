#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "uniforget/errors.hpp"
#include "uniforget/rng.hpp"
#include "uniforget/types.hpp"

namespace uniforget {

/// Synthetic corpus with memorization planted by exact duplication.
///
/// Neutral conditions draw fresh samples from a per-condition isotropic
/// Gaussian mixture. Each trigger condition owns one fixed exemplar that is
/// repeated `duplication` times.
struct CorpusConfig {
    int dim = 32;
    int n_neutral = 12;
    int samples_per_neutral = 100;
    int n_exemplars = 8;
    int duplication = 200;
    int mixture_components = 3;
    double mixture_spread = 0.8;  // per-coordinate std of each component
    double center_scale = 4.0;     // per-coordinate std of component centers
    double exemplar_scale = 4.0;   // per-coordinate std of exemplar draws
    std::uint64_t seed = 0;
    // Explicit id assignment; empty means neutral 0..n_neutral-1 then triggers.
    std::vector<int> neutral_ids;
    std::vector<int> trigger_ids;

    std::vector<int> resolved_neutral_ids() const {
        if (!neutral_ids.empty()) {
            return neutral_ids;
        }
        std::vector<int> ids(static_cast<std::size_t>(n_neutral));
        for (int i = 0; i < n_neutral; ++i) {
            ids[static_cast<std::size_t>(i)] = i;
        }
        return ids;
    }

    std::vector<int> resolved_trigger_ids() const {
        if (!trigger_ids.empty()) {
            return trigger_ids;
        }
        std::vector<int> ids(static_cast<std::size_t>(n_exemplars));
        for (int i = 0; i < n_exemplars; ++i) {
            ids[static_cast<std::size_t>(i)] = n_neutral + i;
        }
        return ids;
    }

    void validate() const {
        require(dim >= 1, "corpus: dim must be >= 1");
        require(n_neutral >= 1 && samples_per_neutral >= 1, "corpus: need at least one neutral condition and sample");
        require(n_exemplars >= 1, "corpus: K (n_exemplars) must be >= 1");
        require(duplication >= 1, "corpus: D (duplication) must be >= 1");
        require(mixture_components >= 1, "corpus: mixture_components must be >= 1");
        require(mixture_spread > 0.0 && center_scale >= 0.0 && exemplar_scale > 0.0, "corpus: scales must be positive");
        const auto n_ids = resolved_neutral_ids();
        const auto t_ids = resolved_trigger_ids();
        require(static_cast<int>(n_ids.size()) == n_neutral, "corpus: neutral_ids length must equal n_neutral");
        require(static_cast<int>(t_ids.size()) == n_exemplars, "corpus: trigger_ids length must equal n_exemplars");
        std::set<int> seen;
        for (int id : n_ids) {
            require(id >= 0, "corpus: condition ids must be >= 0");
            require(seen.insert(id).second, "corpus: duplicate neutral condition id " + std::to_string(id));
        }
        for (int id : t_ids) {
            require(id >= 0, "corpus: condition ids must be >= 0");
            require(seen.insert(id).second, "corpus: trigger condition id " + std::to_string(id) + " overlaps another condition");
        }
    }

    /// Smallest vocabulary that covers every condition id.
    int vocab_size() const {
        int hi = 0;
        for (int id : resolved_neutral_ids()) hi = std::max(hi, id);
        for (int id : resolved_trigger_ids()) hi = std::max(hi, id);
        return hi + 1;
    }
};

/// Mixture definition behind one neutral condition.
struct NeutralFamily {
    int condition = 0;
    std::vector<std::vector<double>> centers;
    double spread = 0.0;
};

struct LabeledSample {
    std::span<const double> x;
    Condition cond;
};

struct Dataset {
    int dim = 0;
    std::vector<double> x;          // rows of length dim
    std::vector<int> cond;          // condition id per row
    std::vector<Condition> conditions;  // every condition, ascending id
    std::vector<NeutralFamily> families;

    std::size_t size() const { return cond.size(); }
    std::span<const double> row(std::size_t i) const {
        return {x.data() + i * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim)};
    }
    const Condition& condition(int id) const {
        for (const auto& c : conditions) {
            if (c.id == id) {
                return c;
            }
        }
        throw ConfigError("dataset has no condition " + std::to_string(id));
    }
    LabeledSample sample(std::size_t i) const { return {row(i), condition(cond[i])}; }
    std::vector<LabeledSample> samples() const {
        std::vector<LabeledSample> out;
        out.reserve(size());
        for (std::size_t i = 0; i < size(); ++i) {
            out.push_back(sample(i));
        }
        return out;
    }
    const NeutralFamily& family(int id) const {
        for (const auto& f : families) {
            if (f.condition == id) {
                return f;
            }
        }
        throw ConfigError("dataset has no neutral family for condition " + std::to_string(id));
    }
};

struct Exemplar {
    Condition trigger;
    std::vector<double> vector;
};

struct ExemplarRegistry {
    std::vector<Exemplar> exemplars;
    double rms_norm = 0.0;  // sqrt(mean ||x||^2) over the dataset rows

    bool is_trigger(int id) const {
        return std::any_of(exemplars.begin(), exemplars.end(), [&](const Exemplar& e) { return e.trigger.id == id; });
    }
};

/// C_n: the neutral conditions used to drive pruning.
struct NeutralPromptSet {
    std::vector<Condition> conditions;

    void validate(const ExemplarRegistry* registry = nullptr) const {
        require(!conditions.empty(), "neutral prompt set is empty");
        for (const auto& c : conditions) {
            require(!c.is_trigger(), "neutral prompt set contains trigger condition " + std::to_string(c.id));
            if (registry != nullptr) {
                require(!registry->is_trigger(c.id),
                        "neutral prompt set contains condition " + std::to_string(c.id) + " registered as a trigger");
            }
        }
    }
};

namespace detail {

inline double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

inline void draw_f32(SeededNoise& noise, std::span<double> out, double scale, std::span<const double> offset = {}) {
    noise.normal(out);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = to_f32((offset.empty() ? 0.0 : offset[i]) + scale * out[i]);
    }
}

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

}  // namespace detail

/// One draw from a neutral family, rounded to float precision like the corpus.
inline void sample_family(const NeutralFamily& fam, SeededNoise& noise, std::span<double> out) {
    const auto m = fam.centers.size();
    auto j = static_cast<std::size_t>(noise.uniform() * static_cast<double>(m));
    j = std::min(j, m - 1);
    detail::draw_f32(noise, out, fam.spread, fam.centers[j]);
}

struct Corpus {
    Dataset dataset;
    ExemplarRegistry registry;
};

inline double dataset_rms_norm(const Dataset& ds) {
    double s = 0.0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto r = ds.row(i);
        for (double v : r) s += v * v;
    }
    return std::sqrt(s / static_cast<double>(ds.size()));
}

/// Per-coordinate RMS of the data, the natural `data_scale` of a model
/// trained on it.
inline double coordinate_scale(const Dataset& ds) {
    return dataset_rms_norm(ds) / std::sqrt(static_cast<double>(ds.dim));
}

inline double min_pairwise_exemplar_distance(const ExemplarRegistry& reg) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < reg.exemplars.size(); ++i) {
        for (std::size_t j = i + 1; j < reg.exemplars.size(); ++j) {
            best = std::min(best, std::sqrt(detail::sq_dist(reg.exemplars[i].vector, reg.exemplars[j].vector)));
        }
    }
    return best;
}

inline Corpus synth_corpus(const CorpusConfig& cfg) {
    cfg.validate();
    const auto d = static_cast<std::size_t>(cfg.dim);
    const auto neutral_ids = cfg.resolved_neutral_ids();
    const auto trigger_ids = cfg.resolved_trigger_ids();
    SeededNoise noise(derive_seed(cfg.seed, streams::corpus));

    Corpus out;
    auto& ds = out.dataset;
    ds.dim = cfg.dim;

    for (int id : neutral_ids) {
        NeutralFamily fam;
        fam.condition = id;
        fam.spread = cfg.mixture_spread;
        for (int j = 0; j < cfg.mixture_components; ++j) {
            std::vector<double> c(d);
            detail::draw_f32(noise, c, cfg.center_scale);
            fam.centers.push_back(std::move(c));
        }
        ds.families.push_back(std::move(fam));
    }

    std::vector<std::vector<double>> exemplars;
    for (std::size_t k = 0; k < trigger_ids.size(); ++k) {
        std::vector<double> e(d);
        detail::draw_f32(noise, e, cfg.exemplar_scale);
        exemplars.push_back(std::move(e));
    }

    const auto n_rows = static_cast<std::size_t>(cfg.n_neutral * cfg.samples_per_neutral + cfg.n_exemplars * cfg.duplication);
    ds.x.resize(n_rows * d);
    ds.cond.resize(n_rows);
    std::size_t r = 0;
    for (const auto& fam : ds.families) {
        for (int s = 0; s < cfg.samples_per_neutral; ++s, ++r) {
            sample_family(fam, noise, {ds.x.data() + r * d, d});
            ds.cond[r] = fam.condition;
        }
    }
    const std::size_t first_trigger_row = r;

    auto write_triggers = [&] {
        std::size_t row = first_trigger_row;
        for (std::size_t k = 0; k < trigger_ids.size(); ++k) {
            for (int rep = 0; rep < cfg.duplication; ++rep, ++row) {
                std::copy(exemplars[k].begin(), exemplars[k].end(), ds.x.begin() + static_cast<std::ptrdiff_t>(row * d));
                ds.cond[row] = trigger_ids[k];
            }
        }
    };
    write_triggers();

    // Exemplars must stay pairwise distinct at half the corpus RMS norm;
    // redraw offenders until they do.
    for (int attempt = 0;; ++attempt) {
        const double rms = dataset_rms_norm(ds);
        bool ok = true;
        for (std::size_t i = 0; i < exemplars.size() && ok; ++i) {
            for (std::size_t j = i + 1; j < exemplars.size(); ++j) {
                if (std::sqrt(detail::sq_dist(exemplars[i], exemplars[j])) <= 0.5 * rms) {
                    detail::draw_f32(noise, exemplars[j], cfg.exemplar_scale);
                    ok = false;
                    break;
                }
            }
        }
        if (ok) {
            break;
        }
        require(attempt < 1000, "corpus: could not draw pairwise-distinct exemplars");
        write_triggers();
    }

    for (int id : neutral_ids) ds.conditions.push_back({id, ConditionTag::neutral});
    for (int id : trigger_ids) ds.conditions.push_back({id, ConditionTag::trigger});
    std::sort(ds.conditions.begin(), ds.conditions.end(), [](const Condition& a, const Condition& b) { return a.id < b.id; });

    out.registry.rms_norm = dataset_rms_norm(ds);
    for (std::size_t k = 0; k < trigger_ids.size(); ++k) {
        out.registry.exemplars.push_back({{trigger_ids[k], ConditionTag::trigger}, exemplars[k]});
    }
    return out;
}

inline NeutralPromptSet neutral_conditions(const Dataset& ds) {
    NeutralPromptSet set;
    for (const auto& c : ds.conditions) {
        if (!c.is_trigger()) {
            set.conditions.push_back(c);
        }
    }
    return set;
}

inline std::vector<Condition> trigger_conditions(const Dataset& ds) {
    std::vector<Condition> out;
    for (const auto& c : ds.conditions) {
        if (c.is_trigger()) {
            out.push_back(c);
        }
    }
    return out;
}

/// Fresh draws from the neutral families, `per_condition` for each condition in
/// order. Row-major, each row `ds.dim` long.
inline std::vector<double> holdout_neutral(const Dataset& ds, int per_condition, std::uint64_t seed) {
    require(per_condition >= 1, "holdout_neutral: per_condition must be >= 1");
    SeededNoise noise(derive_seed(seed, streams::holdout));
    const auto d = static_cast<std::size_t>(ds.dim);
    std::vector<double> out(ds.families.size() * static_cast<std::size_t>(per_condition) * d);
    std::size_t r = 0;
    for (const auto& fam : ds.families) {
        for (int i = 0; i < per_condition; ++i, ++r) {
            sample_family(fam, noise, {out.data() + r * d, d});
        }
    }
    return out;
}

}  // namespace uniforget
