#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "uniforget/errors.hpp"
#include "uniforget/types.hpp"

namespace uniforget {

enum class MaskKind : std::uint8_t { ffn, attn, norm };

inline constexpr std::array<MaskKind, 3> all_mask_kinds{MaskKind::ffn, MaskKind::attn, MaskKind::norm};

inline std::string_view to_string(MaskKind kind) {
    switch (kind) {
        case MaskKind::ffn: return "ffn";
        case MaskKind::attn: return "attn";
        case MaskKind::norm: return "norm";
    }
    return "?";
}

inline MaskKind parse_mask_kind(std::string_view name) {
    for (auto kind : all_mask_kinds) {
        if (to_string(kind) == name) {
            return kind;
        }
    }
    throw ConfigError("unknown mask kind '" + std::string(name) + "' (expected ffn, attn or norm)");
}

/// Subset of {ffn, attn, norm}.
class KindSet {
public:
    KindSet() = default;
    KindSet(std::initializer_list<MaskKind> kinds) {
        for (auto k : kinds) {
            insert(k);
        }
    }

    void insert(MaskKind k) { bits_ |= bit(k); }
    bool contains(MaskKind k) const { return (bits_ & bit(k)) != 0; }
    bool empty() const { return bits_ == 0; }

    std::vector<MaskKind> kinds() const {
        std::vector<MaskKind> out;
        for (auto k : all_mask_kinds) {
            if (contains(k)) {
                out.push_back(k);
            }
        }
        return out;
    }

    std::string to_string() const {
        std::string out;
        for (auto k : kinds()) {
            if (!out.empty()) {
                out += ',';
            }
            out += uniforget::to_string(k);
        }
        return out;
    }

    static KindSet parse(std::string_view csv) {
        KindSet set;
        std::size_t pos = 0;
        while (pos <= csv.size()) {
            auto end = csv.find(',', pos);
            if (end == std::string_view::npos) {
                end = csv.size();
            }
            auto token = csv.substr(pos, end - pos);
            if (!token.empty()) {
                set.insert(parse_mask_kind(token));
            }
            pos = end + 1;
        }
        return set;
    }

    friend bool operator==(const KindSet&, const KindSet&) = default;

private:
    static unsigned bit(MaskKind k) { return 1u << static_cast<unsigned>(k); }
    unsigned bits_ = 0;
};

/// One array per gate family. Layouts:
///   ffn  [block][hidden unit]          n_blocks x ffn_hidden
///   attn [block][head]                 n_blocks x n_heads
///   norm [block][site][channel]        n_blocks x 2 x token_dim (site 0 pre-attn, 1 pre-ffn)
struct GateArrays {
    std::vector<double> ffn, attn, norm;

    static GateArrays filled(const ModelSpec& spec, double value) {
        GateArrays g;
        g.ffn.assign(static_cast<std::size_t>(spec.n_blocks * spec.ffn_hidden), value);
        g.attn.assign(static_cast<std::size_t>(spec.n_blocks * spec.n_heads), value);
        g.norm.assign(static_cast<std::size_t>(spec.n_blocks * 2 * spec.token_dim), value);
        return g;
    }

    std::vector<double>& operator[](MaskKind k) {
        switch (k) {
            case MaskKind::ffn: return ffn;
            case MaskKind::attn: return attn;
            default: return norm;
        }
    }
    const std::vector<double>& operator[](MaskKind k) const {
        return const_cast<GateArrays&>(*this)[k];
    }

    friend bool operator==(const GateArrays&, const GateArrays&) = default;
};

/// Learnable gate logits M with the relaxation constants of the sigmoid
/// gate sigma(M * gamma + delta).
struct MaskSet {
    ModelSpec spec;
    GateArrays logits;
    double gamma = 0.4;
    double delta = 1.0;
    KindSet enabled{MaskKind::ffn, MaskKind::norm};

    /// |M|: number of gates over the enabled kinds only.
    std::size_t cardinality() const {
        std::size_t n = 0;
        for (auto k : enabled.kinds()) {
            n += logits[k].size();
        }
        return n;
    }

    friend bool operator==(const MaskSet&, const MaskSet&) = default;
};

/// Gate values multiplied into the network. Kinds not in `enabled` are ignored
/// by the forward pass.
struct Gates {
    ModelSpec spec;
    KindSet enabled;
    GateArrays values;
};

/// Soft gate values strictly inside (0, 1).
struct RelaxedMask : Gates {};

/// Gate values in {0, 1}.
struct HardMask : Gates {};

/// Every enabled gate exactly 1.0.
inline RelaxedMask all_open(const ModelSpec& spec, KindSet kinds = {MaskKind::ffn, MaskKind::attn, MaskKind::norm}) {
    RelaxedMask m;
    m.spec = spec;
    m.enabled = kinds;
    m.values = GateArrays::filled(spec, 1.0);
    return m;
}

inline double logistic(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// Logit at which a fresh gate relaxes to `open_value`.
inline double logit_for_gate_value(double open_value, double gamma = 0.4, double delta = 1.0) {
    require(open_value > 0.0 && open_value < 1.0, "gate value must lie in (0,1)");
    require(gamma > 0.0, "gamma must be > 0");
    return (std::log(open_value / (1.0 - open_value)) - delta) / gamma;
}

inline constexpr double default_initial_gate_value = 0.95;

inline MaskSet init_maskset(const ModelSpec& spec, KindSet kinds, std::optional<double> m0 = std::nullopt,
                            double gamma = 0.4, double delta = 1.0) {
    spec.validate();
    require(!kinds.empty(), "init_maskset: at least one mask kind must be enabled");
    require(gamma > 0.0, "init_maskset: gamma must be > 0");
    MaskSet m;
    m.spec = spec;
    m.gamma = gamma;
    m.delta = delta;
    m.enabled = kinds;
    const double start = m0.value_or(logit_for_gate_value(default_initial_gate_value, gamma, delta));
    m.logits = GateArrays::filled(spec, start);
    return m;
}

inline RelaxedMask relax(const MaskSet& mask) {
    RelaxedMask r;
    r.spec = mask.spec;
    r.enabled = mask.enabled;
    for (auto k : all_mask_kinds) {
        const auto& src = mask.logits[k];
        auto& dst = r.values[k];
        dst.resize(src.size());
        for (std::size_t i = 0; i < src.size(); ++i) {
            dst[i] = logistic(src[i] * mask.gamma + mask.delta);
        }
    }
    return r;
}

/// Chain rule from d/dM_hat to d/dM: gamma * M_hat * (1 - M_hat).
inline GateArrays relax_backward(const MaskSet& mask, const RelaxedMask& relaxed, const GateArrays& grad_values) {
    GateArrays out;
    for (auto k : all_mask_kinds) {
        const auto& v = relaxed.values[k];
        const auto& g = grad_values[k];
        auto& o = out[k];
        o.assign(v.size(), 0.0);
        if (!mask.enabled.contains(k) || g.empty()) {
            continue;
        }
        for (std::size_t i = 0; i < v.size(); ++i) {
            o[i] = g[i] * mask.gamma * v[i] * (1.0 - v[i]);
        }
    }
    return out;
}

/// Location of a gated activation inside the network.
struct GateSite {
    MaskKind kind;
    int block = 0;
    int norm_slot = 0;  // norm only: 0 pre-attention, 1 pre-ffn
};

/// Multiplies `activation` by the gates at `site`. Shapes:
///   ffn  - one token's hidden vector (ffn_hidden)
///   attn - concatenated head outputs of one token (token_dim); head a covers
///          channels [a*head_dim, (a+1)*head_dim)
///   norm - the learned normalization scale (token_dim)
/// Sites whose kind is not enabled pass through unchanged.
inline void apply(const Gates& gates, const GateSite& site, std::span<double> activation) {
    const auto& spec = gates.spec;
    require(site.block >= 0 && site.block < spec.n_blocks, "apply: block index out of range");
    if (!gates.enabled.contains(site.kind)) {
        return;
    }
    switch (site.kind) {
        case MaskKind::ffn: {
            require(activation.size() == static_cast<std::size_t>(spec.ffn_hidden), "apply: ffn activation shape mismatch");
            const double* g = gates.values.ffn.data() + site.block * spec.ffn_hidden;
            for (std::size_t j = 0; j < activation.size(); ++j) {
                activation[j] *= g[j];
            }
            break;
        }
        case MaskKind::attn: {
            require(activation.size() == static_cast<std::size_t>(spec.token_dim), "apply: attn activation shape mismatch");
            const int hd = spec.head_dim();
            const double* g = gates.values.attn.data() + site.block * spec.n_heads;
            for (int a = 0; a < spec.n_heads; ++a) {
                for (int i = 0; i < hd; ++i) {
                    activation[static_cast<std::size_t>(a * hd + i)] *= g[a];
                }
            }
            break;
        }
        case MaskKind::norm: {
            require(activation.size() == static_cast<std::size_t>(spec.token_dim), "apply: norm scale shape mismatch");
            require(site.norm_slot == 0 || site.norm_slot == 1, "apply: norm slot must be 0 or 1");
            const double* g = gates.values.norm.data() + (site.block * 2 + site.norm_slot) * spec.token_dim;
            for (std::size_t i = 0; i < activation.size(); ++i) {
                activation[i] *= g[i];
            }
            break;
        }
    }
}

/// ||M_hat||_1 / |M| over the enabled kinds.
inline double sparsity_penalty(const MaskSet& mask) {
    const auto relaxed = relax(mask);
    double sum = 0.0;
    for (auto k : mask.enabled.kinds()) {
        for (double v : relaxed.values[k]) {
            sum += v;
        }
    }
    return sum / static_cast<double>(mask.cardinality());
}

/// Gradient of sparsity_penalty with respect to the logits (zero on disabled kinds).
inline GateArrays sparsity_penalty_grad(const MaskSet& mask) {
    const auto relaxed = relax(mask);
    const double inv = 1.0 / static_cast<double>(mask.cardinality());
    GateArrays ones;
    for (auto k : all_mask_kinds) {
        ones[k].assign(relaxed.values[k].size(), mask.enabled.contains(k) ? inv : 0.0);
    }
    return relax_backward(mask, relaxed, ones);
}

/// Entry -> 0 when below threshold, else 1 (ties stay active).
inline HardMask binarize(const Gates& relaxed, double threshold = 0.5) {
    require(threshold > 0.0 && threshold < 1.0, "binarize: threshold must lie in (0,1)");
    HardMask h;
    h.spec = relaxed.spec;
    h.enabled = relaxed.enabled;
    for (auto k : all_mask_kinds) {
        const auto& src = relaxed.values[k];
        auto& dst = h.values[k];
        dst.resize(src.size());
        for (std::size_t i = 0; i < src.size(); ++i) {
            dst[i] = src[i] < threshold ? 0.0 : 1.0;
        }
    }
    return h;
}

inline HardMask binarize(const MaskSet& mask, double threshold = 0.5) { return binarize(relax(mask), threshold); }

struct KindRatio {
    std::size_t count = 0;
    std::size_t deactivated = 0;
    double ratio = 0.0;
};

struct DeactivationReport {
    std::optional<KindRatio> ffn, attn, norm;
    KindRatio total;

    const std::optional<KindRatio>& operator[](MaskKind k) const {
        switch (k) {
            case MaskKind::ffn: return ffn;
            case MaskKind::attn: return attn;
            default: return norm;
        }
    }
};

/// Fraction of relaxed gates below `threshold`, per enabled kind and overall.
inline DeactivationReport deactivation_ratios(const MaskSet& mask, double threshold = 0.5) {
    const auto relaxed = relax(mask);
    DeactivationReport rep;
    for (auto k : mask.enabled.kinds()) {
        KindRatio kr;
        for (double v : relaxed.values[k]) {
            ++kr.count;
            if (v < threshold) {
                ++kr.deactivated;
            }
        }
        kr.ratio = kr.count ? static_cast<double>(kr.deactivated) / static_cast<double>(kr.count) : 0.0;
        rep.total.count += kr.count;
        rep.total.deactivated += kr.deactivated;
        switch (k) {
            case MaskKind::ffn: rep.ffn = kr; break;
            case MaskKind::attn: rep.attn = kr; break;
            case MaskKind::norm: rep.norm = kr; break;
        }
    }
    rep.total.ratio = rep.total.count ? static_cast<double>(rep.total.deactivated) / static_cast<double>(rep.total.count) : 0.0;
    return rep;
}

/// CSV with columns kind,count,ratio; the final row is "total".
inline std::string deactivation_csv(const DeactivationReport& rep) {
    std::string out = "kind,count,ratio\n";
    auto row = [&](std::string_view name, const KindRatio& kr) {
        out += std::string(name) + "," + std::to_string(kr.count) + "," + std::to_string(kr.ratio) + "\n";
    };
    for (auto k : all_mask_kinds) {
        if (rep[k]) {
            row(to_string(k), *rep[k]);
        }
    }
    row("total", rep.total);
    return out;
}

}  // namespace uniforget
