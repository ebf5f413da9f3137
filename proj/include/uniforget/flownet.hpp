#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "uniforget/errors.hpp"
#include "uniforget/maskengine.hpp"
#include "uniforget/memoria.hpp"
#include "uniforget/optim.hpp"
#include "uniforget/rng.hpp"
#include "uniforget/types.hpp"

namespace uniforget {

struct TensorSlot {
    std::string key;
    std::vector<int> shape;
    std::size_t offset = 0;
    std::size_t size = 0;
};

struct BlockOffsets {
    std::size_t norm1_scale, norm1_offset, norm1_mod_w, norm1_mod_b, wq, wk, wv, wo;
    std::size_t norm2_scale, norm2_offset, norm2_mod_w, norm2_mod_b, w1, b1, w2, b2;
};

/// Flat-store layout of every parameter array. Shapes depend only on the ModelSpec;
/// weight matrices are row-major [in][out].
class ParamLayout {
public:
    ParamLayout() = default;
    explicit ParamLayout(const ModelSpec& spec) {
        spec.validate();
        const int e = spec.token_dim;
        const int h = spec.ffn_hidden;
        cond_embed = add("cond_embed", {spec.cond_vocab, e});
        pos_embed = add("pos_embed", {spec.n_tokens(), e});
        time_w = add("time.w", {2 * spec.time_freqs, e});
        time_b = add("time.b", {e});
        for (int l = 0; l < spec.n_blocks; ++l) {
            const std::string p = "blocks." + std::to_string(l) + ".";
            BlockOffsets b{};
            b.norm1_scale = add(p + "norm1.scale", {e});
            b.norm1_offset = add(p + "norm1.offset", {e});
            b.norm1_mod_w = add(p + "norm1.mod.w", {e, 2 * e});
            b.norm1_mod_b = add(p + "norm1.mod.b", {2 * e});
            b.wq = add(p + "attn.q", {e, e});
            b.wk = add(p + "attn.k", {e, e});
            b.wv = add(p + "attn.v", {e, e});
            b.wo = add(p + "attn.o", {e, e});
            b.norm2_scale = add(p + "norm2.scale", {e});
            b.norm2_offset = add(p + "norm2.offset", {e});
            b.norm2_mod_w = add(p + "norm2.mod.w", {e, 2 * e});
            b.norm2_mod_b = add(p + "norm2.mod.b", {2 * e});
            b.w1 = add(p + "ffn.w1", {e, h});
            b.b1 = add(p + "ffn.b1", {h});
            b.w2 = add(p + "ffn.w2", {h, e});
            b.b2 = add(p + "ffn.b2", {e});
            blocks.push_back(b);
        }
        head_mod_w = add("head.mod.w", {e, 2 * e});
        head_mod_b = add("head.mod.b", {2 * e});
        head_w = add("head.w", {e, e});
        head_b = add("head.b", {e});
    }

    std::size_t cond_embed = 0, pos_embed = 0, time_w = 0, time_b = 0, head_mod_w = 0, head_mod_b = 0, head_w = 0, head_b = 0;
    std::vector<BlockOffsets> blocks;
    std::vector<TensorSlot> slots;
    std::size_t total = 0;

    const TensorSlot& slot(std::string_view key) const {
        for (const auto& s : slots) {
            if (s.key == key) {
                return s;
            }
        }
        throw ConfigError("no parameter named '" + std::string(key) + "'");
    }

private:
    std::size_t add(std::string key, std::vector<int> shape) {
        std::size_t n = 1;
        for (int s : shape) n *= static_cast<std::size_t>(s);
        slots.push_back({std::move(key), std::move(shape), total, n});
        const auto off = total;
        total += n;
        return off;
    }
};

/// Weights of the velocity field u. Paired with gate values it becomes the
/// masked model u_theta.
struct Parameters {
    ModelSpec spec;
    ParamLayout layout;
    std::vector<double> values;

    std::span<double> view(std::string_view key) {
        const auto& s = layout.slot(key);
        return {values.data() + s.offset, s.size};
    }
    std::span<const double> view(std::string_view key) const {
        const auto& s = layout.slot(key);
        return {values.data() + s.offset, s.size};
    }
    const double* at(std::size_t offset) const { return values.data() + offset; }

    friend bool operator==(const Parameters& a, const Parameters& b) { return a.spec == b.spec && a.values == b.values; }
};

inline Parameters zero_parameters(const ModelSpec& spec) {
    Parameters p;
    p.spec = spec;
    p.layout = ParamLayout(spec);
    p.values.assign(p.layout.total, 0.0);
    return p;
}

/// Fan-in uniform init: weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)) with fan_in
/// the row count; embeddings U(-1, 1); biases and offsets 0; norm scales 1.
/// The output head starts at zero so an untrained sampler is the identity map.
inline Parameters build_model(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    Parameters p = zero_parameters(spec);
    SeededNoise noise(derive_seed(seed, streams::init));
    auto fill_uniform = [&](std::size_t offset, std::size_t n, double bound) {
        for (std::size_t i = 0; i < n; ++i) {
            p.values[offset + i] = bound * (2.0 * noise.uniform() - 1.0);
        }
    };
    const auto e = static_cast<std::size_t>(spec.token_dim);
    const auto h = static_cast<std::size_t>(spec.ffn_hidden);
    fill_uniform(p.layout.cond_embed, static_cast<std::size_t>(spec.cond_vocab) * e, 1.0);
    fill_uniform(p.layout.pos_embed, static_cast<std::size_t>(spec.n_tokens()) * e, 1.0);
    fill_uniform(p.layout.time_w, static_cast<std::size_t>(2 * spec.time_freqs) * e, 1.0 / std::sqrt(2.0 * spec.time_freqs));
    const double inv_e = 1.0 / std::sqrt(static_cast<double>(e));
    for (const auto& b : p.layout.blocks) {
        std::fill_n(p.values.begin() + static_cast<std::ptrdiff_t>(b.norm1_scale), e, 1.0);
        std::fill_n(p.values.begin() + static_cast<std::ptrdiff_t>(b.norm2_scale), e, 1.0);
        fill_uniform(b.wq, e * e, inv_e);
        fill_uniform(b.wk, e * e, inv_e);
        fill_uniform(b.wv, e * e, inv_e);
        fill_uniform(b.wo, e * e, inv_e);
        fill_uniform(b.w1, e * h, inv_e);
        fill_uniform(b.w2, h * e, 1.0 / std::sqrt(static_cast<double>(h)));
    }
    return p;
}

inline bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

namespace detail {

inline constexpr double norm_eps = 1e-5;

// out[r, j] = sum_i in[r, i] * w[i, j] (+ bias[j])
inline void affine(const double* in, int rows, int n_in, const double* w, int n_out, const double* bias, double* out) {
    for (int r = 0; r < rows; ++r) {
        double* o = out + r * n_out;
        for (int j = 0; j < n_out; ++j) o[j] = bias ? bias[j] : 0.0;
        const double* x = in + r * n_in;
        for (int i = 0; i < n_in; ++i) {
            const double xi = x[i];
            const double* wr = w + i * n_out;
            for (int j = 0; j < n_out; ++j) o[j] += xi * wr[j];
        }
    }
}

// gw[i, j] += sum_r in[r, i] * gout[r, j]
inline void affine_grad_w(const double* in, int rows, int n_in, const double* gout, int n_out, double* gw) {
    for (int r = 0; r < rows; ++r) {
        const double* x = in + r * n_in;
        const double* g = gout + r * n_out;
        for (int i = 0; i < n_in; ++i) {
            const double xi = x[i];
            double* gr = gw + i * n_out;
            for (int j = 0; j < n_out; ++j) gr[j] += xi * g[j];
        }
    }
}

// gin[r, i] (+)= sum_j gout[r, j] * w[i, j]
inline void affine_grad_in(const double* gout, int rows, int n_out, const double* w, int n_in, double* gin, bool accumulate) {
    for (int r = 0; r < rows; ++r) {
        const double* g = gout + r * n_out;
        double* gi = gin + r * n_in;
        for (int i = 0; i < n_in; ++i) {
            const double* wr = w + i * n_out;
            double s = 0.0;
            for (int j = 0; j < n_out; ++j) s += g[j] * wr[j];
            gi[i] = accumulate ? gi[i] + s : s;
        }
    }
}

inline void add_bias_grad(const double* gout, int rows, int n, double* gb) {
    for (int r = 0; r < rows; ++r)
        for (int j = 0; j < n; ++j) gb[j] += gout[r * n + j];
}

inline constexpr double gelu_c = 0.7978845608028654;  // sqrt(2/pi)

inline double gelu(double a) { return 0.5 * a * (1.0 + std::tanh(gelu_c * (a + 0.044715 * a * a * a))); }

inline double silu(double a) { return a / (1.0 + std::exp(-a)); }
inline double silu_grad(double a) {
    const double sg = 1.0 / (1.0 + std::exp(-a));
    return sg * (1.0 + a * (1.0 - sg));
}

inline double gelu_grad(double a) {
    const double inner = gelu_c * (a + 0.044715 * a * a * a);
    const double th = std::tanh(inner);
    return 0.5 * (1.0 + th) + 0.5 * a * (1.0 - th * th) * gelu_c * (1.0 + 3.0 * 0.044715 * a * a);
}

// Per-token layer norm: n = (x - mean) * istd, u = n * scale + offset.
inline void layer_norm(const double* x, int rows, int e, const double* scale, const double* offset, double* n, double* istd,
                       double* u) {
    for (int r = 0; r < rows; ++r) {
        const double* xr = x + r * e;
        double mean = 0.0;
        for (int i = 0; i < e; ++i) mean += xr[i];
        mean /= e;
        double var = 0.0;
        for (int i = 0; i < e; ++i) var += (xr[i] - mean) * (xr[i] - mean);
        var /= e;
        const double is = 1.0 / std::sqrt(var + norm_eps);
        istd[r] = is;
        for (int i = 0; i < e; ++i) {
            n[r * e + i] = (xr[i] - mean) * is;
            u[r * e + i] = n[r * e + i] * scale[i] + offset[i];
        }
    }
}

// Accumulates into gx; also accumulates d/d(scale) into g_scale and d/d(offset) into g_offset when non-null.
inline void layer_norm_backward(const double* gu, const double* n, const double* istd, int rows, int e, const double* scale,
                                double* g_scale, double* g_offset, double* gx) {
    for (int r = 0; r < rows; ++r) {
        const double* g = gu + r * e;
        const double* nr = n + r * e;
        double mean_gn = 0.0, mean_gnn = 0.0;
        for (int i = 0; i < e; ++i) {
            const double gn = g[i] * scale[i];
            mean_gn += gn;
            mean_gnn += gn * nr[i];
            if (g_scale) g_scale[i] += g[i] * nr[i];
            if (g_offset) g_offset[i] += g[i];
        }
        mean_gn /= e;
        mean_gnn /= e;
        for (int i = 0; i < e; ++i) {
            const double gn = g[i] * scale[i];
            gx[r * e + i] += istd[r] * (gn - mean_gn - nr[i] * mean_gnn);
        }
    }
}

}  // namespace detail

/// Activations of one block retained for the backward pass.
struct BlockCache {
    std::vector<double> n1, istd1, u1, q, k, v, probs, heads;
    std::vector<double> n2, istd2, u2, pre, act;
    std::vector<double> mod1, mod2;  // [scale shift, shift] per norm, 2e each
};

/// Everything the backward pass of one velocity evaluation needs.
struct VelocityCache {
    int cond = 0;
    double t = 0.0;
    std::vector<double> feats;
    std::vector<double> ctx_pre;  // condition + time embedding before SiLU
    std::vector<double> head_mod;
    std::vector<BlockCache> blocks;
    std::vector<double> x_out;
};

/// Fixed output preconditioning 1/(1 - t + eps). The head then regresses
/// (1 - t + eps) * v, which stays bounded where the exact velocity of a
/// point mass, (x - z)/(1 - t), does not.
inline constexpr double output_gain_eps = 0.1;
inline double output_gain(double t) { return 1.0 / (1.0 - t + output_gain_eps); }

/// Input normalization: z_t has per-coordinate std sqrt((1-t)^2 + t^2 s^2).
inline double input_gain(double t, double data_scale) {
    return 1.0 / std::sqrt((1.0 - t) * (1.0 - t) + t * t * data_scale * data_scale);
}

inline void time_features(double t, int freqs, double* out) {
    for (int j = 0; j < freqs; ++j) {
        const double w = std::numbers::pi * std::ldexp(1.0, j);
        out[2 * j] = std::sin(w * t);
        out[2 * j + 1] = std::cos(w * t);
    }
}

namespace detail {

inline const double* gate_ptr(const Gates* g, MaskKind k) {
    return (g != nullptr && g->enabled.contains(k)) ? g->values[k].data() : nullptr;
}

inline void check_gates(const ModelSpec& spec, const Gates* g) {
    if (g == nullptr) return;
    require(g->spec == spec, "gates were built for a different model spec");
    const auto ref = GateArrays::filled(spec, 0.0);
    for (auto k : g->enabled.kinds()) {
        require(g->values[k].size() == ref[k].size(), "gate array shape mismatch for kind " + std::string(to_string(k)));
    }
}

}  // namespace detail

/// Evaluates the velocity u(z, t, c), optionally gated, writing d values into
/// `out` and filling `cache` for a later velocity_backward.
inline void velocity_forward(const Parameters& params, const Gates* gates, std::span<const double> z, double t,
                             const Condition& c, std::span<double> out, VelocityCache& cache) {
    const auto& spec = params.spec;
    const auto& L = params.layout;
    const int S = spec.n_tokens();
    const int e = spec.token_dim;
    const int H = spec.ffn_hidden;
    const int A = spec.n_heads;
    const int hd = spec.head_dim();
    require(c.id >= 0 && c.id < spec.cond_vocab,
            "condition id " + std::to_string(c.id) + " outside vocabulary of size " + std::to_string(spec.cond_vocab));
    require(z.size() == static_cast<std::size_t>(spec.latent_dim) && out.size() == z.size(), "velocity: latent size mismatch");

    const std::size_t se = static_cast<std::size_t>(S * e);
    cache.cond = c.id;
    cache.t = t;
    cache.feats.resize(static_cast<std::size_t>(2 * spec.time_freqs));
    time_features(t, spec.time_freqs, cache.feats.data());
    std::vector<double> temb(static_cast<std::size_t>(e));
    detail::affine(cache.feats.data(), 1, 2 * spec.time_freqs, params.at(L.time_w), e, params.at(L.time_b), temb.data());

    std::vector<double> x(se);
    const double c_in = input_gain(t, spec.data_scale);
    const double* ce = params.at(L.cond_embed) + c.id * e;
    const double* pe = params.at(L.pos_embed);
    for (int s = 0; s < S; ++s)
        for (int i = 0; i < e; ++i) x[s * e + i] = c_in * z[s * e + i] + ce[i] + pe[s * e + i] + temb[i];

    // norm modulation context: silu(cond + time)
    cache.ctx_pre.resize(static_cast<std::size_t>(e));
    std::vector<double> ctx(static_cast<std::size_t>(e));
    for (int i = 0; i < e; ++i) {
        cache.ctx_pre[i] = ce[i] + temb[i];
        ctx[i] = detail::silu(cache.ctx_pre[i]);
    }

    const double* g_ffn = detail::gate_ptr(gates, MaskKind::ffn);
    const double* g_attn = detail::gate_ptr(gates, MaskKind::attn);
    const double* g_norm = detail::gate_ptr(gates, MaskKind::norm);

    cache.blocks.resize(static_cast<std::size_t>(spec.n_blocks));
    std::vector<double> scale(static_cast<std::size_t>(e)), offset(static_cast<std::size_t>(e)), tmp(se);
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
    for (int l = 0; l < spec.n_blocks; ++l) {
        const auto& b = L.blocks[static_cast<std::size_t>(l)];
        auto& bc = cache.blocks[static_cast<std::size_t>(l)];
        bc.n1.resize(se); bc.istd1.resize(static_cast<std::size_t>(S)); bc.u1.resize(se);
        bc.q.resize(se); bc.k.resize(se); bc.v.resize(se);
        bc.probs.resize(static_cast<std::size_t>(A * S * S)); bc.heads.resize(se);
        bc.n2.resize(se); bc.istd2.resize(static_cast<std::size_t>(S)); bc.u2.resize(se);
        bc.pre.resize(static_cast<std::size_t>(S * H)); bc.act.resize(static_cast<std::size_t>(S * H));

        // attention sublayer
        bc.mod1.resize(static_cast<std::size_t>(2 * e));
        detail::affine(ctx.data(), 1, e, params.at(b.norm1_mod_w), 2 * e, params.at(b.norm1_mod_b), bc.mod1.data());
        for (int i = 0; i < e; ++i) {
            scale[i] = params.at(b.norm1_scale)[i] + bc.mod1[i];
            offset[i] = params.at(b.norm1_offset)[i] + bc.mod1[e + i];
        }
        if (g_norm) {
            apply(*gates, {MaskKind::norm, l, 0}, scale);
        }
        detail::layer_norm(x.data(), S, e, scale.data(), offset.data(), bc.n1.data(), bc.istd1.data(), bc.u1.data());
        detail::affine(bc.u1.data(), S, e, params.at(b.wq), e, nullptr, bc.q.data());
        detail::affine(bc.u1.data(), S, e, params.at(b.wk), e, nullptr, bc.k.data());
        detail::affine(bc.u1.data(), S, e, params.at(b.wv), e, nullptr, bc.v.data());
        for (int a = 0; a < A; ++a) {
            for (int s = 0; s < S; ++s) {
                double* p = bc.probs.data() + (a * S + s) * S;
                double mx = -1e300;
                for (int u = 0; u < S; ++u) {
                    double dot = 0.0;
                    for (int i = 0; i < hd; ++i) dot += bc.q[s * e + a * hd + i] * bc.k[u * e + a * hd + i];
                    p[u] = dot * inv_sqrt_hd;
                    mx = std::max(mx, p[u]);
                }
                double sum = 0.0;
                for (int u = 0; u < S; ++u) {
                    p[u] = std::exp(p[u] - mx);
                    sum += p[u];
                }
                for (int u = 0; u < S; ++u) p[u] /= sum;
                for (int i = 0; i < hd; ++i) {
                    double o = 0.0;
                    for (int u = 0; u < S; ++u) o += p[u] * bc.v[u * e + a * hd + i];
                    bc.heads[s * e + a * hd + i] = o;
                }
            }
        }
        tmp = bc.heads;
        if (g_attn) {
            for (int s = 0; s < S; ++s) apply(*gates, {MaskKind::attn, l}, std::span<double>(tmp.data() + s * e, static_cast<std::size_t>(e)));
        }
        std::vector<double> attn_out(se);
        detail::affine(tmp.data(), S, e, params.at(b.wo), e, nullptr, attn_out.data());
        for (std::size_t i = 0; i < se; ++i) x[i] += attn_out[i];

        // feed-forward sublayer
        bc.mod2.resize(static_cast<std::size_t>(2 * e));
        detail::affine(ctx.data(), 1, e, params.at(b.norm2_mod_w), 2 * e, params.at(b.norm2_mod_b), bc.mod2.data());
        for (int i = 0; i < e; ++i) {
            scale[i] = params.at(b.norm2_scale)[i] + bc.mod2[i];
            offset[i] = params.at(b.norm2_offset)[i] + bc.mod2[e + i];
        }
        if (g_norm) {
            apply(*gates, {MaskKind::norm, l, 1}, scale);
        }
        detail::layer_norm(x.data(), S, e, scale.data(), offset.data(), bc.n2.data(), bc.istd2.data(), bc.u2.data());
        detail::affine(bc.u2.data(), S, e, params.at(b.w1), H, params.at(b.b1), bc.pre.data());
        std::vector<double> gated(static_cast<std::size_t>(S * H));
        for (int i = 0; i < S * H; ++i) {
            bc.act[i] = detail::gelu(bc.pre[i]);
            gated[i] = bc.act[i];
        }
        if (g_ffn) {
            for (int s = 0; s < S; ++s) apply(*gates, {MaskKind::ffn, l}, std::span<double>(gated.data() + s * H, static_cast<std::size_t>(H)));
        }
        detail::affine(gated.data(), S, H, params.at(b.w2), e, params.at(b.b2), attn_out.data());
        for (std::size_t i = 0; i < se; ++i) x[i] += attn_out[i];
    }
    cache.x_out = x;
    // output modulation: x * (1 + ds) + sh, [ds, sh] = ctx W + b
    cache.head_mod.resize(static_cast<std::size_t>(2 * e));
    detail::affine(ctx.data(), 1, e, params.at(L.head_mod_w), 2 * e, params.at(L.head_mod_b), cache.head_mod.data());
    for (int s = 0; s < S; ++s)
        for (int i = 0; i < e; ++i) x[s * e + i] = x[s * e + i] * (1.0 + cache.head_mod[i]) + cache.head_mod[e + i];
    detail::affine(x.data(), S, e, params.at(L.head_w), e, params.at(L.head_b), out.data());
    const double c_out = output_gain(t) * spec.data_scale;
    for (auto& v : out) v *= c_out;
}

/// Where gradients of one backward pass are accumulated. Either sink may be
/// empty, in which case the corresponding work is skipped.
struct GradSink {
    std::span<double> params;
    GateArrays* gates = nullptr;
};

/// Vector-Jacobian product of velocity_forward: given d(loss)/d(out), writes
/// d(loss)/dz into `grad_z` and accumulates parameter and gate-value gradients.
inline void velocity_backward(const Parameters& params, const Gates* gates, const VelocityCache& cache,
                              std::span<const double> grad_out, std::span<double> grad_z, GradSink sink) {
    const auto& spec = params.spec;
    const auto& L = params.layout;
    const int S = spec.n_tokens();
    const int e = spec.token_dim;
    const int H = spec.ffn_hidden;
    const int A = spec.n_heads;
    const int hd = spec.head_dim();
    const std::size_t se = static_cast<std::size_t>(S * e);
    const bool want_params = !sink.params.empty();
    double* gp = want_params ? sink.params.data() : nullptr;
    if (want_params) require(sink.params.size() == params.values.size(), "velocity_backward: gradient buffer size mismatch");

    const double* g_ffn = detail::gate_ptr(gates, MaskKind::ffn);
    const double* g_attn = detail::gate_ptr(gates, MaskKind::attn);
    const double* g_norm = detail::gate_ptr(gates, MaskKind::norm);
    GateArrays* gg = sink.gates;
    if (gg != nullptr) {
        const auto ref = GateArrays::filled(spec, 0.0);
        for (auto k : all_mask_kinds) {
            if ((*gg)[k].size() != ref[k].size()) (*gg)[k].assign(ref[k].size(), 0.0);
        }
    }

    // head
    std::vector<double> gx(se, 0.0);
    std::vector<double> gout(grad_out.begin(), grad_out.end());
    for (auto& g : gout) g *= output_gain(cache.t) * spec.data_scale;
    {
        std::vector<double> xm(se);
        for (int s = 0; s < S; ++s)
            for (int i = 0; i < e; ++i) xm[s * e + i] = cache.x_out[s * e + i] * (1.0 + cache.head_mod[i]) + cache.head_mod[e + i];
        if (want_params) {
            detail::affine_grad_w(xm.data(), S, e, gout.data(), e, gp + L.head_w);
            detail::add_bias_grad(gout.data(), S, e, gp + L.head_b);
        }
    }
    detail::affine_grad_in(gout.data(), S, e, params.at(L.head_w), e, gx.data(), false);
    std::vector<double> ghead_mod(static_cast<std::size_t>(2 * e), 0.0);
    for (int s = 0; s < S; ++s) {
        for (int i = 0; i < e; ++i) {
            ghead_mod[i] += gx[s * e + i] * cache.x_out[s * e + i];
            ghead_mod[e + i] += gx[s * e + i];
            gx[s * e + i] *= 1.0 + cache.head_mod[i];
        }
    }

    std::vector<double> gbuf(se), gu(se), gq(se), gk(se), gv(se);
    std::vector<double> scale(static_cast<std::size_t>(e)), gscale(static_cast<std::size_t>(e)), goffset(static_cast<std::size_t>(e));
    std::vector<double> ctx(static_cast<std::size_t>(e)), gctx(static_cast<std::size_t>(e), 0.0), gmod(static_cast<std::size_t>(2 * e));
    for (int i = 0; i < e; ++i) ctx[i] = detail::silu(cache.ctx_pre[i]);
    // Backward through a modulated norm: u = n * m(g + ds) + (offset + sh),
    // [ds, sh] = ctx W + b. Reads gu, accumulates into gx.
    auto norm_backward = [&](int l, int slot, std::size_t scale_at, std::size_t offset_at, std::size_t mod_w,
                             std::size_t mod_b, const std::vector<double>& mod, const std::vector<double>& n,
                             const std::vector<double>& istd) {
        const double* g = g_norm ? g_norm + (l * 2 + slot) * e : nullptr;
        for (int i = 0; i < e; ++i) scale[i] = (params.at(scale_at)[i] + mod[i]) * (g ? g[i] : 1.0);
        std::fill(gscale.begin(), gscale.end(), 0.0);
        std::fill(goffset.begin(), goffset.end(), 0.0);
        detail::layer_norm_backward(gu.data(), n.data(), istd.data(), S, e, scale.data(), gscale.data(), goffset.data(), gx.data());
        if (g && gg) {
            for (int i = 0; i < e; ++i)
                gg->norm[static_cast<std::size_t>((l * 2 + slot) * e + i)] += gscale[i] * (params.at(scale_at)[i] + mod[i]);
        }
        if (!want_params) return;
        for (int i = 0; i < e; ++i) {
            gmod[i] = gscale[i] * (g ? g[i] : 1.0);
            gmod[e + i] = goffset[i];
            gp[scale_at + static_cast<std::size_t>(i)] += gmod[i];
            gp[offset_at + static_cast<std::size_t>(i)] += gmod[e + i];
        }
        detail::affine_grad_w(ctx.data(), 1, e, gmod.data(), 2 * e, gp + mod_w);
        detail::add_bias_grad(gmod.data(), 1, 2 * e, gp + mod_b);
        detail::affine_grad_in(gmod.data(), 1, 2 * e, params.at(mod_w), e, gctx.data(), true);
    };
    if (want_params) {
        detail::affine_grad_w(ctx.data(), 1, e, ghead_mod.data(), 2 * e, gp + L.head_mod_w);
        detail::add_bias_grad(ghead_mod.data(), 1, 2 * e, gp + L.head_mod_b);
        detail::affine_grad_in(ghead_mod.data(), 1, 2 * e, params.at(L.head_mod_w), e, gctx.data(), true);
    }

    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
    for (int l = spec.n_blocks - 1; l >= 0; --l) {
        const auto& b = L.blocks[static_cast<std::size_t>(l)];
        const auto& bc = cache.blocks[static_cast<std::size_t>(l)];

        // feed-forward sublayer: x += W2^T (m * gelu(W1 u2 + b1)) + b2
        std::vector<double> gated(static_cast<std::size_t>(S * H));
        for (int s = 0; s < S; ++s)
            for (int j = 0; j < H; ++j) gated[s * H + j] = bc.act[s * H + j] * (g_ffn ? g_ffn[l * H + j] : 1.0);
        if (want_params) {
            detail::affine_grad_w(gated.data(), S, H, gx.data(), e, gp + b.w2);
            detail::add_bias_grad(gx.data(), S, e, gp + b.b2);
        }
        std::vector<double> ggated(static_cast<std::size_t>(S * H));
        detail::affine_grad_in(gx.data(), S, e, params.at(b.w2), H, ggated.data(), false);
        std::vector<double> gpre(static_cast<std::size_t>(S * H));
        for (int s = 0; s < S; ++s) {
            for (int j = 0; j < H; ++j) {
                const int i = s * H + j;
                double ga = ggated[i];
                if (g_ffn) {
                    if (gg) gg->ffn[static_cast<std::size_t>(l * H + j)] += ga * bc.act[i];
                    ga *= g_ffn[l * H + j];
                }
                gpre[i] = ga * detail::gelu_grad(bc.pre[i]);
            }
        }
        if (want_params) {
            detail::affine_grad_w(bc.u2.data(), S, e, gpre.data(), H, gp + b.w1);
            detail::add_bias_grad(gpre.data(), S, H, gp + b.b1);
        }
        detail::affine_grad_in(gpre.data(), S, H, params.at(b.w1), e, gu.data(), false);
        norm_backward(l, 1, b.norm2_scale, b.norm2_offset, b.norm2_mod_w, b.norm2_mod_b, bc.mod2, bc.n2, bc.istd2);

        // attention sublayer: x += Wo^T (m * heads)
        std::vector<double> gated_heads(bc.heads);
        if (g_attn)
            for (int s = 0; s < S; ++s) apply(*gates, {MaskKind::attn, l}, std::span<double>(gated_heads.data() + s * e, static_cast<std::size_t>(e)));
        if (want_params) detail::affine_grad_w(gated_heads.data(), S, e, gx.data(), e, gp + b.wo);
        detail::affine_grad_in(gx.data(), S, e, params.at(b.wo), e, gbuf.data(), false);
        if (g_attn) {
            for (int s = 0; s < S; ++s) {
                for (int a = 0; a < A; ++a) {
                    const double m = g_attn[l * A + a];
                    for (int i = 0; i < hd; ++i) {
                        const int idx = s * e + a * hd + i;
                        if (gg) gg->attn[static_cast<std::size_t>(l * A + a)] += gbuf[idx] * bc.heads[idx];
                        gbuf[idx] *= m;
                    }
                }
            }
        }
        std::fill(gq.begin(), gq.end(), 0.0);
        std::fill(gk.begin(), gk.end(), 0.0);
        std::fill(gv.begin(), gv.end(), 0.0);
        std::vector<double> gp_row(static_cast<std::size_t>(S));
        for (int a = 0; a < A; ++a) {
            for (int s = 0; s < S; ++s) {
                const double* p = bc.probs.data() + (a * S + s) * S;
                const double* go = gbuf.data() + s * e + a * hd;
                double dot_pg = 0.0;
                for (int u = 0; u < S; ++u) {
                    double g = 0.0;
                    for (int i = 0; i < hd; ++i) {
                        g += go[i] * bc.v[u * e + a * hd + i];
                        gv[u * e + a * hd + i] += p[u] * go[i];
                    }
                    gp_row[u] = g;
                    dot_pg += p[u] * g;
                }
                for (int u = 0; u < S; ++u) {
                    const double gs = p[u] * (gp_row[u] - dot_pg) * inv_sqrt_hd;
                    for (int i = 0; i < hd; ++i) {
                        gq[s * e + a * hd + i] += gs * bc.k[u * e + a * hd + i];
                        gk[u * e + a * hd + i] += gs * bc.q[s * e + a * hd + i];
                    }
                }
            }
        }
        if (want_params) {
            detail::affine_grad_w(bc.u1.data(), S, e, gq.data(), e, gp + b.wq);
            detail::affine_grad_w(bc.u1.data(), S, e, gk.data(), e, gp + b.wk);
            detail::affine_grad_w(bc.u1.data(), S, e, gv.data(), e, gp + b.wv);
        }
        detail::affine_grad_in(gq.data(), S, e, params.at(b.wq), e, gu.data(), false);
        detail::affine_grad_in(gk.data(), S, e, params.at(b.wk), e, gu.data(), true);
        detail::affine_grad_in(gv.data(), S, e, params.at(b.wv), e, gu.data(), true);
        norm_backward(l, 0, b.norm1_scale, b.norm1_offset, b.norm1_mod_w, b.norm1_mod_b, bc.mod1, bc.n1, bc.istd1);
    }

    // input embedding: x = z + cond + pos + time
    const double c_in = input_gain(cache.t, spec.data_scale);
    std::transform(gx.begin(), gx.end(), grad_z.begin(), [c_in](double g) { return g * c_in; });
    if (want_params) {
        std::vector<double> gt(static_cast<std::size_t>(e), 0.0);
        for (int i = 0; i < e; ++i) {
            const double g = gctx[i] * detail::silu_grad(cache.ctx_pre[i]);
            gp[L.cond_embed + static_cast<std::size_t>(cache.cond * e + i)] += g;
            gt[static_cast<std::size_t>(i)] += g;
        }
        for (int s = 0; s < S; ++s) {
            for (int i = 0; i < e; ++i) {
                const double g = gx[s * e + i];
                gp[L.cond_embed + static_cast<std::size_t>(cache.cond * e + i)] += g;
                gp[L.pos_embed + static_cast<std::size_t>(s * e + i)] += g;
                gt[static_cast<std::size_t>(i)] += g;
            }
        }
        detail::affine_grad_w(cache.feats.data(), 1, 2 * spec.time_freqs, gt.data(), e, gp + L.time_w);
        detail::add_bias_grad(gt.data(), 1, e, gp + L.time_b);
    }
}

inline Latent velocity(const Parameters& params, const Gates* masks, std::span<const double> z, double t, const Condition& c) {
    require(t >= 0.0 && t <= 1.0, "velocity: t must lie in [0,1]");
    detail::check_gates(params.spec, masks);
    Latent out(z.size());
    VelocityCache cache;
    velocity_forward(params, masks, z, t, c, out, cache);
    return out;
}

/// Anything that maps (z, t, c) to a velocity of the same dimension.
template <class F>
concept VelocityField = requires(const F& f, std::span<const double> z, double t, const Condition& c, std::span<double> out) {
    { f.dim() } -> std::convertible_to<int>;
    f(z, t, c, out);
};

/// The network, optionally gated, as a VelocityField.
class NetField {
public:
    NetField(const Parameters& params, const Gates* gates) : params_(params), gates_(gates) {
        detail::check_gates(params.spec, gates);
    }
    int dim() const { return params_.spec.latent_dim; }
    void operator()(std::span<const double> z, double t, const Condition& c, std::span<double> out) const {
        velocity_forward(params_, gates_, z, t, c, out, cache_);
    }

private:
    const Parameters& params_;
    const Gates* gates_;
    mutable VelocityCache cache_;
};

struct SampleResult {
    Latent z;                         // z_N
    std::vector<Latent> trajectory;   // z_0..z_N when requested
};

/// Explicit Euler over t in [0,1]: z_{k+1} = z_k + (1/N) u(z_k, k/N, c).
template <VelocityField F>
SampleResult euler_sample(const F& field, std::span<const double> z0, int steps, const Condition& c, bool keep_trajectory = false) {
    require(steps >= 1, "euler_sample: step count must be >= 1");
    require(z0.size() == static_cast<std::size_t>(field.dim()), "euler_sample: z0 has wrong dimension");
    require(all_finite(z0), "euler_sample: z0 must be finite");
    SampleResult res;
    res.z.assign(z0.begin(), z0.end());
    if (keep_trajectory) res.trajectory.push_back(res.z);
    Latent v(z0.size());
    const double h = 1.0 / steps;
    for (int k = 0; k < steps; ++k) {
        field(res.z, k * h, c, v);
        for (std::size_t i = 0; i < v.size(); ++i) res.z[i] += h * v[i];
        if (keep_trajectory) res.trajectory.push_back(res.z);
    }
    return res;
}

inline SampleResult euler_sample(const Parameters& params, const Gates* masks, std::span<const double> z0, int steps,
                                 const Condition& c, bool keep_trajectory = false) {
    return euler_sample(NetField(params, masks), z0, steps, c, keep_trajectory);
}

enum class BackpropMode : std::uint8_t { retain_all, recompute };

struct UnrolledStats {
    std::size_t peak_live_caches = 0;
    std::size_t forward_evals = 0;
};

/// The Euler sampler unrolled for reverse-mode differentiation.
///
/// retain_all keeps every step's activations; recompute keeps only the states
/// z_k and re-runs one step's forward during the backward sweep, so at most one
/// step's activations are alive. Both perform the same arithmetic in the same
/// order and yield identical gradients.
class UnrolledEuler {
public:
    UnrolledEuler(const Parameters& params, const Gates* gates, int steps, BackpropMode mode)
        : params_(params), gates_(gates), steps_(steps), mode_(mode) {
        require(steps >= 1, "unrolled sampler: step count must be >= 1");
        detail::check_gates(params.spec, gates);
    }

    const Latent& forward(std::span<const double> z0, const Condition& c) {
        require(z0.size() == static_cast<std::size_t>(params_.spec.latent_dim), "unrolled sampler: z0 has wrong dimension");
        cond_ = c;
        states_.assign(1, Latent(z0.begin(), z0.end()));
        caches_.clear();
        live_ = 0;
        const double h = 1.0 / steps_;
        Latent v(z0.size());
        for (int k = 0; k < steps_; ++k) {
            VelocityCache* cache = nullptr;
            if (mode_ == BackpropMode::retain_all) {
                caches_.emplace_back();
                cache = &caches_.back();
                track(caches_.size());
            } else {
                cache = &scratch_;
                track(1);
            }
            velocity_forward(params_, gates_, states_.back(), k * h, c, v, *cache);
            ++stats_.forward_evals;
            Latent next = states_.back();
            for (std::size_t i = 0; i < v.size(); ++i) next[i] += h * v[i];
            states_.push_back(std::move(next));
        }
        return states_.back();
    }

    /// Given d(loss)/dz_N, accumulates gradients into `sink` and returns d(loss)/dz_0.
    Latent backward(std::span<const double> grad_final, GradSink sink) {
        require(static_cast<int>(states_.size()) == steps_ + 1, "unrolled sampler: backward called before forward");
        const double h = 1.0 / steps_;
        Latent gz(grad_final.begin(), grad_final.end());
        Latent gv(gz.size()), gprev(gz.size()), v(gz.size());
        for (int k = steps_ - 1; k >= 0; --k) {
            const VelocityCache* cache = nullptr;
            if (mode_ == BackpropMode::retain_all) {
                cache = &caches_[static_cast<std::size_t>(k)];
            } else {
                track(1);
                velocity_forward(params_, gates_, states_[static_cast<std::size_t>(k)], k * h, cond_, v, scratch_);
                ++stats_.forward_evals;
                cache = &scratch_;
            }
            for (std::size_t i = 0; i < gz.size(); ++i) gv[i] = h * gz[i];
            velocity_backward(params_, gates_, *cache, gv, gprev, sink);
            for (std::size_t i = 0; i < gz.size(); ++i) gz[i] += gprev[i];
        }
        return gz;
    }

    const UnrolledStats& stats() const { return stats_; }

private:
    void track(std::size_t live) {
        live_ = live;
        stats_.peak_live_caches = std::max(stats_.peak_live_caches, live_);
    }

    const Parameters& params_;
    const Gates* gates_;
    int steps_;
    BackpropMode mode_;
    Condition cond_{};
    std::vector<Latent> states_;
    std::vector<VelocityCache> caches_;
    VelocityCache scratch_;
    std::size_t live_ = 0;
    UnrolledStats stats_;
};

/// Rectified-flow regression. For each sample: z0 ~ N(0, I), t ~ U(0,1),
/// z_t = (1-t) z0 + t x, target x - z0. Returns the mean over the batch of the
/// per-element squared error. Noise is consumed per sample as (z0, then t).
template <VelocityField F>
double flow_matching_loss(const F& field, std::span<const LabeledSample> batch, NoiseSource& noise) {
    require(!batch.empty(), "flow_matching_loss: empty batch");
    const auto d = static_cast<std::size_t>(field.dim());
    Latent z0(d), zt(d), v(d);
    double total = 0.0;
    for (const auto& s : batch) {
        require(s.x.size() == d, "flow_matching_loss: sample dimension mismatch");
        noise.normal(z0);
        const double t = noise.uniform();
        for (std::size_t i = 0; i < d; ++i) zt[i] = (1.0 - t) * z0[i] + t * s.x[i];
        field(zt, t, s.cond, v);
        double se = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double r = v[i] - (s.x[i] - z0[i]);
            se += r * r;
        }
        total += se / static_cast<double>(d);
    }
    return total / static_cast<double>(batch.size());
}

/// flow_matching_loss for the network, accumulating gradients into `sink`.
inline double flow_matching_loss_grad(const Parameters& params, const Gates* gates, std::span<const LabeledSample> batch,
                                      NoiseSource& noise, GradSink sink) {
    require(!batch.empty(), "flow_matching_loss: empty batch");
    detail::check_gates(params.spec, gates);
    const auto d = static_cast<std::size_t>(params.spec.latent_dim);
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    Latent z0(d), zt(d), v(d), gout(d), gz(d);
    VelocityCache cache;
    double total = 0.0;
    for (const auto& s : batch) {
        require(s.x.size() == d, "flow_matching_loss: sample dimension mismatch");
        noise.normal(z0);
        const double t = noise.uniform();
        for (std::size_t i = 0; i < d; ++i) zt[i] = (1.0 - t) * z0[i] + t * s.x[i];
        velocity_forward(params, gates, zt, t, s.cond, v, cache);
        double se = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double r = v[i] - (s.x[i] - z0[i]);
            se += r * r;
            gout[i] = 2.0 * r * inv_b / static_cast<double>(d);
        }
        total += se / static_cast<double>(d);
        if (!sink.params.empty() || sink.gates != nullptr) {
            velocity_backward(params, gates, cache, gout, gz, sink);
        }
    }
    return total * inv_b;
}

inline double flow_matching_loss(const Parameters& params, const Gates* gates, std::span<const LabeledSample> batch,
                                 NoiseSource& noise) {
    return flow_matching_loss_grad(params, gates, batch, noise, {});
}

struct TrainConfig {
    int steps = 5000;
    double lr = 2e-2;
    int batch = 128;
    std::uint64_t seed = 0;
    bool cosine_decay = true;  // lr follows a half cosine down to 5% of its start

    void validate() const {
        require(steps >= 0, "train: steps must be >= 0");
        require(lr > 0.0, "train: lr must be > 0");
        require(batch >= 1, "train: batch must be >= 1");
    }
};

struct TrainLog {
    std::vector<double> loss;  // flow-matching loss of each step's batch
    double final_loss() const { return loss.empty() ? 0.0 : loss.back(); }
};

struct TrainResult {
    Parameters params;
    TrainLog log;
};

inline double cosine_lr_scale(int step, int steps) {
    if (steps <= 1) return 1.0;
    const double p = static_cast<double>(step) / static_cast<double>(steps - 1);
    return 0.05 + 0.95 * 0.5 * (1.0 + std::cos(std::numbers::pi * p));
}

/// Trains the unmasked network on the corpus with Adam. Batches are drawn
/// uniformly with replacement; deterministic given the seed.
inline TrainResult train_base(const Dataset& dataset, const ModelSpec& spec, const TrainConfig& cfg) {
    cfg.validate();
    require(dataset.size() > 0, "train_base: dataset is empty");
    require(dataset.dim == spec.latent_dim, "train_base: dataset dimension does not match latent_dim");
    TrainResult res{build_model(spec, cfg.seed), {}};
    if (cfg.steps == 0) {
        return res;
    }
    SeededNoise picker(derive_seed(cfg.seed, streams::batch));
    SeededNoise noise(derive_seed(cfg.seed, streams::noise));
    Adam opt(res.params.values.size(), cfg.lr);
    std::vector<double> grad(res.params.values.size());
    std::vector<LabeledSample> batch;
    res.log.loss.reserve(static_cast<std::size_t>(cfg.steps));
    for (int step = 0; step < cfg.steps; ++step) {
        batch.clear();
        for (int b = 0; b < cfg.batch; ++b) {
            auto i = static_cast<std::size_t>(picker.uniform() * static_cast<double>(dataset.size()));
            batch.push_back(dataset.sample(std::min(i, dataset.size() - 1)));
        }
        std::fill(grad.begin(), grad.end(), 0.0);
        const double loss = flow_matching_loss_grad(res.params, nullptr, batch, noise, {grad, nullptr});
        if (!std::isfinite(loss) || !all_finite(grad)) {
            throw NumericError("train_base: non-finite loss or gradient at step " + std::to_string(step));
        }
        res.log.loss.push_back(loss);
        opt.step(res.params.values, grad, cfg.cosine_decay ? cosine_lr_scale(step, cfg.steps) : 1.0);
    }
    return res;
}

}  // namespace uniforget
