#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <unistd.h>

#include <nlohmann/json.hpp>

#include "uniforget/analysis.hpp"
#include "uniforget/errors.hpp"
#include "uniforget/flownet.hpp"
#include "uniforget/maskengine.hpp"
#include "uniforget/memoria.hpp"
#include "uniforget/pruner.hpp"

namespace uniforget {

namespace fs = std::filesystem;
// Insertion-ordered so that every artifact starts with format_version and
// re-serializes to the same bytes.
using json = nlohmann::ordered_json;

inline constexpr int format_version = 1;

// ---------------------------------------------------------------- files

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) {
        throw IoError("read failed: " + path.string());
    }
    return ss.str();
}

/// Writes to a sibling temporary and renames it over `path`, so readers never
/// observe a partial file.
inline void atomic_write(const fs::path& path, std::string_view bytes) {
    std::error_code ec;
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path(), ec);
        if (ec) {
            throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
        }
    }
    auto tmp = path;
    tmp += ".tmp" + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw IoError("cannot write " + tmp.string());
        }
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) {
            throw IoError("write failed: " + tmp.string());
        }
    }
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp, ec);
        throw IoError("cannot rename onto " + path.string());
    }
}

inline json read_json(const fs::path& path) {
    const auto text = read_file(path);
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw IoError(path.string() + ": malformed JSON: " + e.what());
    }
}

inline void write_json(const fs::path& path, const json& j) { atomic_write(path, j.dump(2) + "\n"); }

inline void check_version(const json& j, const std::string& what) {
    if (!j.is_object() || !j.contains("format_version")) {
        throw IoError(what + ": missing format_version");
    }
    const auto& v = j["format_version"];
    if (!v.is_number_integer() || v.get<int>() != format_version) {
        throw IoError(what + ": unsupported format_version " + v.dump() + " (this build reads version " +
                      std::to_string(format_version) + ")");
    }
}

/// FNV-1a over the compact serialization, as 16 hex digits. Used to tie stage
/// outputs to the configuration that produced them.
inline std::string digest(const json& j) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : j.dump()) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// --------------------------------------------------------------- configs

namespace detail {

// Overwrites `field` when `key` is present; a type mismatch is a config error.
template <class T>
void take(const json& j, const char* key, T& field) {
    if (!j.contains(key)) {
        return;
    }
    try {
        field = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config field '") + key + "': " + e.what());
    }
}

inline void reject_unknown(const json& j, std::initializer_list<std::string_view> known, std::string_view section) {
    if (!j.is_object()) {
        throw ConfigError(std::string(section) + ": expected a JSON object");
    }
    for (const auto& [k, v] : j.items()) {
        bool ok = false;
        for (auto name : known) ok = ok || name == k;
        if (!ok) {
            throw ConfigError(std::string(section) + ": unknown field '" + k + "'");
        }
    }
}

}  // namespace detail

inline json to_json(const ModelSpec& s) {
    return json{{"latent_dim", s.latent_dim}, {"token_dim", s.token_dim}, {"n_blocks", s.n_blocks},
                {"n_heads", s.n_heads},       {"ffn_hidden", s.ffn_hidden}, {"cond_vocab", s.cond_vocab},
                {"time_freqs", s.time_freqs}, {"data_scale", s.data_scale}};
}

inline ModelSpec model_spec_from_json(const json& j) {
    detail::reject_unknown(j, {"latent_dim", "token_dim", "n_blocks", "n_heads", "ffn_hidden", "cond_vocab", "time_freqs", "data_scale"},
                           "model");
    ModelSpec s;
    detail::take(j, "latent_dim", s.latent_dim);
    detail::take(j, "token_dim", s.token_dim);
    detail::take(j, "n_blocks", s.n_blocks);
    detail::take(j, "n_heads", s.n_heads);
    detail::take(j, "ffn_hidden", s.ffn_hidden);
    detail::take(j, "cond_vocab", s.cond_vocab);
    detail::take(j, "time_freqs", s.time_freqs);
    detail::take(j, "data_scale", s.data_scale);
    s.validate();
    return s;
}

inline json to_json(const CorpusConfig& c) {
    return json{{"dim", c.dim},
                {"n_neutral", c.n_neutral},
                {"samples_per_neutral", c.samples_per_neutral},
                {"n_exemplars", c.n_exemplars},
                {"duplication", c.duplication},
                {"mixture_components", c.mixture_components},
                {"mixture_spread", c.mixture_spread},
                {"center_scale", c.center_scale},
                {"exemplar_scale", c.exemplar_scale},
                {"seed", c.seed},
                {"neutral_ids", c.neutral_ids},
                {"trigger_ids", c.trigger_ids}};
}

inline CorpusConfig corpus_config_from_json(const json& j) {
    detail::reject_unknown(j, {"dim", "n_neutral", "samples_per_neutral", "n_exemplars", "duplication", "mixture_components",
                               "mixture_spread", "center_scale", "exemplar_scale", "seed", "neutral_ids", "trigger_ids"},
                           "corpus");
    CorpusConfig c;
    detail::take(j, "dim", c.dim);
    detail::take(j, "n_neutral", c.n_neutral);
    detail::take(j, "samples_per_neutral", c.samples_per_neutral);
    detail::take(j, "n_exemplars", c.n_exemplars);
    detail::take(j, "duplication", c.duplication);
    detail::take(j, "mixture_components", c.mixture_components);
    detail::take(j, "mixture_spread", c.mixture_spread);
    detail::take(j, "center_scale", c.center_scale);
    detail::take(j, "exemplar_scale", c.exemplar_scale);
    detail::take(j, "seed", c.seed);
    detail::take(j, "neutral_ids", c.neutral_ids);
    detail::take(j, "trigger_ids", c.trigger_ids);
    c.validate();
    return c;
}

inline json to_json(const TrainConfig& c) {
    return json{{"steps", c.steps}, {"lr", c.lr}, {"batch", c.batch}, {"seed", c.seed}, {"cosine_decay", c.cosine_decay}};
}

inline TrainConfig train_config_from_json(const json& j) {
    detail::reject_unknown(j, {"steps", "lr", "batch", "seed", "cosine_decay"}, "train");
    TrainConfig c;
    detail::take(j, "steps", c.steps);
    detail::take(j, "lr", c.lr);
    detail::take(j, "batch", c.batch);
    detail::take(j, "seed", c.seed);
    detail::take(j, "cosine_decay", c.cosine_decay);
    c.validate();
    return c;
}

inline json to_json(const PruneConfig& c) {
    return json{{"beta", c.beta},
                {"steps", c.steps},
                {"lr", c.lr},
                {"retrain_lr", c.retrain_lr},
                {"batch", c.batch},
                {"sampler_steps", c.sampler_steps},
                {"seed", c.seed},
                {"recompute", c.recompute},
                {"kinds", c.kinds.to_string()},
                {"gamma", c.gamma},
                {"delta", c.delta},
                {"initial_gate", c.initial_gate},
                {"checkpoint_every", c.checkpoint_every}};
}

inline PruneConfig prune_config_from_json(const json& j) {
    detail::reject_unknown(j, {"beta", "steps", "lr", "retrain_lr", "batch", "sampler_steps", "seed", "recompute", "kinds", "gamma",
                               "delta", "initial_gate", "checkpoint_every"},
                           "prune");
    PruneConfig c;
    detail::take(j, "beta", c.beta);
    detail::take(j, "steps", c.steps);
    detail::take(j, "lr", c.lr);
    detail::take(j, "retrain_lr", c.retrain_lr);
    detail::take(j, "batch", c.batch);
    detail::take(j, "sampler_steps", c.sampler_steps);
    detail::take(j, "seed", c.seed);
    detail::take(j, "recompute", c.recompute);
    std::string kinds = c.kinds.to_string();
    detail::take(j, "kinds", kinds);
    c.kinds = KindSet::parse(kinds);
    detail::take(j, "gamma", c.gamma);
    detail::take(j, "delta", c.delta);
    detail::take(j, "initial_gate", c.initial_gate);
    detail::take(j, "checkpoint_every", c.checkpoint_every);
    c.validate();
    return c;
}

// ------------------------------------------------------------ checkpoints

struct Tensor {
    std::string key;
    std::vector<int> shape;
    std::vector<float> data;
};

/// Manifest (JSON) at `path` plus one little-endian float32 blob next to it
/// (`path` + ".bin"). `kind` and `meta` are free-form descriptors.
struct Checkpoint {
    std::string kind;
    ModelSpec spec;
    json meta = json::object();
    std::vector<Tensor> tensors;

    const Tensor& at(std::string_view key) const {
        for (const auto& t : tensors) {
            if (t.key == key) return t;
        }
        throw IoError("checkpoint has no tensor '" + std::string(key) + "'");
    }
    bool has(std::string_view key) const {
        for (const auto& t : tensors) {
            if (t.key == key) return true;
        }
        return false;
    }
};

inline fs::path blob_path(const fs::path& manifest) {
    auto p = manifest;
    p += ".bin";
    return p;
}

namespace detail {

inline std::size_t shape_size(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int s : shape) n *= static_cast<std::size_t>(s);
    return n;
}

inline Tensor to_tensor(std::string key, std::vector<int> shape, std::span<const double> values) {
    Tensor t{std::move(key), std::move(shape), {}};
    require(shape_size(t.shape) == values.size(), "tensor '" + t.key + "': shape does not match value count");
    t.data.resize(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        const auto f = static_cast<float>(values[i]);
        if (!std::isfinite(f)) {
            throw NumericError("tensor '" + t.key + "' holds a non-finite value at float precision");
        }
        t.data[i] = f;
    }
    return t;
}

inline void put_f32(std::string& out, float f) {
    const auto u = std::bit_cast<std::uint32_t>(f);
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((u >> (8 * b)) & 0xffu));
}

inline float get_f32(const char* p) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[b])) << (8 * b);
    return std::bit_cast<float>(u);
}

}  // namespace detail

inline void save_checkpoint(const fs::path& path, const Checkpoint& ck) {
    std::string blob;
    json tensors = json::object();
    for (const auto& t : ck.tensors) {
        require(detail::shape_size(t.shape) == t.data.size(), "tensor '" + t.key + "': shape does not match value count");
        require(!tensors.contains(t.key), "duplicate tensor key '" + t.key + "'");
        tensors[t.key] = json{{"dtype", "f32"}, {"shape", t.shape}, {"byte_offset", blob.size()}};
        for (float f : t.data) detail::put_f32(blob, f);
    }
    json manifest{{"format_version", format_version},
                  {"kind", ck.kind},
                  {"spec", to_json(ck.spec)},
                  {"blob", blob_path(path).filename().string()},
                  {"blob_bytes", blob.size()},
                  {"tensors", tensors},
                  {"meta", ck.meta}};
    // Blob first: a manifest on disk always refers to a complete blob.
    atomic_write(blob_path(path), blob);
    write_json(path, manifest);
}

inline Checkpoint load_checkpoint(const fs::path& path) {
    const auto manifest = read_json(path);
    check_version(manifest, path.string());
    Checkpoint ck;
    std::string blob;
    try {
        ck.kind = manifest.at("kind").get<std::string>();
        ck.spec = model_spec_from_json(manifest.at("spec"));
        ck.meta = manifest.value("meta", json::object());
        blob = read_file(path.parent_path() / manifest.at("blob").get<std::string>());
        if (blob.size() != manifest.at("blob_bytes").get<std::size_t>()) {
            throw IoError(path.string() + ": blob size does not match manifest");
        }
        for (const auto& [key, entry] : manifest.at("tensors").items()) {
            if (entry.at("dtype").get<std::string>() != "f32") {
                throw IoError(path.string() + ": tensor '" + key + "' has unsupported dtype " + entry.at("dtype").dump());
            }
            Tensor t{key, entry.at("shape").get<std::vector<int>>(), {}};
            const auto off = entry.at("byte_offset").get<std::size_t>();
            const auto n = detail::shape_size(t.shape);
            if (off % 4 != 0 || off + 4 * n > blob.size()) {
                throw IoError(path.string() + ": tensor '" + key + "' lies outside the blob");
            }
            t.data.resize(n);
            for (std::size_t i = 0; i < n; ++i) t.data[i] = detail::get_f32(blob.data() + off + 4 * i);
            ck.tensors.push_back(std::move(t));
        }
    } catch (const json::exception& e) {
        throw IoError(path.string() + ": malformed manifest: " + e.what());
    } catch (const ConfigError& e) {
        throw IoError(path.string() + ": " + e.what());
    }
    return ck;
}

inline void expect_kind(const Checkpoint& ck, std::string_view kind, const fs::path& path) {
    if (ck.kind != kind) {
        throw IoError(path.string() + ": expected a '" + std::string(kind) + "' checkpoint, found '" + ck.kind + "'");
    }
}

// Parameters ------------------------------------------------------------

inline Checkpoint params_checkpoint(const Parameters& p, json meta = json::object()) {
    Checkpoint ck{"params", p.spec, std::move(meta), {}};
    for (const auto& s : p.layout.slots) {
        ck.tensors.push_back(detail::to_tensor(s.key, s.shape, std::span<const double>(p.values).subspan(s.offset, s.size)));
    }
    return ck;
}

inline Parameters params_from_checkpoint(const Checkpoint& ck) {
    auto p = zero_parameters(ck.spec);
    for (const auto& s : p.layout.slots) {
        const auto& t = ck.at(s.key);
        if (t.shape != s.shape) {
            throw IoError("tensor '" + s.key + "' has the wrong shape for this model spec");
        }
        std::copy(t.data.begin(), t.data.end(), p.values.begin() + static_cast<std::ptrdiff_t>(s.offset));
    }
    return p;
}

inline void save_params(const fs::path& path, const Parameters& p, json meta = json::object()) {
    save_checkpoint(path, params_checkpoint(p, std::move(meta)));
}

inline Parameters load_params(const fs::path& path, json* meta = nullptr) {
    const auto ck = load_checkpoint(path);
    expect_kind(ck, "params", path);
    if (meta != nullptr) *meta = ck.meta;
    return params_from_checkpoint(ck);
}

// Masks -------------------------------------------------------------------

inline std::vector<int> mask_shape(const ModelSpec& s, MaskKind k) {
    switch (k) {
        case MaskKind::ffn: return {s.n_blocks, s.ffn_hidden};
        case MaskKind::attn: return {s.n_blocks, s.n_heads};
        case MaskKind::norm: return {s.n_blocks, 2, s.token_dim};
    }
    return {};
}

inline std::string mask_key(MaskKind k) { return "mask." + std::string(to_string(k)); }

inline void save_masks(const fs::path& path, const MaskSet& m, json meta = json::object()) {
    meta["gamma"] = m.gamma;
    meta["delta"] = m.delta;
    meta["enabled"] = m.enabled.to_string();
    Checkpoint ck{"masks", m.spec, std::move(meta), {}};
    for (auto k : all_mask_kinds) ck.tensors.push_back(detail::to_tensor(mask_key(k), mask_shape(m.spec, k), m.logits[k]));
    save_checkpoint(path, ck);
}

inline MaskSet load_masks(const fs::path& path, json* meta = nullptr) {
    const auto ck = load_checkpoint(path);
    expect_kind(ck, "masks", path);
    MaskSet m;
    m.spec = ck.spec;
    try {
        m.gamma = ck.meta.at("gamma").get<double>();
        m.delta = ck.meta.at("delta").get<double>();
        m.enabled = KindSet::parse(ck.meta.at("enabled").get<std::string>());
    } catch (const json::exception& e) {
        throw IoError(path.string() + ": mask metadata incomplete: " + e.what());
    }
    for (auto k : all_mask_kinds) {
        const auto& t = ck.at(mask_key(k));
        if (t.shape != mask_shape(m.spec, k)) {
            throw IoError(path.string() + ": tensor '" + t.key + "' has the wrong shape for this model spec");
        }
        m.logits[k].assign(t.data.begin(), t.data.end());
    }
    if (meta != nullptr) *meta = ck.meta;
    return m;
}

// Corpus ------------------------------------------------------------------

/// dataset.ckpt (rows, condition ids, exemplars, mixture centers) plus
/// registry.json (condition tags, exemplar bindings, generating config).
inline void save_corpus(const fs::path& dir, const Corpus& c, const CorpusConfig& cfg) {
    const auto& ds = c.dataset;
    const int d = ds.dim;
    ModelSpec shape_spec;
    shape_spec.latent_dim = d;
    shape_spec.token_dim = d;
    shape_spec.n_heads = 1;
    Checkpoint ck{"corpus", shape_spec, json::object(), {}};
    ck.tensors.push_back(detail::to_tensor("x", {static_cast<int>(ds.size()), d}, ds.x));
    std::vector<double> cond(ds.cond.begin(), ds.cond.end());
    ck.tensors.push_back(detail::to_tensor("cond", {static_cast<int>(ds.size())}, cond));
    std::vector<double> ex;
    json triggers = json::array();
    for (const auto& e : c.registry.exemplars) {
        triggers.push_back(e.trigger.id);
        ex.insert(ex.end(), e.vector.begin(), e.vector.end());
    }
    ck.tensors.push_back(detail::to_tensor("exemplars", {static_cast<int>(c.registry.exemplars.size()), d}, ex));
    json families = json::array();
    for (const auto& f : ds.families) {
        std::vector<double> centers;
        for (const auto& v : f.centers) centers.insert(centers.end(), v.begin(), v.end());
        ck.tensors.push_back(detail::to_tensor("family." + std::to_string(f.condition) + ".centers",
                                               {static_cast<int>(f.centers.size()), d}, centers));
        families.push_back(json{{"condition", f.condition}, {"spread", f.spread}});
    }
    json conditions = json::array();
    for (const auto& cd : ds.conditions) {
        conditions.push_back(json{{"id", cd.id}, {"tag", cd.is_trigger() ? "trigger" : "neutral"}});
    }
    save_checkpoint(dir / "dataset.ckpt", ck);
    write_json(dir / "registry.json", json{{"format_version", format_version},
                                           {"rms_norm", c.registry.rms_norm},
                                           {"conditions", conditions},
                                           {"exemplar_conditions", triggers},
                                           {"families", families},
                                           {"config", to_json(cfg)}});
}

inline Corpus load_corpus(const fs::path& dir, CorpusConfig* cfg = nullptr) {
    const auto ck = load_checkpoint(dir / "dataset.ckpt");
    expect_kind(ck, "corpus", dir / "dataset.ckpt");
    const auto reg = read_json(dir / "registry.json");
    check_version(reg, (dir / "registry.json").string());
    Corpus c;
    auto& ds = c.dataset;
    try {
        const auto& x = ck.at("x");
        ds.dim = x.shape.at(1);
        ds.x.assign(x.data.begin(), x.data.end());
        for (float v : ck.at("cond").data) ds.cond.push_back(static_cast<int>(v));
        for (const auto& cd : reg.at("conditions")) {
            const auto tag = cd.at("tag").get<std::string>();
            ds.conditions.push_back({cd.at("id").get<int>(), tag == "trigger" ? ConditionTag::trigger : ConditionTag::neutral});
        }
        for (const auto& f : reg.at("families")) {
            NeutralFamily fam;
            fam.condition = f.at("condition").get<int>();
            fam.spread = f.at("spread").get<double>();
            const auto& t = ck.at("family." + std::to_string(fam.condition) + ".centers");
            for (int r = 0; r < t.shape.at(0); ++r) {
                const auto* p = t.data.data() + static_cast<std::size_t>(r * ds.dim);
                fam.centers.emplace_back(p, p + ds.dim);
            }
            ds.families.push_back(std::move(fam));
        }
        const auto& ex = ck.at("exemplars");
        const auto ids = reg.at("exemplar_conditions").get<std::vector<int>>();
        for (std::size_t k = 0; k < ids.size(); ++k) {
            const auto* p = ex.data.data() + k * static_cast<std::size_t>(ds.dim);
            c.registry.exemplars.push_back({{ids[k], ConditionTag::trigger}, std::vector<double>(p, p + ds.dim)});
        }
        c.registry.rms_norm = reg.at("rms_norm").get<double>();
        if (cfg != nullptr) *cfg = corpus_config_from_json(reg.at("config"));
    } catch (const json::exception& e) {
        throw IoError((dir / "registry.json").string() + ": malformed registry: " + e.what());
    } catch (const std::out_of_range&) {
        throw IoError((dir / "dataset.ckpt").string() + ": tensor shapes inconsistent with registry");
    }
    return c;
}

// Reports -----------------------------------------------------------------

inline json to_json(const DeactivationReport& r) {
    json j = json::object();
    for (auto k : all_mask_kinds) {
        if (r[k]) j[std::string(to_string(k))] = json{{"count", r[k]->count}, {"deactivated", r[k]->deactivated}, {"ratio", r[k]->ratio}};
    }
    j["total"] = json{{"count", r.total.count}, {"deactivated", r.total.deactivated}, {"ratio", r.total.ratio}};
    return j;
}

inline json to_json(const Report& r) {
    json deact = json::object();
    for (const auto& [label, d] : r.deactivation) deact[label] = to_json(d);
    auto dict = [](const auto& m) {
        json j = json::object();
        for (const auto& [k, v] : m) j[k] = v;
        return j;
    };
    return json{{"format_version", format_version},
                {"seed", r.seed},
                {"reproduction", dict(r.reproduction)},
                {"magnitude_shift", dict(r.magnitude_shift)},
                {"decoupling", dict(r.decoupling)},
                {"deactivation", deact},
                {"quality", dict(r.quality)},
                {"projection_variance", dict(r.projection_variance)},
                {"digests", dict(r.digests)}};
}

inline Report report_from_json(const json& j) {
    Report r;
    try {
        r.seed = j.at("seed").get<std::uint64_t>();
        auto dict = [&](const char* key, auto& m) {
            for (const auto& [k, v] : j.at(key).items()) m[k] = v.template get<typename std::decay_t<decltype(m)>::mapped_type>();
        };
        dict("reproduction", r.reproduction);
        dict("magnitude_shift", r.magnitude_shift);
        dict("decoupling", r.decoupling);
        dict("quality", r.quality);
        dict("projection_variance", r.projection_variance);
        dict("digests", r.digests);
        for (const auto& [label, d] : j.at("deactivation").items()) {
            DeactivationReport dr;
            auto kr = [](const json& e) {
                return KindRatio{e.at("count").get<std::size_t>(), e.at("deactivated").get<std::size_t>(), e.at("ratio").get<double>()};
            };
            for (auto k : all_mask_kinds) {
                const std::string name(to_string(k));
                if (!d.contains(name)) continue;
                switch (k) {
                    case MaskKind::ffn: dr.ffn = kr(d[name]); break;
                    case MaskKind::attn: dr.attn = kr(d[name]); break;
                    case MaskKind::norm: dr.norm = kr(d[name]); break;
                }
            }
            dr.total = kr(d.at("total"));
            r.deactivation[label] = dr;
        }
    } catch (const json::exception& e) {
        throw IoError(std::string("malformed report: ") + e.what());
    }
    return r;
}

inline json to_json(const LatentSet& s) {
    json rows = json::array();
    for (std::size_t i = 0; i < s.size(); ++i) {
        const auto r = s.row(i);
        rows.push_back(std::vector<double>(r.begin(), r.end()));
    }
    return rows;
}

}  // namespace uniforget
