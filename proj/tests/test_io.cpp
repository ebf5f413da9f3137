#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <unistd.h>

#include "support.hpp"
#include "uniforget/io.hpp"
#include "uniforget/pipeline.hpp"

using namespace uniforget;

namespace {

// Fresh scratch directory under the system temp dir, removed on scope exit.
struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("uniforget_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

std::vector<double> as_float32(const std::vector<double>& v) {
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<double>(static_cast<float>(v[i]));
    return out;
}

}  // namespace

TEST_CASE("checkpoint save -> load -> save is byte-exact", "[io]") {
    TempDir tmp("ckpt");
    const auto p = uftest::lively_model(ModelSpec{}, 4);
    save_params(tmp.path / "a.ckpt", p, json{{"note", "x"}, {"n", 3}});
    json meta;
    const auto q = load_params(tmp.path / "a.ckpt", &meta);
    save_params(tmp.path / "b.ckpt", q, meta);
    CHECK(read_file(tmp.path / "a.ckpt.bin") == read_file(tmp.path / "b.ckpt.bin"));
    // Manifests differ only in the blob file name.
    auto ma = read_json(tmp.path / "a.ckpt"), mb = read_json(tmp.path / "b.ckpt");
    CHECK(ma["blob"] == "a.ckpt.bin");
    ma.erase("blob");
    mb.erase("blob");
    CHECK(ma.dump() == mb.dump());
    CHECK(meta == json{{"note", "x"}, {"n", 3}});
    // Values come back at float32 precision, spec exactly.
    CHECK(q.values == as_float32(p.values));
    CHECK(q.spec.data_scale == p.spec.data_scale);
    CHECK(read_file(tmp.path / "a.ckpt.bin").size() == 4 * p.values.size());
}

TEST_CASE("checkpoint manifest validation", "[io]") {
    TempDir tmp("manifest");
    const auto p = build_model(ModelSpec{}, 1);
    const auto path = tmp.path / "m.ckpt";
    save_params(path, p);
    auto corrupt = [&](auto&& edit) {
        auto j = read_json(path);
        edit(j);
        write_json(tmp.path / "bad.ckpt", j);
    };

    corrupt([](json& j) { j["format_version"] = 2; });
    try {
        load_params(tmp.path / "bad.ckpt");
        FAIL("version 2 accepted");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("format_version") != std::string::npos);
    }
    corrupt([](json& j) { j.erase("format_version"); });
    CHECK_THROWS_AS(load_params(tmp.path / "bad.ckpt"), IoError);
    corrupt([](json& j) { j["tensors"]["head.w"]["dtype"] = "f16"; });
    CHECK_THROWS_AS(load_params(tmp.path / "bad.ckpt"), IoError);
    corrupt([](json& j) { j["tensors"]["head.w"]["byte_offset"] = 1u << 30; });
    CHECK_THROWS_AS(load_params(tmp.path / "bad.ckpt"), IoError);
    corrupt([](json& j) { j["blob_bytes"] = 12; });
    CHECK_THROWS_AS(load_params(tmp.path / "bad.ckpt"), IoError);
    corrupt([](json& j) { j["kind"] = "masks"; });
    CHECK_THROWS_AS(load_params(tmp.path / "bad.ckpt"), IoError);
    corrupt([](json& j) { j["spec"]["n_heads"] = 5; });
    CHECK_THROWS_AS(load_params(tmp.path / "bad.ckpt"), IoError);
    CHECK_THROWS_AS(load_params(tmp.path / "missing.ckpt"), IoError);
    atomic_write(tmp.path / "garbage.ckpt", "{not json");
    CHECK_THROWS_AS(load_params(tmp.path / "garbage.ckpt"), IoError);

    auto nan_model = p;
    nan_model.values[3] = std::nan("");
    CHECK_THROWS_AS(save_params(tmp.path / "nan.ckpt", nan_model), NumericError);
    nan_model.values[3] = 1e300;  // overflows float32
    CHECK_THROWS_AS(save_params(tmp.path / "inf.ckpt", nan_model), NumericError);
}

TEST_CASE("mask checkpoints are keyed by kind and round-trip", "[io]") {
    TempDir tmp("masks");
    ModelSpec spec;
    auto m = uftest::random_maskset(spec, KindSet::parse("ffn,norm"), 5);
    save_masks(tmp.path / "m.ckpt", m, json{{"label", "medium"}});
    const auto ck = load_checkpoint(tmp.path / "m.ckpt");
    CHECK(ck.kind == "masks");
    CHECK(ck.at("mask.ffn").shape == std::vector<int>{2, 16});
    CHECK(ck.at("mask.attn").shape == std::vector<int>{2, 2});
    CHECK(ck.at("mask.norm").shape == std::vector<int>{2, 2, 32});
    json meta;
    const auto back = load_masks(tmp.path / "m.ckpt", &meta);
    CHECK(meta["label"] == "medium");
    CHECK(back.enabled.to_string() == m.enabled.to_string());
    CHECK(back.gamma == m.gamma);
    CHECK(back.delta == m.delta);
    for (auto k : all_mask_kinds) CHECK(back.logits[k] == as_float32(m.logits[k]));
    // Binarization of the reloaded mask agrees with the in-memory one: logits
    // are far from the float32 rounding scale at the decision boundary.
    const auto h1 = binarize(m), h2 = binarize(back);
    for (auto k : all_mask_kinds) CHECK(h1.values[k] == h2.values[k]);
    CHECK_THROWS_AS(load_params(tmp.path / "m.ckpt"), IoError);
}

TEST_CASE("corpus directory round-trips", "[io]") {
    TempDir tmp("corpus");
    CorpusConfig cc;
    cc.samples_per_neutral = 10;
    cc.duplication = 5;
    cc.seed = 9;
    const auto c = synth_corpus(cc);
    save_corpus(tmp.path, c, cc);
    CorpusConfig cc2;
    const auto d = load_corpus(tmp.path, &cc2);
    CHECK(to_json(cc2).dump() == to_json(cc).dump());
    CHECK(d.dataset.dim == c.dataset.dim);
    CHECK(d.dataset.cond == c.dataset.cond);
    CHECK(d.dataset.x == as_float32(c.dataset.x));
    CHECK(d.dataset.conditions.size() == c.dataset.conditions.size());
    for (std::size_t i = 0; i < d.dataset.conditions.size(); ++i) {
        CHECK(d.dataset.conditions[i].id == c.dataset.conditions[i].id);
        CHECK(d.dataset.conditions[i].is_trigger() == c.dataset.conditions[i].is_trigger());
    }
    REQUIRE(d.registry.exemplars.size() == c.registry.exemplars.size());
    for (std::size_t k = 0; k < d.registry.exemplars.size(); ++k) {
        CHECK(d.registry.exemplars[k].trigger.id == c.registry.exemplars[k].trigger.id);
        CHECK(d.registry.exemplars[k].vector == as_float32(c.registry.exemplars[k].vector));
    }
    CHECK(d.registry.rms_norm == c.registry.rms_norm);
    CHECK(d.dataset.families.size() == c.dataset.families.size());
}

TEST_CASE("config JSON round-trips and rejects unknown fields", "[io]") {
    RunConfig r;
    r.seeds = {7, 8};
    r.train.steps = 123;
    r.prune.kinds = KindSet::parse("ffn,attn,norm");
    r.levels["weak"] = 0.5;
    const auto j = to_json(r);
    CHECK(j["model"]["data_scale"] == "auto");
    const auto back = run_config_from_json(j);
    CHECK(to_json(back).dump() == j.dump());
    CHECK(back.auto_data_scale);

    auto fixed = j;
    fixed["model"]["data_scale"] = 2.5;
    const auto f = run_config_from_json(fixed);
    CHECK_FALSE(f.auto_data_scale);
    CHECK(f.model.data_scale == 2.5);

    // Partial configs keep defaults.
    const auto partial = run_config_from_json(json{{"train", {{"steps", 10}}}});
    CHECK(partial.train.steps == 10);
    CHECK(partial.train.lr == TrainConfig{}.lr);

    CHECK_THROWS_AS(run_config_from_json(json{{"trian", json::object()}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json(json{{"prune", {{"betaa", 1.0}}}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json(json{{"prune", {{"kinds", "ffn,mlp"}}}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json(json{{"train", {{"steps", "many"}}}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json(json{{"levels", {{"extreme", 9.0}}}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json(json{{"format_version", 2}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json(json{{"model", {{"data_scale", "big"}}}}), ConfigError);
}

TEST_CASE("digest is a stable function of the JSON text", "[io]") {
    const json a{{"x", 1}, {"y", "two"}};
    CHECK(digest(a) == digest(json{{"x", 1}, {"y", "two"}}));
    CHECK(digest(a) != digest(json{{"x", 2}, {"y", "two"}}));
    CHECK(digest(a).size() == 16);
    // FNV-1a 64 of the 7-byte text {"a":1}, computed offline.
    CHECK(digest(json{{"a", 1}}) == "9c3e82dd6fcae8b1");
    CHECK(digest(json::parse("[]")) == digest(json::array()));
}

TEST_CASE("atomic_write leaves only the target", "[io]") {
    TempDir tmp("atomic");
    atomic_write(tmp.path / "sub" / "f.txt", "hello");
    atomic_write(tmp.path / "sub" / "f.txt", "world");
    CHECK(read_file(tmp.path / "sub" / "f.txt") == "world");
    int n = 0;
    for ([[maybe_unused]] const auto& e : fs::directory_iterator(tmp.path / "sub")) ++n;
    CHECK(n == 1);
}

TEST_CASE("directory lock excludes live owners and recovers stale ones", "[io]") {
    TempDir tmp("lock");
    {
        DirLock a(tmp.path);
        CHECK(fs::exists(tmp.path / ".lock"));
        CHECK_THROWS_AS(DirLock(tmp.path), IoError);
    }
    CHECK_FALSE(fs::exists(tmp.path / ".lock"));
    // A pid that cannot be running.
    atomic_write(tmp.path / ".lock", "2147483646");
    { DirLock b(tmp.path); }
    CHECK_FALSE(fs::exists(tmp.path / ".lock"));
}

TEST_CASE("report JSON round-trips", "[io]") {
    Report r;
    r.seed = 3;
    r.reproduction = {{"base", 0.9}, {"strong", 0.1}};
    r.magnitude_shift = {{"base", 1.5}};
    r.decoupling = {{"trigger:medium", 0.8}};
    r.quality = {{"base", 0.2}};
    r.projection_variance = {{"trigger:medium", 0.4}};
    r.digests = {{"base", "0123456789abcdef"}};
    auto m = uftest::random_maskset(ModelSpec{}, KindSet::parse("ffn,norm"), 2);
    r.deactivation["medium"] = deactivation_ratios(m);
    const auto j = to_json(r);
    const auto back = report_from_json(j);
    CHECK(to_json(back).dump() == j.dump());
    CHECK_THROWS_AS(report_from_json(json{{"seed", 1}}), IoError);
}
