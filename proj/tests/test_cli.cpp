#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <sys/wait.h>
#include <unistd.h>

#include <spdlog/spdlog.h>

#include "support.hpp"
#include "uniforget/io.hpp"
#include "uniforget/pipeline.hpp"

using namespace uniforget;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("uniforget_cli_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

// Exit status of the CLI with `args`; stdout goes to `stdout_file` if given.
int run_cli(const std::string& args, const fs::path& stdout_file = {}) {
    std::string cmd = std::string("UNIFORGET_LOG=warn '") + UNIFORGET_CLI_PATH + "' " + args;
    cmd += stdout_file.empty() ? " > /dev/null" : " > '" + stdout_file.string() + "'";
    cmd += " 2> /dev/null";
    const int status = std::system(cmd.c_str());
    REQUIRE(WIFEXITED(status));
    return WEXITSTATUS(status);
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

RunConfig tiny_config() {
    RunConfig r;
    r.seeds = {1, 2};
    r.corpus.samples_per_neutral = 20;
    r.corpus.duplication = 10;
    r.train.steps = 40;
    r.train.batch = 32;
    r.prune.steps = 6;
    r.prune.batch = 4;
    r.eval.n_per_trigger = 5;
    r.eval.n_per_neutral = 10;
    r.eval.holdout_per_condition = 10;
    return r;
}

std::vector<fs::path> csv_files(const fs::path& dir) {
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.path().extension() == ".csv") out.push_back(e.path().filename());
    }
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace

TEST_CASE("cli: argument and input errors map to exit codes", "[cli]") {
    TempDir tmp("errors");
    CHECK(run_cli("") == 2);
    CHECK(run_cli("frobnicate") == 2);
    CHECK(run_cli("sample --ckpt x --condition 0 --n 0 --out " + q(tmp.path / "s.json")) == 2);
    CHECK(run_cli("prune --base x --level extreme --out y") == 2);

    atomic_write(tmp.path / "bad.json", "{\"train\": {\"stepz\": 3}}");
    CHECK(run_cli("pipeline --config " + q(tmp.path / "bad.json") + " --out " + q(tmp.path / "run")) == 2);
    atomic_write(tmp.path / "broken.json", "{\"train\": ");
    CHECK(run_cli("pipeline --config " + q(tmp.path / "broken.json") + " --out " + q(tmp.path / "run")) == 2);

    save_params(tmp.path / "m.ckpt", build_model(ModelSpec{}, 1));
    auto j = read_json(tmp.path / "m.ckpt");
    j["format_version"] = 2;
    write_json(tmp.path / "v2.ckpt", j);
    CHECK(run_cli("sample --ckpt " + q(tmp.path / "v2.ckpt") + " --condition 0 --n 2 --out " + q(tmp.path / "s.json")) == 4);
    CHECK(run_cli("sample --ckpt " + q(tmp.path / "none.ckpt") + " --condition 0 --n 2 --out " + q(tmp.path / "s.json")) == 4);

    CHECK(run_cli("sample --ckpt " + q(tmp.path / "m.ckpt") + " --condition 0 --n 3 --seed 5 --out " + q(tmp.path / "s.json")) == 0);
    const auto s = read_json(tmp.path / "s.json");
    CHECK(s["samples"].size() == 3);
    CHECK(s["samples"][0].size() == 32);
    CHECK(run_cli("defaults", tmp.path / "d.json") == 0);
    CHECK(run_config_from_json(read_json(tmp.path / "d.json")).levels.at("strong") == 5.0);
}

TEST_CASE("cli: prune level names resolve to their sparsity weight", "[cli]") {
    TempDir tmp("prune");
    const auto corpus = uftest::small_corpus(2);
    ModelSpec spec;
    spec.data_scale = coordinate_scale(corpus.dataset);
    save_params(tmp.path / "base.ckpt", uftest::lively_model(spec, 2), json{{"conditions", conditions_json(corpus.dataset)}});
    atomic_write(tmp.path / "cfg.json", R"({"prune": {"steps": 3, "batch": 2}})");
    const auto common = "--base " + q(tmp.path / "base.ckpt") + " --config " + q(tmp.path / "cfg.json");

    REQUIRE(run_cli("prune " + common + " --level medium --out " + q(tmp.path / "m.ckpt") + " --log " + q(tmp.path / "p.csv"),
                    tmp.path / "deact.csv") == 0);
    json meta;
    const auto m = load_masks(tmp.path / "m.ckpt", &meta);
    CHECK(meta["beta"] == 2.0);
    CHECK(meta["label"] == "medium");
    CHECK(m.enabled.to_string() == "ffn,norm");
    CHECK(read_file(tmp.path / "deact.csv") == deactivation_csv(deactivation_ratios(m)));
    CHECK(read_file(tmp.path / "p.csv").rfind("step,reconstruction_term,sparsity_term,objective\n", 0) == 0);

    REQUIRE(run_cli("prune " + common + " --level strong --beta 0.25 --kinds attn --out " + q(tmp.path / "a.ckpt")) == 0);
    const auto a = load_masks(tmp.path / "a.ckpt", &meta);
    CHECK(meta["beta"] == 0.25);
    CHECK(a.enabled.to_string() == "attn");

    REQUIRE(run_cli("retrain " + common + " --masks " + q(tmp.path / "m.ckpt") + " --out " + q(tmp.path / "r.ckpt")) == 0);
    CHECK(load_params(tmp.path / "r.ckpt").values.size() == load_params(tmp.path / "base.ckpt").values.size());

    // Base checkpoints without condition metadata cannot select neutral prompts.
    save_params(tmp.path / "bare.ckpt", build_model(spec, 1));
    CHECK(run_cli("prune --base " + q(tmp.path / "bare.ckpt") + " --level weak --out " + q(tmp.path / "w.ckpt")) == 2);
}

TEST_CASE("pipeline: resume reuses every stage; reruns are byte-identical", "[cli]") {
    TempDir tmp("pipeline");
    spdlog::set_level(spdlog::level::warn);
    const auto cfg = tiny_config();
    const auto first = run_pipeline(cfg, tmp.path / "a");
    for (const auto& s : first.seeds) CHECK(s.reused.empty());
    const auto second = run_pipeline(cfg, tmp.path / "a");
    const std::vector<std::string> all_stages{"corpus",       "base",         "prune_medium", "prune_strong", "prune_weak",
                                              "prune_ablation", "retrain_strong", "eval"};
    for (const auto& s : second.seeds) {
        auto reused = s.reused;
        std::sort(reused.begin(), reused.end());
        auto expect = all_stages;
        std::sort(expect.begin(), expect.end());
        CHECK(reused == expect);
    }
    CHECK(to_json(second.seeds[0].report).dump() == to_json(first.seeds[0].report).dump());

    // A changed prune config invalidates pruning, retraining and eval only.
    auto changed = cfg;
    changed.prune.steps = 7;
    const auto third = run_pipeline(changed, tmp.path / "a");
    auto reused = third.seeds[0].reused;
    std::sort(reused.begin(), reused.end());
    CHECK(reused == std::vector<std::string>{"base", "corpus"});

    // The same config through the CLI into a fresh directory.
    write_json(tmp.path / "cfg.json", to_json(cfg));
    REQUIRE(run_cli("pipeline --config " + q(tmp.path / "cfg.json") + " --out " + q(tmp.path / "b")) == 0);
    run_pipeline(cfg, tmp.path / "a");
    for (const std::string seed_dir : {"seed_1", "seed_2"}) {
        const auto files = csv_files(tmp.path / "a" / seed_dir);
        CHECK(files.size() == 10);  // train loss, 4 prune logs, 4 deactivation tables, retrain log
        CHECK(files == csv_files(tmp.path / "b" / seed_dir));
        for (const auto& f : files) {
            INFO(seed_dir << "/" << f);
            CHECK(read_file(tmp.path / "a" / seed_dir / f) == read_file(tmp.path / "b" / seed_dir / f));
        }
        CHECK(read_file(tmp.path / "a" / seed_dir / "base.ckpt.bin") == read_file(tmp.path / "b" / seed_dir / "base.ckpt.bin"));
        CHECK(fs::exists(tmp.path / "b" / seed_dir / "figures" / "projection_trigger_medium.svg"));
    }
    CHECK(read_json(tmp.path / "b" / "summary.json")["seeds"].size() == 2);
    CHECK_FALSE(fs::exists(tmp.path / "b" / ".lock"));
}
