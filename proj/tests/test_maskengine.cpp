#include <catch_amalgamated.hpp>

#include <cmath>

#include "support.hpp"

using namespace uniforget;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

ModelSpec spec_e8() {
    ModelSpec s;
    s.token_dim = 8;
    return s;
}

double logistic_oracle(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("mask cardinality counts enabled kinds only", "[maskengine]") {
    const auto s = spec_e8();
    CHECK(init_maskset(s, {MaskKind::ffn}).cardinality() == 32);
    CHECK(init_maskset(s, {MaskKind::ffn, MaskKind::attn, MaskKind::norm}).cardinality() == 68);
    CHECK(init_maskset(s, {MaskKind::attn}).cardinality() == 4);
    CHECK_THROWS_AS(init_maskset(s, KindSet{}), ConfigError);
    CHECK_THROWS_AS(init_maskset(s, {MaskKind::ffn}, std::nullopt, 0.0), ConfigError);
}

TEST_CASE("default initial logit opens gates to 0.95", "[maskengine]") {
    const auto m = init_maskset(spec_e8(), {MaskKind::ffn, MaskKind::norm});
    const double m0 = (std::log(0.95 / 0.05) - 1.0) / 0.4;
    CHECK_THAT(m0, WithinAbs(4.861, 1e-3));
    for (double v : m.logits.ffn) CHECK_THAT(v, WithinAbs(m0, 1e-12));
    for (double v : relax(m).values.norm) CHECK_THAT(v, WithinAbs(0.95, 1e-12));
    CHECK(m.gamma == 0.4);
    CHECK(m.delta == 1.0);
}

TEST_CASE("relax evaluates the shifted logistic", "[maskengine]") {
    auto m = init_maskset(spec_e8(), {MaskKind::ffn}, 0.0);
    const auto r = relax(m);
    CHECK_THAT(r.values.ffn[0], WithinAbs(0.731059, 1e-6));
    CHECK_THAT(r.values.ffn[0], WithinAbs(logistic_oracle(1.0), 1e-15));
    m.logits.ffn[0] = 50.0;
    m.logits.ffn[1] = -50.0;
    const auto s = relax(m);
    CHECK(s.values.ffn[0] > 1.0 - 1e-8);
    CHECK(s.values.ffn[1] < 1e-8);
    CHECK(s.values.ffn[1] > 0.0);
    CHECK(std::isfinite(logistic(-1e4)));
    CHECK(std::isfinite(logistic(1e4)));
}

TEST_CASE("relax is strictly monotone and stays inside (0,1)", "[maskengine]") {
    SeededNoise rng(3);
    double prev = -1.0;
    for (double x = -30.0; x <= 30.0; x += 0.37) {
        const double v = logistic(x * 0.4 + 1.0);
        CHECK(v > prev);
        CHECK(v > 0.0);
        CHECK(v < 1.0);
        prev = v;
    }
}

TEST_CASE("sparsity penalty: value, symmetry, monotonicity, gradient", "[maskengine]") {
    const auto s = spec_e8();
    auto m = init_maskset(s, {MaskKind::ffn, MaskKind::norm}, 0.0);
    CHECK_THAT(sparsity_penalty(m), WithinAbs(0.731059, 1e-6));

    auto half = init_maskset(s, {MaskKind::ffn}, 50.0);
    for (std::size_t i = 0; i < 16; ++i) half.logits.ffn[i] = -50.0;
    CHECK_THAT(sparsity_penalty(half), WithinAbs(0.5, 1e-8));

    auto r = uftest::random_maskset(s, {MaskKind::ffn, MaskKind::norm}, 9);
    const double base = sparsity_penalty(r);
    CHECK(base > 0.0);
    CHECK(base < 1.0);
    for (std::size_t i = 0; i < r.logits.norm.size(); i += 5) {
        auto lower = r;
        lower.logits.norm[i] -= 0.5;
        CHECK(sparsity_penalty(lower) < base);
    }
    // Logits of disabled kinds do not enter.
    auto attn_moved = r;
    attn_moved.logits.attn[0] = -40.0;
    CHECK(sparsity_penalty(attn_moved) == base);

    const auto g = sparsity_penalty_grad(r);
    for (auto k : {MaskKind::ffn, MaskKind::norm}) {
        for (std::size_t i = 0; i < r.logits[k].size(); i += 3) {
            const double fd = uftest::central_difference([&] { return sparsity_penalty(r); }, r.logits[k][i]);
            CHECK(uftest::grad_agrees(fd, g[k][i]));
        }
    }
    for (double v : g.attn) CHECK(v == 0.0);
}

TEST_CASE("binarize thresholds with ties active", "[maskengine]") {
    const auto s = spec_e8();
    Gates g;
    g.spec = s;
    g.enabled = {MaskKind::ffn};
    g.values = GateArrays::filled(s, 0.731);
    g.values.ffn[1] = 0.5;
    g.values.ffn[2] = 0.4999999;
    const auto h = binarize(g);
    CHECK(h.values.ffn[0] == 1.0);
    CHECK(h.values.ffn[1] == 1.0);
    CHECK(h.values.ffn[2] == 0.0);
    CHECK_THROWS_AS(binarize(g, 1.0), ConfigError);

    const auto fresh = init_maskset(s, {MaskKind::ffn, MaskKind::attn, MaskKind::norm});
    const auto fresh_hard = binarize(fresh);
    for (auto k : all_mask_kinds) {
        for (double v : fresh_hard.values[k]) CHECK(v == 1.0);
    }
    CHECK(deactivation_ratios(fresh).total.ratio == 0.0);
}

TEST_CASE("deactivation accounting", "[maskengine]") {
    const auto s = spec_e8();
    auto m = init_maskset(s, {MaskKind::ffn, MaskKind::norm});
    for (std::size_t i = 0; i < 8; ++i) m.logits.ffn[i * 4] = -50.0;
    for (std::size_t i = 0; i < 3; ++i) m.logits.norm[i] = -50.0;
    const auto r = deactivation_ratios(m);
    REQUIRE(r.ffn);
    REQUIRE(r.norm);
    CHECK_FALSE(r.attn);
    CHECK(r.ffn->ratio == 0.25);
    CHECK(r.ffn->count == 32);
    CHECK(r.norm->count == 32);
    CHECK(r.total.count == 64);
    const double weighted = (r.ffn->count * r.ffn->ratio + r.norm->count * r.norm->ratio) / static_cast<double>(r.total.count);
    CHECK(r.total.ratio == weighted);
    CHECK(r.total.deactivated == 11);

    const auto csv = deactivation_csv(r);
    CHECK(csv.rfind("kind,count,ratio\n", 0) == 0);
    CHECK(csv.find("ffn,32,0.25") != std::string::npos);
    CHECK(csv.find("total,64,") != std::string::npos);
}

TEST_CASE("apply gates each site and checks shapes", "[maskengine]") {
    const auto s = spec_e8();
    auto g = all_open(s);
    g.values.attn[1] = 0.5;  // block 0, head 1
    std::vector<double> act(8, 2.0);
    apply(g, {MaskKind::attn, 0, 0}, act);
    for (int i = 0; i < 4; ++i) CHECK(act[static_cast<std::size_t>(i)] == 2.0);
    for (int i = 4; i < 8; ++i) CHECK(act[static_cast<std::size_t>(i)] == 1.0);

    g.values.norm[8 + 3] = 0.0;  // block 0, slot 1, channel 3
    std::vector<double> scale(8, 1.5);
    apply(g, {MaskKind::norm, 0, 1}, scale);
    CHECK(scale[3] == 0.0);
    CHECK(scale[2] == 1.5);

    std::vector<double> wrong(5, 1.0);
    CHECK_THROWS_AS(apply(g, {MaskKind::ffn, 0, 0}, wrong), ConfigError);
    CHECK_THROWS_AS(apply(g, {MaskKind::ffn, 2, 0}, wrong), ConfigError);

    auto only_ffn = all_open(s, {MaskKind::ffn});
    only_ffn.values.attn.assign(only_ffn.values.attn.size(), 0.0);
    std::vector<double> untouched(8, 3.0);
    apply(only_ffn, {MaskKind::attn, 1, 0}, untouched);
    CHECK(untouched == std::vector<double>(8, 3.0));
}

TEST_CASE("near-open and binarized-open masks match the unmasked model", "[maskengine]") {
    const ModelSpec s;
    const auto p = uftest::lively_model(s, 21);
    auto near = init_maskset(s, {MaskKind::ffn, MaskKind::attn, MaskKind::norm}, 60.0);
    const auto relaxed = relax(near);
    for (auto k : all_mask_kinds) {
        for (double v : relaxed.values[k]) REQUIRE(v >= 1.0 - 1e-9);
    }
    const auto hard = binarize(near);
    SeededNoise n(1);
    Latent z0(32);
    n.normal(z0);
    const auto ref = euler_sample(p, nullptr, z0, 4, Condition{2}).z;
    const auto a = euler_sample(p, &relaxed, z0, 4, Condition{2}).z;
    const auto b = euler_sample(p, &hard, z0, 4, Condition{2}).z;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        CHECK_THAT(a[i], WithinAbs(ref[i], 1e-6));
        CHECK_THAT(b[i], WithinAbs(ref[i], 1e-12));
    }
}

TEST_CASE("KindSet parsing", "[maskengine]") {
    CHECK(KindSet::parse("ffn,norm") == KindSet{MaskKind::ffn, MaskKind::norm});
    CHECK(KindSet::parse("attn").to_string() == "attn");
    CHECK_THROWS_AS(KindSet::parse("ffn,mlp"), ConfigError);
}
