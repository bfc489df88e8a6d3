#include <catch2/catch_amalgamated.hpp>

#include <regseg/regnet.hpp>

#include "test_util.hpp"

using namespace regseg;

namespace {

RegNetConfig tiny_cfg() {
    RegNetConfig cfg;
    cfg.patch = 2;
    cfg.token_dim = 24;
    cfg.depth = 2;
    cfg.heads = 4;
    cfg.feat_channels = 4;
    return cfg;
}

RegNetParams make_params(ParamStore& store, const RegNetConfig& cfg, std::int64_t n,
                         std::uint64_t seed = 5) {
    Rng rng(seed);
    return RegNetParams::create(store, cfg, n, n, n, rng);
}

// Smooth volume so finite differences through the trilinear warp stay clean
// (a kink at an integer-coordinate crossing is O(curvature) for smooth data).
Tensor smooth_volume(std::int64_t n, double phase) {
    Tensor t({1, n, n, n});
    for (std::int64_t z = 0; z < n; ++z)
        for (std::int64_t y = 0; y < n; ++y)
            for (std::int64_t x = 0; x < n; ++x)
                t[(z * n + y) * n + x] = std::sin(0.40 * x + phase) * std::cos(0.31 * y - phase) +
                                         0.5 * std::sin(0.23 * z + 2.0 * phase);
    return t;
}

}  // namespace

TEST_CASE("extract_features halves dims to a single channel") {
    // Eq. 1: 64^3 input -> 32^3 single-channel feature volume.
    ParamStore store;
    RegNetParams p = make_params(store, RegNetConfig{}, 64);
    Rng rng(51);
    Var vol = constant(tu::random_tensor(rng, {1, 64, 64, 64}));
    Var fea = extract_features(vol, true, p);
    CHECK(fea->val.shape == std::vector<std::int64_t>{1, 32, 32, 32});

    SECTION("zero input with zero bias maps to zero") {
        Var zero = constant(Tensor::zeros({1, 64, 64, 64}));
        Var f0 = extract_features(zero, false, p);
        for (std::int64_t i = 0; i < f0->val.numel(); ++i) CHECK(f0->val[i] == 0.0);
    }
    SECTION("purity: identical calls give identical outputs") {
        Var again = extract_features(vol, true, p);
        CHECK(again->val.v == fea->val.v);
    }
    SECTION("odd dims are rejected") {
        Var odd = constant(Tensor::zeros({1, 63, 64, 64}));
        CHECK_THROWS_AS(extract_features(odd, true, p), InvalidArgument);
    }
    SECTION("modalities use separate extractors") {
        Var other = extract_features(vol, false, p);
        CHECK(other->val.v != fea->val.v);
    }
}

TEST_CASE("merge is pool-plus-add") {
    Rng rng(52);
    Tensor init_t = tu::random_tensor(rng, {1, 16, 16, 16});
    Tensor fea_t = tu::random_tensor(rng, {1, 8, 8, 8});

    SECTION("zero feature gives the pooled original") {
        Var m = merge(constant(init_t), constant(Tensor::zeros({1, 8, 8, 8})));
        Var pooled = avg_pool2(constant(init_t));
        CHECK(m->val.v == pooled->val.v);
    }
    SECTION("zero original gives the feature") {
        Var m = merge(constant(Tensor::zeros({1, 16, 16, 16})), constant(fea_t));
        CHECK(m->val.v == fea_t.v);
    }
    SECTION("random pair matches an independent pool-then-add oracle") {
        Var m = merge(constant(init_t), constant(fea_t));
        for (std::int64_t z = 0; z < 8; ++z)
            for (std::int64_t y = 0; y < 8; ++y)
                for (std::int64_t x = 0; x < 8; ++x) {
                    double block = 0;
                    for (int dz = 0; dz < 2; ++dz)
                        for (int dy = 0; dy < 2; ++dy)
                            for (int dx = 0; dx < 2; ++dx)
                                block += init_t[((2 * z + dz) * 16 + 2 * y + dy) * 16 + 2 * x + dx];
                    const double want = block / 8.0 + fea_t[(z * 8 + y) * 8 + x];
                    CHECK(m->val[(z * 8 + y) * 8 + x] == Catch::Approx(want).margin(1e-12));
                }
    }
    SECTION("shape mismatch is rejected") {
        CHECK_THROWS_AS(merge(constant(init_t), constant(Tensor::zeros({1, 4, 4, 4}))),
                        InvalidArgument);
    }
}

TEST_CASE("token count follows N = (W/2k)(H/2k)(D/2k)") {
    RegNetConfig c64;
    c64.patch = 4;
    CHECK(c64.tokens(64, 64, 64) == 512);  // (64/8)^3

    RegNetConfig c32;
    c32.patch = 2;
    CHECK(c32.tokens(32, 32, 32) == 512);  // (32/4)^3

    RegNetConfig c;
    c.patch = 4;
    CHECK(c.tokens(64, 32, 16) == 8 * 4 * 2);

    SECTION("indivisible dims raise the documented error") {
        RegNetConfig bad;
        bad.patch = 4;
        CHECK_THROWS_WITH(bad.validate(20, 64, 64),
                          Catch::Matchers::ContainsSubstring("divisible"));
        CHECK_THROWS_AS(bad.validate(20, 64, 64), InvalidArgument);
        CHECK_THROWS_AS(bad.validate(63, 64, 64), InvalidArgument);  // odd
    }
}

TEST_CASE("predict_affine is the exact identity at initialization") {
    ParamStore store;
    RegNetParams p = make_params(store, tiny_cfg(), 16);
    Rng rng(53);
    Var m = constant(tu::random_tensor(rng, {1, 8, 8, 8}));
    Var t = constant(tu::random_tensor(rng, {1, 8, 8, 8}));
    Var A = predict_affine(m, t, p);
    REQUIRE(A->val.shape == std::vector<std::int64_t>{3, 4});
    const AffineMatrix I = AffineMatrix::identity();
    for (int i = 0; i < 12; ++i) CHECK(A->val[i] == I.m[i]);  // bitwise
}

TEST_CASE("moving and fixed roles are not interchangeable") {
    ParamStore store;
    RegNetParams p = make_params(store, tiny_cfg(), 16);
    // The zero-weight head makes the initial output identity for any input;
    // perturb it so the transform actually depends on the tokens.
    Rng prng(54);
    for (auto& v : p.head_w2->val.v) v = prng.uniform(-0.05, 0.05);

    Rng rng(55);
    Var m = constant(tu::random_tensor(rng, {1, 8, 8, 8}));
    Var t = constant(tu::random_tensor(rng, {1, 8, 8, 8}));
    Var a_mt = predict_affine(m, t, p);
    Var a_tm = predict_affine(t, m, p);
    CHECK(a_mt->val.v != a_tm->val.v);
}

TEST_CASE("register_forward at identity init leaves the moving volume intact") {
    ParamStore store;
    RegNetParams p = make_params(store, tiny_cfg(), 16);
    Rng rng(56);
    Var m_init = constant(tu::random_tensor(rng, {1, 16, 16, 16}));
    Var t_init = constant(tu::random_tensor(rng, {1, 16, 16, 16}));
    RegForwardOutput out = register_forward(m_init, t_init, p);

    // Identity warp is exact at grid points: bitwise equality.
    CHECK(out.m_init_warped->val.v == m_init->val.v);
    CHECK(out.m_merge_warped->val.v == out.m_merge->val.v);

    // Output shapes per the paper's dimension statements.
    CHECK(out.A->val.shape == std::vector<std::int64_t>{3, 4});
    CHECK(out.m_merge_warped->val.shape == std::vector<std::int64_t>{1, 8, 8, 8});
    CHECK(out.m_init_warped->val.shape == std::vector<std::int64_t>{1, 16, 16, 16});
    CHECK(out.t_merge->val.shape == std::vector<std::int64_t>{1, 8, 8, 8});

    SECTION("input shape mismatch is rejected") {
        Var small = constant(Tensor::zeros({1, 8, 8, 8}));
        CHECK_THROWS_AS(register_forward(m_init, small, p), InvalidArgument);
    }
}

TEST_CASE("register_forward output shapes at 64^3") {
    ParamStore store;
    RegNetParams p = make_params(store, RegNetConfig{}, 64);
    Var m = constant(Tensor::zeros({1, 64, 64, 64}));
    Var t = constant(Tensor::zeros({1, 64, 64, 64}));
    RegForwardOutput out = register_forward(m, t, p);
    CHECK(out.m_merge_warped->val.shape == std::vector<std::int64_t>{1, 32, 32, 32});
    CHECK(out.m_init_warped->val.shape == std::vector<std::int64_t>{1, 64, 64, 64});
}

TEST_CASE("registration path gradients reach every parameter tensor") {
    ParamStore store;
    RegNetConfig cfg = tiny_cfg();
    RegNetParams p = make_params(store, cfg, 16);
    // Perturb the zero-initialized head so gradients can propagate past it.
    Rng prng(57);
    for (auto& v : p.head_w2->val.v) v = prng.uniform(-0.05, 0.05);

    Tensor m_t = smooth_volume(16, 0.3);
    Tensor t_t = smooth_volume(16, 1.1);
    Tensor w = smooth_volume(16, 2.4);

    auto loss_fn = [&] {
        RegForwardOutput out = register_forward(constant(m_t), constant(t_t), p);
        return sum(mul(out.m_init_warped, constant(w)));
    };

    // One backward pass: every parameter tensor must see a finite gradient
    // with at least one nonzero entry.
    zero_grad(store.vars());
    backward(loss_fn());
    for (const auto& [name, var] : store.items) {
        CAPTURE(name);
        REQUIRE(var->has_grad());
        bool nonzero = false, finite = true;
        for (double g : var->grad.v) {
            nonzero = nonzero || g != 0.0;
            finite = finite && std::isfinite(g);
        }
        CHECK(finite);
        CHECK(nonzero);
    }

    // Finite-difference spot check on a few tensors spanning the path.
    Rng frng(59);
    const std::vector<Var> probes{p.m_conv1_w, p.embed_w, p.pos_emb, p.blocks[0].wq,
                                  p.blocks[1].mlp_w1, p.head_w2, p.head_b2};
    CHECK(tu::max_grad_rel_err(loss_fn, probes, frng, 3, 1e-5) < 1e-3);
}

TEST_CASE("parameter construction is deterministic") {
    ParamStore s1, s2;
    RegNetParams p1 = make_params(s1, tiny_cfg(), 16, 99);
    RegNetParams p2 = make_params(s2, tiny_cfg(), 16, 99);
    REQUIRE(s1.items.size() == s2.items.size());
    CHECK(s1.parameter_count() == s2.parameter_count());
    for (std::size_t i = 0; i < s1.items.size(); ++i) {
        CHECK(s1.items[i].first == s2.items[i].first);
        CHECK(s1.items[i].second->val.v == s2.items[i].second->val.v);
    }
    (void)p1;
    (void)p2;
}
