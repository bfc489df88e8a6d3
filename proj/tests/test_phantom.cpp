#include <catch2/catch_amalgamated.hpp>

#include <regseg/metrics.hpp>
#include <regseg/phantom.hpp>

#include "test_util.hpp"

#include <set>

using namespace regseg;

namespace {

// 32^3 analogue of the default 64^3 anatomy; keeps generation cheap.
PhantomParams small_params() {
    PhantomParams p;
    p.W = p.H = p.D = 32;
    p.prostate_radius_lo = 8.5;
    p.prostate_radius_hi = 11.0;
    p.tumor_radius_lo = 1.6;
    p.tumor_radius_hi = 2.6;
    p.t_max = 4.0;
    return p;
}

double initial_gland_dice(const PhantomCase& pc) {
    return dice_score(pc.moving_labels.prostate_region(), pc.fixed_labels.prostate_region());
}

double recovery_gland_dice(const PhantomCase& pc) {
    const AffineMatrix rec = invert_affine(pc.true_misalignment);
    const LabelMask recovered = warp_labelmask(pc.moving_labels, rec);
    return dice_score(recovered.prostate_region(), pc.fixed_labels.prostate_region());
}

}  // namespace

TEST_CASE("phantom generation is deterministic") {
    const PhantomParams p = small_params();
    PhantomCase a = generate_case(p, 123);
    PhantomCase b = generate_case(p, 123);
    CHECK(a.fixed.data.v == b.fixed.data.v);
    CHECK(a.moving.data.v == b.moving.data.v);
    CHECK(a.fixed_labels.data.v == b.fixed_labels.data.v);
    CHECK(a.moving_labels.data.v == b.moving_labels.data.v);
    CHECK(a.true_misalignment.m == b.true_misalignment.m);
    CHECK(a.seed == b.seed);

    PhantomCase c = generate_case(p, 124);
    CHECK(a.fixed.data.v != c.fixed.data.v);
}

TEST_CASE("zero misalignment yields the identity transform and aligned masks") {
    PhantomParams p = small_params();
    p.t_max = 0.0;
    p.r_max_deg = 0.0;
    p.scale_lo = p.scale_hi = 1.0;
    PhantomCase pc = generate_case(p, 9);
    const AffineMatrix I = AffineMatrix::identity();
    for (int i = 0; i < 12; ++i) CHECK(pc.true_misalignment.m[i] == I.m[i]);
    CHECK(initial_gland_dice(pc) >= 0.95);
}

TEST_CASE("per-case invariants hold across seeds") {
    const PhantomParams p = small_params();
    for (std::uint64_t seed : {1ull, 2ull, 3ull, 4ull, 5ull}) {
        CAPTURE(seed);
        PhantomCase pc = generate_case(p, seed);
        pc.fixed.validate();
        pc.moving.validate();
        pc.fixed_labels.validate();
        pc.moving_labels.validate();
        CHECK(pc.fixed.W == 32);

        // Tumor nonempty and strictly inside the gland, in both masks.
        for (const LabelMask* m : {&pc.fixed_labels, &pc.moving_labels}) {
            const std::int64_t tumor = m->count(LabelMask::kTumor);
            const std::int64_t gland = tumor + m->count(LabelMask::kProstate);
            CHECK(tumor > 0);
            // One-hot classes make tumor-inside-gland structural: tumor voxels
            // are gland voxels by the prostate_region definition. Check the
            // volume fraction band instead: 0.1% to 3% of the gland.
            const double frac = double(tumor) / double(gland);
            CHECK(frac >= 0.001);
            CHECK(frac <= 0.03);
        }

        // Self-consistency: undoing the true misalignment recovers the fixed
        // gland with Dice >= 0.95.
        CHECK(recovery_gland_dice(pc) >= 0.95);

        // Rendered volumes round-trip bitwise through f32 (already quantized).
        for (const Volume3D* v : {&pc.fixed, &pc.moving}) {
            bool quantized = true;
            for (double x : v->data.v)
                quantized = quantized && (x == double(float(x)));
            CHECK(quantized);
        }
    }
}

TEST_CASE("default difficulty mirrors the paper's initial misalignment") {
    // 50 seeds at the 64^3 defaults (T_max=8, R_max=15 deg, scale 0.9-1.1):
    // the mean initial gland Dice between the unaligned masks must land in
    // [0.3, 0.8] (paper Table 3 reports 0.597 before registration).
    const PhantomParams p;  // defaults
    double sum = 0;
    const int n = 50;
    for (int i = 0; i < n; ++i) sum += initial_gland_dice(generate_case(p, 1000 + i));
    const double mean = sum / n;
    CAPTURE(mean);
    CHECK(mean >= 0.3);
    CHECK(mean <= 0.8);
}

TEST_CASE("parameter validation") {
    PhantomParams p = small_params();
    p.t_max = 10.0;  // >= dims/4
    CHECK_THROWS_AS(p.validate(), InvalidArgument);

    p = small_params();
    p.prostate_radius_hi = 16.5;  // does not fit
    CHECK_THROWS_AS(p.validate(), InvalidArgument);

    p = small_params();
    p.tumor_count_lo = 0;
    CHECK_THROWS_AS(p.validate(), InvalidArgument);

    p = small_params();
    p.scale_lo = 1.2;
    p.scale_hi = 1.1;
    CHECK_THROWS_AS(p.validate(), InvalidArgument);
}

TEST_CASE("case files round trip") {
    tu::TempDir tmp;
    const PhantomParams p = small_params();
    PhantomCase pc = generate_case(p, 77);
    pc.case_id = "case_0000";
    write_case(pc, tmp.sub("case_0000"));
    PhantomCase back = read_case(tmp.sub("case_0000"));
    CHECK(back.case_id == "case_0000");
    CHECK(back.seed == pc.seed);
    CHECK(back.fixed.data.v == pc.fixed.data.v);
    CHECK(back.moving.data.v == pc.moving.data.v);
    CHECK(back.fixed_labels.data.v == pc.fixed_labels.data.v);
    CHECK(back.moving_labels.data.v == pc.moving_labels.data.v);
    for (int i = 0; i < 12; ++i)
        CHECK(back.true_misalignment.m[i] == Catch::Approx(pc.true_misalignment.m[i]).margin(1e-15));

    SECTION("missing directory") {
        CHECK_THROWS_AS(read_case(tmp.sub("nope")), FormatError);
    }
    SECTION("corrupt meta.json") {
        tu::spit(tmp.sub("case_0000/meta.json"), "{broken");
        CHECK_THROWS_AS(read_case(tmp.sub("case_0000")), FormatError);
    }
    SECTION("truncated volume payload") {
        const std::string raw = tu::slurp(tmp.sub("case_0000/fixed.rvol"));
        tu::spit(tmp.sub("case_0000/fixed.rvol"), raw.substr(0, raw.size() / 2));
        CHECK_THROWS_AS(read_case(tmp.sub("case_0000")), FormatError);
    }
}

TEST_CASE("dataset generation and splits") {
    tu::TempDir tmp;
    PhantomParams p = small_params();
    p.W = p.H = p.D = 16;
    p.prostate_radius_lo = 4.2;
    p.prostate_radius_hi = 5.5;
    p.tumor_radius_lo = 1.0;
    p.tumor_radius_hi = 1.4;
    p.t_max = 2.0;

    SECTION("n=10 with fractions (0.6,0.2,0.2) gives sizes (6,2,2)") {
        DatasetManifest man = generate_dataset(p, 10, 5, {0.6, 0.2, 0.2}, tmp.sub("d"));
        CHECK(man.train.size() == 6);
        CHECK(man.val.size() == 2);
        CHECK(man.test.size() == 2);

        // Union of the splits covers all case ids exactly once.
        std::set<std::string> all;
        for (const auto* split : {&man.train, &man.val, &man.test})
            for (const auto& id : *split) CHECK(all.insert(id).second);
        CHECK(all.size() == 10);
        CHECK(man.case_dirs.size() == 10);

        // Manifest parses back identically.
        DatasetManifest reread = read_manifest(tmp.sub("d"));
        CHECK(reread.train == man.train);
        CHECK(reread.val == man.val);
        CHECK(reread.test == man.test);
        CHECK(reread.seed == 5);
    }
    SECTION("same seed produces identical manifests") {
        generate_dataset(p, 4, 11, {0.5, 0.25, 0.25}, tmp.sub("a"));
        generate_dataset(p, 4, 11, {0.5, 0.25, 0.25}, tmp.sub("b"));
        CHECK(tu::files_equal(tmp.sub("a/manifest.json"), tmp.sub("b/manifest.json")));
        // And the case payloads themselves.
        CHECK(tu::files_equal(tmp.sub("a/case_0000/moving.rvol"), tmp.sub("b/case_0000/moving.rvol")));
    }
    SECTION("degenerate splits are rejected") {
        CHECK_THROWS_AS(generate_dataset(p, 10, 5, {0.5, 0.2, 0.2}, tmp.sub("x")),
                        InvalidArgument);  // fractions must sum to 1
        CHECK_THROWS_AS(generate_dataset(p, 2, 5, {0.5, 0.25, 0.25}, tmp.sub("y")),
                        InvalidArgument);  // too few cases for a nonempty split
        CHECK_THROWS_AS(generate_dataset(p, 0, 5, {1.0, 0.0, 0.0}, tmp.sub("z")), InvalidArgument);
    }
    SECTION("manifest errors") {
        CHECK_THROWS_AS(read_manifest(tmp.sub("missing")), FormatError);
    }
}

TEST_CASE("phantom config JSON is strict") {
    PhantomParams p;
    apply_phantom_json(p, nlohmann::json{{"dims", {32, 32, 32}}, {"t_max", 4.0}});
    CHECK(p.W == 32);
    CHECK(p.t_max == 4.0);
    CHECK_THROWS_AS(apply_phantom_json(p, nlohmann::json{{"t_maxx", 4.0}}), InvalidArgument);
    CHECK_THROWS_AS(apply_phantom_json(p, nlohmann::json{{"dims", {32, 32}}}), InvalidArgument);
}
