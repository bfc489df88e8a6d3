#include <catch2/catch_amalgamated.hpp>

#include <regseg/geometry.hpp>
#include <regseg/volume.hpp>

#include "test_util.hpp"

using namespace regseg;

namespace {

// Independent trilinear sampler (zero outside) used as the warp oracle.
double oracle_sample(const Volume3D& v, std::int64_t c, double qx, double qy, double qz) {
    const double fx = std::floor(qx), fy = std::floor(qy), fz = std::floor(qz);
    const double ax = qx - fx, ay = qy - fy, az = qz - fz;
    double acc = 0.0;
    for (int dz = 0; dz <= 1; ++dz)
        for (int dy = 0; dy <= 1; ++dy)
            for (int dx = 0; dx <= 1; ++dx) {
                const auto xi = static_cast<std::int64_t>(fx) + dx;
                const auto yi = static_cast<std::int64_t>(fy) + dy;
                const auto zi = static_cast<std::int64_t>(fz) + dz;
                if (xi < 0 || xi >= v.W || yi < 0 || yi >= v.H || zi < 0 || zi >= v.D) continue;
                const double wgt = (dx ? ax : 1 - ax) * (dy ? ay : 1 - ay) * (dz ? az : 1 - az);
                acc += wgt * v.at(c, xi, yi, zi);
            }
    return acc;
}

// Brute-force pull warp in centered voxel coordinates.
Volume3D oracle_warp(const Volume3D& v, const AffineMatrix& A) {
    Volume3D out = v;
    const double cx = 0.5 * double(v.W - 1), cy = 0.5 * double(v.H - 1), cz = 0.5 * double(v.D - 1);
    for (std::int64_t c = 0; c < v.channels; ++c)
        for (std::int64_t z = 0; z < v.D; ++z)
            for (std::int64_t y = 0; y < v.H; ++y)
                for (std::int64_t x = 0; x < v.W; ++x) {
                    double px, py, pz;
                    A.apply(double(x) - cx, double(y) - cy, double(z) - cz, px, py, pz);
                    out.at(c, x, y, z) = oracle_sample(v, c, px + cx, py + cy, pz + cz);
                }
    return out;
}

AffineMatrix random_affine(Rng& rng, double t_amp = 2.0, double lin_amp = 0.15) {
    AffineMatrix A;
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) A.at(r, c) = (r == c ? 1.0 : 0.0) + rng.uniform(-lin_amp, lin_amp);
        A.at(r, 3) = rng.uniform(-t_amp, t_amp);
    }
    return A;
}

}  // namespace

TEST_CASE("volume validation") {
    CHECK_THROWS_AS(Volume3D(0, 4, 4, 1, 1, 1), InvalidArgument);
    CHECK_THROWS_AS(Volume3D(4, 4, 4, 0.0, 1, 1), InvalidArgument);
    Volume3D v(2, 2, 2, 1, 1, 1);
    v.at(0, 0, 0, 0) = std::nan("");
    CHECK_THROWS_AS(v.validate(), InvalidArgument);
}

TEST_CASE("resample_isotropic") {
    Rng rng(31);

    SECTION("identity resample returns the same grid") {
        Volume3D v = tu::random_volume(rng, 5, 4, 3, 0.5);
        Volume3D out = resample_isotropic(v, 0.5, Interp::trilinear);
        REQUIRE(out.W == 5);
        REQUIRE(out.H == 4);
        REQUIRE(out.D == 3);
        for (std::int64_t i = 0; i < v.data.numel(); ++i) CHECK(out.data[i] == v.data[i]);
    }
    SECTION("4^3 at 1mm to 0.5mm gives 8^3, corners preserved") {
        Volume3D v = tu::random_volume(rng, 4, 4, 4, 1.0);
        Volume3D out = resample_isotropic(v, 0.5, Interp::trilinear);
        REQUIRE(out.W == 8);
        REQUIRE(out.H == 8);
        REQUIRE(out.D == 8);
        CHECK(out.sx == 0.5);
        // Output voxel x samples input at x * 0.5: even indices land exactly
        // on input grid points, so corner values carry over.
        CHECK(out.at(0, 0, 0, 0) == v.at(0, 0, 0, 0));
        CHECK(out.at(0, 6, 6, 6) == v.at(0, 3, 3, 3));
        // Full brute-force trilinear oracle at every output coordinate
        // (clamped sampling at the boundary).
        for (std::int64_t z = 0; z < 8; ++z)
            for (std::int64_t y = 0; y < 8; ++y)
                for (std::int64_t x = 0; x < 8; ++x) {
                    const auto cl = [](double q) { return std::min(std::max(q, 0.0), 3.0); };
                    const double expect =
                        oracle_sample(v, 0, cl(0.5 * double(x)), cl(0.5 * double(y)), cl(0.5 * double(z)));
                    CHECK(out.at(0, x, y, z) == Catch::Approx(expect).margin(1e-12));
                }
    }
    SECTION("constant volume stays constant") {
        Volume3D v(4, 4, 4, 1, 1, 1);
        for (auto& x : v.data.v) x = 2.75;
        Volume3D out = resample_isotropic(v, 0.3, Interp::trilinear);
        for (std::int64_t i = 0; i < out.data.numel(); ++i) CHECK(out.data[i] == 2.75);
        CHECK(out.data.all_finite());
    }
    SECTION("errors") {
        Volume3D v = tu::random_volume(rng, 4, 4, 4, 1.0);
        CHECK_THROWS_AS(resample_isotropic(v, 0.0, Interp::trilinear), InvalidArgument);
        CHECK_THROWS_AS(resample_isotropic(v, 50.0, Interp::trilinear), InvalidArgument);
    }
    SECTION("nearest-neighbor keeps mask values binary") {
        Volume3D v = tu::random_volume(rng, 4, 4, 4, 1.0);
        for (auto& x : v.data.v) x = x > 0 ? 1.0 : 0.0;
        Volume3D out = resample_isotropic(v, 0.7, Interp::nearest);
        for (double x : out.data.v) CHECK((x == 0.0 || x == 1.0));
    }
}

TEST_CASE("crop_or_pad") {
    Rng rng(32);

    SECTION("same dims is a no-op") {
        Volume3D v = tu::random_volume(rng, 10, 10, 10);
        Volume3D out = crop_or_pad(v, 10, 10, 10);
        for (std::int64_t i = 0; i < v.data.numel(); ++i) CHECK(out.data[i] == v.data[i]);
    }
    SECTION("8^3 ones padded to 10^3 has a zero border") {
        Volume3D v(8, 8, 8, 1, 1, 1);
        for (auto& x : v.data.v) x = 1.0;
        Volume3D out = crop_or_pad(v, 10, 10, 10);
        REQUIRE(out.W == 10);
        for (std::int64_t z = 0; z < 10; ++z)
            for (std::int64_t y = 0; y < 10; ++y)
                for (std::int64_t x = 0; x < 10; ++x) {
                    const bool inside = x >= 1 && x <= 8 && y >= 1 && y <= 8 && z >= 1 && z <= 8;
                    CHECK(out.at(0, x, y, z) == (inside ? 1.0 : 0.0));
                }
        CHECK(out.data.all_finite());
    }
    SECTION("center crop keeps a centered impulse centered") {
        Volume3D v(12, 12, 12, 1, 1, 1);
        v.at(0, 6, 6, 6) = 1.0;
        Volume3D out = crop_or_pad(v, 8, 8, 8);
        // offset = floor((12-8)/2) = 2 on each axis
        CHECK(out.at(0, 4, 4, 4) == 1.0);
        double total = 0;
        for (double x : out.data.v) total += x;
        CHECK(total == 1.0);
    }
    SECTION("spacing is unchanged") {
        Volume3D v = tu::random_volume(rng, 6, 6, 6, 0.7);
        Volume3D out = crop_or_pad(v, 4, 8, 6);
        CHECK(out.sx == 0.7);
        CHECK(out.W == 4);
        CHECK(out.H == 8);
        CHECK(out.D == 6);
    }
    SECTION("invalid target dims") {
        Volume3D v = tu::random_volume(rng, 6, 6, 6);
        CHECK_THROWS_AS(crop_or_pad(v, 0, 6, 6), InvalidArgument);
    }
}

TEST_CASE("zscore_normalize") {
    SECTION("two-voxel region {1,3} maps to {-1,+1}") {
        Volume3D v(4, 4, 4, 1, 1, 1);
        for (auto& x : v.data.v) x = 5.0;
        v.at(0, 0, 0, 0) = 1.0;
        v.at(0, 1, 0, 0) = 3.0;
        Tensor region({4, 4, 4});
        region[0] = 1.0;
        region[1] = 1.0;
        Volume3D out = zscore_normalize(v, region);
        // mu = 2, population sigma = 1
        CHECK(out.at(0, 0, 0, 0) == Catch::Approx(-1.0).margin(1e-12));
        CHECK(out.at(0, 1, 0, 0) == Catch::Approx(1.0).margin(1e-12));
        // Applied to the whole volume: 5 -> (5-2)/1 = 3.
        CHECK(out.at(0, 3, 3, 3) == Catch::Approx(3.0).margin(1e-12));
    }
    SECTION("region statistics normalize to mean 0, std 1") {
        Rng rng(33);
        Volume3D v = tu::random_volume(rng, 8, 8, 8);
        Tensor region({8, 8, 8});
        std::int64_t n = 0;
        for (std::int64_t i = 0; i < region.numel(); ++i)
            if (rng.uniform() < 0.3) {
                region[i] = 1.0;
                ++n;
            }
        REQUIRE(n >= 2);
        Volume3D out = zscore_normalize(v, region);
        double mu = 0;
        for (std::int64_t i = 0; i < region.numel(); ++i)
            if (region[i] > 0) mu += out.data[i];
        mu /= double(n);
        double var = 0;
        for (std::int64_t i = 0; i < region.numel(); ++i)
            if (region[i] > 0) var += (out.data[i] - mu) * (out.data[i] - mu);
        var /= double(n);
        CHECK(std::fabs(mu) < 1e-5);
        CHECK(std::fabs(std::sqrt(var) - 1.0) < 1e-5);

        // Idempotence within tolerance: already-normalized input is unchanged.
        Volume3D again = zscore_normalize(out, region);
        for (std::int64_t i = 0; i < out.data.numel(); ++i)
            CHECK(again.data[i] == Catch::Approx(out.data[i]).margin(1e-9));
    }
    SECTION("degenerate regions") {
        Volume3D v(4, 4, 4, 1, 1, 1);
        for (auto& x : v.data.v) x = 1.0;
        Tensor empty({4, 4, 4});
        CHECK_THROWS_AS(zscore_normalize(v, empty), DegenerateRegionError);
        Tensor flat({4, 4, 4});
        flat[0] = flat[1] = flat[2] = 1.0;  // all intensities equal -> sigma = 0
        CHECK_THROWS_AS(zscore_normalize(v, flat), DegenerateRegionError);
    }
}

TEST_CASE("affine_warp") {
    Rng rng(34);

    SECTION("identity warp is exact at every voxel") {
        Volume3D v = tu::random_volume(rng, 6, 5, 4);
        Volume3D out = affine_warp(v, AffineMatrix::identity(), Interp::trilinear);
        for (std::int64_t i = 0; i < v.data.numel(); ++i) CHECK(out.data[i] == v.data[i]);
    }
    SECTION("pull convention: translation t moves an impulse by -t") {
        Volume3D v(8, 8, 8, 1, 1, 1);
        v.at(0, 5, 4, 4) = 1.0;
        Volume3D out = affine_warp(v, AffineMatrix::translation(2, 0, 0), Interp::trilinear);
        CHECK(out.at(0, 3, 4, 4) == 1.0);
        double total = 0;
        for (double x : out.data.v) total += x;
        CHECK(total == 1.0);
    }
    SECTION("translation beyond the extent zeroes the output") {
        Volume3D v = tu::random_volume(rng, 6, 6, 6);
        Volume3D out = affine_warp(v, AffineMatrix::translation(100, 0, 0), Interp::trilinear);
        for (double x : out.data.v) CHECK(x == 0.0);
    }
    SECTION("matches the brute-force oracle on random transforms") {
        for (int trial = 0; trial < 10; ++trial) {
            Volume3D v = tu::random_volume(rng, 8, 8, 8);
            AffineMatrix A = random_affine(rng);
            Volume3D got = affine_warp(v, A, Interp::trilinear);
            Volume3D want = oracle_warp(v, A);
            for (std::int64_t i = 0; i < v.data.numel(); ++i)
                CHECK(got.data[i] == Catch::Approx(want.data[i]).margin(1e-6));
        }
    }
    SECTION("non-finite transform is rejected") {
        Volume3D v = tu::random_volume(rng, 4, 4, 4);
        AffineMatrix A;
        A.at(1, 2) = std::nan("");
        CHECK_THROWS_AS(affine_warp(v, A, Interp::trilinear), InvalidArgument);
    }
    SECTION("warped label masks stay valid one-hot masks") {
        Rng mrng(35);
        LabelMask m(8, 8, 8);
        for (std::int64_t z = 2; z < 6; ++z)
            for (std::int64_t y = 2; y < 6; ++y)
                for (std::int64_t x = 2; x < 6; ++x)
                    m.set_class(x, y, z, mrng.uniform_int(0, 2));
        LabelMask w = warp_labelmask(m, random_affine(mrng));
        w.validate();
        const std::int64_t n = w.voxels();
        for (std::int64_t i = 0; i < n; ++i) {
            double s = 0;
            for (int c = 0; c < 3; ++c) {
                const double x = w.data[c * n + i];
                CHECK((x == 0.0 || x == 1.0));
                s += x;
            }
            CHECK(s == 1.0);
        }
    }
}

TEST_CASE("avg_pool_down and upsample2x") {
    Rng rng(36);

    SECTION("constant pools to the same constant") {
        Volume3D v(4, 4, 4, 1, 1, 1);
        for (auto& x : v.data.v) x = 1.25;
        Volume3D out = avg_pool_down(v);
        REQUIRE(out.W == 2);
        CHECK(out.sx == 2.0);  // spacing doubles
        for (double x : out.data.v) CHECK(x == 1.25);
    }
    SECTION("2x2x2 block of 0..7 pools to 3.5") {
        Volume3D v(2, 2, 2, 1, 1, 1);
        for (std::int64_t i = 0; i < 8; ++i) v.data[i] = double(i);
        Volume3D out = avg_pool_down(v);
        REQUIRE(out.voxels() == 1);
        CHECK(out.data[0] == 3.5);
    }
    SECTION("odd dims are rejected") {
        Volume3D v = tu::random_volume(rng, 3, 4, 4);
        CHECK_THROWS_AS(avg_pool_down(v), InvalidArgument);
    }
    SECTION("pooling preserves the global mean") {
        Volume3D v = tu::random_volume(rng, 8, 8, 8);
        Volume3D out = avg_pool_down(v);
        double m_in = 0, m_out = 0;
        for (double x : v.data.v) m_in += x;
        for (double x : out.data.v) m_out += x;
        m_in /= double(v.voxels());
        m_out /= double(out.voxels());
        CHECK(m_in == Catch::Approx(m_out).margin(1e-12));
    }
    SECTION("upsample doubles dims, halves spacing, keeps constants") {
        Volume3D v(2, 2, 2, 2, 2, 2);
        for (auto& x : v.data.v) x = -0.75;
        Volume3D out = upsample2x(v);
        REQUIRE(out.W == 4);
        CHECK(out.sx == 1.0);
        for (double x : out.data.v) CHECK(x == -0.75);
    }
    SECTION("upsampled ramp is monotone") {
        Volume3D v(2, 1, 1, 1, 1, 1);
        v.data[0] = 0.0;
        v.data[1] = 1.0;
        Volume3D out = upsample2x(v);
        REQUIRE(out.W == 4);
        for (std::int64_t x = 1; x < 4; ++x)
            CHECK(out.at(0, x, 0, 0) >= out.at(0, x - 1, 0, 0));
    }
    SECTION("pool-then-upsample of a ramp stays within one pooled step") {
        Volume3D v(8, 8, 8, 1, 1, 1);
        for (std::int64_t z = 0; z < 8; ++z)
            for (std::int64_t y = 0; y < 8; ++y)
                for (std::int64_t x = 0; x < 8; ++x) v.at(0, x, y, z) = double(x);
        Volume3D u = upsample2x(avg_pool_down(v));
        for (std::int64_t z = 0; z < 8; ++z)
            for (std::int64_t y = 0; y < 8; ++y)
                for (std::int64_t x = 0; x < 8; ++x) {
                    const double err = std::fabs(u.at(0, x, y, z) - v.at(0, x, y, z));
                    CHECK(err <= 2.0);  // one pooled-voxel ramp step
                    if (x > 0 && x < 7) CHECK(err <= 1e-9);  // interior is exact
                }
    }
}

TEST_CASE("affine composition and inversion") {
    Rng rng(37);

    SECTION("compose with identity") {
        AffineMatrix A = random_affine(rng);
        AffineMatrix c = compose_affine(AffineMatrix::identity(), A);
        for (int i = 0; i < 12; ++i) CHECK(c.m[i] == A.m[i]);
    }
    SECTION("inverse of a translation") {
        AffineMatrix inv = invert_affine(AffineMatrix::translation(3, -2, 0.5));
        AffineMatrix want = AffineMatrix::translation(-3, 2, -0.5);
        for (int i = 0; i < 12; ++i) CHECK(inv.m[i] == Catch::Approx(want.m[i]).margin(1e-12));
    }
    SECTION("compose(A, invert(A)) is the identity to 1e-9") {
        for (int trial = 0; trial < 20; ++trial) {
            AffineMatrix A = random_affine(rng);
            AffineMatrix c = compose_affine(A, invert_affine(A));
            AffineMatrix I = AffineMatrix::identity();
            for (int i = 0; i < 12; ++i) CHECK(std::fabs(c.m[i] - I.m[i]) < 1e-9);
        }
    }
    SECTION("warp composition property") {
        // Integer translations are interpolation-exact, so the property holds
        // bitwise away from the border.
        Volume3D v = tu::random_volume(rng, 8, 8, 8);
        AffineMatrix A = AffineMatrix::translation(1, 0, 0);
        AffineMatrix B = AffineMatrix::translation(0, 2, 0);
        Volume3D two = affine_warp(affine_warp(v, B, Interp::trilinear), A, Interp::trilinear);
        Volume3D one = affine_warp(v, compose_affine(A, B), Interp::trilinear);
        for (std::int64_t i = 0; i < v.data.numel(); ++i)
            CHECK(two.data[i] == Catch::Approx(one.data[i]).margin(1e-12));
    }
    SECTION("singular transform is rejected") {
        AffineMatrix A;
        A.at(0, 0) = 0;
        A.at(1, 1) = 0;  // rank-deficient 3x3 block? zero two diagonal entries
        A.at(0, 1) = 0;
        A.at(1, 0) = 0;
        CHECK_THROWS_AS(invert_affine(A), SingularTransformError);
    }
}
