#pragma once

// Volume3D / LabelMask domain types and the grid operations (resampling,
// crop/pad, normalization, warping, pooling). Plain (non-tape) versions are
// thin wrappers over the autodiff kernels so both paths share one
// implementation of each interpolation rule.

#include <string>

#include "regseg/nn_ops.hpp"

namespace regseg {

enum class Interp { trilinear, nearest };

struct Volume3D {
    std::int64_t W = 0, H = 0, D = 0;
    double sx = 1.0, sy = 1.0, sz = 1.0;
    std::int64_t channels = 1;
    Tensor data;  // shape {C, D, H, W}, x fastest

    Volume3D() = default;
    Volume3D(std::int64_t w, std::int64_t h, std::int64_t d, double spx, double spy, double spz,
             std::int64_t c = 1)
        : W(w), H(h), D(d), sx(spx), sy(spy), sz(spz), channels(c), data({c, d, h, w}) {
        validate_meta();
    }

    void validate_meta() const {
        require(W >= 1 && H >= 1 && D >= 1, "Volume3D: dims must be >= 1");
        require(sx > 0 && sy > 0 && sz > 0, "Volume3D: spacing must be > 0");
        require(channels >= 1, "Volume3D: channels must be >= 1");
        require(data.shape == std::vector<std::int64_t>{channels, D, H, W},
                "Volume3D: data shape " + data.shape_str() + " does not match metadata");
    }

    void validate() const {
        validate_meta();
        require(data.all_finite(), "Volume3D: data contains non-finite values");
    }

    double& at(std::int64_t c, std::int64_t x, std::int64_t y, std::int64_t z) {
        return data[vox_index(c, x, y, z, W, H, D)];
    }
    double at(std::int64_t c, std::int64_t x, std::int64_t y, std::int64_t z) const {
        return data[vox_index(c, x, y, z, W, H, D)];
    }

    std::int64_t voxels() const { return W * H * D; }

    Volume3D like_with(Tensor t) const {
        Volume3D v = *this;
        require(t.shape.size() == 4, "like_with: need [C,D,H,W]");
        v.channels = t.shape[0];
        v.D = t.shape[1];
        v.H = t.shape[2];
        v.W = t.shape[3];
        v.data = std::move(t);
        return v;
    }

    // Quantize through f32 so serialized copies round-trip bitwise.
    void quantize_f32() {
        for (auto& x : data.v) x = static_cast<double>(static_cast<float>(x));
    }
};

// Three-class one-hot mask, classes fixed as (other, prostate, tumor).
struct LabelMask {
    static constexpr std::int64_t kOther = 0;
    static constexpr std::int64_t kProstate = 1;
    static constexpr std::int64_t kTumor = 2;

    std::int64_t W = 0, H = 0, D = 0;
    double sx = 1.0, sy = 1.0, sz = 1.0;
    Tensor data;  // shape {3, D, H, W}, one-hot

    LabelMask() = default;
    LabelMask(std::int64_t w, std::int64_t h, std::int64_t d, double spx = 1.0, double spy = 1.0,
              double spz = 1.0)
        : W(w), H(h), D(d), sx(spx), sy(spy), sz(spz), data({3, d, h, w}) {
        // Default to all-"other".
        const std::int64_t n = W * H * D;
        for (std::int64_t i = 0; i < n; ++i) data[i] = 1.0;
    }

    std::int64_t voxels() const { return W * H * D; }

    double at(std::int64_t c, std::int64_t x, std::int64_t y, std::int64_t z) const {
        return data[vox_index(c, x, y, z, W, H, D)];
    }

    void set_class(std::int64_t x, std::int64_t y, std::int64_t z, std::int64_t cls) {
        const std::int64_t n = W * H * D;
        const std::int64_t i = (z * H + y) * W + x;
        for (std::int64_t c = 0; c < 3; ++c) data[c * n + i] = (c == cls) ? 1.0 : 0.0;
    }

    std::int64_t class_at(std::int64_t x, std::int64_t y, std::int64_t z) const {
        const std::int64_t n = W * H * D;
        const std::int64_t i = (z * H + y) * W + x;
        for (std::int64_t c = 2; c >= 0; --c)
            if (data[c * n + i] == 1.0) return c;
        return 0;
    }

    // Binary 0/1 grid {D,H,W} for one class.
    Tensor channel(std::int64_t c) const {
        Tensor t({D, H, W});
        const std::int64_t n = W * H * D;
        std::copy_n(data.data() + c * n, n, t.data());
        return t;
    }

    // Prostate region = prostate OR tumor voxels (tumors sit inside the
    // gland; the gland region is their union).
    Tensor prostate_region() const {
        Tensor t({D, H, W});
        const std::int64_t n = W * H * D;
        for (std::int64_t i = 0; i < n; ++i)
            t[i] = (data[kProstate * n + i] == 1.0 || data[kTumor * n + i] == 1.0) ? 1.0 : 0.0;
        return t;
    }

    std::int64_t count(std::int64_t c) const {
        const std::int64_t n = W * H * D;
        std::int64_t k = 0;
        for (std::int64_t i = 0; i < n; ++i)
            if (data[c * n + i] == 1.0) ++k;
        return k;
    }

    void validate() const {
        require(W >= 1 && H >= 1 && D >= 1, "LabelMask: dims must be >= 1");
        require(data.shape == std::vector<std::int64_t>{3, D, H, W},
                "LabelMask: data shape " + data.shape_str() + " does not match dims");
        const std::int64_t n = W * H * D;
        for (std::int64_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::int64_t c = 0; c < 3; ++c) {
                const double v = data[c * n + i];
                require(v == 0.0 || v == 1.0, "LabelMask: non-binary channel value");
                s += v;
            }
            require(s == 1.0, "LabelMask: channels must sum to 1 at every voxel");
        }
    }
};

// ---------------------------------------------------------------------------
// Grid operations
// ---------------------------------------------------------------------------

// Resample to isotropic spacing t. Voxel i on an axis with spacing s sits at
// physical position i*s; output dims are round(extent/t) per axis so the
// physical extent is preserved to within one voxel. Border-clamped sampling
// keeps constants constant and grid-aligned points exact.
inline Volume3D resample_isotropic(const Volume3D& vol, double target_spacing_mm, Interp interp) {
    vol.validate_meta();
    require(target_spacing_mm > 0, "resample_isotropic: target spacing must be > 0");
    const auto out_dim = [&](std::int64_t n, double s) {
        return static_cast<std::int64_t>(std::llround(static_cast<double>(n) * s / target_spacing_mm));
    };
    const std::int64_t Wo = out_dim(vol.W, vol.sx);
    const std::int64_t Ho = out_dim(vol.H, vol.sy);
    const std::int64_t Do = out_dim(vol.D, vol.sz);
    require(Wo >= 1 && Ho >= 1 && Do >= 1, "resample_isotropic: output dim would be 0");

    Volume3D out(Wo, Ho, Do, target_spacing_mm, target_spacing_mm, target_spacing_mm, vol.channels);
    const double rx = target_spacing_mm / vol.sx;
    const double ry = target_spacing_mm / vol.sy;
    const double rz = target_spacing_mm / vol.sz;
    for (std::int64_t c = 0; c < vol.channels; ++c) {
        const double* grid = vol.data.data() + c * vol.D * vol.H * vol.W;
        parallel_for(Do * Ho, [&](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t r = lo; r < hi; ++r) {
                const std::int64_t z = r / Ho;
                const std::int64_t y = r % Ho;
                const double qz = static_cast<double>(z) * rz;
                const double qy = static_cast<double>(y) * ry;
                double* orow = out.data.data() + (c * Do * Ho + r) * Wo;
                for (std::int64_t x = 0; x < Wo; ++x) {
                    const double qx = static_cast<double>(x) * rx;
                    if (interp == Interp::trilinear) {
                        orow[x] = sample_trilinear_clamp(grid, vol.W, vol.H, vol.D, qx, qy, qz);
                    } else {
                        const auto cl = [](double q, std::int64_t n) {
                            return std::min(std::max(q, 0.0), static_cast<double>(n - 1));
                        };
                        orow[x] = sample_nearest_zero(grid, vol.W, vol.H, vol.D, cl(qx, vol.W),
                                                      cl(qy, vol.H), cl(qz, vol.D));
                    }
                }
            }
        });
    }
    return out;
}

// Symmetric center crop and/or zero pad. Uses floor offsets on both sides,
// so an impulse at index n/2 stays at index n'/2.
inline Volume3D crop_or_pad(const Volume3D& vol, std::int64_t Wt, std::int64_t Ht, std::int64_t Dt) {
    vol.validate_meta();
    require(Wt >= 1 && Ht >= 1 && Dt >= 1, "crop_or_pad: target dims must be >= 1");
    Volume3D out(Wt, Ht, Dt, vol.sx, vol.sy, vol.sz, vol.channels);
    // For each axis: input index = output index + off, off = floor((in-out)/2)
    // (negative when padding).
    const auto off = [](std::int64_t in, std::int64_t outn) {
        return (in - outn) >= 0 ? (in - outn) / 2 : -((outn - in) / 2);
    };
    const std::int64_t ox = off(vol.W, Wt), oy = off(vol.H, Ht), oz = off(vol.D, Dt);
    for (std::int64_t c = 0; c < vol.channels; ++c)
        for (std::int64_t z = 0; z < Dt; ++z) {
            const std::int64_t zi = z + oz;
            for (std::int64_t y = 0; y < Ht; ++y) {
                const std::int64_t yi = y + oy;
                if (zi < 0 || zi >= vol.D || yi < 0 || yi >= vol.H) continue;  // stays zero
                const std::int64_t x_lo = std::max<std::int64_t>(0, -ox);
                const std::int64_t x_hi = std::min(Wt, vol.W - ox);
                const double* irow = vol.data.data() + ((c * vol.D + zi) * vol.H + yi) * vol.W + ox;
                double* orow = out.data.data() + ((c * Dt + z) * Ht + y) * Wt;
                for (std::int64_t x = x_lo; x < x_hi; ++x) orow[x] = irow[x];
            }
        }
    return out;
}

// Z-score over the region (binary {D,H,W} grid), applied to the whole
// volume. Population standard deviation. Single-channel volumes only.
inline Volume3D zscore_normalize(const Volume3D& vol, const Tensor& region) {
    vol.validate_meta();
    require(vol.channels == 1, "zscore_normalize: expected a single-channel volume");
    require(region.shape == std::vector<std::int64_t>{vol.D, vol.H, vol.W},
            "zscore_normalize: region shape " + region.shape_str() + " does not match volume");
    const std::int64_t n = vol.voxels();
    std::int64_t cnt = 0;
    double mu = 0.0;
    for (std::int64_t i = 0; i < n; ++i)
        if (region[i] != 0.0) {
            mu += vol.data[i];
            ++cnt;
        }
    if (cnt < 2) throw DegenerateRegionError("zscore_normalize: region has fewer than 2 voxels");
    mu /= static_cast<double>(cnt);
    double var = 0.0;
    for (std::int64_t i = 0; i < n; ++i)
        if (region[i] != 0.0) var += (vol.data[i] - mu) * (vol.data[i] - mu);
    var /= static_cast<double>(cnt);
    if (var == 0.0) throw DegenerateRegionError("zscore_normalize: region intensity variance is zero");
    const double is = 1.0 / std::sqrt(var);
    Volume3D out = vol;
    for (auto& x : out.data.v) x = (x - mu) * is;
    return out;
}

// Pull-based affine warp of a Volume3D (non-tape path). Trilinear shares the
// autodiff kernel; nearest uses its own sampler. Output dims equal input
// dims; out-of-bounds reads are zero.
inline Volume3D affine_warp(const Volume3D& vol, const AffineMatrix& A, Interp interp) {
    vol.validate_meta();
    require(A.finite(), "affine_warp: non-finite transform");
    if (interp == Interp::trilinear) {
        NoGradGuard ng;
        return vol.like_with(warp_affine(constant(vol.data), constant(A.to_tensor()))->val);
    }
    Volume3D out(vol.W, vol.H, vol.D, vol.sx, vol.sy, vol.sz, vol.channels);
    const double cx = 0.5 * static_cast<double>(vol.W - 1);
    const double cy = 0.5 * static_cast<double>(vol.H - 1);
    const double cz = 0.5 * static_cast<double>(vol.D - 1);
    for (std::int64_t z = 0; z < vol.D; ++z)
        for (std::int64_t y = 0; y < vol.H; ++y)
            for (std::int64_t x = 0; x < vol.W; ++x) {
                double qx, qy, qz;
                A.apply(static_cast<double>(x) - cx, static_cast<double>(y) - cy,
                        static_cast<double>(z) - cz, qx, qy, qz);
                qx += cx;
                qy += cy;
                qz += cz;
                for (std::int64_t c = 0; c < vol.channels; ++c)
                    out.data[vox_index(c, x, y, z, vol.W, vol.H, vol.D)] = sample_nearest_zero(
                        vol.data.data() + c * vol.D * vol.H * vol.W, vol.W, vol.H, vol.D, qx, qy, qz);
            }
    return out;
}

// Mask warp: nearest-neighbor per channel, then per-voxel argmax re-one-hot.
// Out-of-bounds voxels land in class "other".
inline LabelMask warp_labelmask(const LabelMask& mask, const AffineMatrix& A) {
    Volume3D chans(mask.W, mask.H, mask.D, mask.sx, mask.sy, mask.sz, 3);
    chans.data = mask.data;
    chans.data.shape = {3, mask.D, mask.H, mask.W};
    const Volume3D warped = affine_warp(chans, A, Interp::nearest);
    LabelMask out(mask.W, mask.H, mask.D, mask.sx, mask.sy, mask.sz);
    const std::int64_t n = mask.voxels();
    for (std::int64_t i = 0; i < n; ++i) {
        std::int64_t best = 0;
        double bv = warped.data[i];
        for (std::int64_t c = 1; c < 3; ++c)
            if (warped.data[c * n + i] > bv) {
                bv = warped.data[c * n + i];
                best = c;
            }
        for (std::int64_t c = 0; c < 3; ++c) out.data[c * n + i] = (c == best) ? 1.0 : 0.0;
    }
    return out;
}

// 2x average-pooling downsample; spacing doubles.
inline Volume3D avg_pool_down(const Volume3D& vol) {
    vol.validate_meta();
    require(vol.W % 2 == 0 && vol.H % 2 == 0 && vol.D % 2 == 0,
            "avg_pool_down: dims must be even");
    NoGradGuard ng;
    Volume3D out = vol.like_with(avg_pool2(constant(vol.data))->val);
    out.sx = vol.sx * 2;
    out.sy = vol.sy * 2;
    out.sz = vol.sz * 2;
    return out;
}

// Trilinear 2x upsample; spacing halves.
inline Volume3D upsample2x(const Volume3D& vol) {
    vol.validate_meta();
    NoGradGuard ng;
    Volume3D out = vol.like_with(upsample2_trilinear(constant(vol.data))->val);
    out.sx = vol.sx * 0.5;
    out.sy = vol.sy * 0.5;
    out.sz = vol.sz * 0.5;
    return out;
}

}  // namespace regseg
