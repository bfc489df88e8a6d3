#pragma once

// Affine transforms and the trilinear/nearest sampling cores shared by the
// differentiable warp, the preprocessing resampler, and phantom synthesis.
//
// Convention (used everywhere): pull-based warping in centered voxel
// coordinates. A maps an *output* voxel coordinate, taken relative to the
// volume center ((W-1)/2, (H-1)/2, (D-1)/2), to the *input* coordinate in
// the same centered frame. Out-of-bounds samples read as zero.

#include <array>
#include <cmath>

#include "regseg/tensor.hpp"

namespace regseg {

struct AffineMatrix {
    // Row-major 3x4 [R | t].
    std::array<double, 12> m{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0};

    static AffineMatrix identity() { return AffineMatrix{}; }

    double& at(int r, int c) { return m[static_cast<std::size_t>(r * 4 + c)]; }
    double at(int r, int c) const { return m[static_cast<std::size_t>(r * 4 + c)]; }

    bool finite() const {
        for (double x : m)
            if (!std::isfinite(x)) return false;
        return true;
    }

    // p = R*u + t, u in centered voxel coordinates.
    void apply(double ux, double uy, double uz, double& px, double& py, double& pz) const {
        px = m[0] * ux + m[1] * uy + m[2] * uz + m[3];
        py = m[4] * ux + m[5] * uy + m[6] * uz + m[7];
        pz = m[8] * ux + m[9] * uy + m[10] * uz + m[11];
    }

    Tensor to_tensor() const {
        Tensor t({3, 4});
        std::copy(m.begin(), m.end(), t.v.begin());
        return t;
    }

    static AffineMatrix from_tensor(const Tensor& t) {
        require(t.numel() == 12, "AffineMatrix::from_tensor: need 12 entries, got " + t.shape_str());
        AffineMatrix a;
        std::copy(t.v.begin(), t.v.end(), a.m.begin());
        return a;
    }

    static AffineMatrix translation(double tx, double ty, double tz) {
        AffineMatrix a;
        a.at(0, 3) = tx;
        a.at(1, 3) = ty;
        a.at(2, 3) = tz;
        return a;
    }
};

// warp(warp(v, B), A) == warp(v, compose(A, B)): the composed map sends an
// output coordinate x to B*(A*x), so C.R = B.R*A.R and C.t = B.R*A.t + B.t.
inline AffineMatrix compose_affine(const AffineMatrix& a, const AffineMatrix& b) {
    require(a.finite() && b.finite(), "compose_affine: non-finite transform");
    AffineMatrix c;
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            double s = 0.0;
            for (int k = 0; k < 3; ++k) s += b.at(i, k) * a.at(k, j);
            c.at(i, j) = s;
        }
        double t = b.at(i, 3);
        for (int k = 0; k < 3; ++k) t += b.at(i, k) * a.at(k, 3);
        c.at(i, 3) = t;
    }
    return c;
}

inline double affine_det3(const AffineMatrix& a) {
    return a.at(0, 0) * (a.at(1, 1) * a.at(2, 2) - a.at(1, 2) * a.at(2, 1)) -
           a.at(0, 1) * (a.at(1, 0) * a.at(2, 2) - a.at(1, 2) * a.at(2, 0)) +
           a.at(0, 2) * (a.at(1, 0) * a.at(2, 1) - a.at(1, 1) * a.at(2, 0));
}

inline AffineMatrix invert_affine(const AffineMatrix& a) {
    require(a.finite(), "invert_affine: non-finite transform");
    const double det = affine_det3(a);
    if (std::abs(det) <= 1e-9)
        throw SingularTransformError("invert_affine: 3x3 block is singular (|det| = " +
                                     std::to_string(std::abs(det)) + " <= 1e-9)");
    const double id = 1.0 / det;
    AffineMatrix r;
    r.at(0, 0) = (a.at(1, 1) * a.at(2, 2) - a.at(1, 2) * a.at(2, 1)) * id;
    r.at(0, 1) = (a.at(0, 2) * a.at(2, 1) - a.at(0, 1) * a.at(2, 2)) * id;
    r.at(0, 2) = (a.at(0, 1) * a.at(1, 2) - a.at(0, 2) * a.at(1, 1)) * id;
    r.at(1, 0) = (a.at(1, 2) * a.at(2, 0) - a.at(1, 0) * a.at(2, 2)) * id;
    r.at(1, 1) = (a.at(0, 0) * a.at(2, 2) - a.at(0, 2) * a.at(2, 0)) * id;
    r.at(1, 2) = (a.at(0, 2) * a.at(1, 0) - a.at(0, 0) * a.at(1, 2)) * id;
    r.at(2, 0) = (a.at(1, 0) * a.at(2, 1) - a.at(1, 1) * a.at(2, 0)) * id;
    r.at(2, 1) = (a.at(0, 1) * a.at(2, 0) - a.at(0, 0) * a.at(2, 1)) * id;
    r.at(2, 2) = (a.at(0, 0) * a.at(1, 1) - a.at(0, 1) * a.at(1, 0)) * id;
    // t' = -R^{-1} t
    for (int i = 0; i < 3; ++i) {
        double t = 0.0;
        for (int k = 0; k < 3; ++k) t += r.at(i, k) * a.at(k, 3);
        r.at(i, 3) = -t;
    }
    return r;
}

inline bool affine_approx_eq(const AffineMatrix& a, const AffineMatrix& b, double tol) {
    for (int i = 0; i < 12; ++i)
        if (std::abs(a.m[static_cast<std::size_t>(i)] - b.m[static_cast<std::size_t>(i)]) > tol) return false;
    return true;
}

// ---------------------------------------------------------------------------
// Sampling cores. `grid` points at one channel of W*H*D doubles (x fastest).
// ---------------------------------------------------------------------------

// Zero padding outside [0, dim-1]. Exact at integer coordinates: the
// fractional weights are exactly 0/1 so the result is the stored value.
inline double sample_trilinear_zero(const double* grid, std::int64_t W, std::int64_t H, std::int64_t D,
                                    double qx, double qy, double qz) {
    const double fx0 = std::floor(qx), fy0 = std::floor(qy), fz0 = std::floor(qz);
    const std::int64_t x0 = static_cast<std::int64_t>(fx0);
    const std::int64_t y0 = static_cast<std::int64_t>(fy0);
    const std::int64_t z0 = static_cast<std::int64_t>(fz0);
    const double fx = qx - fx0, fy = qy - fy0, fz = qz - fz0;
    double acc = 0.0;
    for (int dz = 0; dz < 2; ++dz) {
        const std::int64_t z = z0 + dz;
        if (z < 0 || z >= D) continue;
        const double wz = dz ? fz : 1.0 - fz;
        if (wz == 0.0) continue;
        for (int dy = 0; dy < 2; ++dy) {
            const std::int64_t y = y0 + dy;
            if (y < 0 || y >= H) continue;
            const double wy = dy ? fy : 1.0 - fy;
            if (wy == 0.0) continue;
            for (int dx = 0; dx < 2; ++dx) {
                const std::int64_t x = x0 + dx;
                if (x < 0 || x >= W) continue;
                const double wx = dx ? fx : 1.0 - fx;
                acc += wz * wy * wx * grid[(z * H + y) * W + x];
            }
        }
    }
    return acc;
}

// Value plus derivative w.r.t. the continuous coordinate and the corner
// weights/indices (for the backward scatter). Out-of-bounds corners behave
// as zeros; idx is -1 there.
struct TrilinearTap {
    double value = 0.0;
    double dq[3] = {0, 0, 0};
    std::int64_t idx[8];
    double w[8];
};

inline TrilinearTap sample_trilinear_zero_grad(const double* grid, std::int64_t W, std::int64_t H,
                                               std::int64_t D, double qx, double qy, double qz) {
    TrilinearTap t;
    const double fx0 = std::floor(qx), fy0 = std::floor(qy), fz0 = std::floor(qz);
    const std::int64_t x0 = static_cast<std::int64_t>(fx0);
    const std::int64_t y0 = static_cast<std::int64_t>(fy0);
    const std::int64_t z0 = static_cast<std::int64_t>(fz0);
    const double fx = qx - fx0, fy = qy - fy0, fz = qz - fz0;
    double c[8];  // corner values, zero-padded; order (dz,dy,dx) with dx fastest
    for (int dz = 0; dz < 2; ++dz)
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
                const int i = (dz << 2) | (dy << 1) | dx;
                const std::int64_t x = x0 + dx, y = y0 + dy, z = z0 + dz;
                if (x < 0 || x >= W || y < 0 || y >= H || z < 0 || z >= D) {
                    t.idx[i] = -1;
                    c[i] = 0.0;
                    t.w[i] = 0.0;
                    continue;
                }
                t.idx[i] = (z * H + y) * W + x;
                c[i] = grid[t.idx[i]];
                t.w[i] = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy) * (dz ? fz : 1.0 - fz);
            }
    for (int i = 0; i < 8; ++i) t.value += t.w[i] * c[i];
    const double gx = 1.0 - fx, gy = 1.0 - fy, gz = 1.0 - fz;
    t.dq[0] = gz * (gy * (c[1] - c[0]) + fy * (c[3] - c[2])) + fz * (gy * (c[5] - c[4]) + fy * (c[7] - c[6]));
    t.dq[1] = gz * (gx * (c[2] - c[0]) + fx * (c[3] - c[1])) + fz * (gx * (c[6] - c[4]) + fx * (c[7] - c[5]));
    t.dq[2] = gx * (gy * (c[4] - c[0]) + fy * (c[6] - c[2])) + fx * (gy * (c[5] - c[1]) + fy * (c[7] - c[3]));
    return t;
}

// Border-clamped trilinear sample: constant volumes stay constant, corners
// are preserved. Used by resample_isotropic and upsample2x.
inline double sample_trilinear_clamp(const double* grid, std::int64_t W, std::int64_t H, std::int64_t D,
                                     double qx, double qy, double qz) {
    const double fx0 = std::floor(qx), fy0 = std::floor(qy), fz0 = std::floor(qz);
    const double fx = qx - fx0, fy = qy - fy0, fz = qz - fz0;
    const auto cl = [](std::int64_t v, std::int64_t n) { return std::min(std::max(v, std::int64_t{0}), n - 1); };
    const std::int64_t x0 = cl(static_cast<std::int64_t>(fx0), W), x1 = cl(static_cast<std::int64_t>(fx0) + 1, W);
    const std::int64_t y0 = cl(static_cast<std::int64_t>(fy0), H), y1 = cl(static_cast<std::int64_t>(fy0) + 1, H);
    const std::int64_t z0 = cl(static_cast<std::int64_t>(fz0), D), z1 = cl(static_cast<std::int64_t>(fz0) + 1, D);
    const double c000 = grid[(z0 * H + y0) * W + x0], c100 = grid[(z0 * H + y0) * W + x1];
    const double c010 = grid[(z0 * H + y1) * W + x0], c110 = grid[(z0 * H + y1) * W + x1];
    const double c001 = grid[(z1 * H + y0) * W + x0], c101 = grid[(z1 * H + y0) * W + x1];
    const double c011 = grid[(z1 * H + y1) * W + x0], c111 = grid[(z1 * H + y1) * W + x1];
    const double a00 = c000 + (c100 - c000) * fx;
    const double a10 = c010 + (c110 - c010) * fx;
    const double a01 = c001 + (c101 - c001) * fx;
    const double a11 = c011 + (c111 - c011) * fx;
    const double b0 = a00 + (a10 - a00) * fy;
    const double b1 = a01 + (a11 - a01) * fy;
    return b0 + (b1 - b0) * fz;
}

// Nearest-neighbor with zero padding (mask warping). Ties round half up.
inline double sample_nearest_zero(const double* grid, std::int64_t W, std::int64_t H, std::int64_t D,
                                  double qx, double qy, double qz) {
    const std::int64_t x = static_cast<std::int64_t>(std::floor(qx + 0.5));
    const std::int64_t y = static_cast<std::int64_t>(std::floor(qy + 0.5));
    const std::int64_t z = static_cast<std::int64_t>(std::floor(qz + 0.5));
    if (x < 0 || x >= W || y < 0 || y >= H || z < 0 || z >= D) return 0.0;
    return grid[(z * H + y) * W + x];
}

}  // namespace regseg
