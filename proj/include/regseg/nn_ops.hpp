#pragma once

// Spatial network ops over [C,D,H,W] tensors: 3x3x3 convolution (stride 1
// or 2, pad 1), average pooling, trilinear upsampling, instance norm,
// patch tokenization, and the differentiable affine warp.
//
// Forward passes and gather-style backwards parallelize over rows/voxels;
// the scatter-style backwards (warp, upsample) run serially so results are
// independent of the thread count.

#include "regseg/autodiff.hpp"
#include "regseg/geometry.hpp"

namespace regseg {

namespace detail {
inline void check_chw(const Var& x, const char* who) {
    require(x->val.shape.size() == 4, std::string(who) + ": expected [C,D,H,W], got " + x->val.shape_str());
}
}  // namespace detail

// 3x3x3 convolution, padding 1, stride 1 or 2. w: [Co,Ci,3,3,3], b: [Co].
// Output dims: stride 1 keeps D,H,W; stride 2 requires them even and halves
// them. All backward passes are gather-form over disjoint output slices.
inline Var conv3d(const Var& x, const Var& w, const Var& b, int stride) {
    detail::check_chw(x, "conv3d");
    require(w->val.shape.size() == 5 && w->val.shape[2] == 3 && w->val.shape[3] == 3 && w->val.shape[4] == 3,
            "conv3d: weights must be [Co,Ci,3,3,3], got " + w->val.shape_str());
    require(stride == 1 || stride == 2, "conv3d: stride must be 1 or 2");
    const std::int64_t Ci = x->val.shape[0], D = x->val.shape[1], H = x->val.shape[2], W = x->val.shape[3];
    require(w->val.shape[1] == Ci, "conv3d: input channels " + std::to_string(Ci) + " but weights expect " +
                                       std::to_string(w->val.shape[1]));
    const std::int64_t Co = w->val.shape[0];
    require(b->val.shape == std::vector<std::int64_t>{Co}, "conv3d: bias must be [Co]");
    if (stride == 2)
        require(D % 2 == 0 && H % 2 == 0 && W % 2 == 0, "conv3d: stride-2 needs even dims, got " +
                                                            x->val.shape_str());
    const std::int64_t Do = (stride == 1) ? D : D / 2;
    const std::int64_t Ho = (stride == 1) ? H : H / 2;
    const std::int64_t Wo = (stride == 1) ? W : W / 2;

    Tensor out({Co, Do, Ho, Wo});
    const double* xp = x->val.data();
    const double* wp = w->val.data();
    const std::int64_t s = stride;
    parallel_for(Co * Do * Ho, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t r = lo; r < hi; ++r) {
            const std::int64_t co = r / (Do * Ho);
            const std::int64_t zo = (r / Ho) % Do;
            const std::int64_t yo = r % Ho;
            double* orow = out.data() + r * Wo;
            const double bias = b->val[co];
            for (std::int64_t xo = 0; xo < Wo; ++xo) orow[xo] = bias;
            for (std::int64_t ci = 0; ci < Ci; ++ci) {
                const double* xc = xp + ci * D * H * W;
                const double* wc = wp + (co * Ci + ci) * 27;
                for (int kz = 0; kz < 3; ++kz) {
                    const std::int64_t zi = zo * s + kz - 1;
                    if (zi < 0 || zi >= D) continue;
                    for (int ky = 0; ky < 3; ++ky) {
                        const std::int64_t yi = yo * s + ky - 1;
                        if (yi < 0 || yi >= H) continue;
                        const double* irow = xc + (zi * H + yi) * W;
                        const double* wk = wc + (kz * 3 + ky) * 3;
                        if (s == 1) {
                            for (int kx = 0; kx < 3; ++kx) {
                                const double wv = wk[kx];
                                const std::int64_t off = kx - 1;
                                const std::int64_t x_lo = std::max<std::int64_t>(0, -off);
                                const std::int64_t x_hi = std::min(Wo, W - off);
                                const double* ir = irow + off;
                                for (std::int64_t xo = x_lo; xo < x_hi; ++xo) orow[xo] += wv * ir[xo];
                            }
                        } else {
                            for (int kx = 0; kx < 3; ++kx) {
                                const double wv = wk[kx];
                                for (std::int64_t xo = 0; xo < Wo; ++xo) {
                                    const std::int64_t xi = xo * 2 + kx - 1;
                                    if (xi < 0 || xi >= W) continue;
                                    orow[xo] += wv * irow[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    });

    return make_op(std::move(out), {x, w, b},
                   [Ci, Co, D, H, W, Do, Ho, Wo, s](Node& self) {
        Node& x_ = *self.parents[0];
        Node& w_ = *self.parents[1];
        Node& b_ = *self.parents[2];
        const double* g = self.grad.data();
        const double* xp = x_.val.data();
        const double* wp = w_.val.data();

        if (b_.requires_grad) {
            b_.ensure_grad();
            for (std::int64_t co = 0; co < Co; ++co) {
                double sum = 0.0;
                const double* gc = g + co * Do * Ho * Wo;
                const std::int64_t n = Do * Ho * Wo;
                for (std::int64_t i = 0; i < n; ++i) sum += gc[i];
                b_.grad[co] += sum;
            }
        }

        if (w_.requires_grad) {
            w_.ensure_grad();
            // dw[co,ci,k] = sum over output voxels of g * shifted input.
            parallel_for(Co, [&](std::int64_t lo, std::int64_t hi) {
                for (std::int64_t co = lo; co < hi; ++co) {
                    const double* gc = g + co * Do * Ho * Wo;
                    for (std::int64_t ci = 0; ci < Ci; ++ci) {
                        const double* xc = xp + ci * D * H * W;
                        double* dwc = w_.grad.data() + (co * Ci + ci) * 27;
                        for (int kz = 0; kz < 3; ++kz)
                            for (int ky = 0; ky < 3; ++ky)
                                for (int kx = 0; kx < 3; ++kx) {
                                    double acc = 0.0;
                                    for (std::int64_t zo = 0; zo < Do; ++zo) {
                                        const std::int64_t zi = zo * s + kz - 1;
                                        if (zi < 0 || zi >= D) continue;
                                        for (std::int64_t yo = 0; yo < Ho; ++yo) {
                                            const std::int64_t yi = yo * s + ky - 1;
                                            if (yi < 0 || yi >= H) continue;
                                            const double* grow = gc + (zo * Ho + yo) * Wo;
                                            const double* irow = xc + (zi * H + yi) * W;
                                            if (s == 1) {
                                                const std::int64_t off = kx - 1;
                                                const std::int64_t x_lo = std::max<std::int64_t>(0, -off);
                                                const std::int64_t x_hi = std::min(Wo, W - off);
                                                const double* ir = irow + off;
                                                for (std::int64_t xo = x_lo; xo < x_hi; ++xo)
                                                    acc += grow[xo] * ir[xo];
                                            } else {
                                                for (std::int64_t xo = 0; xo < Wo; ++xo) {
                                                    const std::int64_t xi = xo * 2 + kx - 1;
                                                    if (xi < 0 || xi >= W) continue;
                                                    acc += grow[xo] * irow[xi];
                                                }
                                            }
                                        }
                                    }
                                    dwc[(kz * 3 + ky) * 3 + kx] += acc;
                                }
                    }
                }
            });
        }

        if (x_.requires_grad) {
            x_.ensure_grad();
            // dx gathered per input row: dx[xi] += w * g[output voxel that
            // read xi], i.e. a correlation with the flipped kernel.
            parallel_for(Ci * D * H, [&](std::int64_t lo, std::int64_t hi) {
                for (std::int64_t r = lo; r < hi; ++r) {
                    const std::int64_t ci = r / (D * H);
                    const std::int64_t zi = (r / H) % D;
                    const std::int64_t yi = r % H;
                    double* dxrow = x_.grad.data() + r * W;
                    for (std::int64_t co = 0; co < Co; ++co) {
                        const double* gc = g + co * Do * Ho * Wo;
                        const double* wc = wp + (co * Ci + ci) * 27;
                        for (int kz = 0; kz < 3; ++kz) {
                            const std::int64_t tz = zi + 1 - kz;
                            std::int64_t zo;
                            if (s == 1) {
                                zo = tz;
                            } else {
                                if (tz < 0 || (tz & 1)) continue;
                                zo = tz >> 1;
                            }
                            if (zo < 0 || zo >= Do) continue;
                            for (int ky = 0; ky < 3; ++ky) {
                                const std::int64_t ty = yi + 1 - ky;
                                std::int64_t yo;
                                if (s == 1) {
                                    yo = ty;
                                } else {
                                    if (ty < 0 || (ty & 1)) continue;
                                    yo = ty >> 1;
                                }
                                if (yo < 0 || yo >= Ho) continue;
                                const double* grow = gc + (zo * Ho + yo) * Wo;
                                const double* wk = wc + (kz * 3 + ky) * 3;
                                if (s == 1) {
                                    for (int kx = 0; kx < 3; ++kx) {
                                        const double wv = wk[kx];
                                        const std::int64_t off = 1 - kx;  // xo = xi + 1 - kx
                                        const std::int64_t x_lo = std::max<std::int64_t>(0, -off);
                                        const std::int64_t x_hi = std::min(W, Wo - off);
                                        const double* gr = grow + off;
                                        for (std::int64_t xi = x_lo; xi < x_hi; ++xi)
                                            dxrow[xi] += wv * gr[xi];
                                    }
                                } else {
                                    for (std::int64_t xi = 0; xi < W; ++xi) {
                                        for (int kx = 0; kx < 3; ++kx) {
                                            const std::int64_t tx = xi + 1 - kx;
                                            if (tx < 0 || (tx & 1)) continue;
                                            const std::int64_t xo = tx >> 1;
                                            if (xo >= Wo) continue;
                                            dxrow[xi] += wk[kx] * grow[xo];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
        }
    });
}

// 1x1x1 convolution (per-voxel channel mix): w[Co,Ci], b[Co]. A gemm over
// the flattened spatial axis.
inline Var conv1x1(const Var& x, const Var& w, const Var& b) {
    detail::check_chw(x, "conv1x1");
    require(w->val.shape.size() == 2, "conv1x1: weights must be [Co,Ci]");
    const std::int64_t Ci = x->val.shape[0];
    const std::int64_t S = x->val.numel() / Ci;
    require(w->val.shape[1] == Ci, "conv1x1: input channels " + std::to_string(Ci) +
                                       " but weights expect " + std::to_string(w->val.shape[1]));
    const std::int64_t Co = w->val.shape[0];
    require(b->val.shape == std::vector<std::int64_t>{Co}, "conv1x1: bias must be [Co]");
    Tensor out({Co, x->val.shape[1], x->val.shape[2], x->val.shape[3]});
    for (std::int64_t co = 0; co < Co; ++co) {
        double* oc = out.data() + co * S;
        for (std::int64_t i = 0; i < S; ++i) oc[i] = b->val[co];
    }
    mm::nn(w->val.data(), x->val.data(), out.data(), Co, Ci, S);
    return make_op(std::move(out), {x, w, b}, [Ci, Co, S](Node& self) {
        Node& x_ = *self.parents[0];
        Node& w_ = *self.parents[1];
        Node& b_ = *self.parents[2];
        if (x_.requires_grad) {
            x_.ensure_grad();  // dx = w^T * g
            mm::tn(w_.val.data(), self.grad.data(), x_.grad.data(), Ci, Co, S);
        }
        if (w_.requires_grad) {
            w_.ensure_grad();  // dw = g * x^T
            mm::nt(self.grad.data(), x_.val.data(), w_.grad.data(), Co, S, Ci);
        }
        if (b_.requires_grad) {
            b_.ensure_grad();
            for (std::int64_t co = 0; co < Co; ++co) {
                const double* g = self.grad.data() + co * S;
                double s = 0.0;
                for (std::int64_t i = 0; i < S; ++i) s += g[i];
                b_.grad[co] += s;
            }
        }
    });
}

// 2x2x2 average pooling; dims must be even. Halves D,H,W.
inline Var avg_pool2(const Var& x) {
    detail::check_chw(x, "avg_pool2");
    const std::int64_t C = x->val.shape[0], D = x->val.shape[1], H = x->val.shape[2], W = x->val.shape[3];
    require(D % 2 == 0 && H % 2 == 0 && W % 2 == 0,
            "avg_pool2: dims must be even, got " + x->val.shape_str());
    const std::int64_t Do = D / 2, Ho = H / 2, Wo = W / 2;
    Tensor out({C, Do, Ho, Wo});
    const double* xp = x->val.data();
    parallel_for(C * Do * Ho, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t r = lo; r < hi; ++r) {
            const std::int64_t c = r / (Do * Ho);
            const std::int64_t zo = (r / Ho) % Do;
            const std::int64_t yo = r % Ho;
            double* orow = out.data() + r * Wo;
            const double* base = xp + c * D * H * W;
            const double* r00 = base + (2 * zo * H + 2 * yo) * W;
            const double* r01 = base + (2 * zo * H + 2 * yo + 1) * W;
            const double* r10 = base + ((2 * zo + 1) * H + 2 * yo) * W;
            const double* r11 = base + ((2 * zo + 1) * H + 2 * yo + 1) * W;
            for (std::int64_t xo = 0; xo < Wo; ++xo) {
                const std::int64_t xi = 2 * xo;
                orow[xo] = 0.125 * (r00[xi] + r00[xi + 1] + r01[xi] + r01[xi + 1] +
                                    r10[xi] + r10[xi + 1] + r11[xi] + r11[xi + 1]);
            }
        }
    });
    return make_op(std::move(out), {x}, [C, D, H, W, Do, Ho, Wo](Node& self) {
        Node& x_ = *self.parents[0];
        x_.ensure_grad();
        const double* g = self.grad.data();
        parallel_for(C * D * H, [&](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t r = lo; r < hi; ++r) {
                const std::int64_t c = r / (D * H);
                const std::int64_t zi = (r / H) % D;
                const std::int64_t yi = r % H;
                double* dxrow = x_.grad.data() + r * W;
                const double* grow = g + ((c * Do + zi / 2) * Ho + yi / 2) * Wo;
                for (std::int64_t xi = 0; xi < W; ++xi) dxrow[xi] += 0.125 * grow[xi / 2];
            }
        });
    });
}

// Trilinear 2x upsampling, align_corners = false, border clamp: output
// voxel o samples the input at (o + 0.5)/2 - 0.5. Constant-preserving.
inline Var upsample2_trilinear(const Var& x) {
    detail::check_chw(x, "upsample2_trilinear");
    const std::int64_t C = x->val.shape[0], D = x->val.shape[1], H = x->val.shape[2], W = x->val.shape[3];
    const std::int64_t Do = D * 2, Ho = H * 2, Wo = W * 2;
    Tensor out({C, Do, Ho, Wo});
    const double* xp = x->val.data();
    parallel_for(C * Do * Ho, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t r = lo; r < hi; ++r) {
            const std::int64_t c = r / (Do * Ho);
            const std::int64_t zo = (r / Ho) % Do;
            const std::int64_t yo = r % Ho;
            double* orow = out.data() + r * Wo;
            const double* grid = xp + c * D * H * W;
            const double qz = 0.5 * (static_cast<double>(zo) + 0.5) - 0.5;
            const double qy = 0.5 * (static_cast<double>(yo) + 0.5) - 0.5;
            for (std::int64_t xo = 0; xo < Wo; ++xo) {
                const double qx = 0.5 * (static_cast<double>(xo) + 0.5) - 0.5;
                orow[xo] = sample_trilinear_clamp(grid, W, H, D, qx, qy, qz);
            }
        }
    });
    return make_op(std::move(out), {x}, [C, D, H, W, Do, Ho, Wo](Node& self) {
        Node& x_ = *self.parents[0];
        x_.ensure_grad();
        const double* g = self.grad.data();
        const auto cl = [](std::int64_t v, std::int64_t n) {
            return std::min(std::max(v, std::int64_t{0}), n - 1);
        };
        // Serial scatter of the 8 clamped-corner weights.
        for (std::int64_t c = 0; c < C; ++c) {
            double* dgrid = x_.grad.data() + c * D * H * W;
            const double* gc = g + c * Do * Ho * Wo;
            for (std::int64_t zo = 0; zo < Do; ++zo) {
                const double qz = 0.5 * (static_cast<double>(zo) + 0.5) - 0.5;
                const double fz0 = std::floor(qz);
                const double fz = qz - fz0;
                const std::int64_t z0 = cl(static_cast<std::int64_t>(fz0), D);
                const std::int64_t z1 = cl(static_cast<std::int64_t>(fz0) + 1, D);
                for (std::int64_t yo = 0; yo < Ho; ++yo) {
                    const double qy = 0.5 * (static_cast<double>(yo) + 0.5) - 0.5;
                    const double fy0 = std::floor(qy);
                    const double fy = qy - fy0;
                    const std::int64_t y0 = cl(static_cast<std::int64_t>(fy0), H);
                    const std::int64_t y1 = cl(static_cast<std::int64_t>(fy0) + 1, H);
                    const double* grow = gc + (zo * Ho + yo) * Wo;
                    for (std::int64_t xo = 0; xo < Wo; ++xo) {
                        const double qx = 0.5 * (static_cast<double>(xo) + 0.5) - 0.5;
                        const double fx0 = std::floor(qx);
                        const double fx = qx - fx0;
                        const std::int64_t x0 = cl(static_cast<std::int64_t>(fx0), W);
                        const std::int64_t x1 = cl(static_cast<std::int64_t>(fx0) + 1, W);
                        const double gv = grow[xo];
                        dgrid[(z0 * H + y0) * W + x0] += gv * (1 - fz) * (1 - fy) * (1 - fx);
                        dgrid[(z0 * H + y0) * W + x1] += gv * (1 - fz) * (1 - fy) * fx;
                        dgrid[(z0 * H + y1) * W + x0] += gv * (1 - fz) * fy * (1 - fx);
                        dgrid[(z0 * H + y1) * W + x1] += gv * (1 - fz) * fy * fx;
                        dgrid[(z1 * H + y0) * W + x0] += gv * fz * (1 - fy) * (1 - fx);
                        dgrid[(z1 * H + y0) * W + x1] += gv * fz * (1 - fy) * fx;
                        dgrid[(z1 * H + y1) * W + x0] += gv * fz * fy * (1 - fx);
                        dgrid[(z1 * H + y1) * W + x1] += gv * fz * fy * fx;
                    }
                }
            }
        }
    });
}

// Instance normalization: per-channel mean/variance over the spatial dims,
// learnable per-channel gamma/beta. Population variance, eps in the sqrt.
inline Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
    detail::check_chw(x, "instance_norm");
    const std::int64_t C = x->val.shape[0];
    const std::int64_t S = x->val.numel() / C;
    require(gamma->val.shape == std::vector<std::int64_t>{C} && beta->val.shape == std::vector<std::int64_t>{C},
            "instance_norm: gamma/beta must be [C]");
    Tensor out(x->val.shape);
    Tensor xhat(x->val.shape);
    Tensor inv_sd({C});
    for (std::int64_t c = 0; c < C; ++c) {
        const double* xc = x->val.data() + c * S;
        double mu = 0.0;
        for (std::int64_t i = 0; i < S; ++i) mu += xc[i];
        mu /= static_cast<double>(S);
        double var = 0.0;
        for (std::int64_t i = 0; i < S; ++i) var += (xc[i] - mu) * (xc[i] - mu);
        var /= static_cast<double>(S);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_sd[c] = is;
        const double gm = gamma->val[c], bt = beta->val[c];
        double* hc = xhat.data() + c * S;
        double* oc = out.data() + c * S;
        for (std::int64_t i = 0; i < S; ++i) {
            hc[i] = (xc[i] - mu) * is;
            oc[i] = gm * hc[i] + bt;
        }
    }
    auto xhat_p = std::make_shared<Tensor>(std::move(xhat));
    auto is_p = std::make_shared<Tensor>(std::move(inv_sd));
    return make_op(std::move(out), {x, gamma, beta}, [C, S, xhat_p, is_p](Node& self) {
        Node& x_ = *self.parents[0];
        Node& g_ = *self.parents[1];
        Node& b_ = *self.parents[2];
        if (g_.requires_grad) g_.ensure_grad();
        if (b_.requires_grad) b_.ensure_grad();
        if (x_.requires_grad) x_.ensure_grad();
        for (std::int64_t c = 0; c < C; ++c) {
            const double* go = self.grad.data() + c * S;
            const double* hc = xhat_p->data() + c * S;
            if (g_.requires_grad || b_.requires_grad) {
                double sg = 0.0, sgh = 0.0;
                for (std::int64_t i = 0; i < S; ++i) {
                    sg += go[i];
                    sgh += go[i] * hc[i];
                }
                if (g_.requires_grad) g_.grad[c] += sgh;
                if (b_.requires_grad) b_.grad[c] += sg;
            }
            if (x_.requires_grad) {
                const double gm = g_.val[c];
                double m1 = 0.0, m2 = 0.0;
                for (std::int64_t i = 0; i < S; ++i) {
                    const double dxh = go[i] * gm;
                    m1 += dxh;
                    m2 += dxh * hc[i];
                }
                m1 /= static_cast<double>(S);
                m2 /= static_cast<double>(S);
                const double is = (*is_p)[c];
                double* dx = x_.grad.data() + c * S;
                for (std::int64_t i = 0; i < S; ++i)
                    dx[i] += is * (go[i] * gm - m1 - hc[i] * m2);
            }
        }
    });
}

// [C,D,H,W] -> [C]: spatial mean per channel.
inline Var global_avg_pool(const Var& x) {
    detail::check_chw(x, "global_avg_pool");
    const std::int64_t S = x->val.numel() / x->val.shape[0];
    return scale(sum_per_channel(x), 1.0 / static_cast<double>(S));
}

// Split a single-channel [1,D,H,W] volume into non-overlapping k^3 patches:
// tokens ordered (pz,py,px) with px fastest; entries (dz,dy,dx), dx fastest.
// Result: [N, k^3], N = (D/k)(H/k)(W/k). The mapping is a bijection, so the
// backward pass is an exact inverse permutation.
inline Var patchify(const Var& x, std::int64_t k) {
    detail::check_chw(x, "patchify");
    require(x->val.shape[0] == 1, "patchify: expected a single-channel volume, got " + x->val.shape_str());
    const std::int64_t D = x->val.shape[1], H = x->val.shape[2], W = x->val.shape[3];
    require(k >= 1 && D % k == 0 && H % k == 0 && W % k == 0,
            "patchify: dims " + x->val.shape_str() + " not divisible by patch size " + std::to_string(k));
    const std::int64_t nz = D / k, ny = H / k, nx = W / k;
    const std::int64_t N = nz * ny * nx, P = k * k * k;
    Tensor out({N, P});
    const double* xp = x->val.data();
    for (std::int64_t pz = 0; pz < nz; ++pz)
        for (std::int64_t py = 0; py < ny; ++py)
            for (std::int64_t px = 0; px < nx; ++px) {
                double* tok = out.data() + ((pz * ny + py) * nx + px) * P;
                for (std::int64_t dz = 0; dz < k; ++dz)
                    for (std::int64_t dy = 0; dy < k; ++dy) {
                        const double* irow = xp + ((pz * k + dz) * H + py * k + dy) * W + px * k;
                        double* trow = tok + (dz * k + dy) * k;
                        for (std::int64_t dx = 0; dx < k; ++dx) trow[dx] = irow[dx];
                    }
            }
    return make_op(std::move(out), {x}, [D, H, W, k, nz, ny, nx, P](Node& self) {
        Node& x_ = *self.parents[0];
        x_.ensure_grad();
        for (std::int64_t pz = 0; pz < nz; ++pz)
            for (std::int64_t py = 0; py < ny; ++py)
                for (std::int64_t px = 0; px < nx; ++px) {
                    const double* tok = self.grad.data() + ((pz * ny + py) * nx + px) * P;
                    for (std::int64_t dz = 0; dz < k; ++dz)
                        for (std::int64_t dy = 0; dy < k; ++dy) {
                            double* drow = x_.grad.data() + ((pz * k + dz) * H + py * k + dy) * W + px * k;
                            const double* trow = tok + (dz * k + dy) * k;
                            for (std::int64_t dx = 0; dx < k; ++dx) drow[dx] += trow[dx];
                        }
                }
    });
}

// Inverse of patchify (token layout documented there): [N,k^3] -> [1,D,H,W].
inline Var unpatchify(const Var& t, std::int64_t k, std::int64_t D, std::int64_t H, std::int64_t W) {
    require(t->val.shape.size() == 2, "unpatchify: need [N,P]");
    const std::int64_t nz = D / k, ny = H / k, nx = W / k;
    const std::int64_t N = nz * ny * nx, P = k * k * k;
    require(D % k == 0 && H % k == 0 && W % k == 0 && t->val.shape[0] == N && t->val.shape[1] == P,
            "unpatchify: token tensor " + t->val.shape_str() + " does not match target dims");
    Tensor out({1, D, H, W});
    for (std::int64_t pz = 0; pz < nz; ++pz)
        for (std::int64_t py = 0; py < ny; ++py)
            for (std::int64_t px = 0; px < nx; ++px) {
                const double* tok = t->val.data() + ((pz * ny + py) * nx + px) * P;
                for (std::int64_t dz = 0; dz < k; ++dz)
                    for (std::int64_t dy = 0; dy < k; ++dy) {
                        double* orow = out.data() + ((pz * k + dz) * H + py * k + dy) * W + px * k;
                        const double* trow = tok + (dz * k + dy) * k;
                        for (std::int64_t dx = 0; dx < k; ++dx) orow[dx] = trow[dx];
                    }
            }
    return make_op(std::move(out), {t}, [k, D, H, W, nz, ny, nx, P](Node& self) {
        Node& t_ = *self.parents[0];
        t_.ensure_grad();
        for (std::int64_t pz = 0; pz < nz; ++pz)
            for (std::int64_t py = 0; py < ny; ++py)
                for (std::int64_t px = 0; px < nx; ++px) {
                    double* tok = t_.grad.data() + ((pz * ny + py) * nx + px) * P;
                    for (std::int64_t dz = 0; dz < k; ++dz)
                        for (std::int64_t dy = 0; dy < k; ++dy) {
                            const double* grow = self.grad.data() +
                                                 ((pz * k + dz) * H + py * k + dy) * W + px * k;
                            double* trow = tok + (dz * k + dy) * k;
                            for (std::int64_t dx = 0; dx < k; ++dx) trow[dx] += grow[dx];
                        }
                }
    });
}

// Differentiable pull-based affine warp. vol: [C,D,H,W]; A: [3,4] in the
// centered-voxel pull convention (see geometry.hpp). Trilinear, zero
// padding; identity A reproduces the input bitwise at grid points.
// Differentiable w.r.t. both the volume data and all 12 entries of A.
inline Var warp_affine(const Var& vol, const Var& A) {
    detail::check_chw(vol, "warp_affine");
    require(A->val.numel() == 12, "warp_affine: A must be 3x4, got " + A->val.shape_str());
    require(A->val.all_finite(), "warp_affine: non-finite transform");
    const std::int64_t C = vol->val.shape[0], D = vol->val.shape[1], H = vol->val.shape[2], W = vol->val.shape[3];
    const double cx = 0.5 * static_cast<double>(W - 1);
    const double cy = 0.5 * static_cast<double>(H - 1);
    const double cz = 0.5 * static_cast<double>(D - 1);
    const double* a = A->val.data();

    Tensor out({C, D, H, W});
    const double* vp = vol->val.data();
    parallel_for(D * H, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t r = lo; r < hi; ++r) {
            const std::int64_t z = r / H;
            const std::int64_t y = r % H;
            const double uy = static_cast<double>(y) - cy;
            const double uz = static_cast<double>(z) - cz;
            for (std::int64_t x = 0; x < W; ++x) {
                const double ux = static_cast<double>(x) - cx;
                const double qx = a[0] * ux + a[1] * uy + a[2] * uz + a[3] + cx;
                const double qy = a[4] * ux + a[5] * uy + a[6] * uz + a[7] + cy;
                const double qz = a[8] * ux + a[9] * uy + a[10] * uz + a[11] + cz;
                for (std::int64_t c = 0; c < C; ++c)
                    out[((c * D + z) * H + y) * W + x] =
                        sample_trilinear_zero(vp + c * D * H * W, W, H, D, qx, qy, qz);
            }
        }
    });

    return make_op(std::move(out), {vol, A}, [C, D, H, W, cx, cy, cz](Node& self) {
        Node& v_ = *self.parents[0];
        Node& a_ = *self.parents[1];
        const bool need_v = v_.requires_grad;
        const bool need_a = a_.requires_grad;
        if (need_v) v_.ensure_grad();
        if (need_a) a_.ensure_grad();
        const double* a = a_.val.data();
        const double* g = self.grad.data();
        double dA[12] = {0};
        // Serial: the volume gradient is a scatter over sample corners.
        for (std::int64_t z = 0; z < D; ++z) {
            const double uz = static_cast<double>(z) - cz;
            for (std::int64_t y = 0; y < H; ++y) {
                const double uy = static_cast<double>(y) - cy;
                for (std::int64_t x = 0; x < W; ++x) {
                    const double ux = static_cast<double>(x) - cx;
                    const double qx = a[0] * ux + a[1] * uy + a[2] * uz + a[3] + cx;
                    const double qy = a[4] * ux + a[5] * uy + a[6] * uz + a[7] + cy;
                    const double qz = a[8] * ux + a[9] * uy + a[10] * uz + a[11] + cz;
                    for (std::int64_t c = 0; c < C; ++c) {
                        const double gv = g[((c * D + z) * H + y) * W + x];
                        if (gv == 0.0) continue;
                        const TrilinearTap t = sample_trilinear_zero_grad(
                            v_.val.data() + c * D * H * W, W, H, D, qx, qy, qz);
                        if (need_v) {
                            double* dv = v_.grad.data() + c * D * H * W;
                            for (int i = 0; i < 8; ++i)
                                if (t.idx[i] >= 0) dv[t.idx[i]] += gv * t.w[i];
                        }
                        if (need_a) {
                            const double gx = gv * t.dq[0], gy = gv * t.dq[1], gz = gv * t.dq[2];
                            dA[0] += gx * ux; dA[1] += gx * uy; dA[2] += gx * uz; dA[3] += gx;
                            dA[4] += gy * ux; dA[5] += gy * uy; dA[6] += gy * uz; dA[7] += gy;
                            dA[8] += gz * ux; dA[9] += gz * uy; dA[10] += gz * uz; dA[11] += gz;
                        }
                    }
                }
            }
        }
        if (need_a)
            for (int i = 0; i < 12; ++i) a_.grad[i] += dA[i];
    });
}

}  // namespace regseg
