#pragma once

// Segmentation stage: fusion of aligned merged/init volumes (steps 7-8), a
// 3D U-Net over the 2-channel fused volume (step 9), and the naive
// raw-concatenation baseline that shares the identical U-Net architecture.

#include "regseg/regnet.hpp"

namespace regseg {

struct SegNetConfig {
    std::int64_t depth = 3;  // number of poolings
    std::int64_t base = 16;  // channels at full resolution

    void validate(std::int64_t W, std::int64_t H, std::int64_t D) const {
        require(depth >= 1 && base >= 1, "SegNetConfig: depth and base must be >= 1");
        const std::int64_t f = std::int64_t{1} << depth;
        require(W % f == 0 && H % f == 0 && D % f == 0,
                "SegNetConfig: dims " + std::to_string(W) + "x" + std::to_string(H) + "x" +
                    std::to_string(D) + " must be divisible by 2^depth = " + std::to_string(f));
    }
};

struct SegConvParams {
    Var w, b, in_g, in_b;  // conv3d + instance-norm affine
};

struct SegNetParams {
    SegNetConfig cfg;
    std::vector<std::array<SegConvParams, 2>> enc;  // per level, two conv stages
    std::array<SegConvParams, 2> bottleneck;
    std::vector<std::array<SegConvParams, 2>> dec;  // dec[0] is the deepest level
    Var head_w, head_b;                             // 1x1x1 conv to 3 classes

    static SegNetParams create(ParamStore& store, const SegNetConfig& cfg, Rng& rng) {
        SegNetParams p;
        p.cfg = cfg;
        const auto conv_std = [](std::int64_t fan_in) {
            return std::sqrt(2.0 / static_cast<double>(fan_in));
        };
        const auto make_conv = [&](const std::string& name, std::int64_t ci, std::int64_t co) {
            SegConvParams c;
            c.w = store.add(name + ".w", gaussian_init(rng, {co, ci, 3, 3, 3}, conv_std(27 * ci)));
            c.b = store.add(name + ".b", Tensor::zeros({co}));
            c.in_g = store.add(name + ".in.g", Tensor::full({co}, 1.0));
            c.in_b = store.add(name + ".in.b", Tensor::zeros({co}));
            return c;
        };

        std::int64_t ci = 2;
        for (std::int64_t lvl = 0; lvl < cfg.depth; ++lvl) {
            const std::int64_t w = cfg.base << lvl;
            const std::string nm = "seg.enc" + std::to_string(lvl);
            p.enc.push_back({make_conv(nm + ".conv1", ci, w), make_conv(nm + ".conv2", w, w)});
            ci = w;
        }
        const std::int64_t wb = cfg.base << cfg.depth;
        p.bottleneck = {make_conv("seg.bottleneck.conv1", ci, wb),
                        make_conv("seg.bottleneck.conv2", wb, wb)};
        std::int64_t above = wb;
        for (std::int64_t lvl = cfg.depth - 1; lvl >= 0; --lvl) {
            const std::int64_t w = cfg.base << lvl;
            const std::string nm = "seg.dec" + std::to_string(lvl);
            // Input: upsampled deeper features concatenated with the skip.
            p.dec.push_back({make_conv(nm + ".conv1", above + w, w), make_conv(nm + ".conv2", w, w)});
            above = w;
        }
        p.head_w = store.add("seg.head.w", gaussian_init(rng, {3, cfg.base}, conv_std(cfg.base)));
        p.head_b = store.add("seg.head.b", Tensor::zeros({3}));
        return p;
    }
};

namespace detail {
inline Var seg_conv(const Var& x, const SegConvParams& c) {
    return gelu(instance_norm(conv3d(x, c.w, c.b, 1), c.in_g, c.in_b));
}
}  // namespace detail

// Steps 7-8: channel 0 = upsample2x(warped merged moving) + warped initial
// moving; channel 1 = upsample2x(merged fixed) + initial fixed.
inline Var fuse_inputs(const Var& m_merge_warped, const Var& m_init_warped, const Var& t_merge,
                       const Var& t_init) {
    detail::check_chw(m_merge_warped, "fuse_inputs");
    detail::check_chw(t_merge, "fuse_inputs");
    require(m_merge_warped->val.shape == t_merge->val.shape,
            "fuse_inputs: merged shapes differ: " + m_merge_warped->val.shape_str() + " vs " +
                t_merge->val.shape_str());
    require(m_init_warped->val.shape == t_init->val.shape,
            "fuse_inputs: init shapes differ: " + m_init_warped->val.shape_str() + " vs " +
                t_init->val.shape_str());
    Var ch0 = add(upsample2_trilinear(m_merge_warped), m_init_warped);
    Var ch1 = add(upsample2_trilinear(t_merge), t_init);
    require(ch0->val.shape == ch1->val.shape, "fuse_inputs: channel shapes differ after fusion");
    return concat_axis0(ch0, ch1);
}

// Step 9: U-Net with avg-pool downsampling, trilinear upsampling, skip
// concatenation, instance norm + GELU, and a softmax head over 3 classes.
inline Var unet_forward(const Var& fused, const SegNetParams& p) {
    detail::check_chw(fused, "unet_forward");
    require(fused->val.shape[0] == 2,
            "unet_forward: expected a 2-channel fused input, got " + fused->val.shape_str());
    p.cfg.validate(fused->val.shape[3], fused->val.shape[2], fused->val.shape[1]);

    std::vector<Var> skips;
    Var x = fused;
    for (std::int64_t lvl = 0; lvl < p.cfg.depth; ++lvl) {
        x = detail::seg_conv(x, p.enc[static_cast<std::size_t>(lvl)][0]);
        x = detail::seg_conv(x, p.enc[static_cast<std::size_t>(lvl)][1]);
        skips.push_back(x);
        x = avg_pool2(x);
    }
    x = detail::seg_conv(x, p.bottleneck[0]);
    x = detail::seg_conv(x, p.bottleneck[1]);
    for (std::int64_t i = 0; i < p.cfg.depth; ++i) {
        const auto& lvl = p.dec[static_cast<std::size_t>(i)];
        x = concat_axis0(upsample2_trilinear(x), skips[static_cast<std::size_t>(p.cfg.depth - 1 - i)]);
        x = detail::seg_conv(x, lvl[0]);
        x = detail::seg_conv(x, lvl[1]);
    }
    return softmax_channels(conv1x1(x, p.head_w, p.head_b));
}

struct PipelineOutput {
    Var probs;  // [3,D,H,W]
    RegForwardOutput reg;
};

// Full differentiable pipeline: registration, fusion, segmentation.
inline PipelineOutput pipeline_forward(const Var& m_init, const Var& t_init, const RegNetParams& rp,
                                       const SegNetParams& sp) {
    PipelineOutput out;
    out.reg = register_forward(m_init, t_init, rp);
    Var fused = fuse_inputs(out.reg.m_merge_warped, out.reg.m_init_warped, out.reg.t_merge, t_init);
    out.probs = unet_forward(fused, sp);
    return out;
}

// Table-1 baseline: raw moving/fixed stacked on channels, same U-Net.
inline Var naive_concat_forward(const Var& m_init, const Var& t_init, const SegNetParams& p) {
    require(m_init->val.shape == t_init->val.shape,
            "naive_concat_forward: input shapes differ: " + m_init->val.shape_str() + " vs " +
                t_init->val.shape_str());
    return unet_forward(concat_axis0(m_init, t_init), p);
}

}  // namespace regseg
