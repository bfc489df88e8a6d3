#pragma once

// The three loss families and their weighted combination, plus the small
// shared-weight distribution extractor feeding the KL term.

#include "regseg/segnet.hpp"

namespace regseg {

struct LossWeights {
    double alpha = 1.0;   // registration dice term
    double beta = 0.1;    // KL term
    double lambda = 1.0;  // segmentation term (dice + focal)
    std::array<double, 3> class_weights{0.5, 1.0, 4.0};  // other, prostate, tumor
    double focal_gamma = 2.0;
    double focal_alpha = 0.25;
    double epsilon = 1e-7;

    void validate() const {
        require(alpha >= 0 && beta >= 0 && lambda >= 0, "LossWeights: weights must be >= 0");
        require(alpha > 0 || beta > 0 || lambda > 0, "LossWeights: at least one weight must be > 0");
        require(class_weights[0] > 0 && class_weights[1] >= class_weights[0] &&
                    class_weights[2] >= class_weights[1],
                "LossWeights: need w_tumor >= w_prostate >= w_other > 0");
        require(focal_gamma >= 0, "LossWeights: focal_gamma must be >= 0");
        require(focal_alpha > 0 && focal_alpha <= 1, "LossWeights: focal_alpha must be in (0,1]");
        require(epsilon > 0, "LossWeights: epsilon must be > 0");
    }
};

// Weighted soft dice over the three classes:
//   1 - (2*sum_c w_c*sum(gm*gt) + eps) / (sum_c w_c*(sum gm^2 + sum gt^2) + eps)
// gm_warped is the softly-warped ground-truth mask (values in [0,1]), so the
// loss is differentiable w.r.t. the transform it came through. Exactly 0 at
// perfect overlap because eps appears in both numerator and denominator.
inline Var registration_dice_loss(const Var& gm_warped, const Var& gt, const LossWeights& w) {
    w.validate();
    require(gm_warped->val.shape == gt->val.shape,
            "registration_dice_loss: shape mismatch " + gm_warped->val.shape_str() + " vs " +
                gt->val.shape_str());
    require(gm_warped->val.shape.size() >= 2 && gm_warped->val.shape[0] == 3,
            "registration_dice_loss: expected 3-channel masks, got " + gm_warped->val.shape_str());
    Tensor wt({3});
    for (int c = 0; c < 3; ++c) wt[c] = w.class_weights[static_cast<std::size_t>(c)];
    Var wv = constant(std::move(wt));
    Var inter = sum_per_channel(mul(gm_warped, gt));
    Var sq = sum_per_channel(add(mul(gm_warped, gm_warped), mul(gt, gt)));
    Var num = add_scalar(scale(sum(mul(wv, inter)), 2.0), w.epsilon);
    Var den = add_scalar(sum(mul(wv, sq)), w.epsilon);
    return sub(constant(Tensor::scalar(1.0)), div(num, den));
}

// Step-10 distribution extractor: two convs, global average pool, softmax.
// One weight set shared across both modalities.
struct DistNetConfig {
    std::int64_t dim = 64;       // d: distribution width
    std::int64_t channels = 8;   // intermediate conv channels

    void validate() const {
        require(dim >= 2 && channels >= 1, "DistNetConfig: dim must be >= 2, channels >= 1");
    }
};

struct DistNetParams {
    DistNetConfig cfg;
    Var conv1_w, conv1_b;  // 1 -> channels, stride 2
    Var conv2_w, conv2_b;  // channels -> dim, stride 1

    static DistNetParams create(ParamStore& store, const DistNetConfig& cfg, Rng& rng) {
        cfg.validate();
        DistNetParams p;
        p.cfg = cfg;
        const auto conv_std = [](std::int64_t fan_in) {
            return std::sqrt(2.0 / static_cast<double>(fan_in));
        };
        p.conv1_w = store.add("dist.conv1.w", gaussian_init(rng, {cfg.channels, 1, 3, 3, 3}, conv_std(27)));
        p.conv1_b = store.add("dist.conv1.b", Tensor::zeros({cfg.channels}));
        p.conv2_w = store.add("dist.conv2.w",
                              gaussian_init(rng, {cfg.dim, cfg.channels, 3, 3, 3}, conv_std(27 * cfg.channels)));
        p.conv2_b = store.add("dist.conv2.b", Tensor::zeros({cfg.dim}));
        return p;
    }
};

// merged: [1, D/2, H/2, W/2] (half-resolution). Returns a [d] simplex Var.
inline Var extract_distribution(const Var& merged, const DistNetParams& p) {
    detail::check_chw(merged, "extract_distribution");
    require(merged->val.shape[0] == 1, "extract_distribution: expected single-channel input");
    Var h = gelu(conv3d(merged, p.conv1_w, p.conv1_b, 2));
    h = conv3d(h, p.conv2_w, p.conv2_b, 1);
    return softmax_rows(global_avg_pool(h));
}

// KL(T || M-hat) = sum T * (log T - log M-hat), entries clamped to >= 1e-8
// before the log. Zero exactly when the clamped distributions coincide.
inline Var kl_loss(const Var& t_dis, const Var& m_dis) {
    require(t_dis->val.shape == m_dis->val.shape,
            "kl_loss: dimension mismatch " + t_dis->val.shape_str() + " vs " + m_dis->val.shape_str());
    Var t = clamp_min(t_dis, 1e-8);
    Var m = clamp_min(m_dis, 1e-8);
    return sum(mul(t, sub(vlog(t), vlog(m))));
}

// Soft dice over all classes with the squared denominator:
//   1 - 2*sum_c sum(y*g) / sum_c sum(y^2 + g^2)
// No epsilon: for softmax probabilities the denominator is >= n/3 > 0, and
// the closed-form identities (perfect -> 0, uniform -> 0.5) hold exactly.
inline Var segmentation_dice_loss(const Var& y, const Var& gt) {
    require(y->val.shape == gt->val.shape,
            "segmentation_dice_loss: shape mismatch " + y->val.shape_str() + " vs " + gt->val.shape_str());
    Var num = scale(sum(mul(y, gt)), 2.0);
    Var den = sum(add(mul(y, y), mul(gt, gt)));
    return sub(constant(Tensor::scalar(1.0)), div(num, den));
}

// Focal loss, mean over voxels: -alpha_f * mean_vox sum_c G*(1-Y)^gamma*log(Y),
// with Y clamped to [1e-8, 1].
inline Var focal_loss(const Var& y, const Var& gt, double gamma, double alpha_f) {
    require(y->val.shape == gt->val.shape,
            "focal_loss: shape mismatch " + y->val.shape_str() + " vs " + gt->val.shape_str());
    require(y->val.shape.size() >= 2, "focal_loss: expected [C, ...spatial]");
    require(gamma >= 0, "focal_loss: gamma must be >= 0");
    const std::int64_t n_vox = y->val.numel() / y->val.shape[0];
    Var yc = clamp(y, 1e-8, 1.0);
    Var focal = mul(pow_const(sub(constant(Tensor::full(y->val.shape, 1.0)), yc), gamma), vlog(yc));
    Var s = sum(mul(gt, focal));
    return scale(s, -alpha_f / static_cast<double>(n_vox));
}

// Final combination: alpha*L_reg + beta*L_KL + lambda*(L_dice + L_focal).
inline Var total_loss(const Var& l_reg, const Var& l_kl, const Var& l_dice, const Var& l_focal,
                      const LossWeights& w) {
    const auto check = [](const Var& v, const char* name) {
        require(v->val.numel() == 1, std::string(name) + " must be scalar");
        if (!std::isfinite(v->val[0]))
            throw NumericalError(std::string("total_loss: non-finite component ") + name + " = " +
                                 std::to_string(v->val[0]));
    };
    check(l_reg, "l_reg");
    check(l_kl, "l_kl");
    check(l_dice, "l_dice");
    check(l_focal, "l_focal");
    return add(add(scale(l_reg, w.alpha), scale(l_kl, w.beta)), scale(add(l_dice, l_focal), w.lambda));
}

}  // namespace regseg
