#pragma once

// Registration network: per-modality conv feature extractors, merge with the
// pooled originals, patch-embedded transformer encoder over the merged pair,
// and an affine head that starts exactly at the identity transform.

#include "regseg/params.hpp"
#include "regseg/volume.hpp"

namespace regseg {

struct RegNetConfig {
    std::int64_t patch = 4;       // k: patch edge on the half-resolution grid
    std::int64_t token_dim = 96;  // C
    std::int64_t depth = 4;       // transformer blocks
    std::int64_t heads = 4;       // attention heads
    std::int64_t feat_channels = 8;

    void validate(std::int64_t W, std::int64_t H, std::int64_t D) const {
        require(patch >= 1 && token_dim >= 1 && depth >= 1 && heads >= 1 && feat_channels >= 1,
                "RegNetConfig: all sizes must be >= 1");
        require(token_dim % heads == 0, "RegNetConfig: token_dim must be divisible by heads");
        require(W % 2 == 0 && H % 2 == 0 && D % 2 == 0,
                "RegNetConfig: volume dims must be even, got " + std::to_string(W) + "x" +
                    std::to_string(H) + "x" + std::to_string(D));
        require((W / 2) % patch == 0 && (H / 2) % patch == 0 && (D / 2) % patch == 0,
                "RegNetConfig: merged dims (" + std::to_string(W / 2) + "," + std::to_string(H / 2) +
                    "," + std::to_string(D / 2) + ") must be divisible by patch size " +
                    std::to_string(patch));
    }

    std::int64_t tokens(std::int64_t W, std::int64_t H, std::int64_t D) const {
        return (W / (2 * patch)) * (H / (2 * patch)) * (D / (2 * patch));
    }
};

// Parameter bundle for one transformer block.
struct RegBlockParams {
    Var ln1_g, ln1_b;
    Var wq, bq, wk, bk, wv, bv, wo, bo;
    Var ln2_g, ln2_b;
    Var mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct RegNetParams {
    RegNetConfig cfg;
    std::int64_t W = 0, H = 0, D = 0;  // full-resolution input dims

    // Per-modality extractors (Eq. 1 uses separate weights per modality).
    Var m_conv1_w, m_conv1_b, m_conv2_w, m_conv2_b;
    Var t_conv1_w, t_conv1_b, t_conv2_w, t_conv2_b;

    Var embed_w, embed_b;  // [2k^3, C], [C]
    Var pos_emb;           // [N, C] learned positional embedding
    std::vector<RegBlockParams> blocks;
    Var ln_f_g, ln_f_b;
    Var head_w1, head_b1;  // [C, C], [C]
    Var head_w2, head_b2;  // [C, 12], [12]; zero weights + identity bias
    Tensor out_scale;      // [1, 12] fixed per-entry scale of the head delta (not learned)

    // Registers all tensors under "reg." names. Draw order is fixed.
    static RegNetParams create(ParamStore& store, const RegNetConfig& cfg, std::int64_t W,
                               std::int64_t H, std::int64_t D, Rng& rng) {
        cfg.validate(W, H, D);
        RegNetParams p;
        p.cfg = cfg;
        p.W = W;
        p.H = H;
        p.D = D;
        const std::int64_t F = cfg.feat_channels;
        const std::int64_t C = cfg.token_dim;
        const std::int64_t P = cfg.patch * cfg.patch * cfg.patch;
        const std::int64_t N = cfg.tokens(W, H, D);

        const auto conv_std = [](std::int64_t fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); };
        const auto lin_std = [](std::int64_t fan_in) { return std::sqrt(1.0 / static_cast<double>(fan_in)); };

        for (const char* mod : {"m", "t"}) {
            const std::string base = std::string("reg.") + mod;
            Var c1w = store.add(base + ".conv1.w", gaussian_init(rng, {F, 1, 3, 3, 3}, conv_std(27)));
            Var c1b = store.add(base + ".conv1.b", Tensor::zeros({F}));
            Var c2w = store.add(base + ".conv2.w", gaussian_init(rng, {1, F, 3, 3, 3}, conv_std(27 * F)));
            Var c2b = store.add(base + ".conv2.b", Tensor::zeros({1}));
            if (mod[0] == 'm') {
                p.m_conv1_w = c1w;
                p.m_conv1_b = c1b;
                p.m_conv2_w = c2w;
                p.m_conv2_b = c2b;
            } else {
                p.t_conv1_w = c1w;
                p.t_conv1_b = c1b;
                p.t_conv2_w = c2w;
                p.t_conv2_b = c2b;
            }
        }

        p.embed_w = store.add("reg.embed.w", gaussian_init(rng, {2 * P, C}, lin_std(2 * P)));
        p.embed_b = store.add("reg.embed.b", Tensor::zeros({C}));
        p.pos_emb = store.add("reg.pos_emb", gaussian_init(rng, {N, C}, 0.02));

        for (std::int64_t i = 0; i < cfg.depth; ++i) {
            const std::string b = "reg.block" + std::to_string(i);
            RegBlockParams blk;
            blk.ln1_g = store.add(b + ".ln1.g", Tensor::full({C}, 1.0));
            blk.ln1_b = store.add(b + ".ln1.b", Tensor::zeros({C}));
            blk.wq = store.add(b + ".attn.wq", gaussian_init(rng, {C, C}, lin_std(C)));
            blk.bq = store.add(b + ".attn.bq", Tensor::zeros({C}));
            blk.wk = store.add(b + ".attn.wk", gaussian_init(rng, {C, C}, lin_std(C)));
            blk.bk = store.add(b + ".attn.bk", Tensor::zeros({C}));
            blk.wv = store.add(b + ".attn.wv", gaussian_init(rng, {C, C}, lin_std(C)));
            blk.bv = store.add(b + ".attn.bv", Tensor::zeros({C}));
            blk.wo = store.add(b + ".attn.wo", gaussian_init(rng, {C, C}, lin_std(C)));
            blk.bo = store.add(b + ".attn.bo", Tensor::zeros({C}));
            blk.ln2_g = store.add(b + ".ln2.g", Tensor::full({C}, 1.0));
            blk.ln2_b = store.add(b + ".ln2.b", Tensor::zeros({C}));
            blk.mlp_w1 = store.add(b + ".mlp.w1", gaussian_init(rng, {C, 4 * C}, conv_std(C)));
            blk.mlp_b1 = store.add(b + ".mlp.b1", Tensor::zeros({4 * C}));
            blk.mlp_w2 = store.add(b + ".mlp.w2", gaussian_init(rng, {4 * C, C}, lin_std(4 * C)));
            blk.mlp_b2 = store.add(b + ".mlp.b2", Tensor::zeros({C}));
            p.blocks.push_back(blk);
        }

        p.ln_f_g = store.add("reg.ln_f.g", Tensor::full({C}, 1.0));
        p.ln_f_b = store.add("reg.ln_f.b", Tensor::zeros({C}));
        p.head_w1 = store.add("reg.head.w1", gaussian_init(rng, {C, C}, conv_std(C)));
        p.head_b1 = store.add("reg.head.b1", Tensor::zeros({C}));
        // Zero weights + identity bias: the predicted transform starts as the
        // exact identity regardless of the input.
        p.head_w2 = store.add("reg.head.w2", Tensor::zeros({C, 12}));
        Tensor id_bias({12});
        id_bias[0] = 1.0;
        id_bias[5] = 1.0;
        id_bias[10] = 1.0;
        p.head_b2 = store.add("reg.head.b2", id_bias);
        // Translations live in voxels (up to a quarter extent per axis) while the
        // linear 3x3 entries deviate from identity by well under one; predicting
        // both at unit scale would force the zero-initialized head weights to grow
        // by orders of magnitude before translations register. The head therefore
        // predicts a normalized delta that is scaled per entry: quarter-extent
        // units for the translation column, 0.25 for the linear part.
        const double ext[3] = {static_cast<double>(W), static_cast<double>(H), static_cast<double>(D)};
        p.out_scale = Tensor({1, 12});
        for (std::int64_t i = 0; i < 12; ++i)
            p.out_scale[i] = (i % 4 == 3) ? 0.25 * ext[i / 4] : 0.25;
        return p;
    }

    // Names of the conv feature-extractor tensors (the paper's phase-b
    // "freeze the encoder" option applies to these).
    std::vector<std::string> extractor_param_names() const {
        std::vector<std::string> out;
        for (const char* mod : {"m", "t"})
            for (const char* t : {".conv1.w", ".conv1.b", ".conv2.w", ".conv2.b"})
                out.push_back(std::string("reg.") + mod + t);
        return out;
    }
};

// Eq. 1: two stride-halving conv stages per modality, single-channel output.
inline Var extract_features(const Var& vol, bool moving, const RegNetParams& p) {
    detail::check_chw(vol, "extract_features");
    require(vol->val.shape[0] == 1, "extract_features: expected single-channel input");
    require(vol->val.shape[1] % 2 == 0 && vol->val.shape[2] % 2 == 0 && vol->val.shape[3] % 2 == 0,
            "extract_features: dims must be even, got " + vol->val.shape_str());
    const Var& c1w = moving ? p.m_conv1_w : p.t_conv1_w;
    const Var& c1b = moving ? p.m_conv1_b : p.t_conv1_b;
    const Var& c2w = moving ? p.m_conv2_w : p.t_conv2_w;
    const Var& c2b = moving ? p.m_conv2_b : p.t_conv2_b;
    Var h = gelu(conv3d(vol, c1w, c1b, 2));
    return gelu(conv3d(h, c2w, c2b, 1));
}

// Eq. 2: merged volume = avg-pooled original + extracted features.
inline Var merge(const Var& vol_init, const Var& fea) {
    detail::check_chw(vol_init, "merge");
    detail::check_chw(fea, "merge");
    require(fea->val.shape[0] == vol_init->val.shape[0] && fea->val.shape[1] * 2 == vol_init->val.shape[1] &&
                fea->val.shape[2] * 2 == vol_init->val.shape[2] &&
                fea->val.shape[3] * 2 == vol_init->val.shape[3],
            "merge: feature dims " + fea->val.shape_str() + " must be half of " + vol_init->val.shape_str());
    return add(avg_pool2(vol_init), fea);
}

namespace detail {
// Standard pre-norm block: x += MSA(LN(x)); x += MLP(LN(x)).
inline Var transformer_block(const Var& x, const RegBlockParams& b, std::int64_t heads) {
    const std::int64_t C = x->val.shape[1];
    const std::int64_t hd = C / heads;
    Var n1 = layernorm_rows(x, b.ln1_g, b.ln1_b);
    Var q = linear(n1, b.wq, b.bq);
    Var k = linear(n1, b.wk, b.bk);
    Var v = linear(n1, b.wv, b.bv);
    Var heads_out;
    for (std::int64_t h = 0; h < heads; ++h) {
        Var qh = cols_slice(q, h * hd, hd);
        Var kh = cols_slice(k, h * hd, hd);
        Var vh = cols_slice(v, h * hd, hd);
        Var scores = scale(matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(hd)));
        Var oh = matmul(softmax_rows(scores), vh);
        heads_out = h == 0 ? oh : concat_cols(heads_out, oh);
    }
    Var attn = linear(heads_out, b.wo, b.bo);
    Var x1 = add(x, attn);
    Var n2 = layernorm_rows(x1, b.ln2_g, b.ln2_b);
    Var mlp = linear(gelu(linear(n2, b.mlp_w1, b.mlp_b1)), b.mlp_w2, b.mlp_b2);
    return add(x1, mlp);
}
}  // namespace detail

// Eq. 3 path: patchify both merged volumes, embed, run the encoder, pool
// tokens, and regress the 3x4 transform. Returns a [3,4] Var.
inline Var predict_affine(const Var& m_merge, const Var& t_merge, const RegNetParams& p) {
    detail::check_chw(m_merge, "predict_affine");
    detail::check_chw(t_merge, "predict_affine");
    require(m_merge->val.shape == t_merge->val.shape,
            "predict_affine: merged volumes differ in shape: " + m_merge->val.shape_str() + " vs " +
                t_merge->val.shape_str());
    const std::int64_t k = p.cfg.patch;
    Var tok_m = patchify(m_merge, k);
    Var tok_t = patchify(t_merge, k);
    Var z = linear(concat_cols(tok_m, tok_t), p.embed_w, p.embed_b);
    require(z->val.shape[0] == p.pos_emb->val.shape[0],
            "predict_affine: token count " + std::to_string(z->val.shape[0]) +
                " does not match positional embedding rows " + std::to_string(p.pos_emb->val.shape[0]));
    z = add(z, p.pos_emb);
    for (const auto& blk : p.blocks) z = detail::transformer_block(z, blk, p.cfg.heads);
    z = layernorm_rows(z, p.ln_f_g, p.ln_f_b);
    Var pooled = reshape(mean_over_rows(z), {1, p.cfg.token_dim});
    Var h = gelu(linear(pooled, p.head_w1, p.head_b1));
    Var delta = mul(matmul(h, p.head_w2), constant(p.out_scale));
    return reshape(add(delta, reshape(p.head_b2, {1, 12})), {3, 4});
}

struct RegForwardOutput {
    Var A;               // [3,4]
    Var m_merge;         // half resolution (pre-warp)
    Var t_merge;         // half resolution
    Var m_merge_warped;  // half resolution
    Var m_init_warped;   // full resolution
};

// Steps 1-6: features, merge, affine prediction, warps of the merged and
// initial moving volumes. Fully differentiable.
inline RegForwardOutput register_forward(const Var& m_init, const Var& t_init, const RegNetParams& p) {
    require(m_init->val.shape == t_init->val.shape,
            "register_forward: input shapes differ: " + m_init->val.shape_str() + " vs " +
                t_init->val.shape_str());
    RegForwardOutput out;
    Var m_fea = extract_features(m_init, true, p);
    Var t_fea = extract_features(t_init, false, p);
    out.m_merge = merge(m_init, m_fea);
    out.t_merge = merge(t_init, t_fea);
    out.A = predict_affine(out.m_merge, out.t_merge, p);
    out.m_merge_warped = warp_affine(out.m_merge, out.A);
    out.m_init_warped = warp_affine(m_init, out.A);
    return out;
}

}  // namespace regseg
