#pragma once

// Evaluation protocol: volumetric overlap (dice), boundary distances
// (Hausdorff in mm), voxel-level ROC AUC, and the lesion-level / sextant /
// patient-level classification rules with pooled aggregation.
//
// All inputs are plain binary {D,H,W} grids (nonzero = inside); nothing here
// touches the autodiff tape.

#include <optional>

#include "regseg/volume.hpp"

namespace regseg {

// 2|A∩B| / (|A|+|B|); 1.0 when both masks are empty, 0.0 when exactly one is.
inline double dice_score(const Tensor& pred, const Tensor& gt) {
    require(pred.shape == gt.shape,
            "dice_score: shape mismatch " + pred.shape_str() + " vs " + gt.shape_str());
    std::int64_t np = 0, ng = 0, ni = 0;
    const std::int64_t n = pred.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        const bool p = pred[i] != 0.0;
        const bool g = gt[i] != 0.0;
        np += p;
        ng += g;
        ni += p && g;
    }
    if (np == 0 && ng == 0) return 1.0;
    if (np == 0 || ng == 0) return 0.0;
    return 2.0 * static_cast<double>(ni) / static_cast<double>(np + ng);
}

namespace detail {
// Boundary voxels: inside the mask with at least one 6-neighbor outside the
// mask (voxels on the volume border count as boundary).
inline std::vector<std::array<std::int64_t, 3>> boundary_voxels(const Tensor& mask) {
    require(mask.shape.size() == 3, "boundary_voxels: need {D,H,W}");
    const std::int64_t D = mask.shape[0], H = mask.shape[1], W = mask.shape[2];
    const auto inside = [&](std::int64_t x, std::int64_t y, std::int64_t z) {
        if (x < 0 || x >= W || y < 0 || y >= H || z < 0 || z >= D) return false;
        return mask[(z * H + y) * W + x] != 0.0;
    };
    std::vector<std::array<std::int64_t, 3>> out;
    for (std::int64_t z = 0; z < D; ++z)
        for (std::int64_t y = 0; y < H; ++y)
            for (std::int64_t x = 0; x < W; ++x) {
                if (!inside(x, y, z)) continue;
                if (!inside(x - 1, y, z) || !inside(x + 1, y, z) || !inside(x, y - 1, z) ||
                    !inside(x, y + 1, z) || !inside(x, y, z - 1) || !inside(x, y, z + 1))
                    out.push_back({x, y, z});
            }
    return out;
}
}  // namespace detail

struct HausdorffResult {
    double max_mm = 0.0;
    double p95_mm = 0.0;
};

// Symmetric boundary-to-boundary distances in millimeters (anisotropic
// spacing respected). Brute-force O(n*m); p95 is the nearest-rank 95th
// percentile of the pooled directed distances from both directions.
inline HausdorffResult hausdorff_mm(const Tensor& pred, const Tensor& gt,
                                    double sx, double sy, double sz) {
    require(pred.shape == gt.shape,
            "hausdorff_mm: shape mismatch " + pred.shape_str() + " vs " + gt.shape_str());
    const auto pb = detail::boundary_voxels(pred);
    const auto gb = detail::boundary_voxels(gt);
    if (pb.empty() || gb.empty())
        throw UndefinedMetricError("hausdorff_mm: empty mask (reported as missing, not 0)");

    const auto directed = [&](const std::vector<std::array<std::int64_t, 3>>& from,
                              const std::vector<std::array<std::int64_t, 3>>& to,
                              std::vector<double>& pool) {
        for (const auto& a : from) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& b : to) {
                const double dx = static_cast<double>(a[0] - b[0]) * sx;
                const double dy = static_cast<double>(a[1] - b[1]) * sy;
                const double dz = static_cast<double>(a[2] - b[2]) * sz;
                const double d2 = dx * dx + dy * dy + dz * dz;
                if (d2 < best) best = d2;
            }
            pool.push_back(std::sqrt(best));
        }
    };
    std::vector<double> pool;
    pool.reserve(pb.size() + gb.size());
    directed(pb, gb, pool);
    directed(gb, pb, pool);
    std::sort(pool.begin(), pool.end());
    HausdorffResult r;
    r.max_mm = pool.back();
    const std::size_t idx =
        static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(pool.size()))) - 1;
    r.p95_mm = pool[std::min(idx, pool.size() - 1)];
    return r;
}

// Rank-based AUC with tie averaging over all voxels.
inline double voxel_auc(const Tensor& probs, const Tensor& gt) {
    require(probs.shape == gt.shape,
            "voxel_auc: shape mismatch " + probs.shape_str() + " vs " + gt.shape_str());
    const std::int64_t n = probs.numel();
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    std::sort(order.begin(), order.end(),
              [&](std::int64_t a, std::int64_t b) { return probs[a] < probs[b]; });
    std::int64_t n_pos = 0;
    for (std::int64_t i = 0; i < n; ++i) n_pos += gt[i] != 0.0;
    const std::int64_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0)
        throw UndefinedMetricError("voxel_auc: ground truth has a single class");
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && probs[order[j + 1]] == probs[order[i]]) ++j;
        // ranks i+1 .. j+1 share the average rank
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j + 1);
        for (std::size_t t = i; t <= j; ++t)
            if (gt[order[t]] != 0.0) rank_sum_pos += avg_rank;
        i = j + 1;
    }
    const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
    return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

// 26-connected components; returns per-voxel component id (-1 = background)
// and the number of components.
inline std::pair<std::vector<std::int32_t>, std::int32_t> connected_components_26(const Tensor& mask) {
    require(mask.shape.size() == 3, "connected_components_26: need {D,H,W}");
    const std::int64_t D = mask.shape[0], H = mask.shape[1], W = mask.shape[2];
    const std::int64_t n = D * H * W;
    std::vector<std::int32_t> label(static_cast<std::size_t>(n), -1);
    std::int32_t next = 0;
    std::vector<std::int64_t> stack;
    for (std::int64_t start = 0; start < n; ++start) {
        if (mask[start] == 0.0 || label[static_cast<std::size_t>(start)] >= 0) continue;
        label[static_cast<std::size_t>(start)] = next;
        stack.assign(1, start);
        while (!stack.empty()) {
            const std::int64_t cur = stack.back();
            stack.pop_back();
            const std::int64_t z = cur / (H * W);
            const std::int64_t y = (cur / W) % H;
            const std::int64_t x = cur % W;
            for (int dz = -1; dz <= 1; ++dz)
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        if (dx == 0 && dy == 0 && dz == 0) continue;
                        const std::int64_t nx = x + dx, ny = y + dy, nz = z + dz;
                        if (nx < 0 || nx >= W || ny < 0 || ny >= H || nz < 0 || nz >= D) continue;
                        const std::int64_t ni = (nz * H + ny) * W + nx;
                        if (mask[ni] == 0.0 || label[static_cast<std::size_t>(ni)] >= 0) continue;
                        label[static_cast<std::size_t>(ni)] = next;
                        stack.push_back(ni);
                    }
        }
        ++next;
    }
    return {std::move(label), next};
}

// Sextant id per voxel: axial thirds of the prostate's z extent x left/right
// split at the prostate centroid x. -1 outside the prostate mask. The six
// segments partition the prostate exactly.
inline Tensor sextant_partition(const Tensor& prostate) {
    require(prostate.shape.size() == 3, "sextant_partition: need {D,H,W}");
    const std::int64_t D = prostate.shape[0], H = prostate.shape[1], W = prostate.shape[2];
    std::int64_t z_lo = D, z_hi = -1, count = 0;
    double cx = 0.0;
    for (std::int64_t z = 0; z < D; ++z)
        for (std::int64_t y = 0; y < H; ++y)
            for (std::int64_t x = 0; x < W; ++x)
                if (prostate[(z * H + y) * W + x] != 0.0) {
                    z_lo = std::min(z_lo, z);
                    z_hi = std::max(z_hi, z);
                    cx += static_cast<double>(x);
                    ++count;
                }
    require(count > 0, "sextant_partition: empty prostate mask");
    cx /= static_cast<double>(count);
    const std::int64_t span = z_hi - z_lo + 1;
    Tensor out = Tensor::full({D, H, W}, -1.0);
    for (std::int64_t z = 0; z < D; ++z)
        for (std::int64_t y = 0; y < H; ++y)
            for (std::int64_t x = 0; x < W; ++x) {
                const std::int64_t i = (z * H + y) * W + x;
                if (prostate[i] == 0.0) continue;
                const std::int64_t third = std::min<std::int64_t>(2, 3 * (z - z_lo) / span);
                const std::int64_t lr = static_cast<double>(x) < cx ? 0 : 1;
                out[i] = static_cast<double>(third * 2 + lr);
            }
    return out;
}

struct LesionCounts {
    std::int64_t tp = 0, fn = 0, tn = 0, fp = 0;
    // (lesion or segment id, verdict) in evaluation order.
    std::vector<std::pair<std::string, std::string>> provenance;
};

// Lesion-level rules: a GT lesion (26-connected tumor component) is TP when
// predicted tumor covers >= 1% of its voxels, else FN. The prostate is split
// into sextants; a segment with < 1% GT cancer voxels is GT-negative, and a
// GT-negative segment is TN when >= 99% of its voxels are predicted
// non-tumor, else FP. Integer arithmetic keeps the 1% thresholds exact.
inline LesionCounts lesion_level_classify(const Tensor& pred_tumor, const Tensor& gt_tumor,
                                          const Tensor& prostate) {
    require(pred_tumor.shape == gt_tumor.shape && gt_tumor.shape == prostate.shape,
            "lesion_level_classify: mask shapes differ");
    std::int64_t prostate_vox = 0;
    for (double v : prostate.v) prostate_vox += v != 0.0;
    require(prostate_vox > 0, "lesion_level_classify: empty prostate mask");

    LesionCounts out;
    const auto [labels, n_comp] = connected_components_26(gt_tumor);
    const std::int64_t n = gt_tumor.numel();
    std::vector<std::int64_t> lesion_size(static_cast<std::size_t>(n_comp), 0);
    std::vector<std::int64_t> lesion_overlap(static_cast<std::size_t>(n_comp), 0);
    for (std::int64_t i = 0; i < n; ++i) {
        const std::int32_t l = labels[static_cast<std::size_t>(i)];
        if (l < 0) continue;
        ++lesion_size[static_cast<std::size_t>(l)];
        if (pred_tumor[i] != 0.0) ++lesion_overlap[static_cast<std::size_t>(l)];
    }
    for (std::int32_t l = 0; l < n_comp; ++l) {
        const bool hit = 100 * lesion_overlap[static_cast<std::size_t>(l)] >=
                         lesion_size[static_cast<std::size_t>(l)];
        if (hit)
            ++out.tp;
        else
            ++out.fn;
        out.provenance.emplace_back("lesion_" + std::to_string(l), hit ? "tp" : "fn");
    }

    const Tensor sextants = sextant_partition(prostate);
    std::array<std::int64_t, 6> seg_size{}, seg_gt{}, seg_pred{};
    for (std::int64_t i = 0; i < n; ++i) {
        if (sextants[i] < 0.0) continue;
        const auto s = static_cast<std::size_t>(sextants[i]);
        ++seg_size[s];
        if (gt_tumor[i] != 0.0) ++seg_gt[s];
        if (pred_tumor[i] != 0.0) ++seg_pred[s];
    }
    for (std::size_t s = 0; s < 6; ++s) {
        if (seg_size[s] == 0) continue;                 // empty segment: out of domain
        if (100 * seg_gt[s] >= seg_size[s]) continue;   // not GT-negative
        const bool tn = 100 * seg_pred[s] <= seg_size[s];
        if (tn)
            ++out.tn;
        else
            ++out.fp;
        out.provenance.emplace_back("segment_" + std::to_string(s), tn ? "tn" : "fp");
    }
    return out;
}

enum class PatientVerdict { tp, fn, excluded };

inline const char* to_string(PatientVerdict v) {
    switch (v) {
        case PatientVerdict::tp: return "tp";
        case PatientVerdict::fn: return "fn";
        default: return "excluded";
    }
}

// TP when at least one lesion was detected; cases without GT lesions are
// excluded rather than scored.
inline PatientVerdict patient_level_classify(const LesionCounts& c) {
    if (c.tp + c.fn == 0) return PatientVerdict::excluded;
    return c.tp >= 1 ? PatientVerdict::tp : PatientVerdict::fn;
}

struct CaseReport {
    std::string case_id;
    std::array<double, 3> dice{0, 0, 0};  // other, prostate, tumor
    std::optional<double> hd_max_mm, hd_p95_mm;
    std::optional<double> auc;
    LesionCounts lesions;
    PatientVerdict patient = PatientVerdict::excluded;
};

struct Summary {
    std::optional<double> sensitivity, specificity, accuracy, ppv, npv;
    std::array<double, 3> mean_dice{0, 0, 0};
    std::optional<double> mean_hd_max_mm, mean_hd_p95_mm, mean_auc;
    std::int64_t tp = 0, fn = 0, tn = 0, fp = 0;
    std::int64_t patient_tp = 0, patient_fn = 0, patient_excluded = 0;
};

// Pooled lesion-level ratios; zero denominators stay missing, never zero.
inline Summary aggregate(const std::vector<CaseReport>& reports) {
    require(!reports.empty(), "aggregate: need at least one report");
    Summary s;
    double hd_max = 0, hd_p95 = 0, auc = 0;
    std::int64_t n_hd = 0, n_auc = 0;
    for (const auto& r : reports) {
        s.tp += r.lesions.tp;
        s.fn += r.lesions.fn;
        s.tn += r.lesions.tn;
        s.fp += r.lesions.fp;
        for (int c = 0; c < 3; ++c) s.mean_dice[static_cast<std::size_t>(c)] += r.dice[static_cast<std::size_t>(c)];
        if (r.hd_max_mm) {
            hd_max += *r.hd_max_mm;
            hd_p95 += *r.hd_p95_mm;
            ++n_hd;
        }
        if (r.auc) {
            auc += *r.auc;
            ++n_auc;
        }
        switch (r.patient) {
            case PatientVerdict::tp: ++s.patient_tp; break;
            case PatientVerdict::fn: ++s.patient_fn; break;
            default: ++s.patient_excluded;
        }
    }
    for (int c = 0; c < 3; ++c) s.mean_dice[static_cast<std::size_t>(c)] /= static_cast<double>(reports.size());
    if (n_hd) {
        s.mean_hd_max_mm = hd_max / static_cast<double>(n_hd);
        s.mean_hd_p95_mm = hd_p95 / static_cast<double>(n_hd);
    }
    if (n_auc) s.mean_auc = auc / static_cast<double>(n_auc);
    const auto ratio = [](std::int64_t num, std::int64_t den) -> std::optional<double> {
        if (den == 0) return std::nullopt;
        return static_cast<double>(num) / static_cast<double>(den);
    };
    s.sensitivity = ratio(s.tp, s.tp + s.fn);
    s.specificity = ratio(s.tn, s.tn + s.fp);
    s.accuracy = ratio(s.tp + s.tn, s.tp + s.tn + s.fp + s.fn);
    s.ppv = ratio(s.tp, s.tp + s.fp);
    s.npv = ratio(s.tn, s.tn + s.fn);
    return s;
}

}  // namespace regseg
