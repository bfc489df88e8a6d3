#pragma once

// Independent re-derivation of the lesion-level classification rules, used
// as a brute-force oracle by the unit tests and the acceptance gate. It
// shares no code with the library implementation: connected components via
// min-label propagation instead of flood fill, sextants via threshold
// comparisons instead of integer division, and the 99%-normal rule counted
// from the non-tumor side.

#include <regseg/tensor.hpp>

#include <array>
#include <cstdint>
#include <map>
#include <utility>
#include <vector>

namespace tu {

struct LesionOracleCounts {
    std::int64_t tp = 0, fn = 0, tn = 0, fp = 0;
};

// 26-connected components by iterated min-label propagation.
inline std::pair<std::vector<std::int64_t>, std::int64_t> oracle_components26(
    const regseg::Tensor& mask) {
    const std::int64_t D = mask.shape[0], H = mask.shape[1], W = mask.shape[2];
    const std::int64_t n = D * H * W;
    std::vector<std::int64_t> lab(static_cast<std::size_t>(n), -1);
    for (std::int64_t i = 0; i < n; ++i)
        if (mask[i] != 0.0) lab[static_cast<std::size_t>(i)] = i;

    bool changed = true;
    while (changed) {
        changed = false;
        for (std::int64_t z = 0; z < D; ++z)
            for (std::int64_t y = 0; y < H; ++y)
                for (std::int64_t x = 0; x < W; ++x) {
                    const std::int64_t i = (z * H + y) * W + x;
                    if (lab[static_cast<std::size_t>(i)] < 0) continue;
                    for (int dz = -1; dz <= 1; ++dz)
                        for (int dy = -1; dy <= 1; ++dy)
                            for (int dx = -1; dx <= 1; ++dx) {
                                const std::int64_t nx = x + dx, ny = y + dy, nz = z + dz;
                                if (nx < 0 || nx >= W || ny < 0 || ny >= H || nz < 0 || nz >= D)
                                    continue;
                                const std::int64_t j = (nz * H + ny) * W + nx;
                                if (lab[static_cast<std::size_t>(j)] < 0) continue;
                                if (lab[static_cast<std::size_t>(j)] <
                                    lab[static_cast<std::size_t>(i)]) {
                                    lab[static_cast<std::size_t>(i)] =
                                        lab[static_cast<std::size_t>(j)];
                                    changed = true;
                                }
                            }
                }
    }
    std::map<std::int64_t, std::int64_t> remap;
    for (auto& l : lab) {
        if (l < 0) continue;
        auto it = remap.find(l);
        if (it == remap.end()) it = remap.emplace(l, static_cast<std::int64_t>(remap.size())).first;
        l = it->second;
    }
    return {std::move(lab), static_cast<std::int64_t>(remap.size())};
}

inline LesionOracleCounts oracle_lesion_classify(const regseg::Tensor& pred_tumor,
                                                 const regseg::Tensor& gt_tumor,
                                                 const regseg::Tensor& prostate) {
    const std::int64_t D = prostate.shape[0], H = prostate.shape[1], W = prostate.shape[2];
    const std::int64_t n = D * H * W;
    LesionOracleCounts out;

    // Per-lesion hit rule: predicted tumor covers at least 1% of the lesion.
    const auto [lab, n_comp] = oracle_components26(gt_tumor);
    std::vector<std::int64_t> size(static_cast<std::size_t>(n_comp), 0);
    std::vector<std::int64_t> overlap(static_cast<std::size_t>(n_comp), 0);
    for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t l = lab[static_cast<std::size_t>(i)];
        if (l < 0) continue;
        ++size[static_cast<std::size_t>(l)];
        if (pred_tumor[i] != 0.0) ++overlap[static_cast<std::size_t>(l)];
    }
    for (std::int64_t l = 0; l < n_comp; ++l) {
        if (100 * overlap[static_cast<std::size_t>(l)] >= size[static_cast<std::size_t>(l)])
            ++out.tp;
        else
            ++out.fn;
    }

    // Sextants: axial thirds of the prostate z extent, left/right at the
    // centroid x. Thresholds evaluated directly rather than via integer
    // division.
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
    cx /= static_cast<double>(count);
    const double span = static_cast<double>(z_hi - z_lo + 1);

    std::array<std::int64_t, 6> seg_size{}, seg_gt{}, seg_pred{};
    for (std::int64_t z = 0; z < D; ++z)
        for (std::int64_t y = 0; y < H; ++y)
            for (std::int64_t x = 0; x < W; ++x) {
                const std::int64_t i = (z * H + y) * W + x;
                if (prostate[i] == 0.0) continue;
                const double rel = static_cast<double>(z - z_lo);
                int third = 2;
                if (rel < span / 3.0)
                    third = 0;
                else if (rel < 2.0 * span / 3.0)
                    third = 1;
                const int lr = static_cast<double>(x) < cx ? 0 : 1;
                const auto s = static_cast<std::size_t>(third * 2 + lr);
                ++seg_size[s];
                if (gt_tumor[i] != 0.0) ++seg_gt[s];
                if (pred_tumor[i] != 0.0) ++seg_pred[s];
            }
    for (std::size_t s = 0; s < 6; ++s) {
        if (seg_size[s] == 0) continue;
        if (100 * seg_gt[s] >= seg_size[s]) continue;  // has >= 1% cancer: not GT-negative
        // True negative when at least 99% of the segment is predicted normal.
        if (100 * (seg_size[s] - seg_pred[s]) >= 99 * seg_size[s])
            ++out.tn;
        else
            ++out.fp;
    }
    return out;
}

}  // namespace tu
