#pragma once

// Seeded synthetic phantom source: paired "TRUS-like" fixed and "MRI-like"
// moving volumes of the same anatomy with labels and a known affine
// misalignment.
//
// Anatomy lives in the fixed volume's centered voxel frame: a smoothed
// superellipsoid prostate plus 1-3 ellipsoidal tumors biased toward the
// gland boundary. The moving volume renders the same anatomy evaluated at
// M*u (pull convention), so warping the moving image by invert(M) realigns
// it with the fixed image; M is stored as true_misalignment.

#include <filesystem>
#include <fstream>
#include <map>

#include <json.hpp>

#include "regseg/rvol.hpp"

namespace regseg {

struct ModalityProfile {
    double bg = 0.1;
    double prostate = 0.6;
    double tumor = 0.9;
    double noise = 0.03;
};

struct PhantomParams {
    std::int64_t W = 64, H = 64, D = 64;
    double spacing = 1.0;

    double prostate_radius_lo = 17.0, prostate_radius_hi = 22.0;  // voxels
    int tumor_count_lo = 1, tumor_count_hi = 3;
    double tumor_radius_lo = 2.5, tumor_radius_hi = 5.0;

    double t_max = 8.0;       // |translation| per axis, voxels
    double r_max_deg = 15.0;  // |rotation| per axis, degrees
    double scale_lo = 0.9, scale_hi = 1.1;

    // Moving: additive Gaussian noise, high contrast. Fixed: multiplicative
    // speckle, tumor nearly isointense with the gland.
    ModalityProfile moving_profile{0.1, 0.6, 0.9, 0.03};
    ModalityProfile fixed_profile{0.25, 0.5, 0.55, 0.20};

    void validate() const {
        require(W >= 8 && H >= 8 && D >= 8, "PhantomParams: dims must be >= 8");
        require(spacing > 0, "PhantomParams: spacing must be > 0");
        require(prostate_radius_lo > 0 && prostate_radius_lo <= prostate_radius_hi,
                "PhantomParams: empty prostate radius range");
        require(prostate_radius_hi < 0.5 * static_cast<double>(std::min({W, H, D})),
                "PhantomParams: prostate radius must fit inside the volume");
        require(tumor_count_lo >= 1 && tumor_count_lo <= tumor_count_hi && tumor_count_hi <= 3,
                "PhantomParams: tumor count range must lie in [1,3]");
        require(tumor_radius_lo > 0 && tumor_radius_lo <= tumor_radius_hi,
                "PhantomParams: empty tumor radius range");
        require(t_max >= 0 && t_max < 0.25 * static_cast<double>(std::min({W, H, D})),
                "PhantomParams: t_max must satisfy t_max < dims/4");
        require(r_max_deg >= 0, "PhantomParams: r_max_deg must be >= 0");
        require(scale_lo > 0 && scale_lo <= scale_hi, "PhantomParams: empty scale range");
        require(moving_profile.noise >= 0 && fixed_profile.noise >= 0,
                "PhantomParams: noise levels must be >= 0");
    }
};

struct PhantomCase {
    std::string case_id;
    Volume3D fixed;
    Volume3D moving;
    LabelMask fixed_labels;
    LabelMask moving_labels;
    AffineMatrix true_misalignment;
    std::uint64_t seed = 0;
};

namespace detail {

// Superellipsoid "radius" of a point: homogeneous degree-1, so the boundary
// along direction d sits at distance 1/rho(d).
struct ProstateShape {
    double rx, ry, rz;  // semi-axes, voxels
    double e;           // superellipsoid exponent
    double rot[9];      // anatomy frame rotation

    double rho(double x, double y, double z) const {
        const double px = rot[0] * x + rot[1] * y + rot[2] * z;
        const double py = rot[3] * x + rot[4] * y + rot[5] * z;
        const double pz = rot[6] * x + rot[7] * y + rot[8] * z;
        const double t = std::pow(std::abs(px / rx), e) + std::pow(std::abs(py / ry), e) +
                         std::pow(std::abs(pz / rz), e);
        return std::pow(t, 1.0 / e);
    }
};

struct TumorShape {
    double cx, cy, cz;
    double rx, ry, rz;

    double rho(double x, double y, double z) const {
        const double dx = (x - cx) / rx, dy = (y - cy) / ry, dz = (z - cz) / rz;
        return std::sqrt(dx * dx + dy * dy + dz * dz);
    }
};

inline void rotation_xyz(double ax, double ay, double az, double r[9]) {
    const double cx = std::cos(ax), sx = std::sin(ax);
    const double cy = std::cos(ay), sy = std::sin(ay);
    const double cz = std::cos(az), sz = std::sin(az);
    // R = Rx * Ry * Rz
    const double rx[9] = {1, 0, 0, 0, cx, -sx, 0, sx, cx};
    const double ry[9] = {cy, 0, sy, 0, 1, 0, -sy, 0, cy};
    const double rz[9] = {cz, -sz, 0, sz, cz, 0, 0, 0, 1};
    double tmp[9];
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double s = 0;
            for (int k = 0; k < 3; ++k) s += ry[i * 3 + k] * rz[k * 3 + j];
            tmp[i * 3 + j] = s;
        }
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double s = 0;
            for (int k = 0; k < 3; ++k) s += rx[i * 3 + k] * tmp[k * 3 + j];
            r[i * 3 + j] = s;
        }
}

// Smooth 1->0 edge profile around rho = 1, width w in rho units.
inline double edge_profile(double rho, double w) {
    const double t = std::min(std::max((1.0 - rho) / w + 0.5, 0.0), 1.0);
    return t * t * (3.0 - 2.0 * t);
}

struct Anatomy {
    ProstateShape prostate;
    std::vector<TumorShape> tumors;

    // 0 = other, 1 = prostate, 2 = tumor (tumor only counts inside the gland).
    int class_of(double x, double y, double z) const {
        if (prostate.rho(x, y, z) > 1.0) return 0;
        for (const auto& t : tumors)
            if (t.rho(x, y, z) <= 1.0) return 2;
        return 1;
    }

    double intensity(double x, double y, double z, const ModalityProfile& p, double edge_w) const {
        const double sp = edge_profile(prostate.rho(x, y, z), edge_w);
        double st = 0.0;
        for (const auto& t : tumors) st = std::max(st, edge_profile(t.rho(x, y, z), 2.5 * edge_w));
        st *= sp;
        return p.bg + (p.prostate - p.bg) * sp + (p.tumor - p.prostate) * st;
    }
};

}  // namespace detail

inline PhantomCase generate_case(const PhantomParams& params, std::uint64_t seed) {
    params.validate();
    Rng root(seed);
    Rng rng_shape = root.fork(1);
    Rng rng_misalign = root.fork(2);
    Rng rng_tumor = root.fork(3);
    Rng rng_noise_fixed = root.fork(4);
    Rng rng_noise_moving = root.fork(5);

    const std::int64_t W = params.W, H = params.H, D = params.D;
    const std::int64_t n = W * H * D;
    const double cx = 0.5 * static_cast<double>(W - 1);
    const double cy = 0.5 * static_cast<double>(H - 1);
    const double cz = 0.5 * static_cast<double>(D - 1);

    // --- anatomy ---
    detail::Anatomy anat;
    const auto uni = [](Rng& r, double lo, double hi) { return lo + (hi - lo) * r.uniform(); };
    anat.prostate.rx = uni(rng_shape, params.prostate_radius_lo, params.prostate_radius_hi);
    anat.prostate.ry = uni(rng_shape, params.prostate_radius_lo, params.prostate_radius_hi);
    anat.prostate.rz = uni(rng_shape, params.prostate_radius_lo, params.prostate_radius_hi);
    anat.prostate.e = uni(rng_shape, 2.0, 3.0);
    detail::rotation_xyz(uni(rng_shape, -0.3, 0.3), uni(rng_shape, -0.3, 0.3),
                         uni(rng_shape, -0.3, 0.3), anat.prostate.rot);

    // --- misalignment M (pull): R = Rx*Ry*Rz, then per-axis scale ---
    AffineMatrix M;
    {
        const double d2r = M_PI / 180.0;
        double R[9];
        detail::rotation_xyz(uni(rng_misalign, -params.r_max_deg, params.r_max_deg) * d2r,
                             uni(rng_misalign, -params.r_max_deg, params.r_max_deg) * d2r,
                             uni(rng_misalign, -params.r_max_deg, params.r_max_deg) * d2r, R);
        const double sx = uni(rng_misalign, params.scale_lo, params.scale_hi);
        const double sy = uni(rng_misalign, params.scale_lo, params.scale_hi);
        const double sz = uni(rng_misalign, params.scale_lo, params.scale_hi);
        for (int i = 0; i < 3; ++i) {
            M.at(i, 0) = R[i * 3 + 0] * sx;
            M.at(i, 1) = R[i * 3 + 1] * sy;
            M.at(i, 2) = R[i * 3 + 2] * sz;
            M.at(i, 3) = uni(rng_misalign, -params.t_max, params.t_max);
        }
    }

    // --- prostate voxel count in the fixed frame (for tumor sizing) ---
    std::int64_t prostate_vox = 0;
    std::vector<float> rho_p(static_cast<std::size_t>(n));  // cached for mask pass
    for (std::int64_t z = 0; z < D; ++z)
        for (std::int64_t y = 0; y < H; ++y)
            for (std::int64_t x = 0; x < W; ++x) {
                const double r = anat.prostate.rho(static_cast<double>(x) - cx,
                                                   static_cast<double>(y) - cy,
                                                   static_cast<double>(z) - cz);
                rho_p[static_cast<std::size_t>((z * H + y) * W + x)] = static_cast<float>(r);
                if (r <= 1.0) ++prostate_vox;
            }
    require(prostate_vox >= 8, "generate_case: prostate degenerate at these params");

    // --- tumors: boundary-biased, retried until the total tumor volume is
    // 0.1%..3% of the prostate (intersection with the gland enforces
    // tumor-inside-prostate by construction) ---
    const auto count_tumor_vox = [&](const std::vector<detail::TumorShape>& ts) {
        std::int64_t c = 0;
        for (std::int64_t z = 0; z < D; ++z)
            for (std::int64_t y = 0; y < H; ++y)
                for (std::int64_t x = 0; x < W; ++x) {
                    if (rho_p[static_cast<std::size_t>((z * H + y) * W + x)] > 1.0f) continue;
                    const double px = static_cast<double>(x) - cx;
                    const double py = static_cast<double>(y) - cy;
                    const double pz = static_cast<double>(z) - cz;
                    for (const auto& t : ts)
                        if (t.rho(px, py, pz) <= 1.0) {
                            ++c;
                            break;
                        }
                }
        return c;
    };
    const double lo_frac = 0.001, hi_frac = 0.03;
    for (int attempt = 0; attempt < 32 && anat.tumors.empty(); ++attempt) {
        Rng r = rng_tumor.fork(static_cast<std::uint64_t>(attempt));
        const int k = static_cast<int>(r.uniform_int(params.tumor_count_lo, params.tumor_count_hi));
        std::vector<detail::TumorShape> ts;
        for (int i = 0; i < k; ++i) {
            // Unit direction via normalized Gaussian triple.
            double dx = r.normal(), dy = r.normal(), dz = r.normal();
            const double dn = std::sqrt(dx * dx + dy * dy + dz * dz) + 1e-12;
            dx /= dn;
            dy /= dn;
            dz /= dn;
            const double boundary = 1.0 / anat.prostate.rho(dx, dy, dz);
            const double f = uni(r, 0.55, 0.8);  // peripheral-zone bias
            detail::TumorShape t;
            t.cx = dx * f * boundary;
            t.cy = dy * f * boundary;
            t.cz = dz * f * boundary;
            t.rx = uni(r, params.tumor_radius_lo, params.tumor_radius_hi);
            t.ry = uni(r, params.tumor_radius_lo, params.tumor_radius_hi);
            t.rz = uni(r, params.tumor_radius_lo, params.tumor_radius_hi);
            ts.push_back(t);
        }
        const std::int64_t tv = count_tumor_vox(ts);
        const double frac = static_cast<double>(tv) / static_cast<double>(prostate_vox);
        if (tv >= 1 && frac >= lo_frac && frac <= hi_frac) anat.tumors = std::move(ts);
    }
    if (anat.tumors.empty()) {
        // Deterministic fallback: one central tumor sized to ~1% of the gland.
        const double r = std::max(1.0, std::cbrt(0.01 * static_cast<double>(prostate_vox) * 3.0 /
                                                 (4.0 * M_PI)));
        anat.tumors.push_back(detail::TumorShape{0, 0, 0, r, r, r});
    }

    // --- rasterize ---
    PhantomCase pc;
    pc.seed = seed;
    pc.true_misalignment = M;
    pc.fixed = Volume3D(W, H, D, params.spacing, params.spacing, params.spacing, 1);
    pc.moving = Volume3D(W, H, D, params.spacing, params.spacing, params.spacing, 1);
    pc.fixed_labels = LabelMask(W, H, D, params.spacing, params.spacing, params.spacing);
    pc.moving_labels = LabelMask(W, H, D, params.spacing, params.spacing, params.spacing);

    const double edge_w = 0.06;
    for (std::int64_t z = 0; z < D; ++z)
        for (std::int64_t y = 0; y < H; ++y)
            for (std::int64_t x = 0; x < W; ++x) {
                const std::int64_t i = (z * H + y) * W + x;
                const double ux = static_cast<double>(x) - cx;
                const double uy = static_cast<double>(y) - cy;
                const double uz = static_cast<double>(z) - cz;

                // Fixed frame: anatomy at u.
                const int cf = anat.class_of(ux, uy, uz);
                pc.fixed_labels.set_class(x, y, z, cf);
                double fv = anat.intensity(ux, uy, uz, params.fixed_profile, edge_w);
                fv *= 1.0 + params.fixed_profile.noise * rng_noise_fixed.normal();
                pc.fixed.data[i] = std::max(fv, 0.0);

                // Moving frame: anatomy at M*u.
                double mx, my, mz;
                M.apply(ux, uy, uz, mx, my, mz);
                const int cm = anat.class_of(mx, my, mz);
                pc.moving_labels.set_class(x, y, z, cm);
                double mv = anat.intensity(mx, my, mz, params.moving_profile, edge_w);
                mv += params.moving_profile.noise * rng_noise_moving.normal();
                pc.moving.data[i] = mv;
            }

    pc.fixed.quantize_f32();
    pc.moving.quantize_f32();
    return pc;
}

// ---------------------------------------------------------------------------
// Case and dataset I/O
// ---------------------------------------------------------------------------

inline void write_case(const PhantomCase& pc, const std::string& dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw FormatError("write_case: cannot create directory " + dir);
    write_rvol(dir + "/fixed.rvol", pc.fixed, "intensity");
    write_rvol(dir + "/moving.rvol", pc.moving, "intensity");
    write_labelmask(dir + "/fixed_labels.rvol", pc.fixed_labels);
    write_labelmask(dir + "/moving_labels.rvol", pc.moving_labels);
    nlohmann::json meta;
    meta["case_id"] = pc.case_id;
    meta["seed"] = pc.seed;
    meta["true_misalignment"] = std::vector<double>(pc.true_misalignment.m.begin(),
                                                    pc.true_misalignment.m.end());
    std::ofstream mf(dir + "/meta.json", std::ios::trunc);
    if (!mf.good()) throw FormatError("write_case: cannot open " + dir + "/meta.json");
    mf << meta.dump(2) << "\n";
    if (!mf.good()) throw FormatError("write_case: failed writing " + dir + "/meta.json");
}

inline PhantomCase read_case(const std::string& dir) {
    PhantomCase pc;
    std::ifstream mf(dir + "/meta.json");
    if (!mf.good()) throw FormatError("read_case: missing " + dir + "/meta.json");
    nlohmann::json meta;
    try {
        mf >> meta;
        pc.case_id = meta.at("case_id").get<std::string>();
        pc.seed = meta.at("seed").get<std::uint64_t>();
        const auto tm = meta.at("true_misalignment").get<std::vector<double>>();
        if (tm.size() != 12)
            throw FormatError("read_case: true_misalignment must have 12 entries in " + dir);
        std::copy(tm.begin(), tm.end(), pc.true_misalignment.m.begin());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("read_case: bad meta.json in " + dir + ": " + e.what());
    }
    pc.fixed = read_rvol(dir + "/fixed.rvol");
    pc.moving = read_rvol(dir + "/moving.rvol");
    pc.fixed_labels = read_labelmask(dir + "/fixed_labels.rvol");
    pc.moving_labels = read_labelmask(dir + "/moving_labels.rvol");
    require(pc.fixed.W == pc.moving.W && pc.fixed.H == pc.moving.H && pc.fixed.D == pc.moving.D,
            "read_case: fixed and moving dims differ in " + dir);
    return pc;
}

// Strict JSON application for generator parameters; unknown keys are
// rejected so config typos cannot silently use defaults.
inline void apply_phantom_json(PhantomParams& p, const nlohmann::json& j) {
    require(j.is_object(), "phantom config: top level must be a JSON object");
    const auto range = [](const nlohmann::json& v, double& lo, double& hi, const std::string& key) {
        require(v.is_array() && v.size() == 2, "phantom config: " + key + " must be [lo, hi]");
        lo = v[0].get<double>();
        hi = v[1].get<double>();
    };
    for (const auto& [key, val] : j.items()) {
        try {
            if (key == "dims") {
                require(val.is_array() && val.size() == 3, "phantom config: dims must be [W,H,D]");
                p.W = val[0].get<std::int64_t>();
                p.H = val[1].get<std::int64_t>();
                p.D = val[2].get<std::int64_t>();
            } else if (key == "spacing")
                p.spacing = val.get<double>();
            else if (key == "prostate_radius")
                range(val, p.prostate_radius_lo, p.prostate_radius_hi, key);
            else if (key == "tumor_count") {
                require(val.is_array() && val.size() == 2, "phantom config: tumor_count must be [lo, hi]");
                p.tumor_count_lo = val[0].get<int>();
                p.tumor_count_hi = val[1].get<int>();
            } else if (key == "tumor_radius")
                range(val, p.tumor_radius_lo, p.tumor_radius_hi, key);
            else if (key == "t_max")
                p.t_max = val.get<double>();
            else if (key == "r_max_deg")
                p.r_max_deg = val.get<double>();
            else if (key == "scale")
                range(val, p.scale_lo, p.scale_hi, key);
            else if (key == "moving_noise")
                p.moving_profile.noise = val.get<double>();
            else if (key == "fixed_noise")
                p.fixed_profile.noise = val.get<double>();
            else
                throw InvalidArgument("phantom config: unknown key \"" + key + "\"");
        } catch (const nlohmann::json::exception& e) {
            throw InvalidArgument("phantom config: bad value for \"" + key + "\": " + e.what());
        }
    }
}

struct DatasetManifest {
    std::uint64_t seed = 0;
    std::vector<std::string> train, val, test;
    std::map<std::string, std::string> case_dirs;  // case_id -> dir relative to root
    std::string root;

    std::vector<std::string> split(const std::string& name) const {
        if (name == "train") return train;
        if (name == "val") return val;
        if (name == "test") return test;
        throw InvalidArgument("unknown split \"" + name + "\"");
    }

    std::string dir_of(const std::string& case_id) const {
        auto it = case_dirs.find(case_id);
        require(it != case_dirs.end(), "manifest has no case \"" + case_id + "\"");
        return root.empty() ? it->second : root + "/" + it->second;
    }
};

inline DatasetManifest generate_dataset(const PhantomParams& params, std::int64_t n_cases,
                                        std::uint64_t seed, const std::array<double, 3>& fractions,
                                        const std::string& out_dir) {
    params.validate();
    require(n_cases >= 1, "generate_dataset: need at least 1 case");
    double fsum = fractions[0] + fractions[1] + fractions[2];
    require(std::abs(fsum - 1.0) <= 1e-9, "generate_dataset: split fractions must sum to 1");
    for (double f : fractions) require(f >= 0, "generate_dataset: fractions must be >= 0");

    // Largest-remainder apportionment of n_cases to the three splits.
    std::array<std::int64_t, 3> sizes{};
    std::array<double, 3> rem{};
    std::int64_t assigned = 0;
    for (int i = 0; i < 3; ++i) {
        const double exact = fractions[static_cast<std::size_t>(i)] * static_cast<double>(n_cases);
        sizes[static_cast<std::size_t>(i)] = static_cast<std::int64_t>(std::floor(exact));
        rem[static_cast<std::size_t>(i)] = exact - std::floor(exact);
        assigned += sizes[static_cast<std::size_t>(i)];
    }
    while (assigned < n_cases) {
        int best = 0;
        for (int i = 1; i < 3; ++i)
            if (rem[static_cast<std::size_t>(i)] > rem[static_cast<std::size_t>(best)]) best = i;
        sizes[static_cast<std::size_t>(best)] += 1;
        rem[static_cast<std::size_t>(best)] = -1;
        ++assigned;
    }
    for (int i = 0; i < 3; ++i)
        if (fractions[static_cast<std::size_t>(i)] > 0 && sizes[static_cast<std::size_t>(i)] == 0)
            throw InvalidArgument("generate_dataset: n_cases too small for a nonempty split " +
                                  std::to_string(i));

    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw FormatError("generate_dataset: cannot create " + out_dir);

    DatasetManifest man;
    man.seed = seed;
    man.root = out_dir;
    Rng root(seed);
    for (std::int64_t i = 0; i < n_cases; ++i) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "case_%04lld", static_cast<long long>(i));
        const std::string id = buf;
        PhantomCase pc = generate_case(params, root.next_u64());
        pc.case_id = id;
        write_case(pc, out_dir + "/" + id);
        man.case_dirs[id] = id;
        if (i < sizes[0])
            man.train.push_back(id);
        else if (i < sizes[0] + sizes[1])
            man.val.push_back(id);
        else
            man.test.push_back(id);
    }

    nlohmann::json j;
    j["seed"] = seed;
    j["n_cases"] = n_cases;
    j["dims"] = {params.W, params.H, params.D};
    j["spacing"] = params.spacing;
    j["splits"] = {{"train", man.train}, {"val", man.val}, {"test", man.test}};
    j["case_dirs"] = man.case_dirs;
    std::ofstream mf(out_dir + "/manifest.json", std::ios::trunc);
    if (!mf.good()) throw FormatError("generate_dataset: cannot open " + out_dir + "/manifest.json");
    mf << j.dump(2) << "\n";
    if (!mf.good()) throw FormatError("generate_dataset: failed writing manifest");
    return man;
}

inline DatasetManifest read_manifest(const std::string& dataset_dir) {
    std::ifstream mf(dataset_dir + "/manifest.json");
    if (!mf.good()) throw FormatError("read_manifest: missing " + dataset_dir + "/manifest.json");
    nlohmann::json j;
    try {
        mf >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("read_manifest: malformed manifest in " + dataset_dir + ": " + e.what());
    }
    DatasetManifest man;
    man.root = dataset_dir;
    try {
        man.seed = j.at("seed").get<std::uint64_t>();
        man.train = j.at("splits").at("train").get<std::vector<std::string>>();
        man.val = j.at("splits").at("val").get<std::vector<std::string>>();
        man.test = j.at("splits").at("test").get<std::vector<std::string>>();
        man.case_dirs = j.at("case_dirs").get<std::map<std::string, std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("read_manifest: missing field in " + dataset_dir + "/manifest.json: " + e.what());
    }
    return man;
}

}  // namespace regseg
