#pragma once

// Training harness: two-phase optimization (registration pretraining, then
// joint end-to-end), the ablation modes (independent/stage-wise, naive
// baseline), Adam with global-norm clipping, CSV logging, deterministic
// seeding, and the versioned checkpoint container.

#include <cstdio>
#include <fstream>
#include <optional>

#include "regseg/losses.hpp"
#include "regseg/metrics.hpp"
#include "regseg/phantom.hpp"
#include "regseg/segnet.hpp"

namespace regseg {

enum class TrainMode { pretrain_reg, joint_e2e, independent_stagewise, naive_baseline };

inline const char* to_string(TrainMode m) {
    switch (m) {
        case TrainMode::pretrain_reg: return "pretrain_reg";
        case TrainMode::joint_e2e: return "joint_e2e";
        case TrainMode::independent_stagewise: return "independent_stagewise";
        default: return "naive_baseline";
    }
}

inline TrainMode train_mode_from_string(const std::string& s) {
    if (s == "pretrain_reg" || s == "pretrain-reg") return TrainMode::pretrain_reg;
    if (s == "joint_e2e" || s == "joint") return TrainMode::joint_e2e;
    if (s == "independent_stagewise" || s == "independent") return TrainMode::independent_stagewise;
    if (s == "naive_baseline" || s == "baseline") return TrainMode::naive_baseline;
    throw InvalidArgument("unknown training mode \"" + s +
                          "\" (want pretrain-reg | joint | independent | baseline)");
}

struct TrainConfig {
    TrainMode mode = TrainMode::joint_e2e;
    std::int64_t epochs = 100;  // paper: 100-epoch registration pretraining
    double learning_rate = 1e-4;
    std::int64_t batch_size = 1;
    std::uint64_t seed = 0;
    LossWeights loss;
    bool freeze_pretrained_encoder = false;
    double clip_norm = 1.0;  // global gradient norm; stabilizes batch-size-1 training
    std::int64_t width = 64, height = 64, depth = 64;
    RegNetConfig regnet;
    SegNetConfig segnet;
    DistNetConfig distnet;
    std::string manifest_path;     // dataset root (directory with manifest.json)
    std::string init_checkpoint;   // optional warm start
    std::string out_dir = ".";
    bool allow_config_mismatch = false;  // override the config-hash check on resume

    void validate() const {
        require(epochs >= 0, "TrainConfig: epochs must be >= 0");
        require(learning_rate > 0, "TrainConfig: learning_rate must be > 0");
        require(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
        require(clip_norm > 0, "TrainConfig: clip_norm must be > 0");
        require(width > 0 && height > 0 && depth > 0, "TrainConfig: dims must be positive");
        loss.validate();
        if (mode != TrainMode::naive_baseline) regnet.validate(width, height, depth);
        if (mode != TrainMode::pretrain_reg) segnet.validate(width, height, depth);
    }

    // Architecture-relevant subset only, so a pretrain checkpoint resumes
    // cleanly into joint training with the same model geometry.
    std::uint64_t config_hash() const {
        char buf[256];
        std::snprintf(buf, sizeof(buf),
                      "dims=%lldx%lldx%lld;patch=%lld;token=%lld;rdepth=%lld;heads=%lld;feat=%lld;"
                      "sdepth=%lld;base=%lld;ddim=%lld;dch=%lld",
                      static_cast<long long>(width), static_cast<long long>(height),
                      static_cast<long long>(depth), static_cast<long long>(regnet.patch),
                      static_cast<long long>(regnet.token_dim), static_cast<long long>(regnet.depth),
                      static_cast<long long>(regnet.heads), static_cast<long long>(regnet.feat_channels),
                      static_cast<long long>(segnet.depth), static_cast<long long>(segnet.base),
                      static_cast<long long>(distnet.dim), static_cast<long long>(distnet.channels));
        return fnv1a64(std::string(buf));
    }

    nlohmann::json model_config_json() const {
        return nlohmann::json{{"dims", {width, height, depth}},
                              {"patch", regnet.patch},
                              {"token_dim", regnet.token_dim},
                              {"reg_depth", regnet.depth},
                              {"heads", regnet.heads},
                              {"feat_channels", regnet.feat_channels},
                              {"seg_depth", segnet.depth},
                              {"base_channels", segnet.base},
                              {"dist_dim", distnet.dim},
                              {"dist_channels", distnet.channels}};
    }
};

// Strict JSON config application: unknown keys are rejected so typos cannot
// silently fall back to defaults. CLI flags are applied after this (flag >
// file > default).
inline void apply_config_json(TrainConfig& c, const nlohmann::json& j) {
    require(j.is_object(), "config: top level must be a JSON object");
    for (const auto& [key, val] : j.items()) {
        try {
            if (key == "mode")
                c.mode = train_mode_from_string(val.get<std::string>());
            else if (key == "epochs")
                c.epochs = val.get<std::int64_t>();
            else if (key == "learning_rate")
                c.learning_rate = val.get<double>();
            else if (key == "batch_size")
                c.batch_size = val.get<std::int64_t>();
            else if (key == "seed")
                c.seed = val.get<std::uint64_t>();
            else if (key == "freeze_pretrained_encoder")
                c.freeze_pretrained_encoder = val.get<bool>();
            else if (key == "clip_norm")
                c.clip_norm = val.get<double>();
            else if (key == "dims") {
                require(val.is_array() && val.size() == 3, "config: dims must be [W,H,D]");
                c.width = val[0].get<std::int64_t>();
                c.height = val[1].get<std::int64_t>();
                c.depth = val[2].get<std::int64_t>();
            } else if (key == "alpha")
                c.loss.alpha = val.get<double>();
            else if (key == "beta")
                c.loss.beta = val.get<double>();
            else if (key == "lambda")
                c.loss.lambda = val.get<double>();
            else if (key == "class_weights") {
                require(val.is_array() && val.size() == 3, "config: class_weights must have 3 entries");
                for (int i = 0; i < 3; ++i)
                    c.loss.class_weights[static_cast<std::size_t>(i)] = val[static_cast<std::size_t>(i)].get<double>();
            } else if (key == "focal_gamma")
                c.loss.focal_gamma = val.get<double>();
            else if (key == "focal_alpha")
                c.loss.focal_alpha = val.get<double>();
            else if (key == "epsilon")
                c.loss.epsilon = val.get<double>();
            else if (key == "patch")
                c.regnet.patch = val.get<std::int64_t>();
            else if (key == "token_dim")
                c.regnet.token_dim = val.get<std::int64_t>();
            else if (key == "reg_depth")
                c.regnet.depth = val.get<std::int64_t>();
            else if (key == "heads")
                c.regnet.heads = val.get<std::int64_t>();
            else if (key == "feat_channels")
                c.regnet.feat_channels = val.get<std::int64_t>();
            else if (key == "seg_depth")
                c.segnet.depth = val.get<std::int64_t>();
            else if (key == "base_channels")
                c.segnet.base = val.get<std::int64_t>();
            else if (key == "dist_dim")
                c.distnet.dim = val.get<std::int64_t>();
            else if (key == "dist_channels")
                c.distnet.channels = val.get<std::int64_t>();
            else if (key == "manifest")
                c.manifest_path = val.get<std::string>();
            else if (key == "init_checkpoint")
                c.init_checkpoint = val.get<std::string>();
            else if (key == "out_dir")
                c.out_dir = val.get<std::string>();
            else if (key == "allow_config_mismatch")
                c.allow_config_mismatch = val.get<bool>();
            else
                throw InvalidArgument("config: unknown key \"" + key + "\"");
        } catch (const nlohmann::json::exception& e) {
            throw InvalidArgument("config: bad value for \"" + key + "\": " + e.what());
        }
    }
}

// ---------------------------------------------------------------------------
// Model container

struct Models {
    TrainMode mode = TrainMode::joint_e2e;
    ParamStore store;
    std::optional<RegNetParams> reg;
    std::optional<DistNetParams> dist;
    std::optional<SegNetParams> seg;
};

// Parameter creation order (reg, dist, seg) is fixed; each component draws
// from its own forked stream so e.g. the baseline U-Net starts from the same
// weights as the pipeline U-Net under the same seed.
inline Models build_models(const TrainConfig& cfg) {
    Models m;
    m.mode = cfg.mode;
    Rng root(cfg.seed);
    Rng r_reg = root.fork(1);
    Rng r_dist = root.fork(2);
    Rng r_seg = root.fork(3);
    if (cfg.mode != TrainMode::naive_baseline) {
        m.reg = RegNetParams::create(m.store, cfg.regnet, cfg.width, cfg.height, cfg.depth, r_reg);
        m.dist = DistNetParams::create(m.store, cfg.distnet, r_dist);
    }
    if (cfg.mode != TrainMode::pretrain_reg)
        m.seg = SegNetParams::create(m.store, cfg.segnet, r_seg);
    return m;
}

// ---------------------------------------------------------------------------
// Adam (first-moment method named by the paper), bias-corrected.

struct Adam {
    double lr = 1e-4;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::int64_t t = 0;
    std::vector<Tensor> m, v;  // parallel to the store's items

    Adam() = default;
    Adam(double lr_, const ParamStore& store) : lr(lr_) {
        m.reserve(store.items.size());
        v.reserve(store.items.size());
        for (const auto& [name, var] : store.items) {
            m.push_back(Tensor::zeros(var->val.shape));
            v.push_back(Tensor::zeros(var->val.shape));
        }
    }

    // Updates every parameter that received a gradient; frozen or unused
    // parameters (no gradient) are skipped entirely, moments included, so
    // they stay bitwise unchanged.
    void step(ParamStore& store) {
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (std::size_t i = 0; i < store.items.size(); ++i) {
            Var& p = store.items[i].second;
            if (!p->has_grad()) continue;
            Tensor& mi = m[i];
            Tensor& vi = v[i];
            const std::int64_t n = p->val.numel();
            for (std::int64_t k = 0; k < n; ++k) {
                const double g = p->grad[k];
                mi[k] = beta1 * mi[k] + (1.0 - beta1) * g;
                vi[k] = beta2 * vi[k] + (1.0 - beta2) * g * g;
                p->val[k] -= lr * (mi[k] / bc1) / (std::sqrt(vi[k] / bc2) + eps);
            }
        }
    }
};

// Scales all gradients so their global L2 norm does not exceed max_norm.
inline double clip_global_norm(ParamStore& store, double max_norm) {
    double sq = 0.0;
    for (auto& [name, p] : store.items) {
        if (!p->has_grad()) continue;
        for (std::int64_t k = 0; k < p->grad.numel(); ++k) sq += p->grad[k] * p->grad[k];
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const double s = max_norm / norm;
        for (auto& [name, p] : store.items) {
            if (!p->has_grad()) continue;
            for (std::int64_t k = 0; k < p->grad.numel(); ++k) p->grad[k] *= s;
        }
    }
    return norm;
}

// ---------------------------------------------------------------------------
// Checkpoint container: "RSCK" magic, u32 format version, u64 header length,
// header JSON, then named f32le tensor blobs (params, then Adam m, then v).

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    std::string phase = "init";
    std::int64_t epoch = 0;
    std::int64_t adam_t = 0;
    std::uint64_t config_hash = 0;
    nlohmann::json model_config;
    std::vector<std::pair<std::string, Tensor>> params;
    bool has_moments = false;
    std::vector<Tensor> m, v;  // parallel to params when has_moments
};

inline Checkpoint snapshot_checkpoint(const Models& models, const Adam* opt,
                                      const std::string& phase, std::int64_t epoch,
                                      const TrainConfig& cfg) {
    Checkpoint ck;
    ck.phase = phase;
    ck.epoch = epoch;
    ck.config_hash = cfg.config_hash();
    ck.model_config = cfg.model_config_json();
    ck.params.reserve(models.store.items.size());
    for (const auto& [name, var] : models.store.items) ck.params.emplace_back(name, var->val);
    if (opt != nullptr) {
        ck.has_moments = true;
        ck.adam_t = opt->t;
        ck.m = opt->m;
        ck.v = opt->v;
    }
    return ck;
}

namespace detail {
inline void write_f32_blob(std::ostream& os, const Tensor& t) {
    std::vector<float> buf(static_cast<std::size_t>(t.numel()));
    for (std::int64_t i = 0; i < t.numel(); ++i)
        buf[static_cast<std::size_t>(i)] = static_cast<float>(t[i]);
    os.write(reinterpret_cast<const char*>(buf.data()),
             static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

inline Tensor read_f32_blob(std::istream& is, const std::vector<std::int64_t>& shape,
                            const std::string& name) {
    Tensor t = Tensor::zeros(shape);
    std::vector<float> buf(static_cast<std::size_t>(t.numel()));
    is.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!is)
        throw FormatError("checkpoint truncated while reading tensor \"" + name + "\"");
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<double>(buf[static_cast<std::size_t>(i)]);
    return t;
}
}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    check_little_endian();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os.good()) throw FormatError("save_checkpoint: cannot open \"" + path + "\" for writing");
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& [name, t] : ck.params) tensors.push_back({{"name", name}, {"shape", t.shape}});
    const nlohmann::json header{{"version", kCheckpointVersion},
                                {"phase", ck.phase},
                                {"epoch", ck.epoch},
                                {"adam_t", ck.adam_t},
                                {"config_hash", hex64(ck.config_hash)},
                                {"model", ck.model_config},
                                {"has_moments", ck.has_moments},
                                {"tensors", tensors}};
    const std::string hs = header.dump();
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t hlen = hs.size();
    os.write("RSCK", 4);
    os.write(reinterpret_cast<const char*>(&version), sizeof(version));
    os.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& [name, t] : ck.params) detail::write_f32_blob(os, t);
    if (ck.has_moments) {
        require(ck.m.size() == ck.params.size() && ck.v.size() == ck.params.size(),
                "save_checkpoint: moment count does not match parameter count");
        for (const auto& t : ck.m) detail::write_f32_blob(os, t);
        for (const auto& t : ck.v) detail::write_f32_blob(os, t);
    }
    os.flush();
    if (!os.good()) throw FormatError("save_checkpoint: write to \"" + path + "\" failed");
}

inline Checkpoint load_checkpoint(const std::string& path) {
    check_little_endian();
    std::ifstream is(path, std::ios::binary);
    if (!is.good()) throw FormatError("load_checkpoint: cannot open \"" + path + "\"");
    char magic[4] = {0, 0, 0, 0};
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "RSCK", 4) != 0)
        throw FormatError("load_checkpoint: \"" + path + "\" is not a checkpoint (bad magic)");
    std::uint32_t version = 0;
    std::uint64_t hlen = 0;
    is.read(reinterpret_cast<char*>(&version), sizeof(version));
    is.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    if (!is) throw FormatError("load_checkpoint: truncated header in \"" + path + "\"");
    if (version != kCheckpointVersion)
        throw FormatError("load_checkpoint: file has format version " + std::to_string(version) +
                          ", this build reads version " + std::to_string(kCheckpointVersion));
    std::string hs(hlen, '\0');
    is.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!is) throw FormatError("load_checkpoint: truncated header JSON in \"" + path + "\"");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("load_checkpoint: malformed header JSON: ") + e.what());
    }
    Checkpoint ck;
    try {
        ck.version = version;
        ck.phase = header.at("phase").get<std::string>();
        ck.epoch = header.at("epoch").get<std::int64_t>();
        ck.adam_t = header.at("adam_t").get<std::int64_t>();
        ck.config_hash = std::stoull(header.at("config_hash").get<std::string>(), nullptr, 16);
        ck.model_config = header.at("model");
        ck.has_moments = header.at("has_moments").get<bool>();
        for (const auto& tj : header.at("tensors")) {
            const auto name = tj.at("name").get<std::string>();
            const auto shape = tj.at("shape").get<std::vector<std::int64_t>>();
            ck.params.emplace_back(name, Tensor::zeros(shape));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("load_checkpoint: bad header field: ") + e.what());
    }
    for (auto& [name, t] : ck.params) t = detail::read_f32_blob(is, t.shape, name);
    if (ck.has_moments) {
        for (const auto& [name, t] : ck.params)
            ck.m.push_back(detail::read_f32_blob(is, t.shape, name + " (moment m)"));
        for (const auto& [name, t] : ck.params)
            ck.v.push_back(detail::read_f32_blob(is, t.shape, name + " (moment v)"));
    }
    is.peek();
    if (!is.eof()) throw FormatError("load_checkpoint: trailing bytes after tensor data in \"" + path + "\"");
    return ck;
}

// Copies checkpoint tensors into matching parameters by name. Names absent
// from the model are an error; model parameters absent from the checkpoint
// keep their initialization (e.g. the U-Net when warm-starting joint training
// from a registration-pretraining checkpoint).
inline void apply_checkpoint(Models& models, const Checkpoint& ck) {
    for (const auto& [name, t] : ck.params) {
        require(models.store.has(name),
                "checkpoint tensor \"" + name + "\" has no matching model parameter");
        Var p = models.store.get(name);
        require(p->val.shape == t.shape, "checkpoint tensor \"" + name + "\" shape " + t.shape_str() +
                                             " does not match model shape " + p->val.shape_str());
        p->val = t;
    }
}

// ---------------------------------------------------------------------------
// Shared inference/validation helpers

inline LabelMask probs_to_mask(const Tensor& probs, double sx, double sy, double sz) {
    require(probs.shape.size() == 4 && probs.shape[0] == 3,
            "probs_to_mask: need {3,D,H,W}, got " + probs.shape_str());
    const std::int64_t D = probs.shape[1], H = probs.shape[2], W = probs.shape[3];
    LabelMask mask(W, H, D, sx, sy, sz);
    const std::int64_t S = D * H * W;
    for (std::int64_t i = 0; i < S; ++i) {
        int best = 0;
        double bv = probs[i];
        for (int c = 1; c < 3; ++c) {
            const double v = probs[c * S + i];
            if (v > bv) {
                bv = v;
                best = c;
            }
        }
        for (int c = 0; c < 3; ++c) mask.data[c * S + i] = c == best ? 1.0 : 0.0;
    }
    return mask;
}

// Registration quality of a predicted transform: Dice of the warped moving
// labels against the fixed labels, for the whole gland (prostate + tumor)
// and for the tumor alone.
inline std::pair<double, double> registration_dice(const AffineMatrix& A,
                                                   const LabelMask& moving_labels,
                                                   const LabelMask& fixed_labels) {
    const LabelMask warped = warp_labelmask(moving_labels, A);
    const double gland = dice_score(warped.prostate_region(), fixed_labels.prostate_region());
    const double tumor = dice_score(warped.channel(2), fixed_labels.channel(2));
    return {gland, tumor};
}

// ---------------------------------------------------------------------------
// Trainer

struct TrainResult {
    std::string checkpoint_path;
    std::string csv_path;
    std::int64_t epochs_run = 0;
    std::int64_t best_epoch = 0;
    double best_val_prostate = std::numeric_limits<double>::quiet_NaN();
    double best_val_tumor = std::numeric_limits<double>::quiet_NaN();
    double final_train_total = std::numeric_limits<double>::quiet_NaN();
    std::int64_t parameter_count = 0;
};

class Trainer {
  public:
    explicit Trainer(TrainConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

    TrainResult run() {
        load_dataset();
        models_ = build_models(cfg_);
        if (!cfg_.init_checkpoint.empty()) {
            const Checkpoint init = load_checkpoint(cfg_.init_checkpoint);
            if (init.config_hash != cfg_.config_hash() && !cfg_.allow_config_mismatch)
                throw InvalidArgument("init checkpoint config hash " + hex64(init.config_hash) +
                                      " does not match this configuration's " +
                                      hex64(cfg_.config_hash()) +
                                      " (set allow_config_mismatch to override)");
            apply_checkpoint(models_, init);
        }
        opt_ = Adam(cfg_.learning_rate, models_.store);

        ckpt_path_ = cfg_.out_dir + "/checkpoint.rsck";
        csv_path_ = cfg_.out_dir + "/train_log.csv";
        csv_.open(csv_path_, std::ios::trunc);
        if (!csv_.good()) throw FormatError("cannot open training log \"" + csv_path_ + "\" for writing");
        csv_ << "epoch,step,l_reg,l_kl,l_dice,l_focal,total,val_dice_prostate,val_dice_tumor\n";
        csv_.flush();

        TrainResult res;
        res.checkpoint_path = ckpt_path_;
        res.csv_path = csv_path_;
        res.parameter_count = models_.store.parameter_count();

        // Epoch 0: validate the initialization and make it the fallback
        // checkpoint, so an abort always leaves a loadable model behind.
        set_freeze(phase_for_epoch(1));
        const auto [v0p, v0t] = validate_epoch(phase_for_epoch(1));
        write_epoch_row(0, {}, v0p, v0t);
        update_best(0, v0p, v0t, phase_for_epoch(1));
        res.best_epoch = 0;
        res.best_val_prostate = v0p;
        res.best_val_tumor = v0t;

        try {
            for (std::int64_t epoch = 1; epoch <= cfg_.epochs; ++epoch) {
                const PhaseKind pk = phase_for_epoch(epoch);
                if (epoch == 1 || pk != phase_for_epoch(epoch - 1)) set_freeze(pk);

                std::vector<std::size_t> order(train_.size());
                for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
                Rng base(cfg_.seed);
                Rng order_rng = base.fork(1000 + static_cast<std::uint64_t>(epoch));
                order_rng.shuffle(order);

                StepLog mean{};
                std::int64_t steps = 0;
                for (std::size_t pos = 0; pos < order.size(); pos += static_cast<std::size_t>(cfg_.batch_size)) {
                    const std::size_t end =
                        std::min(order.size(), pos + static_cast<std::size_t>(cfg_.batch_size));
                    const StepLog s = optimizer_step(order, pos, end, pk);
                    ++steps;
                    write_step_row(epoch, steps, s);
                    accumulate(mean, s);
                }
                finish_mean(mean, steps);

                const auto [vp, vt] = validate_epoch(pk);
                write_epoch_row(epoch, mean, vp, vt);
                if (update_best(epoch, vp, vt, pk)) {
                    res.best_epoch = epoch;
                    res.best_val_prostate = vp;
                    res.best_val_tumor = vt;
                }
                res.final_train_total = mean.total;
                res.epochs_run = epoch;
            }
        } catch (const NumericalError&) {
            // Abort, never continue silently — but leave the last good
            // checkpoint behind.
            save_checkpoint(best_, ckpt_path_);
            csv_.flush();
            throw;
        }

        save_checkpoint(best_, ckpt_path_);
        csv_.flush();
        return res;
    }

  private:
    enum class PhaseKind { reg_only, seg_only, joint, naive };

    struct StepLog {
        double l_reg = 0, l_kl = 0, l_dice = 0, l_focal = 0, total = 0;
        bool has_reg = false, has_seg = false;
    };

    PhaseKind phase_for_epoch(std::int64_t epoch) const {
        switch (cfg_.mode) {
            case TrainMode::pretrain_reg: return PhaseKind::reg_only;
            case TrainMode::joint_e2e: return PhaseKind::joint;
            case TrainMode::naive_baseline: return PhaseKind::naive;
            default:
                // Stage-wise: registration for the first half of the budget,
                // segmentation (with frozen registration) for the rest.
                return epoch <= cfg_.epochs / 2 ? PhaseKind::reg_only : PhaseKind::seg_only;
        }
    }

    void set_freeze(PhaseKind pk) {
        for (auto& [name, p] : models_.store.items) p->requires_grad = true;
        if (pk == PhaseKind::seg_only) {
            for (auto& [name, p] : models_.store.items)
                if (name.rfind("reg.", 0) == 0 || name.rfind("dist.", 0) == 0) p->requires_grad = false;
        } else if (pk == PhaseKind::joint && cfg_.freeze_pretrained_encoder && models_.reg) {
            for (const auto& name : models_.reg->extractor_param_names())
                models_.store.get(name)->requires_grad = false;
        }
    }

    void check_finite(const char* name, const Var& s) const {
        if (!std::isfinite(s->val[0]))
            throw NumericalError(std::string("training: non-finite ") + name + " = " +
                                 std::to_string(s->val[0]));
    }

    // Forward + backward for one case; gradients accumulate on the leaves.
    StepLog case_losses(const PhantomCase& pc, PhaseKind pk) {
        StepLog log;
        Var m_init = constant(pc.moving.data);
        Var t_init = constant(pc.fixed.data);
        Var gt = constant(pc.fixed_labels.data);
        Var total;
        if (pk == PhaseKind::reg_only || pk == PhaseKind::joint) {
            RegForwardOutput ro = register_forward(m_init, t_init, *models_.reg);
            Var gm_warped = warp_affine(constant(pc.moving_labels.data), ro.A);
            Var l_reg = registration_dice_loss(gm_warped, gt, cfg_.loss);
            Var t_dis = extract_distribution(ro.t_merge, *models_.dist);
            Var m_dis = extract_distribution(ro.m_merge_warped, *models_.dist);
            Var l_kl = kl_loss(t_dis, m_dis);
            log.has_reg = true;
            log.l_reg = l_reg->val[0];
            log.l_kl = l_kl->val[0];
            if (pk == PhaseKind::joint) {
                Var fused = fuse_inputs(ro.m_merge_warped, ro.m_init_warped, ro.t_merge, t_init);
                Var probs = unet_forward(fused, *models_.seg);
                Var l_dice = segmentation_dice_loss(probs, gt);
                Var l_focal = focal_loss(probs, gt, cfg_.loss.focal_gamma, cfg_.loss.focal_alpha);
                log.has_seg = true;
                log.l_dice = l_dice->val[0];
                log.l_focal = l_focal->val[0];
                total = total_loss(l_reg, l_kl, l_dice, l_focal, cfg_.loss);
            } else {
                check_finite("l_reg", l_reg);
                check_finite("l_kl", l_kl);
                total = add(scale(l_reg, cfg_.loss.alpha), scale(l_kl, cfg_.loss.beta));
            }
        } else {
            Var probs = pk == PhaseKind::naive
                            ? naive_concat_forward(m_init, t_init, *models_.seg)
                            : pipeline_forward(m_init, t_init, *models_.reg, *models_.seg).probs;
            Var l_dice = segmentation_dice_loss(probs, gt);
            Var l_focal = focal_loss(probs, gt, cfg_.loss.focal_gamma, cfg_.loss.focal_alpha);
            log.has_seg = true;
            log.l_dice = l_dice->val[0];
            log.l_focal = l_focal->val[0];
            check_finite("l_dice", l_dice);
            check_finite("l_focal", l_focal);
            total = scale(add(l_dice, l_focal), cfg_.loss.lambda);
        }
        check_finite("total", total);
        log.total = total->val[0];
        backward(total);
        return log;
    }

    StepLog optimizer_step(const std::vector<std::size_t>& order, std::size_t pos, std::size_t end,
                           PhaseKind pk) {
        zero_grad(models_.store.vars());
        StepLog mean{};
        const auto count = static_cast<std::int64_t>(end - pos);
        for (std::size_t i = pos; i < end; ++i) accumulate(mean, case_losses(train_[order[i]], pk));
        finish_mean(mean, count);
        if (count > 1) {
            const double s = 1.0 / static_cast<double>(count);
            for (auto& [name, p] : models_.store.items)
                if (p->has_grad())
                    for (std::int64_t k = 0; k < p->grad.numel(); ++k) p->grad[k] *= s;
        }
        clip_global_norm(models_.store, cfg_.clip_norm);
        opt_.step(models_.store);
        return mean;
    }

    static void accumulate(StepLog& acc, const StepLog& s) {
        acc.has_reg = acc.has_reg || s.has_reg;
        acc.has_seg = acc.has_seg || s.has_seg;
        acc.l_reg += s.l_reg;
        acc.l_kl += s.l_kl;
        acc.l_dice += s.l_dice;
        acc.l_focal += s.l_focal;
        acc.total += s.total;
    }

    static void finish_mean(StepLog& acc, std::int64_t n) {
        if (n <= 1) return;
        const double s = 1.0 / static_cast<double>(n);
        acc.l_reg *= s;
        acc.l_kl *= s;
        acc.l_dice *= s;
        acc.l_focal *= s;
        acc.total *= s;
    }

    // Validation per epoch. The prostate column is the registration gland
    // Dice whenever a registration branch exists (it tracks alignment
    // quality); the tumor column is the segmentation tumor Dice whenever a
    // segmentation head exists, else the registration tumor Dice. The naive
    // baseline has no transform, so both columns are segmentation Dice.
    std::pair<double, double> validate_epoch(PhaseKind pk) {
        if (val_.empty())
            return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
        NoGradGuard ng;
        double sum_p = 0, sum_t = 0;
        for (const auto& pc : val_) {
            Var m_init = constant(pc.moving.data);
            Var t_init = constant(pc.fixed.data);
            if (pk == PhaseKind::naive) {
                Var probs = naive_concat_forward(m_init, t_init, *models_.seg);
                const LabelMask pred =
                    probs_to_mask(probs->val, pc.fixed.sx, pc.fixed.sy, pc.fixed.sz);
                sum_p += dice_score(pred.channel(1), pc.fixed_labels.channel(1));
                sum_t += dice_score(pred.channel(2), pc.fixed_labels.channel(2));
                continue;
            }
            RegForwardOutput ro = register_forward(m_init, t_init, *models_.reg);
            const AffineMatrix A = AffineMatrix::from_tensor(ro.A->val);
            const auto [gland, reg_tumor] = registration_dice(A, pc.moving_labels, pc.fixed_labels);
            sum_p += gland;
            if (pk == PhaseKind::reg_only) {
                sum_t += reg_tumor;
            } else {
                Var fused = fuse_inputs(ro.m_merge_warped, ro.m_init_warped, ro.t_merge, t_init);
                Var probs = unet_forward(fused, *models_.seg);
                const LabelMask pred =
                    probs_to_mask(probs->val, pc.fixed.sx, pc.fixed.sy, pc.fixed.sz);
                sum_t += dice_score(pred.channel(2), pc.fixed_labels.channel(2));
            }
        }
        const double n = static_cast<double>(val_.size());
        return {sum_p / n, sum_t / n};
    }

    // Model selection: best validation tumor Dice; registration pretraining
    // has no segmentation head, so it selects on the gland Dice its phase is
    // actually optimizing. Stage-wise runs only select during the
    // segmentation phase (the frozen registration is the phase-1 endpoint).
    bool update_best(std::int64_t epoch, double vp, double vt, PhaseKind pk) {
        double metric;
        if (cfg_.mode == TrainMode::pretrain_reg)
            metric = vp;
        else if (cfg_.mode == TrainMode::independent_stagewise && pk == PhaseKind::reg_only) {
            // Not eligible for selection, but an abort must still find a
            // loadable fallback, so keep the current params until the
            // segmentation phase produces a real candidate.
            best_ = snapshot_checkpoint(models_, &opt_, to_string(cfg_.mode), epoch, cfg_);
            have_best_ = true;
            best_in_seg_phase_ = false;
            return false;
        } else
            metric = vt;
        const bool no_val = val_.empty();
        if (!have_best_ || no_val || metric > best_metric_ ||
            (cfg_.mode == TrainMode::independent_stagewise && !best_in_seg_phase_)) {
            best_metric_ = metric;
            best_ = snapshot_checkpoint(models_, &opt_, to_string(cfg_.mode), epoch, cfg_);
            have_best_ = true;
            best_in_seg_phase_ = pk != PhaseKind::reg_only;
            return true;
        }
        return false;
    }

    static std::string fmt(double v) {
        char buf[40];
        std::snprintf(buf, sizeof(buf), "%.12g", v);
        return buf;
    }

    void write_step_row(std::int64_t epoch, std::int64_t step, const StepLog& s) {
        csv_ << epoch << ',' << step << ',';
        csv_ << (s.has_reg ? fmt(s.l_reg) : "") << ',' << (s.has_reg ? fmt(s.l_kl) : "") << ',';
        csv_ << (s.has_seg ? fmt(s.l_dice) : "") << ',' << (s.has_seg ? fmt(s.l_focal) : "") << ',';
        csv_ << fmt(s.total) << ",,\n";
    }

    void write_epoch_row(std::int64_t epoch, const std::optional<StepLog>& mean, double vp, double vt) {
        csv_ << epoch << ",,";
        if (mean) {
            csv_ << (mean->has_reg ? fmt(mean->l_reg) : "") << ','
                 << (mean->has_reg ? fmt(mean->l_kl) : "") << ','
                 << (mean->has_seg ? fmt(mean->l_dice) : "") << ','
                 << (mean->has_seg ? fmt(mean->l_focal) : "") << ',' << fmt(mean->total) << ',';
        } else {
            csv_ << ",,,,,";
        }
        csv_ << (std::isnan(vp) ? "" : fmt(vp)) << ',' << (std::isnan(vt) ? "" : fmt(vt)) << '\n';
        csv_.flush();
    }

    void load_dataset() {
        require(!cfg_.manifest_path.empty(), "TrainConfig: manifest path is empty");
        const DatasetManifest man = read_manifest(cfg_.manifest_path);
        require(!man.train.empty(), "training dataset is empty");
        const auto load_split = [&](const std::vector<std::string>& ids, std::vector<PhantomCase>& dst) {
            for (const auto& id : ids) {
                PhantomCase pc = read_case(man.dir_of(id));
                require(pc.fixed.W == cfg_.width && pc.fixed.H == cfg_.height &&
                            pc.fixed.D == cfg_.depth,
                        "case " + id + " dims " + std::to_string(pc.fixed.W) + "x" +
                            std::to_string(pc.fixed.H) + "x" + std::to_string(pc.fixed.D) +
                            " do not match configured dims " + std::to_string(cfg_.width) + "x" +
                            std::to_string(cfg_.height) + "x" + std::to_string(cfg_.depth));
                dst.push_back(std::move(pc));
            }
        };
        load_split(man.train, train_);
        load_split(man.val, val_);
    }

    TrainConfig cfg_;
    Models models_;
    Adam opt_;
    std::vector<PhantomCase> train_, val_;
    std::ofstream csv_;
    Checkpoint best_;
    bool have_best_ = false;
    bool best_in_seg_phase_ = false;
    double best_metric_ = -1.0;
    std::string ckpt_path_, csv_path_;
};

inline TrainResult run_training(const TrainConfig& cfg) { return Trainer(cfg).run(); }

// ---------------------------------------------------------------------------
// Inference from a checkpoint (used by the CLI and the evaluation path).

struct InferOutput {
    AffineMatrix A;
    Volume3D warped_moving;
    Volume3D probs;      // 3-channel SegProbabilities
    LabelMask pred_mask;  // argmax one-hot
};

namespace detail {
inline TrainConfig config_from_checkpoint(const Checkpoint& ck) {
    TrainConfig cfg;
    try {
        const nlohmann::json& m = ck.model_config;
        const auto dims = m.at("dims").get<std::vector<std::int64_t>>();
        require(dims.size() == 3, "checkpoint model config: dims must have 3 entries");
        cfg.width = dims[0];
        cfg.height = dims[1];
        cfg.depth = dims[2];
        cfg.regnet.patch = m.at("patch").get<std::int64_t>();
        cfg.regnet.token_dim = m.at("token_dim").get<std::int64_t>();
        cfg.regnet.depth = m.at("reg_depth").get<std::int64_t>();
        cfg.regnet.heads = m.at("heads").get<std::int64_t>();
        cfg.regnet.feat_channels = m.at("feat_channels").get<std::int64_t>();
        cfg.segnet.depth = m.at("seg_depth").get<std::int64_t>();
        cfg.segnet.base = m.at("base_channels").get<std::int64_t>();
        cfg.distnet.dim = m.at("dist_dim").get<std::int64_t>();
        cfg.distnet.channels = m.at("dist_channels").get<std::int64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint model config is incomplete: ") + e.what());
    }
    return cfg;
}
}  // namespace detail

inline InferOutput infer_case(const Checkpoint& ck, const PhantomCase& pc) {
    TrainConfig cfg = detail::config_from_checkpoint(ck);
    if (pc.fixed.W != cfg.width || pc.fixed.H != cfg.height || pc.fixed.D != cfg.depth)
        throw FormatError("case dims " + std::to_string(pc.fixed.W) + "x" +
                          std::to_string(pc.fixed.H) + "x" + std::to_string(pc.fixed.D) +
                          " do not match checkpoint dims " + std::to_string(cfg.width) + "x" +
                          std::to_string(cfg.height) + "x" + std::to_string(cfg.depth));
    bool has_reg = false, has_seg = false;
    for (const auto& [name, t] : ck.params) {
        has_reg = has_reg || name.rfind("reg.", 0) == 0;
        has_seg = has_seg || name.rfind("seg.", 0) == 0;
    }
    if (!has_seg)
        throw FormatError("checkpoint (phase \"" + ck.phase +
                          "\") has no segmentation parameters; cannot run inference");
    cfg.mode = has_reg ? TrainMode::joint_e2e : TrainMode::naive_baseline;
    Models models = build_models(cfg);
    apply_checkpoint(models, ck);

    NoGradGuard ng;
    InferOutput out;
    Var m_init = constant(pc.moving.data);
    Var t_init = constant(pc.fixed.data);
    Var probs;
    if (has_reg) {
        RegForwardOutput ro = register_forward(m_init, t_init, *models.reg);
        out.A = AffineMatrix::from_tensor(ro.A->val);
        out.warped_moving = affine_warp(pc.moving, out.A, Interp::trilinear);
        Var fused = fuse_inputs(ro.m_merge_warped, ro.m_init_warped, ro.t_merge, t_init);
        probs = unet_forward(fused, *models.seg);
    } else {
        out.A = AffineMatrix{};
        out.warped_moving = pc.moving;
        probs = naive_concat_forward(m_init, t_init, *models.seg);
    }
    out.probs = pc.fixed.like_with(probs->val);
    out.pred_mask = probs_to_mask(probs->val, pc.fixed.sx, pc.fixed.sy, pc.fixed.sz);
    return out;
}

}  // namespace regseg
