// regseg: phantom generation, training, inference, evaluation, and plots for
// the registration-enhanced multimodal segmentation pipeline.
//
// Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
// failure. stdout carries results (JSON with --json); stderr carries human
// diagnostics.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "regseg/plot.hpp"
#include "regseg/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json_file(const std::string& path, const char* what) {
    std::ifstream is(path);
    if (!is.good())
        throw regseg::InvalidArgument(std::string(what) + " \"" + path + "\" cannot be opened");
    try {
        return json::parse(is);
    } catch (const json::exception& e) {
        throw regseg::FormatError(std::string(what) + " \"" + path + "\" is not valid JSON: " + e.what());
    }
}

std::array<double, 3> parse_split(const std::string& s) {
    std::array<double, 3> f{};
    char extra = 0;
    if (std::sscanf(s.c_str(), "%lf,%lf,%lf%c", &f[0], &f[1], &f[2], &extra) != 3)
        throw regseg::InvalidArgument("--split must be three comma-separated fractions, got \"" + s + "\"");
    return f;
}

json nullable(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::string cell(const std::optional<double>& v) {
    if (!v) return "";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.12g", *v);
    return buf;
}

// --------------------------------------------------------------------------

int cmd_phantom_gen(const std::string& config, const std::string& out, std::int64_t n,
                    std::uint64_t seed, const std::string& split, bool as_json) {
    regseg::PhantomParams params;
    if (!config.empty()) regseg::apply_phantom_json(params, read_json_file(config, "phantom config"));
    if (n < 1) throw regseg::InvalidArgument("--n must be >= 1");
    const regseg::DatasetManifest man =
        regseg::generate_dataset(params, n, seed, parse_split(split), out);
    const json summary{{"command", "phantom-gen"},
                       {"out", out},
                       {"cases", n},
                       {"seed", seed},
                       {"train", man.train.size()},
                       {"val", man.val.size()},
                       {"test", man.test.size()}};
    if (as_json)
        std::cout << summary.dump() << "\n";
    else
        std::cout << "wrote " << n << " cases to " << out << " (train " << man.train.size()
                  << ", val " << man.val.size() << ", test " << man.test.size() << ")\n";
    return 0;
}

int cmd_train(regseg::TrainConfig cfg) {
    const regseg::TrainResult res = regseg::run_training(cfg);
    json out{{"command", "train"},
             {"mode", regseg::to_string(cfg.mode)},
             {"epochs", res.epochs_run},
             {"best_epoch", res.best_epoch},
             {"parameter_count", res.parameter_count},
             {"checkpoint", res.checkpoint_path},
             {"log", res.csv_path}};
    out["val_dice_prostate"] =
        std::isnan(res.best_val_prostate) ? json(nullptr) : json(res.best_val_prostate);
    out["val_dice_tumor"] = std::isnan(res.best_val_tumor) ? json(nullptr) : json(res.best_val_tumor);
    out["final_train_total"] =
        std::isnan(res.final_train_total) ? json(nullptr) : json(res.final_train_total);
    std::cout << out.dump() << "\n";  // final metrics are the train result
    return 0;
}

int cmd_infer(const std::string& ckpt_path, const std::string& case_dir, const std::string& out_dir,
              bool as_json) {
    const regseg::Checkpoint ck = regseg::load_checkpoint(ckpt_path);
    const regseg::PhantomCase pc = regseg::read_case(case_dir);
    const regseg::InferOutput res = regseg::infer_case(ck, pc);

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw regseg::FormatError("cannot create output directory " + out_dir);
    json aj{{"case_id", pc.case_id},
            {"checkpoint_phase", ck.phase},
            {"matrix", std::vector<double>(res.A.m.begin(), res.A.m.end())}};
    std::ofstream af(out_dir + "/affine.json", std::ios::trunc);
    if (!af.good()) throw regseg::FormatError("cannot write " + out_dir + "/affine.json");
    af << aj.dump(2) << "\n";
    regseg::write_rvol(out_dir + "/warped_moving.rvol", res.warped_moving, "intensity");
    regseg::write_rvol(out_dir + "/probs.rvol", res.probs, "intensity");
    regseg::write_labelmask(out_dir + "/mask.rvol", res.pred_mask);

    const json summary{{"command", "infer"},
                       {"case_id", pc.case_id},
                       {"out", out_dir},
                       {"files", {"affine.json", "warped_moving.rvol", "probs.rvol", "mask.rvol"}}};
    if (as_json)
        std::cout << summary.dump() << "\n";
    else
        std::cout << "wrote inference for " << pc.case_id << " to " << out_dir << "\n";
    return 0;
}

int cmd_eval(const std::string& pred_dir, const std::string& dataset_dir, const std::string& out_path,
             bool as_json) {
    const regseg::DatasetManifest man = regseg::read_manifest(dataset_dir);

    std::vector<std::string> ids;
    {
        std::error_code ec;
        fs::directory_iterator it(pred_dir, ec);
        if (ec) throw regseg::FormatError("cannot read prediction directory " + pred_dir);
        for (const auto& entry : fs::directory_iterator(pred_dir))
            if (entry.is_directory() && fs::exists(entry.path() / "mask.rvol"))
                ids.push_back(entry.path().filename().string());
    }
    std::sort(ids.begin(), ids.end());
    if (ids.empty())
        throw regseg::FormatError("prediction directory " + pred_dir +
                                  " has no case subdirectories with mask.rvol");

    std::vector<regseg::CaseReport> reports;
    json jcases = json::array();
    for (const auto& id : ids) {
        if (man.case_dirs.find(id) == man.case_dirs.end())
            throw regseg::FormatError("prediction case \"" + id + "\" is not in the dataset " +
                                      dataset_dir);
        const regseg::PhantomCase gt = regseg::read_case(man.dir_of(id));
        const std::string cdir = pred_dir + "/" + id;
        const regseg::LabelMask pred = regseg::read_labelmask(cdir + "/mask.rvol");
        if (pred.W != gt.fixed.W || pred.H != gt.fixed.H || pred.D != gt.fixed.D)
            throw regseg::FormatError("prediction mask dims for " + id + " do not match the dataset");

        regseg::CaseReport r;
        r.case_id = id;
        for (int c = 0; c < 3; ++c)
            r.dice[static_cast<std::size_t>(c)] =
                regseg::dice_score(pred.channel(c), gt.fixed_labels.channel(c));
        try {
            const auto hd = regseg::hausdorff_mm(pred.channel(1), gt.fixed_labels.channel(1),
                                                 gt.fixed.sx, gt.fixed.sy, gt.fixed.sz);
            r.hd_max_mm = hd.max_mm;
            r.hd_p95_mm = hd.p95_mm;
        } catch (const regseg::UndefinedMetricError&) {
            // missing, not zero
        }
        if (fs::exists(cdir + "/probs.rvol")) {
            const regseg::Volume3D probs = regseg::read_rvol(cdir + "/probs.rvol");
            if (probs.channels != 3 || probs.W != gt.fixed.W || probs.H != gt.fixed.H ||
                probs.D != gt.fixed.D)
                throw regseg::FormatError("probs.rvol for " + id + " has wrong shape");
            regseg::Tensor tumor_probs({probs.D, probs.H, probs.W});
            std::copy_n(probs.data.data() + 2 * probs.voxels(), probs.voxels(), tumor_probs.data());
            try {
                r.auc = regseg::voxel_auc(tumor_probs, gt.fixed_labels.channel(2));
            } catch (const regseg::UndefinedMetricError&) {
            }
        }
        r.lesions = regseg::lesion_level_classify(pred.channel(2), gt.fixed_labels.channel(2),
                                                  gt.fixed_labels.prostate_region());
        r.patient = regseg::patient_level_classify(r.lesions);

        json prov = json::array();
        for (const auto& [pid, verdict] : r.lesions.provenance) prov.push_back({pid, verdict});
        jcases.push_back(
            {{"case_id", id},
             {"dice", r.dice},
             {"hd_max_mm", nullable(r.hd_max_mm)},
             {"hd_p95_mm", nullable(r.hd_p95_mm)},
             {"auc", nullable(r.auc)},
             {"lesions",
              {{"tp", r.lesions.tp}, {"fn", r.lesions.fn}, {"tn", r.lesions.tn}, {"fp", r.lesions.fp},
               {"provenance", prov}}},
             {"patient", regseg::to_string(r.patient)}});
        reports.push_back(std::move(r));
    }

    const regseg::Summary s = regseg::aggregate(reports);
    const json jsummary{{"sensitivity", nullable(s.sensitivity)},
                        {"specificity", nullable(s.specificity)},
                        {"accuracy", nullable(s.accuracy)},
                        {"ppv", nullable(s.ppv)},
                        {"npv", nullable(s.npv)},
                        {"mean_dice", s.mean_dice},
                        {"mean_hd_max_mm", nullable(s.mean_hd_max_mm)},
                        {"mean_hd_p95_mm", nullable(s.mean_hd_p95_mm)},
                        {"mean_auc", nullable(s.mean_auc)},
                        {"lesion_counts", {{"tp", s.tp}, {"fn", s.fn}, {"tn", s.tn}, {"fp", s.fp}}},
                        {"patients",
                         {{"tp", s.patient_tp}, {"fn", s.patient_fn}, {"excluded", s.patient_excluded}}}};
    const json report{{"cases", jcases}, {"summary", jsummary}};
    std::ofstream os(out_path, std::ios::trunc);
    if (!os.good()) throw regseg::FormatError("cannot write report " + out_path);
    os << report.dump(2) << "\n";

    // CSV twin of the per-case table, next to the JSON report.
    std::string csv_path = out_path;
    const auto dot = csv_path.find_last_of('.');
    csv_path = (dot == std::string::npos ? csv_path : csv_path.substr(0, dot)) + ".csv";
    std::ofstream cs(csv_path, std::ios::trunc);
    if (!cs.good()) throw regseg::FormatError("cannot write report " + csv_path);
    cs << "case_id,dice_other,dice_prostate,dice_tumor,hd_max_mm,hd_p95_mm,auc,"
          "lesion_tp,lesion_fn,lesion_tn,lesion_fp,patient\n";
    for (const auto& r : reports) {
        cs << r.case_id << ',' << cell(r.dice[0]) << ',' << cell(r.dice[1]) << ','
           << cell(r.dice[2]) << ',' << cell(r.hd_max_mm) << ',' << cell(r.hd_p95_mm) << ','
           << cell(r.auc) << ',' << r.lesions.tp << ',' << r.lesions.fn << ',' << r.lesions.tn
           << ',' << r.lesions.fp << ',' << regseg::to_string(r.patient) << '\n';
    }

    if (as_json)
        std::cout << json{{"command", "eval"}, {"report", out_path}, {"csv", csv_path},
                          {"cases", reports.size()}, {"summary", jsummary}}
                         .dump()
                  << "\n";
    else
        std::cout << "evaluated " << reports.size() << " cases; report at " << out_path << "\n";
    return 0;
}

int cmd_plot(const std::string& log_path, const std::string& out_dir, bool as_json) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw regseg::FormatError("cannot create output directory " + out_dir);
    const std::vector<std::string> files = regseg::write_plots_from_csv(log_path, out_dir);
    if (as_json)
        std::cout << json{{"command", "plot"}, {"out", out_dir}, {"files", files}}.dump() << "\n";
    else
        std::cout << "wrote " << files.size() << " plots to " << out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"registration-enhanced multimodal prostate segmentation (phantom-scale artifact)"};
    app.require_subcommand(1);

    int rc = 0;

    // phantom-gen ------------------------------------------------------------
    auto* pg = app.add_subcommand("phantom-gen", "Generate a synthetic phantom dataset");
    std::string pg_config, pg_out, pg_split = "0.7,0.15,0.15";
    std::int64_t pg_n = 0, pg_threads = 1;
    std::uint64_t pg_seed = 0;
    bool pg_json = false;
    pg->add_option("--config", pg_config, "Phantom parameter JSON");
    pg->add_option("--out", pg_out, "Output dataset directory")->required();
    pg->add_option("--n", pg_n, "Number of cases")->required();
    pg->add_option("--seed", pg_seed, "Dataset RNG seed");
    pg->add_option("--split", pg_split, "train,val,test fractions (default 0.7,0.15,0.15)");
    pg->add_option("--threads", pg_threads, "Worker threads (default 1, deterministic)");
    pg->add_flag("--json", pg_json, "Machine-readable summary on stdout");
    pg->callback([&] {
        regseg::set_thread_count(pg_threads);
        rc = cmd_phantom_gen(pg_config, pg_out, pg_n, pg_seed, pg_split, pg_json);
    });

    // train -------------------------------------------------------------------
    auto* tr = app.add_subcommand("train", "Train one of the four modes");
    std::string tr_mode, tr_config, tr_init, tr_out, tr_data;
    std::int64_t tr_epochs = 0, tr_threads = 1;
    std::uint64_t tr_seed = 0;
    bool tr_json = false;
    tr->add_option("--mode", tr_mode, "pretrain-reg | joint | independent | baseline")->required();
    tr->add_option("--config", tr_config, "Training config JSON")->required();
    tr->add_option("--init", tr_init, "Warm-start checkpoint");
    tr->add_option("--out", tr_out, "Output directory (overrides config)");
    tr->add_option("--data", tr_data, "Dataset directory (overrides config)");
    tr->add_option("--epochs", tr_epochs, "Epoch budget (overrides config)");
    tr->add_option("--seed", tr_seed, "Training seed (overrides config)");
    tr->add_option("--threads", tr_threads, "Worker threads (default 1, deterministic)");
    tr->add_flag("--json", tr_json, "(train always prints its result JSON)");
    tr->callback([&] {
        regseg::set_thread_count(tr_threads);
        regseg::TrainConfig cfg;
        apply_config_json(cfg, read_json_file(tr_config, "training config"));
        // flag > file > default
        cfg.mode = regseg::train_mode_from_string(tr_mode);
        if (tr->count("--epochs") != 0) cfg.epochs = tr_epochs;
        if (tr->count("--seed") != 0) cfg.seed = tr_seed;
        if (tr->count("--out") != 0) cfg.out_dir = tr_out;
        if (tr->count("--data") != 0) cfg.manifest_path = tr_data;
        if (tr->count("--init") != 0) cfg.init_checkpoint = tr_init;
        std::error_code ec;
        fs::create_directories(cfg.out_dir, ec);
        if (ec) throw regseg::FormatError("cannot create output directory " + cfg.out_dir);
        rc = cmd_train(std::move(cfg));
    });

    // infer -------------------------------------------------------------------
    auto* in = app.add_subcommand("infer", "Run registration + segmentation on one case");
    std::string in_ckpt, in_case, in_out;
    std::int64_t in_threads = 1;
    std::uint64_t in_seed = 0;
    bool in_json = false;
    in->add_option("--ckpt", in_ckpt, "Checkpoint file")->required();
    in->add_option("--case", in_case, "Case directory")->required();
    in->add_option("--out", in_out, "Output directory")->required();
    in->add_option("--seed", in_seed, "Accepted for uniformity; inference is deterministic");
    in->add_option("--threads", in_threads, "Worker threads (default 1)");
    in->add_flag("--json", in_json, "Machine-readable summary on stdout");
    in->callback([&] {
        regseg::set_thread_count(in_threads);
        rc = cmd_infer(in_ckpt, in_case, in_out, in_json);
    });

    // eval --------------------------------------------------------------------
    auto* ev = app.add_subcommand("eval", "Evaluate predictions against a dataset");
    std::string ev_pred, ev_dataset, ev_out;
    std::int64_t ev_threads = 1;
    std::uint64_t ev_seed = 0;
    bool ev_json = false;
    ev->add_option("--pred", ev_pred, "Directory of per-case inference outputs")->required();
    ev->add_option("--dataset", ev_dataset, "Dataset directory (ground truth)")->required();
    ev->add_option("--out", ev_out, "Report JSON path")->required();
    ev->add_option("--seed", ev_seed, "Accepted for uniformity; evaluation is deterministic");
    ev->add_option("--threads", ev_threads, "Worker threads (default 1)");
    ev->add_flag("--json", ev_json, "Machine-readable summary on stdout");
    ev->callback([&] {
        regseg::set_thread_count(ev_threads);
        rc = cmd_eval(ev_pred, ev_dataset, ev_out, ev_json);
    });

    // plot --------------------------------------------------------------------
    auto* pl = app.add_subcommand("plot", "Render loss / validation-Dice curves from a training log");
    std::string pl_log, pl_out;
    std::int64_t pl_threads = 1;
    std::uint64_t pl_seed = 0;
    bool pl_json = false;
    pl->add_option("--log", pl_log, "Training CSV log")->required();
    pl->add_option("--out", pl_out, "Output directory for PNGs")->required();
    pl->add_option("--seed", pl_seed, "Accepted for uniformity; plotting is deterministic");
    pl->add_option("--threads", pl_threads, "Worker threads (default 1)");
    pl->add_flag("--json", pl_json, "Machine-readable summary on stdout");
    pl->callback([&] {
        regseg::set_thread_count(pl_threads);
        rc = cmd_plot(pl_log, pl_out, pl_json);
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;  // usage error
    } catch (const regseg::InvalidArgument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const regseg::NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const regseg::SingularTransformError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const regseg::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return rc;
}
