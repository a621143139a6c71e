#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kdx/pipeline.hpp"
#include "kdx/scorecam.hpp"

namespace fs = std::filesystem;

namespace {

struct Overrides {
    std::string out;
    std::uint64_t seed = 0;
    double alpha = 0, gamma = 0, temperature = 0, learning_rate = 0;
    std::string variant, optimizer;
    int epochs_teacher = 0, epochs_student = 0, batch_size = 0, sample_count = 0;
};

// Flags shared by every subcommand that reads a config; flags win over the
// config file.
void add_common(CLI::App* cmd, std::string& config_path, Overrides& ov) {
    cmd->add_option("-c,--config", config_path, "run config (JSON)")->required();
    cmd->add_option("--out", ov.out, "output run directory (overrides config output_dir)");
    cmd->add_option("--seed", ov.seed, "override model and training seed");
    cmd->add_option("--alpha", ov.alpha, "override distill.alpha");
    cmd->add_option("--gamma", ov.gamma, "override distill.gamma");
    cmd->add_option("--temperature", ov.temperature, "override distill.temperature");
    cmd->add_option("--variant", ov.variant, "override distill.variant (fbce_mse|ce_kl)");
    cmd->add_option("--epochs-teacher", ov.epochs_teacher, "override distill.epochs_teacher");
    cmd->add_option("--epochs-student", ov.epochs_student, "override distill.epochs_student");
    cmd->add_option("--batch-size", ov.batch_size, "override distill.batch_size");
    cmd->add_option("--learning-rate", ov.learning_rate, "override distill.learning_rate");
    cmd->add_option("--optimizer", ov.optimizer, "override distill.optimizer (adam|sgd)");
    cmd->add_option("--sample-count", ov.sample_count, "override explain.sample_count");
}

kdx::RunConfig load_config(CLI::App* cmd, const std::string& path, const Overrides& ov) {
    kdx::RunConfig cfg = kdx::RunConfig::from_file(path);
    if (cmd->count("--seed")) {
        cfg.model.seed = ov.seed;
        cfg.distill.seed = ov.seed;
    }
    if (cmd->count("--alpha")) cfg.distill.loss.alpha = ov.alpha;
    if (cmd->count("--gamma")) cfg.distill.loss.gamma = ov.gamma;
    if (cmd->count("--temperature")) cfg.distill.loss.temperature = ov.temperature;
    if (cmd->count("--variant")) cfg.distill.loss.variant = kdx::loss_variant_from_string(ov.variant);
    if (cmd->count("--epochs-teacher")) cfg.distill.epochs_teacher = ov.epochs_teacher;
    if (cmd->count("--epochs-student")) cfg.distill.epochs_student = ov.epochs_student;
    if (cmd->count("--batch-size")) cfg.distill.batch_size = ov.batch_size;
    if (cmd->count("--learning-rate")) cfg.distill.learning_rate = ov.learning_rate;
    if (cmd->count("--optimizer")) cfg.distill.optimizer = kdx::optimizer_from_string(ov.optimizer);
    if (cmd->count("--sample-count")) cfg.explain.sample_count = ov.sample_count;
    if (!ov.out.empty()) cfg.output_dir = ov.out;

    // Relative output paths land under KDX_OUTPUT_ROOT when it is set.
    fs::path out(cfg.output_dir);
    if (out.is_relative()) {
        if (const char* root = std::getenv("KDX_OUTPUT_ROOT"); root && *root) {
            cfg.output_dir = (fs::path(root) / out).string();
        }
    }
    cfg.validate();
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"knowledge distillation with saliency-based explanation"};
    app.require_subcommand(1);

    std::string config_path;
    Overrides ov;
    std::string teacher_ckpt, split_name = "test", gen_root;
    std::vector<std::string> checkpoints;
    bool with_baseline = false;

    auto* gen = app.add_subcommand("gen-synthetic", "materialize the synthetic dataset");
    add_common(gen, config_path, ov);
    gen->add_option("--root", gen_root, "directory to materialize into (default <out>/dataset)");

    auto* tt = app.add_subcommand("train-teacher", "phase 1: train the teacher on hard labels");
    add_common(tt, config_path, ov);

    auto* di = app.add_subcommand("distill", "phase 2: distill the student from a frozen teacher");
    add_common(di, config_path, ov);
    di->add_option("--teacher", teacher_ckpt, "teacher checkpoint")->required();
    di->add_flag("--with-baseline", with_baseline, "also train the no-teacher control");

    auto* ev = app.add_subcommand("evaluate", "evaluate checkpoints on a dataset split");
    add_common(ev, config_path, ov);
    ev->add_option("--checkpoint", checkpoints,
                   "checkpoint(s) to evaluate; several render a comparison grid")
        ->required()
        ->expected(1, 16);
    ev->add_option("--split", split_name, "train|val|test (default test)");

    auto* ex = app.add_subcommand("explain", "saliency overlays and teacher/student alignment");
    add_common(ex, config_path, ov);
    ex->add_option("--checkpoint", checkpoints, "one or two checkpoints (teacher first)")
        ->required()
        ->expected(1, 2);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) {
            const kdx::RunConfig cfg = load_config(gen, config_path, ov);
            const fs::path root = !gen_root.empty() ? fs::path(gen_root)
                                  : !cfg.dataset.synthetic_root.empty()
                                      ? fs::path(cfg.dataset.synthetic_root)
                                      : fs::path(cfg.output_dir) / "dataset";
            const auto manifest = kdx::run_gen_synthetic(cfg, root);
            std::cout << "dataset: " << root.string() << "\n"
                      << "classes: " << manifest.class_names.size() << ", images: "
                      << manifest.items.size() << ", hash: " << manifest.content_hash << "\n";
        } else if (tt->parsed()) {
            const kdx::RunConfig cfg = load_config(tt, config_path, ov);
            const auto out = kdx::run_train_teacher(cfg, cfg.output_dir);
            std::cout << "run: " << out.run_dir.string() << "\n"
                      << "best epoch " << out.trace.best_epoch << ", val accuracy "
                      << out.trace.best_val_accuracy << "\n"
                      << out.report.render_text();
        } else if (di->parsed()) {
            const kdx::RunConfig cfg = load_config(di, config_path, ov);
            const auto out = kdx::run_distill(cfg, teacher_ckpt, with_baseline, cfg.output_dir);
            std::cout << "run: " << out.run_dir.string() << "\n"
                      << "student best epoch " << out.student_trace.best_epoch
                      << ", val accuracy " << out.student_trace.best_val_accuracy << "\n"
                      << out.student_report.render_text();
            if (out.has_baseline) {
                std::cout << "baseline comparison:\n"
                          << kdx::render_comparison(
                                 {{"student (distilled)", out.student_report},
                                  {"student (no teacher)", out.baseline_report}});
            }
        } else if (ev->parsed()) {
            const kdx::RunConfig cfg = load_config(ev, config_path, ov);
            std::vector<fs::path> cks(checkpoints.begin(), checkpoints.end());
            const auto reports = kdx::run_evaluate(cfg, cks, kdx::split_role_from_string(split_name),
                                                   cfg.output_dir);
            if (reports.size() == 1) {
                std::cout << reports[0].render_text();
            } else {
                std::vector<std::pair<std::string, kdx::MetricReport>> named;
                for (std::size_t i = 0; i < reports.size(); ++i) {
                    named.emplace_back(cks[i].stem().string(), reports[i]);
                }
                std::cout << kdx::render_comparison(named);
            }
        } else if (ex->parsed()) {
            const kdx::RunConfig cfg = load_config(ex, config_path, ov);
            std::vector<fs::path> cks(checkpoints.begin(), checkpoints.end());
            const auto out = kdx::run_explain(cfg, cks, cfg.output_dir);
            std::cout << "run: " << out.run_dir.string() << "\n"
                      << "images explained: " << out.images << "\n";
            if (out.pointing_accuracy_primary > 0 || out.images > 0) {
                std::cout << "pointing accuracy (first model): " << out.pointing_accuracy_primary
                          << "\n";
            }
            if (out.has_alignment) {
                std::cout << "pointing accuracy (second model): "
                          << out.pointing_accuracy_secondary << "\n"
                          << "mean pearson: " << out.mean_pearson
                          << ", mean IoU@0.5: " << out.mean_iou << "\n";
            }
            for (const auto& err : out.errors) std::cout << "error: " << err << "\n";
        }
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "failure: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
