#ifndef KDX_PIPELINE_HPP
#define KDX_PIPELINE_HPP

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "kdx/data.hpp"
#include "kdx/metrics.hpp"
#include "kdx/model.hpp"
#include "kdx/train.hpp"

namespace kdx {

enum class DatasetKind { Synthetic, Folder };

struct DatasetConfig {
    DatasetKind kind = DatasetKind::Synthetic;
    SyntheticSpec synthetic;
    std::string synthetic_root;  // default: <run dir>/dataset
    std::string root;            // folder datasets
    SplitPolicy policy;
    std::uint64_t split_seed = 1;
    int image_size = 32;  // synthetic: always synthetic.image_size
    int channels = 1;
    std::string augmentation = "none";  // reserved hook; only "none" is implemented
};

struct ModelConfig {
    std::string teacher = "toy_teacher";
    std::string student = "toy_student";
    std::uint64_t seed = 1234;
};

struct ExplainConfig {
    std::string layer;         // empty: each model's last conv layer
    std::vector<int> classes;  // target classes per image; empty: the true class
    int sample_count = 50;
};

// One declarative config drives every subcommand. Parsing is strict:
// unknown keys and out-of-range values are rejected with their field path.
struct RunConfig {
    DatasetConfig dataset;
    ModelConfig model;
    DistillConfig distill;
    ExplainConfig explain;
    std::string output_dir = "runs/run";

    void validate() const;
    std::string to_json_text() const;  // fully resolved, all defaults expanded
    // Hash of the semantic fields (output locations excluded, so a rerun
    // into a fresh directory keeps the same provenance hash).
    std::string config_hash() const;

    static RunConfig from_json_text(const std::string& text);
    static RunConfig from_file(const std::filesystem::path& path);
};

// Materializes (synthetic) or scans (folder) the dataset for this config.
DatasetManifest resolve_dataset(const RunConfig& cfg, const std::filesystem::path& run_dir);

struct TrainOutcome {
    std::filesystem::path run_dir;
    std::filesystem::path checkpoint;
    TrainingTrace trace;
    MetricReport report;
};

struct DistillOutcome {
    std::filesystem::path run_dir;
    std::filesystem::path student_checkpoint;
    TrainingTrace student_trace;
    MetricReport student_report;
    bool has_baseline = false;
    std::filesystem::path baseline_checkpoint;
    TrainingTrace baseline_trace;
    MetricReport baseline_report;
};

struct ExplainOutcome {
    std::filesystem::path run_dir;
    int images = 0;
    bool has_alignment = false;
    double mean_pearson = 0.0;
    double mean_iou = 0.0;
    double pointing_accuracy_primary = 0.0;
    double pointing_accuracy_secondary = 0.0;
    double mean_entropy_primary = 0.0;
    double mean_entropy_secondary = 0.0;
    std::vector<std::string> errors;
};

// Phase 1: teacher on hard labels; writes resolved_config.json,
// manifest.json, teacher.ckpt, teacher_trace.jsonl and test-split reports.
TrainOutcome run_train_teacher(const RunConfig& cfg, const std::filesystem::path& out_dir);

// Phase 2 against a frozen teacher checkpoint; optionally also trains the
// no-teacher control under the identical budget and emits the comparison.
DistillOutcome run_distill(const RunConfig& cfg, const std::filesystem::path& teacher_checkpoint,
                           bool with_baseline, const std::filesystem::path& out_dir);

// Evaluates each checkpoint on the split; with more than one, also renders
// a side-by-side comparison grid into the run directory.
std::vector<MetricReport> run_evaluate(const RunConfig& cfg,
                                       const std::vector<std::filesystem::path>& checkpoints,
                                       SplitRole role, const std::filesystem::path& out_dir);

// Score-CAM overlays, raw sidecars and (with two checkpoints) pairwise
// alignment statistics over held-out test images.
ExplainOutcome run_explain(const RunConfig& cfg,
                           const std::vector<std::filesystem::path>& checkpoints,
                           const std::filesystem::path& out_dir);

DatasetManifest run_gen_synthetic(const RunConfig& cfg, const std::filesystem::path& root);

}  // namespace kdx

#endif  // KDX_PIPELINE_HPP
