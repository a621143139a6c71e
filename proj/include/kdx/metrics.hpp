#ifndef KDX_METRICS_HPP
#define KDX_METRICS_HPP

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "kdx/data.hpp"
#include "kdx/model.hpp"
#include "kdx/tensor.hpp"

namespace kdx {

// One-vs-rest ROC AUC as the Mann-Whitney rank statistic: the probability
// that a random positive outscores a random negative, ties counted half.
// Returns nullopt when the labels contain only one class (AUC undefined).
std::optional<double> auc_one_vs_rest(const std::vector<double>& scores,
                                      const std::vector<int>& labels);

// F1 = 2PR/(P+R); by convention 0 when the denominator vanishes.
double f1_from_counts(long tp, long fp, long fn);

// Everything needed for a Table-style row: per-class and macro AUC/F1,
// accuracy, the confusion matrix and provenance hashes. All averaging is
// macro (unweighted over classes).
struct MetricReport {
    std::vector<std::string> class_names;
    std::vector<std::vector<long>> confusion;  // [true][predicted]
    long sample_count = 0;
    double accuracy = 0.0;
    std::vector<double> f1;
    double macro_f1 = 0.0;
    std::vector<std::optional<double>> auc;
    std::optional<double> macro_auc;
    std::vector<std::string> warnings;
    std::string config_hash;
    std::string checkpoint_hash;
    std::string averaging = "macro";

    // Fingerprint of the metric content (not the file bytes).
    std::string content_hash() const;

    void save(const std::filesystem::path& json_path) const;
    static MetricReport load(const std::filesystem::path& json_path);
    std::string render_text() const;
};

// Inference-mode evaluation of a model over a split: sigmoid scores at
// T = 1, argmax predictions, per-class one-vs-rest AUC.
MetricReport evaluate(const Model& model, const LoadedSplit& split, int batch_size,
                      const std::string& config_hash = "", const std::string& checkpoint_hash = "");

// Side-by-side text grid for several named reports.
std::string render_comparison(const std::vector<std::pair<std::string, MetricReport>>& reports);

}  // namespace kdx

#endif  // KDX_METRICS_HPP
