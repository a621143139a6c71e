#ifndef KDX_TRAIN_HPP
#define KDX_TRAIN_HPP

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "kdx/data.hpp"
#include "kdx/losses.hpp"
#include "kdx/model.hpp"

namespace kdx {

enum class OptimizerKind { Adam, Sgd };
OptimizerKind optimizer_from_string(const std::string& s);
std::string to_string(OptimizerKind k);

struct DistillConfig {
    LossConfig loss;
    int epochs_teacher = 10;
    int epochs_student = 10;
    int batch_size = 32;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;
    OptimizerKind optimizer = OptimizerKind::Adam;
    void validate() const;
};

struct EpochRecord {
    int epoch = 0;  // 1-based
    double mean_total = 0.0;
    double mean_supervised = 0.0;
    double mean_distill = 0.0;
    double val_accuracy = 0.0;
    double seconds = 0.0;  // wall clock; excluded from determinism comparisons
};

struct TrainingTrace {
    std::vector<EpochRecord> epochs;
    int best_epoch = 0;
    double best_val_accuracy = 0.0;

    void save_jsonl(const std::filesystem::path& path) const;
    static TrainingTrace load_jsonl(const std::filesystem::path& path);
};

// Phase 1: plain supervised training on hard labels (BCE for the fbce_mse
// variant, CE for ce_kl). The model parameters end at the epoch with the
// best validation accuracy.
TrainingTrace train_teacher(Model& model, const LoadedSplit& train, const LoadedSplit& val,
                            const DistillConfig& cfg);

// Phase 2: per mini-batch, teacher logits are computed without gradient,
// student logits with gradient, the combined loss is evaluated and only the
// student is updated. The teacher must be frozen; its parameters are
// hash-checked before and after.
TrainingTrace distill_student(Model& student, const Model& teacher, const LoadedSplit& train,
                              const LoadedSplit& val, const DistillConfig& cfg);

// Control arm: the student trained without a teacher under the identical
// budget and RNG stream. With alpha = 1 a distillation run reduces to this
// exactly (the teacher only adds forward cost).
TrainingTrace train_student_baseline(Model& student, const LoadedSplit& train,
                                     const LoadedSplit& val, const DistillConfig& cfg);

// Argmax-over-sigmoid accuracy at T = 1.
double validation_accuracy(const Model& model, const LoadedSplit& split, int batch_size);

}  // namespace kdx

#endif  // KDX_TRAIN_HPP
