#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "kdx/data.hpp"
#include "kdx/metrics.hpp"
#include "kdx/train.hpp"

using namespace kdx;
namespace fs = std::filesystem;

namespace {

// Tiny 16x16 dataset shared by all training tests; one-time setup.
struct Fixture {
    DatasetManifest manifest;
    LoadedSplit train, val;

    static const Fixture& get() {
        static Fixture fx;
        return fx;
    }

private:
    Fixture() {
        const fs::path dir = fs::temp_directory_path() / "kdx_train_test" / "data";
        SyntheticSpec spec;
        spec.image_size = 16;
        spec.blob_radius = 2.0;
        spec.noise = 0.05;
        spec.train_per_class = 8;
        spec.val_per_class = 3;
        spec.test_per_class = 3;
        spec.seed = 21;
        manifest = generate_synthetic(spec, dir.string());
        train = LoadedSplit::load(manifest, SplitRole::Train, 16, 1);
        val = LoadedSplit::load(manifest, SplitRole::Val, 16, 1);
    }
};

DistillConfig quick_config(std::uint64_t seed, double alpha = 0.5) {
    DistillConfig cfg;
    cfg.loss = LossConfig(alpha, 2.0, 2.0, LossVariant::FbceMse);
    cfg.epochs_teacher = 3;
    cfg.epochs_student = 3;
    cfg.batch_size = 8;
    cfg.learning_rate = 3e-3;
    cfg.seed = seed;
    return cfg;
}

bool traces_equal(const TrainingTrace& a, const TrainingTrace& b) {
    if (a.epochs.size() != b.epochs.size()) return false;
    for (std::size_t i = 0; i < a.epochs.size(); ++i) {
        // everything but wall-clock seconds
        if (a.epochs[i].epoch != b.epochs[i].epoch) return false;
        if (a.epochs[i].mean_total != b.epochs[i].mean_total) return false;
        if (a.epochs[i].mean_supervised != b.epochs[i].mean_supervised) return false;
        if (a.epochs[i].mean_distill != b.epochs[i].mean_distill) return false;
        if (a.epochs[i].val_accuracy != b.epochs[i].val_accuracy) return false;
    }
    return a.best_epoch == b.best_epoch && a.best_val_accuracy == b.best_val_accuracy;
}

}  // namespace

TEST_CASE("config validation rejects bad values") {
    DistillConfig cfg;
    cfg.epochs_teacher = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = DistillConfig{};
    cfg.epochs_student = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = DistillConfig{};
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = DistillConfig{};
    cfg.learning_rate = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK_NOTHROW(DistillConfig{}.validate());
    CHECK_THROWS_AS(optimizer_from_string("adamw"), ConfigError);
}

TEST_CASE("training is deterministic under a fixed seed") {
    const auto& fx = Fixture::get();
    const DistillConfig cfg = quick_config(17);
    Model a = build_toy_teacher(17, 1, 16, 16, 3);
    Model b = build_toy_teacher(17, 1, 16, 16, 3);
    const TrainingTrace ta = train_teacher(a, fx.train, fx.val, cfg);
    const TrainingTrace tb = train_teacher(b, fx.train, fx.val, cfg);
    CHECK(traces_equal(ta, tb));
    CHECK(a.parameter_hash() == b.parameter_hash());
}

TEST_CASE("alpha=1 distillation is the baseline run plus teacher forward cost") {
    const auto& fx = Fixture::get();
    const DistillConfig cfg = quick_config(31, 1.0);

    Model teacher = build_toy_teacher(5, 1, 16, 16, 3);
    teacher.freeze();

    Model distilled = build_toy_student(31, 1, 16, 16, 3);
    const TrainingTrace td = distill_student(distilled, teacher, fx.train, fx.val, cfg);
    Model plain = build_toy_student(31, 1, 16, 16, 3);
    const TrainingTrace tp = train_student_baseline(plain, fx.train, fx.val, cfg);

    REQUIRE(td.epochs.size() == tp.epochs.size());
    for (std::size_t i = 0; i < td.epochs.size(); ++i) {
        CHECK(std::fabs(td.epochs[i].mean_supervised - tp.epochs[i].mean_supervised) <= 1e-9);
        CHECK(td.epochs[i].val_accuracy == tp.epochs[i].val_accuracy);
    }
    CHECK(distilled.parameter_hash() == plain.parameter_hash());
}

TEST_CASE("self-distillation at alpha=0 keeps the distill term at zero") {
    const auto& fx = Fixture::get();
    // Dropout off so the student's training forward equals the teacher's
    // inference forward exactly.
    ToyCnnSpec spec;
    spec.name = "self";
    spec.in_channels = 1;
    spec.input_h = 16;
    spec.input_w = 16;
    spec.num_classes = 3;
    spec.blocks = {{8, true}, {16, false}};
    spec.dropout_rate = 0.0;
    Model student = Model::build(spec, 77);
    Model teacher = Model::build(spec, 77);
    teacher.freeze();
    REQUIRE(student.parameter_hash() == teacher.parameter_hash());

    DistillConfig cfg = quick_config(77, 0.0);
    const TrainingTrace tr = distill_student(student, teacher, fx.train, fx.val, cfg);
    const double initial = tr.epochs.front().mean_distill;
    CHECK(initial <= 1e-12);
    for (const auto& e : tr.epochs) CHECK(e.mean_distill <= initial + 1e-12);
}

TEST_CASE("teacher parameters are immutable through phase 2") {
    const auto& fx = Fixture::get();
    Model teacher = build_toy_teacher(3, 1, 16, 16, 3);
    const DistillConfig cfg = quick_config(3);
    train_teacher(teacher, fx.train, fx.val, cfg);
    teacher.freeze();
    const std::uint64_t before = teacher.parameter_hash();
    Model student = build_toy_student(3, 1, 16, 16, 3);
    distill_student(student, teacher, fx.train, fx.val, cfg);
    CHECK(teacher.parameter_hash() == before);
}

TEST_CASE("distillation precondition failures") {
    const auto& fx = Fixture::get();
    const DistillConfig cfg = quick_config(1);
    Model unfrozen = build_toy_teacher(1, 1, 16, 16, 3);
    Model student = build_toy_student(1, 1, 16, 16, 3);
    CHECK_THROWS_AS(distill_student(student, unfrozen, fx.train, fx.val, cfg), ConfigError);

    Model wrong_classes = build_toy_teacher(1, 1, 16, 16, 4);
    wrong_classes.freeze();
    CHECK_THROWS_AS(distill_student(student, wrong_classes, fx.train, fx.val, cfg), ShapeError);

    Model frozen_student = build_toy_student(1, 1, 16, 16, 3);
    frozen_student.freeze();
    Model teacher = build_toy_teacher(1, 1, 16, 16, 3);
    teacher.freeze();
    CHECK_THROWS_AS(distill_student(frozen_student, teacher, fx.train, fx.val, cfg), ConfigError);

    Model class_mismatch = build_toy_teacher(1, 1, 16, 16, 4);
    CHECK_THROWS_AS(train_teacher(class_mismatch, fx.train, fx.val, cfg), ShapeError);
}

TEST_CASE("trace bookkeeping: decomposition, best checkpoint, persistence") {
    const auto& fx = Fixture::get();
    Model teacher = build_toy_teacher(9, 1, 16, 16, 3);
    const DistillConfig cfg = quick_config(9);
    train_teacher(teacher, fx.train, fx.val, cfg);
    teacher.freeze();
    Model student = build_toy_student(9, 1, 16, 16, 3);
    const TrainingTrace tr = distill_student(student, teacher, fx.train, fx.val, cfg);

    double max_val = 0.0;
    for (const auto& e : tr.epochs) {
        const double recomposed = cfg.loss.alpha * e.mean_supervised +
                                  (1.0 - cfg.loss.alpha) * e.mean_distill;
        CHECK(std::fabs(e.mean_total - recomposed) <= 1e-9);
        max_val = std::max(max_val, e.val_accuracy);
    }
    CHECK(tr.best_val_accuracy == max_val);
    // the retained parameters really are the best-epoch ones
    CHECK(validation_accuracy(student, fx.val, cfg.batch_size) == tr.best_val_accuracy);

    const fs::path path = fs::temp_directory_path() / "kdx_train_trace.jsonl";
    tr.save_jsonl(path);
    const TrainingTrace back = TrainingTrace::load_jsonl(path);
    CHECK(traces_equal(tr, back));
    fs::remove(path);
}

TEST_CASE("ce_kl variant trains end to end") {
    const auto& fx = Fixture::get();
    DistillConfig cfg = quick_config(13);
    cfg.loss.variant = LossVariant::CeKl;
    Model teacher = build_toy_teacher(13, 1, 16, 16, 3);
    train_teacher(teacher, fx.train, fx.val, cfg);
    teacher.freeze();
    Model student = build_toy_student(13, 1, 16, 16, 3);
    const TrainingTrace tr = distill_student(student, teacher, fx.train, fx.val, cfg);
    for (const auto& e : tr.epochs) {
        CHECK(std::isfinite(e.mean_total));
        CHECK(e.mean_distill >= 0.0);
    }
}

TEST_CASE("sgd optimizer path trains and stays deterministic") {
    const auto& fx = Fixture::get();
    DistillConfig cfg = quick_config(23);
    cfg.optimizer = OptimizerKind::Sgd;
    cfg.learning_rate = 0.05;
    Model a = build_toy_student(23, 1, 16, 16, 3);
    Model b = build_toy_student(23, 1, 16, 16, 3);
    const TrainingTrace ta = train_student_baseline(a, fx.train, fx.val, cfg);
    const TrainingTrace tb = train_student_baseline(b, fx.train, fx.val, cfg);
    CHECK(traces_equal(ta, tb));
    CHECK(a.parameter_hash() == b.parameter_hash());
}
