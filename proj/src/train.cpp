#include "kdx/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include <json.hpp>

namespace kdx {

using nlohmann::json;

OptimizerKind optimizer_from_string(const std::string& s) {
    if (s == "adam") return OptimizerKind::Adam;
    if (s == "sgd") return OptimizerKind::Sgd;
    throw ConfigError("unknown optimizer '" + s + "' (expected adam or sgd)");
}

std::string to_string(OptimizerKind k) { return k == OptimizerKind::Adam ? "adam" : "sgd"; }

void DistillConfig::validate() const {
    loss.validate();
    if (epochs_teacher < 1) throw ConfigError("epochs_teacher must be >= 1");
    if (epochs_student < 1) throw ConfigError("epochs_student must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
}

void TrainingTrace::save_jsonl(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write trace: " + path.string());
    for (const auto& e : epochs) {
        json j;
        j["epoch"] = e.epoch;
        j["total"] = e.mean_total;
        j["supervised"] = e.mean_supervised;
        j["distill"] = e.mean_distill;
        j["val_accuracy"] = e.val_accuracy;
        j["seconds"] = e.seconds;
        out << j.dump() << "\n";
    }
}

TrainingTrace TrainingTrace::load_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open trace: " + path.string());
    TrainingTrace t;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        EpochRecord e;
        e.epoch = j.at("epoch").get<int>();
        e.mean_total = j.at("total").get<double>();
        e.mean_supervised = j.at("supervised").get<double>();
        e.mean_distill = j.at("distill").get<double>();
        e.val_accuracy = j.at("val_accuracy").get<double>();
        e.seconds = j.at("seconds").get<double>();
        t.epochs.push_back(e);
        if (t.epochs.size() == 1 || e.val_accuracy > t.best_val_accuracy) {
            t.best_val_accuracy = e.val_accuracy;
            t.best_epoch = e.epoch;
        }
    }
    return t;
}

double validation_accuracy(const Model& model, const LoadedSplit& split, int batch_size) {
    if (split.size() == 0) throw ConfigError("validation split is empty");
    long correct = 0;
    std::vector<int> idx;
    for (int start = 0; start < split.size(); start += batch_size) {
        const int end = std::min(split.size(), start + batch_size);
        idx.clear();
        for (int i = start; i < end; ++i) idx.push_back(i);
        const Matrix logits = model.forward(split.batch_images(idx));
        for (int b = 0; b < logits.rows; ++b) {
            int pred = 0;
            for (int c = 1; c < logits.cols; ++c) {
                if (logits.at(b, c) > logits.at(b, pred)) pred = c;
            }
            correct += pred == split.label_of(idx[static_cast<std::size_t>(b)]) ? 1 : 0;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(split.size());
}

namespace {

// Adam (b1=0.9, b2=0.999, eps=1e-8) or plain SGD over a flat parameter
// vector.
class Optimizer {
public:
    Optimizer(OptimizerKind kind, double lr, std::size_t n)
        : kind_(kind), lr_(lr), m_(n, 0.0), v_(n, 0.0) {}

    void step(std::vector<double>& params, const std::vector<double>& grad) {
        if (kind_ == OptimizerKind::Sgd) {
            for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr_ * grad[i];
            return;
        }
        ++t_;
        const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i] = b1 * m_[i] + (1.0 - b1) * grad[i];
            v_[i] = b2 * v_[i] + (1.0 - b2) * grad[i] * grad[i];
            params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps);
        }
    }

private:
    OptimizerKind kind_;
    double lr_;
    std::vector<double> m_, v_;
    long t_ = 0;
};

void check_data(const Model& model, const LoadedSplit& train, const LoadedSplit& val) {
    if (train.size() == 0) throw ConfigError("training split is empty");
    if (val.size() == 0) throw ConfigError("validation split is empty");
    if (model.num_classes() != train.num_classes() || model.num_classes() != val.num_classes()) {
        throw ShapeError("model class count " + std::to_string(model.num_classes()) +
                         " does not match dataset class count " +
                         std::to_string(train.num_classes()));
    }
}

// Shared loop for all three entry points. `teacher == nullptr` runs the
// supervised-only objective.
TrainingTrace run_training(Model& model, const Model* teacher, const LoadedSplit& train,
                           const LoadedSplit& val, const DistillConfig& cfg, int epochs,
                           const LossConfig& loss_cfg) {
    cfg.validate();
    check_data(model, train, val);
    if (model.frozen()) throw ConfigError("cannot train a frozen model");
    if (teacher) {
        if (!teacher->frozen()) throw ConfigError("teacher must be frozen before distillation");
        if (teacher->num_classes() != model.num_classes()) {
            throw ShapeError("teacher/student class count mismatch");
        }
        if (teacher->spec().in_channels != model.spec().in_channels ||
            teacher->spec().input_h != model.spec().input_h ||
            teacher->spec().input_w != model.spec().input_w) {
            throw ShapeError("teacher/student input shape mismatch");
        }
    }
    const std::uint64_t teacher_hash = teacher ? teacher->parameter_hash() : 0;

    auto dropout_rng = make_rng(cfg.seed, fnv1a64("train-dropout"));
    Optimizer opt(cfg.optimizer, cfg.learning_rate, model.params().size());
    std::vector<double> grad;
    TrainContext ctx;

    TrainingTrace trace;
    std::vector<double> best_params = model.params();
    for (int epoch = 1; epoch <= epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        double sum_total = 0.0, sum_sup = 0.0, sum_distill = 0.0;
        long seen = 0;
        for (const auto& batch : epoch_batches(train.size(), cfg.batch_size, cfg.seed, epoch)) {
            const Tensor4 images = train.batch_images(batch);
            const Matrix labels = train.batch_labels(batch);
            LossValue lv;
            if (teacher) {
                const Matrix t_logits = teacher->forward(images);
                const Matrix s_logits = model.forward_train(images, dropout_rng, ctx);
                lv = kd_loss(s_logits, t_logits, labels, loss_cfg);
            } else {
                const Matrix s_logits = model.forward_train(images, dropout_rng, ctx);
                lv = supervised_loss(s_logits, labels, loss_cfg);
            }
            model.backward(lv.gradient, ctx, grad);
            opt.step(model.params(), grad);
            const double bs = static_cast<double>(batch.size());
            sum_total += lv.total * bs;
            sum_sup += lv.supervised * bs;
            sum_distill += lv.distill * bs;
            seen += static_cast<long>(batch.size());
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.mean_total = sum_total / static_cast<double>(seen);
        rec.mean_supervised = sum_sup / static_cast<double>(seen);
        rec.mean_distill = sum_distill / static_cast<double>(seen);
        rec.val_accuracy = validation_accuracy(model, val, cfg.batch_size);
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        trace.epochs.push_back(rec);
        if (epoch == 1 || rec.val_accuracy > trace.best_val_accuracy) {
            trace.best_val_accuracy = rec.val_accuracy;
            trace.best_epoch = epoch;
            best_params = model.params();
        }
    }
    model.params() = best_params;  // retain the best-validation checkpoint

    if (teacher && teacher->parameter_hash() != teacher_hash) {
        throw std::logic_error("teacher parameters changed during distillation");
    }
    return trace;
}

}  // namespace

TrainingTrace train_teacher(Model& model, const LoadedSplit& train, const LoadedSplit& val,
                            const DistillConfig& cfg) {
    // Hard labels only; for fbce_mse this is plain BCE (gamma = 0).
    LossConfig sup = cfg.loss;
    sup.alpha = 1.0;
    sup.gamma = 0.0;
    return run_training(model, nullptr, train, val, cfg, cfg.epochs_teacher, sup);
}

TrainingTrace distill_student(Model& student, const Model& teacher, const LoadedSplit& train,
                              const LoadedSplit& val, const DistillConfig& cfg) {
    return run_training(student, &teacher, train, val, cfg, cfg.epochs_student, cfg.loss);
}

TrainingTrace train_student_baseline(Model& student, const LoadedSplit& train,
                                     const LoadedSplit& val, const DistillConfig& cfg) {
    return run_training(student, nullptr, train, val, cfg, cfg.epochs_student, cfg.loss);
}

}  // namespace kdx
