#include "kdx/losses.hpp"

#include <algorithm>
#include <cmath>

namespace kdx {

namespace {

double clamp_prob(double p) {
    return std::min(std::max(p, kProbEps), 1.0 - kProbEps);
}

void require_finite(const Matrix& m, const char* who) {
    if (!all_finite(m.data)) {
        throw std::invalid_argument(std::string(who) + ": non-finite entries in batch");
    }
}

// d(fbce element)/d(logit), with p the already-clamped sigmoid of the logit.
// Written in the algebraically reduced form so no intermediate blows up as
// p approaches either end of the clamp range. Returns 0 where the clamp is
// active: there the implemented loss is locally constant in the logit.
double fbce_element_dlogit(double p, int y, double gamma, bool clamped) {
    if (clamped) return 0.0;
    if (y == 1) {
        return gamma * p * std::pow(1.0 - p, gamma) * std::log(p) - std::pow(1.0 - p, gamma + 1.0);
    }
    return -gamma * std::pow(p, gamma) * (1.0 - p) * std::log(1.0 - p) + std::pow(p, gamma + 1.0);
}

double logsumexp_row(const Matrix& m, int row) {
    double mx = m.at(row, 0);
    for (int c = 1; c < m.cols; ++c) mx = std::max(mx, m.at(row, c));
    double s = 0.0;
    for (int c = 0; c < m.cols; ++c) s += std::exp(m.at(row, c) - mx);
    return mx + std::log(s);
}

}  // namespace

LossVariant loss_variant_from_string(const std::string& s) {
    if (s == "fbce_mse") return LossVariant::FbceMse;
    if (s == "ce_kl") return LossVariant::CeKl;
    throw ConfigError("unknown loss variant '" + s + "' (expected fbce_mse or ce_kl)");
}

std::string to_string(LossVariant v) {
    return v == LossVariant::FbceMse ? "fbce_mse" : "ce_kl";
}

LossConfig::LossConfig(double alpha_, double gamma_, double temperature_, LossVariant variant_)
    : alpha(alpha_), gamma(gamma_), temperature(temperature_), variant(variant_) {
    validate();
}

void LossConfig::validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) {
        throw ConfigError("loss.alpha must be in [0,1], got " + std::to_string(alpha));
    }
    if (!(gamma >= 0.0)) {
        throw ConfigError("loss.gamma must be >= 0, got " + std::to_string(gamma));
    }
    if (!(temperature > 0.0)) {
        throw ConfigError("loss.temperature must be > 0, got " + std::to_string(temperature));
    }
}

double stable_sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

Matrix sigmoid(const Matrix& logits) {
    Matrix out(logits.rows, logits.cols);
    for (std::size_t i = 0; i < logits.size(); ++i) out.data[i] = stable_sigmoid(logits.data[i]);
    return out;
}

void require_binary_labels(const Matrix& labels, const char* who) {
    for (double v : labels.data) {
        if (v != 0.0 && v != 1.0) {
            throw std::invalid_argument(std::string(who) + ": labels must be exactly 0 or 1");
        }
    }
}

void require_one_hot_labels(const Matrix& labels, const char* who) {
    require_binary_labels(labels, who);
    for (int r = 0; r < labels.rows; ++r) {
        int ones = 0;
        for (int c = 0; c < labels.cols; ++c) ones += labels.at(r, c) == 1.0 ? 1 : 0;
        if (ones != 1) {
            throw std::invalid_argument(std::string(who) + ": row " + std::to_string(r) +
                                        " is not one-hot");
        }
    }
}

double fbce_element(double p, int y, double gamma) {
    p = clamp_prob(p);
    if (y == 1) {
        return -std::pow(1.0 - p, gamma) * std::log(p);
    }
    return -std::pow(p, gamma) * std::log(1.0 - p);
}

double bce_loss(const Matrix& probs, const Matrix& labels) {
    return fbce_loss(probs, labels, 0.0);
}

double fbce_loss(const Matrix& probs, const Matrix& labels, double gamma) {
    require_same_shape(probs, labels, "fbce_loss");
    require_binary_labels(labels, "fbce_loss");
    if (gamma < 0.0) throw ConfigError("fbce_loss: gamma must be >= 0");
    if (probs.size() == 0) throw std::invalid_argument("fbce_loss: empty batch");
    double sum = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        sum += fbce_element(probs.data[i], labels.data[i] == 1.0 ? 1 : 0, gamma);
    }
    return sum / static_cast<double>(probs.size());
}

double mse_distill_loss(const Matrix& student_logits, const Matrix& teacher_logits,
                        double temperature) {
    require_same_shape(student_logits, teacher_logits, "mse_distill_loss");
    if (!(temperature > 0.0)) throw ConfigError("mse_distill_loss: temperature must be > 0");
    if (student_logits.size() == 0) throw std::invalid_argument("mse_distill_loss: empty batch");
    const double n = static_cast<double>(student_logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < student_logits.size(); ++i) {
        const double d = stable_sigmoid(student_logits.data[i] / temperature) -
                         stable_sigmoid(teacher_logits.data[i] / temperature);
        sum += d * d;
    }
    return temperature * temperature * sum / n;
}

LossValue kd_loss(const Matrix& student_logits, const Matrix& teacher_logits,
                  const Matrix& labels, const LossConfig& cfg) {
    cfg.validate();
    if (cfg.variant == LossVariant::CeKl) {
        return ce_kl_loss(student_logits, teacher_logits, labels, cfg);
    }
    require_same_shape(student_logits, teacher_logits, "kd_loss");
    require_same_shape(student_logits, labels, "kd_loss");
    require_binary_labels(labels, "kd_loss");
    require_finite(student_logits, "kd_loss(student)");
    require_finite(teacher_logits, "kd_loss(teacher)");
    if (student_logits.size() == 0) throw std::invalid_argument("kd_loss: empty batch");

    const double n = static_cast<double>(student_logits.size());
    const double T = cfg.temperature;
    LossValue out;
    out.gradient = Matrix(student_logits.rows, student_logits.cols);

    double sup_sum = 0.0;
    double mse_sum = 0.0;
    for (std::size_t i = 0; i < student_logits.size(); ++i) {
        const int y = labels.data[i] == 1.0 ? 1 : 0;
        const double raw_p = stable_sigmoid(student_logits.data[i]);
        const double p = clamp_prob(raw_p);
        const bool clamped = raw_p != p;

        sup_sum += fbce_element(raw_p, y, cfg.gamma);
        const double g_sup = fbce_element_dlogit(p, y, cfg.gamma, clamped) / n;

        const double ss = stable_sigmoid(student_logits.data[i] / T);
        const double st = stable_sigmoid(teacher_logits.data[i] / T);
        mse_sum += (ss - st) * (ss - st);
        const double g_mse = (2.0 * T / n) * (ss - st) * ss * (1.0 - ss);

        out.gradient.data[i] = cfg.alpha * g_sup + (1.0 - cfg.alpha) * g_mse;
    }
    out.supervised = sup_sum / n;
    out.distill = T * T * mse_sum / n;
    out.total = cfg.alpha * out.supervised + (1.0 - cfg.alpha) * out.distill;
    return out;
}

LossValue ce_kl_loss(const Matrix& student_logits, const Matrix& teacher_logits,
                     const Matrix& labels, const LossConfig& cfg) {
    cfg.validate();
    require_same_shape(student_logits, teacher_logits, "ce_kl_loss");
    require_same_shape(student_logits, labels, "ce_kl_loss");
    require_one_hot_labels(labels, "ce_kl_loss");
    require_finite(student_logits, "ce_kl_loss(student)");
    require_finite(teacher_logits, "ce_kl_loss(teacher)");

    const int B = student_logits.rows;
    const int C = student_logits.cols;
    const double T = cfg.temperature;
    LossValue out;
    out.gradient = Matrix(B, C);

    double ce_sum = 0.0;
    double kl_sum = 0.0;
    std::vector<double> log_qs(static_cast<std::size_t>(C));
    std::vector<double> log_qt(static_cast<std::size_t>(C));
    for (int r = 0; r < B; ++r) {
        // Hard-label cross-entropy through log-sum-exp; its logit gradient is
        // softmax(s) - y.
        const double lse1 = logsumexp_row(student_logits, r);
        int target = 0;
        for (int c = 0; c < C; ++c) {
            if (labels.at(r, c) == 1.0) target = c;
        }
        ce_sum += lse1 - student_logits.at(r, target);

        // Tempered log-softmax of both sides for the KL term.
        double lse_s = -1e300;
        double lse_t = -1e300;
        {
            double mx_s = student_logits.at(r, 0) / T;
            double mx_t = teacher_logits.at(r, 0) / T;
            for (int c = 1; c < C; ++c) {
                mx_s = std::max(mx_s, student_logits.at(r, c) / T);
                mx_t = std::max(mx_t, teacher_logits.at(r, c) / T);
            }
            double ss = 0.0;
            double st = 0.0;
            for (int c = 0; c < C; ++c) {
                ss += std::exp(student_logits.at(r, c) / T - mx_s);
                st += std::exp(teacher_logits.at(r, c) / T - mx_t);
            }
            lse_s = mx_s + std::log(ss);
            lse_t = mx_t + std::log(st);
        }
        for (int c = 0; c < C; ++c) {
            log_qs[static_cast<std::size_t>(c)] = student_logits.at(r, c) / T - lse_s;
            log_qt[static_cast<std::size_t>(c)] = teacher_logits.at(r, c) / T - lse_t;
        }
        for (int c = 0; c < C; ++c) {
            const double qt = std::exp(log_qt[static_cast<std::size_t>(c)]);
            const double qs = std::exp(log_qs[static_cast<std::size_t>(c)]);
            if (qt > 0.0) {
                kl_sum += qt * (log_qt[static_cast<std::size_t>(c)] - log_qs[static_cast<std::size_t>(c)]);
            }
            // alpha * (softmax(s) - y)/B  +  (1-alpha) * T * (qs - qt)/B
            const double p = std::exp(student_logits.at(r, c) - lse1);
            const double g_ce = (p - labels.at(r, c)) / B;
            const double g_kl = T * (qs - qt) / B;
            out.gradient.at(r, c) = cfg.alpha * g_ce + (1.0 - cfg.alpha) * g_kl;
        }
    }
    out.supervised = ce_sum / B;
    out.distill = T * T * (kl_sum / B);
    // KL can round to a tiny negative when both distributions are equal.
    if (out.distill < 0.0 && out.distill > -1e-12) out.distill = 0.0;
    out.total = cfg.alpha * out.supervised + (1.0 - cfg.alpha) * out.distill;
    return out;
}

LossValue supervised_loss(const Matrix& logits, const Matrix& labels, const LossConfig& cfg) {
    LossConfig sup_cfg = cfg;
    sup_cfg.alpha = 1.0;
    // With alpha = 1 the distill term is weighted out entirely; feed the
    // student's own logits as the "teacher" so the term is exactly zero.
    LossValue v = kd_loss(logits, logits, labels, sup_cfg);
    v.distill = 0.0;
    v.total = v.supervised;
    return v;
}

}  // namespace kdx
