#ifndef KDX_LOSSES_HPP
#define KDX_LOSSES_HPP

#include <string>

#include "kdx/tensor.hpp"

namespace kdx {

// Objective variants for the hybrid distillation loss.
//   FbceMse: focal binary cross-entropy on sigmoid probabilities plus a
//            temperature-scaled sigmoid MSE distillation term (default).
//   CeKl:    multi-class cross-entropy plus T^2-scaled KL divergence between
//            temperature-softmax distributions of teacher and student.
enum class LossVariant { FbceMse, CeKl };

LossVariant loss_variant_from_string(const std::string& s);
std::string to_string(LossVariant v);

struct LossConfig {
    double alpha = 0.5;        // weight of the hard-label term, in [0,1]
    double gamma = 2.0;        // focal focusing exponent, >= 0
    double temperature = 2.0;  // softening temperature, > 0
    LossVariant variant = LossVariant::FbceMse;

    LossConfig() = default;
    LossConfig(double alpha_, double gamma_, double temperature_, LossVariant variant_);
    void validate() const;
};

// Result of one hybrid-loss evaluation. `gradient` is d(total)/d(student
// logits); teacher logits are treated as constants and never receive a
// gradient. total == alpha*supervised + (1-alpha)*distill by construction.
struct LossValue {
    double total = 0.0;
    double supervised = 0.0;
    double distill = 0.0;
    Matrix gradient;
};

// Probabilities are clamped into [kProbEps, 1-kProbEps] before any log so a
// saturated sigmoid cannot produce -inf. Gradients are the exact derivatives
// of the clamped function (zero where the clamp is active).
inline constexpr double kProbEps = 1e-7;

// Numerically stable logistic function; no overflow for any finite x.
double stable_sigmoid(double x);

// Elementwise sigmoid of a logit batch.
Matrix sigmoid(const Matrix& logits);

// Per-element focal BCE term: -(1-p)^g*log(p) for y=1, -p^g*log(1-p) for y=0.
// g = 0 gives the plain BCE element. Exposed for the elementwise
// monotonicity properties; p is clamped internally.
double fbce_element(double p, int y, double gamma);

// Mean binary cross-entropy over all B*C elements of the batch.
double bce_loss(const Matrix& probs, const Matrix& labels);

// Mean focal BCE over all B*C elements. fbce_loss(p, y, 0) == bce_loss(p, y).
double fbce_loss(const Matrix& probs, const Matrix& labels, double gamma);

// Soft-target distillation term:
//   (T^2 / n) * sum_i (sigmoid(s_i/T) - sigmoid(t_i/T))^2,  n = B*C.
// Zero iff both logit batches are elementwise identical.
double mse_distill_loss(const Matrix& student_logits, const Matrix& teacher_logits,
                        double temperature);

// Combined objective. Dispatches on cfg.variant:
//   FbceMse: alpha * fbce(sigmoid(s), y) + (1-alpha) * mse_distill(s, t, T)
//   CeKl:    delegates to ce_kl_loss (one-hot labels required).
LossValue kd_loss(const Matrix& student_logits, const Matrix& teacher_logits,
                  const Matrix& labels, const LossConfig& cfg);

// Alternate hybrid objective:
//   alpha * CE(y, softmax(s)) + (1-alpha) * T^2 * KL(softmax(t/T) || softmax(s/T))
// Both terms are averaged over the batch rows. Labels must be one-hot.
LossValue ce_kl_loss(const Matrix& student_logits, const Matrix& teacher_logits,
                     const Matrix& labels, const LossConfig& cfg);

// Supervised half of a variant on its own (value + gradient w.r.t. logits).
// This is what phase-1 training and the no-teacher baseline optimize:
// FbceMse -> focal BCE (gamma taken from cfg), CeKl -> cross-entropy.
LossValue supervised_loss(const Matrix& logits, const Matrix& labels, const LossConfig& cfg);

void require_binary_labels(const Matrix& labels, const char* who);
void require_one_hot_labels(const Matrix& labels, const char* who);

}  // namespace kdx

#endif  // KDX_LOSSES_HPP
