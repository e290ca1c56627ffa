#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dfkd/models.hpp"
#include "dfkd/ops.hpp"

#include "json.hpp"

// The four scalar objectives of the adversarial distillation game. The
// generator minimizes alpha*L_BN - L_KD (driving the student-teacher
// discrepancy up while staying near the teacher's activation statistics);
// the student minimizes L_KD + beta*L_MHAD + gamma*L_SFCL.

namespace dfkd {

struct Hyperparams {
  double alpha = 0.3;
  double beta = 10.0;
  double gamma = 8.0;
  double lambda = 5e-2;
  double tau = 0.07;
  int order = 3;          // MHA order R
  int gen_steps = 20;     // t
  int student_steps = 15; // k
  int batch = 64;         // N
  double lr_g = 1e-3;
  double beta1_g = 0.5;
  double beta2_g = 0.99;
  double lr_s = 1e-2;
  double momentum_s = 0.9;
  double weight_decay_s = 5e-4;
  int epochs = 200;
  std::uint64_t seed = 0;

  void validate() const {
    DFKD_CHECK(alpha >= 0 && beta >= 0 && gamma >= 0 && lambda >= 0, "Hyperparams: loss weights must be >= 0");
    DFKD_CHECK(tau > 0, "Hyperparams: tau must be positive");
    DFKD_CHECK(order >= 1 && order <= 3, "Hyperparams: order must be in {1,2,3}");
    DFKD_CHECK(gen_steps >= 1 && student_steps >= 1, "Hyperparams: step counts must be >= 1");
    DFKD_CHECK(batch >= 2, "Hyperparams: batch must be >= 2");
    DFKD_CHECK(epochs >= 1, "Hyperparams: epochs must be >= 1");
    DFKD_CHECK(lr_g > 0 && lr_s > 0, "Hyperparams: learning rates must be positive");
  }

  nlohmann::json to_json() const {
    return {{"alpha", alpha}, {"beta", beta}, {"gamma", gamma}, {"lambda", lambda}, {"tau", tau},
            {"order", order}, {"gen_steps", gen_steps}, {"student_steps", student_steps}, {"batch", batch},
            {"lr_g", lr_g}, {"beta1_g", beta1_g}, {"beta2_g", beta2_g}, {"lr_s", lr_s},
            {"momentum_s", momentum_s}, {"weight_decay_s", weight_decay_s}, {"epochs", epochs}, {"seed", seed}};
  }

  static Hyperparams from_json(const nlohmann::json& j) {
    Hyperparams h;
    h.alpha = j["alpha"]; h.beta = j["beta"]; h.gamma = j["gamma"]; h.lambda = j["lambda"]; h.tau = j["tau"];
    h.order = j["order"]; h.gen_steps = j["gen_steps"]; h.student_steps = j["student_steps"]; h.batch = j["batch"];
    h.lr_g = j["lr_g"]; h.beta1_g = j["beta1_g"]; h.beta2_g = j["beta2_g"]; h.lr_s = j["lr_s"];
    h.momentum_s = j["momentum_s"]; h.weight_decay_s = j["weight_decay_s"]; h.epochs = j["epochs"];
    h.seed = j["seed"].get<std::uint64_t>();
    return h;
  }
};

// Batch-mean KL divergence D_KL(softmax(student) || softmax(teacher)),
// student distribution first, softmax at temperature 1.
template <typename T>
Variable<T> kd_loss(const Variable<T>& student_logits, const Variable<T>& teacher_logits) {
  DFKD_CHECK(student_logits.value().same_shape(teacher_logits.value()),
             "kd_loss: shape mismatch " << student_logits.value().shape_str() << " vs "
                                        << teacher_logits.value().shape_str());
  DFKD_CHECK(student_logits.value().rank() == 2 && student_logits.value().dim(1) >= 2,
             "kd_loss: logits must be (N, K>=2)");
  Variable<T> lp_s = ops::log_softmax_rows(student_logits);
  Variable<T> lp_t = ops::log_softmax_rows(teacher_logits);
  Variable<T> kl_rows = ops::row_sum(ops::mul(ops::exp_op(lp_s), ops::sub(lp_s, lp_t)));
  return ops::mean_all(kl_rows);
}

template <typename T>
T kd_loss_value(const Tensor<T>& student_logits, const Tensor<T>& teacher_logits) {
  return kd_loss(Variable<T>::constant(student_logits), Variable<T>::constant(teacher_logits)).value()[0];
}

// Sum over layers of || mu_l - mu_l(G(z)) ||_2 + || var_l - var_l(G(z)) ||_2
// (unsquared Euclidean norms). Gradients flow into the batch statistics.
template <typename T>
Variable<T> bn_regularization(const std::vector<BnStatsVar<T>>& batch, const std::vector<BNLayerStats<T>>& running) {
  DFKD_CHECK(batch.size() == running.size() && !batch.empty(), "bn_regularization: layer list mismatch");
  Variable<T> total;
  for (std::size_t l = 0; l < batch.size(); ++l) {
    DFKD_CHECK(batch[l].layer_id == running[l].layer_id,
               "bn_regularization: layer order mismatch at " << l << " (" << batch[l].layer_id << " vs "
                                                             << running[l].layer_id << ")");
    Variable<T> dmu = ops::sub(Variable<T>::constant(running[l].mean), batch[l].mean);
    Variable<T> dvar = ops::sub(Variable<T>::constant(running[l].variance), batch[l].variance);
    Variable<T> term = ops::add(ops::l2_norm(dmu), ops::l2_norm(dvar));
    total = total.defined() ? ops::add(total, term) : term;
  }
  return total;
}

template <typename T>
T bn_regularization_value(const std::vector<BNLayerStats<T>>& batch, const std::vector<BNLayerStats<T>>& running) {
  std::vector<BnStatsVar<T>> wrapped;
  for (const auto& s : batch)
    wrapped.push_back({s.layer_id, Variable<T>::constant(s.mean), Variable<T>::constant(s.variance)});
  return bn_regularization(wrapped, running).value()[0];
}

inline double generator_objective(const Hyperparams& h, double l_bn, double l_kd) {
  DFKD_CHECK(std::isfinite(l_bn) && std::isfinite(l_kd), "generator_objective: non-finite inputs");
  return h.alpha * l_bn - l_kd;
}

template <typename T>
Variable<T> generator_objective(const Hyperparams& h, const Variable<T>& l_bn, const Variable<T>& l_kd) {
  DFKD_CHECK(std::isfinite(l_bn.value()[0]) && std::isfinite(l_kd.value()[0]),
             "generator_objective: non-finite inputs");
  return ops::sub(ops::scale(l_bn, static_cast<T>(h.alpha)), l_kd);
}

inline double student_objective(const Hyperparams& h, double l_kd, double l_mhad, double l_sfcl) {
  DFKD_CHECK(std::isfinite(l_kd) && std::isfinite(l_mhad) && std::isfinite(l_sfcl),
             "student_objective: non-finite inputs");
  return l_kd + h.beta * l_mhad + h.gamma * l_sfcl;
}

// Optional terms may be undefined when their weight is zero; they then
// contribute nothing to the graph.
template <typename T>
Variable<T> student_objective(const Hyperparams& h, const Variable<T>& l_kd, const Variable<T>& l_mhad,
                              const Variable<T>& l_sfcl) {
  DFKD_CHECK(std::isfinite(l_kd.value()[0]), "student_objective: non-finite inputs");
  Variable<T> total = l_kd;
  if (l_mhad.defined()) {
    DFKD_CHECK(std::isfinite(l_mhad.value()[0]), "student_objective: non-finite inputs");
    total = ops::add(total, ops::scale(l_mhad, static_cast<T>(h.beta)));
  }
  if (l_sfcl.defined()) {
    DFKD_CHECK(std::isfinite(l_sfcl.value()[0]), "student_objective: non-finite inputs");
    total = ops::add(total, ops::scale(l_sfcl, static_cast<T>(h.gamma)));
  }
  return total;
}

}  // namespace dfkd
