#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dfkd/autodiff.hpp"
#include "dfkd/common.hpp"
#include "dfkd/tensor.hpp"

namespace dfkd {

template <typename T>
inline void zero_grads(const std::vector<Variable<T>*>& params) {
  for (auto* p : params) p->zero_grad();
}

template <typename T>
inline void set_requires_grad(const std::vector<Variable<T>*>& params, bool v) {
  for (auto* p : params) p->set_requires_grad(v);
}

// Cosine annealing from lr0 down to 0 across `total` epochs.
inline double cosine_lr(double lr0, int epoch, int total) {
  DFKD_CHECK(total >= 1 && epoch >= 0, "cosine_lr: bad schedule position");
  return 0.5 * lr0 * (1.0 + std::cos(M_PI * static_cast<double>(epoch) / static_cast<double>(total)));
}

// SGD with momentum and decoupled-from-nothing weight decay folded into the
// gradient (the classical formulation).
template <typename T>
class Sgd {
 public:
  Sgd(std::vector<Variable<T>*> params, T lr, T momentum, T weight_decay)
      : params_(std::move(params)), lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
    buffers_.resize(params_.size());
  }

  void set_lr(T lr) { lr_ = lr; }
  T lr() const { return lr_; }

  void zero_grad() { zero_grads(params_); }

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Variable<T>& p = *params_[i];
      if (!p.has_grad()) continue;
      Tensor<T>& w = p.value();
      const Tensor<T>& g = p.grad();
      Tensor<T>& buf = buffers_[i];
      const bool first = !buf.defined();
      if (first) buf = Tensor<T>(w.shape());
      for (std::int64_t j = 0; j < w.numel(); ++j) {
        const T gj = g[j] + weight_decay_ * w[j];
        buf[j] = first ? gj : momentum_ * buf[j] + gj;
        w[j] -= lr_ * buf[j];
      }
    }
  }

  std::size_t size() const { return params_.size(); }
  Tensor<T>& momentum_buffer(std::size_t i) { return buffers_[i]; }

 private:
  std::vector<Variable<T>*> params_;
  std::vector<Tensor<T>> buffers_;
  T lr_, momentum_, weight_decay_;
};

template <typename T>
class Adam {
 public:
  Adam(std::vector<Variable<T>*> params, T lr, T beta1, T beta2, T eps = T(1e-8))
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.resize(params_.size());
    v_.resize(params_.size());
  }

  void set_lr(T lr) { lr_ = lr; }
  T lr() const { return lr_; }

  void zero_grad() { zero_grads(params_); }

  void step() {
    ++t_;
    const T bc1 = T(1) - std::pow(beta1_, static_cast<T>(t_));
    const T bc2 = T(1) - std::pow(beta2_, static_cast<T>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Variable<T>& p = *params_[i];
      if (!p.has_grad()) continue;
      Tensor<T>& w = p.value();
      const Tensor<T>& g = p.grad();
      if (!m_[i].defined()) {
        m_[i] = Tensor<T>(w.shape());
        v_[i] = Tensor<T>(w.shape());
      }
      for (std::int64_t j = 0; j < w.numel(); ++j) {
        m_[i][j] = beta1_ * m_[i][j] + (T(1) - beta1_) * g[j];
        v_[i][j] = beta2_ * v_[i][j] + (T(1) - beta2_) * g[j] * g[j];
        const T mhat = m_[i][j] / bc1;
        const T vhat = v_[i][j] / bc2;
        w[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  std::size_t size() const { return params_.size(); }
  std::int64_t step_count() const { return t_; }
  void set_step_count(std::int64_t t) { t_ = t; }
  Tensor<T>& m_buffer(std::size_t i) { return m_[i]; }
  Tensor<T>& v_buffer(std::size_t i) { return v_[i]; }

 private:
  std::vector<Variable<T>*> params_;
  std::vector<Tensor<T>> m_, v_;
  std::int64_t t_ = 0;
  T lr_, beta1_, beta2_, eps_;
};

}  // namespace dfkd
