#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "dfkd/autodiff.hpp"
#include "dfkd/ops.hpp"
#include "dfkd/ops_conv.hpp"
#include "dfkd/rng.hpp"
#include "dfkd/tensor.hpp"

// Layer primitives shared by the classifier, generator, attention modules and
// projection heads. Modules register their parameters and buffers by name so
// optimizers, checkpoints and checksums all walk the same ordered registry.

namespace dfkd {
namespace nn {

enum class Mode { kTrain, kEval };

template <typename T>
struct Registry {
  std::vector<std::pair<std::string, Variable<T>*>> params;
  std::vector<std::pair<std::string, Tensor<T>*>> buffers;

  void add_param(const std::string& name, Variable<T>* p) { params.emplace_back(name, p); }
  void add_buffer(const std::string& name, Tensor<T>* b) { buffers.emplace_back(name, b); }

  std::vector<Variable<T>*> param_ptrs() const {
    std::vector<Variable<T>*> out;
    out.reserve(params.size());
    for (const auto& [_, p] : params) out.push_back(p);
    return out;
  }
};

template <typename T>
Variable<T> make_param(std::vector<int> shape) {
  return Variable<T>::leaf(Tensor<T>(std::move(shape)), /*requires_grad=*/true);
}

template <typename T>
void he_normal(Rng& rng, Tensor<T>& w, int fan_in) {
  w.fill_normal(rng, 0.0, std::sqrt(2.0 / fan_in));
}

template <typename T>
struct Conv2d {
  Variable<T> weight, bias;
  int stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(int in_ch, int out_ch, int k, int stride_, int pad_, bool with_bias, Rng& rng, double init_std = 0.0)
      : stride(stride_), pad(pad_) {
    weight = make_param<T>({out_ch, in_ch, k, k});
    if (init_std > 0.0)
      weight.value().fill_normal(rng, 0.0, init_std);
    else
      he_normal(rng, weight.value(), in_ch * k * k);
    if (with_bias) bias = make_param<T>({out_ch});
  }

  Variable<T> forward(const Variable<T>& x) const { return ops::conv2d(x, weight, bias, stride, pad); }

  void register_into(Registry<T>& reg, const std::string& prefix) {
    reg.add_param(prefix + ".w", &weight);
    if (bias.defined()) reg.add_param(prefix + ".b", &bias);
  }
};

template <typename T>
struct ConvTranspose2d {
  Variable<T> weight, bias;
  int stride = 1, pad = 0, out_pad = 0;

  ConvTranspose2d() = default;
  ConvTranspose2d(int in_ch, int out_ch, int k, int stride_, int pad_, int out_pad_, bool with_bias, Rng& rng,
                  double init_std = 0.0)
      : stride(stride_), pad(pad_), out_pad(out_pad_) {
    weight = make_param<T>({out_ch, in_ch, k, k});
    if (init_std > 0.0)
      weight.value().fill_normal(rng, 0.0, init_std);
    else
      he_normal(rng, weight.value(), in_ch * k * k);
    if (with_bias) bias = make_param<T>({out_ch});
  }

  Variable<T> forward(const Variable<T>& x) const {
    return ops::conv_transpose2d(x, weight, bias, stride, pad, out_pad);
  }

  void register_into(Registry<T>& reg, const std::string& prefix) {
    reg.add_param(prefix + ".w", &weight);
    if (bias.defined()) reg.add_param(prefix + ".b", &bias);
  }
};

template <typename T>
struct BatchNorm2d {
  Variable<T> gamma, beta;
  Tensor<T> running_mean, running_var;
  T momentum = T(0.1);

  BatchNorm2d() = default;
  explicit BatchNorm2d(int channels) {
    gamma = Variable<T>::leaf(Tensor<T>::full({channels}, T(1)), true);
    beta = make_param<T>({channels});
    running_mean = Tensor<T>({channels});
    running_var = Tensor<T>::full({channels}, T(1));
  }

  Variable<T> forward(const Variable<T>& x, Mode mode) {
    if (mode == Mode::kTrain) return ops::batchnorm_train(x, gamma, beta, running_mean, running_var, momentum);
    return ops::batchnorm_eval(x, gamma, beta, running_mean, running_var);
  }

  void register_into(Registry<T>& reg, const std::string& prefix) {
    reg.add_param(prefix + ".gamma", &gamma);
    reg.add_param(prefix + ".beta", &beta);
    reg.add_buffer(prefix + ".running_mean", &running_mean);
    reg.add_buffer(prefix + ".running_var", &running_var);
  }
};

template <typename T>
struct Linear {
  Variable<T> weight, bias;

  Linear() = default;
  Linear(int in_dim, int out_dim, Rng& rng, bool zero_init = false) {
    weight = make_param<T>({out_dim, in_dim});
    if (!zero_init) he_normal(rng, weight.value(), in_dim);
    bias = make_param<T>({out_dim});
  }

  Variable<T> forward(const Variable<T>& x) const { return ops::linear(x, weight, bias); }

  void register_into(Registry<T>& reg, const std::string& prefix) {
    reg.add_param(prefix + ".w", &weight);
    reg.add_param(prefix + ".b", &bias);
  }
};

}  // namespace nn
}  // namespace dfkd
