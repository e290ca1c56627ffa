#pragma once

#include <string>
#include <vector>

#include "dfkd/nn.hpp"

// Mixed high-order attention: route r (r = 1..R) computes r independent 1x1
// convolutions of the input and multiplies them elementwise into an order-r
// interaction term, which passes through ReLU and a per-route 1x1 fuse
// convolution. The route outputs are summed and squashed by a sigmoid into a
// gating map that multiplies the original features.

namespace dfkd {

template <typename T>
struct MhaModule {
  int channels = 0;
  int order = 0;
  std::vector<std::vector<nn::Conv2d<T>>> route_convs;  // route_convs[r] has r+1 convs
  std::vector<nn::Conv2d<T>> fuse_convs;                // one per route

  MhaModule() = default;
  MhaModule(int c, int r, Rng& rng) : channels(c), order(r) {
    DFKD_CHECK(c >= 1 && r >= 1, "MhaModule: channels and order must be >= 1");
    for (int route = 0; route < r; ++route) {
      std::vector<nn::Conv2d<T>> convs;
      for (int i = 0; i <= route; ++i) convs.emplace_back(c, c, 1, 1, 0, true, rng);
      route_convs.push_back(std::move(convs));
      fuse_convs.emplace_back(c, c, 1, 1, 0, true, rng);
    }
  }

  Variable<T> attention(const Variable<T>& f) {
    DFKD_CHECK(f.value().rank() == 4 && f.value().dim(1) == channels,
               "mha_attention: expected " << channels << " channels, got " << f.value().shape_str());
    Variable<T> total;
    for (int route = 0; route < order; ++route) {
      Variable<T> prod = route_convs[static_cast<std::size_t>(route)][0].forward(f);
      for (int i = 1; i <= route; ++i)
        prod = ops::mul(prod, route_convs[static_cast<std::size_t>(route)][static_cast<std::size_t>(i)].forward(f));
      Variable<T> routed = fuse_convs[static_cast<std::size_t>(route)].forward(ops::relu(prod));
      total = total.defined() ? ops::add(total, routed) : routed;
    }
    return ops::sigmoid(total);
  }

  Variable<T> forward(const Variable<T>& f) { return mha_apply(f, attention(f)); }

  void register_into(nn::Registry<T>& reg, const std::string& p) {
    for (int route = 0; route < order; ++route) {
      for (int i = 0; i <= route; ++i)
        route_convs[static_cast<std::size_t>(route)][static_cast<std::size_t>(i)].register_into(
            reg, p + ".r" + std::to_string(route + 1) + ".conv" + std::to_string(i));
      fuse_convs[static_cast<std::size_t>(route)].register_into(reg, p + ".r" + std::to_string(route + 1) + ".fuse");
    }
  }
};

template <typename T>
Variable<T> mha_attention(MhaModule<T>& mha, const Variable<T>& f) {
  return mha.attention(f);
}

template <typename T>
Variable<T> mha_apply(const Variable<T>& f, const Variable<T>& a) {
  DFKD_CHECK(f.value().same_shape(a.value()),
             "mha_apply: shape mismatch " << f.value().shape_str() << " vs " << a.value().shape_str());
  return ops::mul(a, f);
}

// Sum over taps of the mean squared difference between teacher and
// (channel-adapted) student attention maps.
template <typename T>
Variable<T> mhad_loss(const std::vector<Variable<T>>& teacher_maps, const std::vector<Variable<T>>& student_maps) {
  DFKD_CHECK(!teacher_maps.empty(), "mhad_loss: no taps");
  DFKD_CHECK(teacher_maps.size() == student_maps.size(), "mhad_loss: tap count mismatch");
  Variable<T> total;
  for (std::size_t i = 0; i < teacher_maps.size(); ++i) {
    DFKD_CHECK(teacher_maps[i].value().same_shape(student_maps[i].value()),
               "mhad_loss: tap " << i << " shape mismatch " << teacher_maps[i].value().shape_str() << " vs "
                                 << student_maps[i].value().shape_str());
    Variable<T> diff = ops::sub(teacher_maps[i], student_maps[i]);
    Variable<T> tap = ops::mean_all(ops::mul(diff, diff));
    total = total.defined() ? ops::add(total, tap) : tap;
  }
  return total;
}

}  // namespace dfkd
