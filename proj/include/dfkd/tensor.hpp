#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dfkd/common.hpp"
#include "dfkd/rng.hpp"

namespace dfkd {

// Dense row-major tensor of rank 1..4. Feature maps use NCHW order.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    DFKD_CHECK(!shape_.empty() && shape_.size() <= 4, "Tensor: rank must be 1..4");
    for (int d : shape_) DFKD_CHECK(d >= 1, "Tensor: dims must be positive, got " << shape_str());
    data_.assign(static_cast<std::size_t>(numel()), T(0));
  }

  Tensor(std::vector<int> shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    DFKD_CHECK(static_cast<std::int64_t>(data_.size()) == numel(),
               "Tensor: data size " << data_.size() << " does not match shape " << shape_str());
  }

  static Tensor scalar(T v) {
    Tensor t(std::vector<int>{1});
    t.data_[0] = v;
    return t;
  }

  static Tensor full(std::vector<int> shape, T v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  bool defined() const { return !shape_.empty(); }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  const std::vector<int>& shape() const { return shape_; }

  std::int64_t numel() const {
    std::int64_t n = shape_.empty() ? 0 : 1;
    for (int d : shape_) n *= d;
    return n;
  }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // NCHW accessor (rank-4 only).
  T& at(int n, int c, int h, int w) {
    return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at(int n, int c, int h, int w) const {
    return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  void fill_normal(Rng& rng, double mean, double stddev) {
    for (auto& x : data_) x = static_cast<T>(rng.normal(mean, stddev));
  }

  T sum() const {
    T s = T(0);
    for (const T& x : data_) s += x;
    return s;
  }

  T abs_max() const {
    T m = T(0);
    for (const T& x : data_) m = std::max(m, std::abs(x));
    return m;
  }

  bool all_finite() const {
    for (const T& x : data_)
      if (!std::isfinite(x)) return false;
    return true;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
    os << "]";
    return os.str();
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out = Tensor<U>(shape_);
    for (std::int64_t i = 0; i < numel(); ++i) out[i] = static_cast<U>(data_[static_cast<std::size_t>(i)]);
    return out;
  }

 private:
  std::vector<int> shape_;
  std::vector<T> data_;
};

template <typename T>
Tensor<T> reshaped(const Tensor<T>& t, std::vector<int> shape) {
  Tensor<T> out(std::move(shape));
  DFKD_CHECK(out.numel() == t.numel(), "reshape: numel mismatch " << t.shape_str() << " -> " << out.shape_str());
  std::copy(t.data(), t.data() + t.numel(), out.data());
  return out;
}

}  // namespace dfkd
