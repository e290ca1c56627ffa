#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "dfkd/autodiff.hpp"
#include "dfkd/blas.hpp"
#include "dfkd/common.hpp"
#include "dfkd/tensor.hpp"

// Differentiable operations on Variables. Backward closures capture parent
// nodes (shared ownership) plus whatever small aux data they need; they never
// capture their own node, so the tape stays acyclic.

namespace dfkd {
namespace ops {

namespace detail {

template <typename T>
void check_same_shape(const Variable<T>& a, const Variable<T>& b, const char* op) {
  DFKD_CHECK(a.value().same_shape(b.value()),
             op << ": shape mismatch " << a.value().shape_str() << " vs " << b.value().shape_str());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T, class Fwd, class Dfdx>
Variable<T> unary_elementwise(const Variable<T>& a, Fwd f, Dfdx dfdx) {
  const Tensor<T>& x = a.value();
  Tensor<T> y(x.shape());
  const std::int64_t m = x.numel();
  for (std::int64_t i = 0; i < m; ++i) y[i] = f(x[i]);
  auto an = a.node();
  return make_op<T>(std::move(y), {a}, [an, dfdx](Node<T>& self) {
    if (!an->requires_grad) return;
    Tensor<T> ga(an->value.shape());
    const std::int64_t n = ga.numel();
    for (std::int64_t i = 0; i < n; ++i) ga[i] = self.grad[i] * dfdx(an->value[i], self.value[i]);
    accumulate_grad(*an, ga);
  });
}

template <typename T>
Variable<T> relu(const Variable<T>& a) {
  return unary_elementwise(
      a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Variable<T> leaky_relu(const Variable<T>& a, T slope) {
  return unary_elementwise(
      a, [slope](T x) { return x > T(0) ? x : slope * x; },
      [slope](T x, T) { return x > T(0) ? T(1) : slope; });
}

template <typename T>
Variable<T> tanh_op(const Variable<T>& a) {
  return unary_elementwise(
      a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Variable<T> sigmoid(const Variable<T>& a) {
  return unary_elementwise(
      a, [](T x) { return T(1) / (T(1) + std::exp(-x)); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Variable<T> exp_op(const Variable<T>& a) {
  return unary_elementwise(
      a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Variable<T> log_op(const Variable<T>& a) {
  const Tensor<T>& x = a.value();
  for (std::int64_t i = 0; i < x.numel(); ++i) DFKD_REQUIRE(x[i] > T(0), "log: non-positive input");
  return unary_elementwise(
      a, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Variable<T> sqrt_op(const Variable<T>& a) {
  return unary_elementwise(
      a, [](T x) { return std::sqrt(x); }, [](T, T y) { return T(1) / (T(2) * y); });
}

template <typename T>
Variable<T> reciprocal(const Variable<T>& a) {
  const Tensor<T>& x = a.value();
  for (std::int64_t i = 0; i < x.numel(); ++i) DFKD_REQUIRE(x[i] != T(0), "reciprocal: zero input");
  return unary_elementwise(
      a, [](T v) { return T(1) / v; }, [](T, T y) { return -y * y; });
}

template <typename T>
Variable<T> add(const Variable<T>& a, const Variable<T>& b) {
  detail::check_same_shape(a, b, "add");
  Tensor<T> y(a.value().shape());
  const std::int64_t m = y.numel();
  for (std::int64_t i = 0; i < m; ++i) y[i] = a.value()[i] + b.value()[i];
  auto an = a.node(), bn = b.node();
  return make_op<T>(std::move(y), {a, b}, [an, bn](Node<T>& self) {
    if (an->requires_grad) accumulate_grad(*an, self.grad);
    if (bn->requires_grad) accumulate_grad(*bn, self.grad);
  });
}

template <typename T>
Variable<T> sub(const Variable<T>& a, const Variable<T>& b) {
  detail::check_same_shape(a, b, "sub");
  Tensor<T> y(a.value().shape());
  const std::int64_t m = y.numel();
  for (std::int64_t i = 0; i < m; ++i) y[i] = a.value()[i] - b.value()[i];
  auto an = a.node(), bn = b.node();
  return make_op<T>(std::move(y), {a, b}, [an, bn](Node<T>& self) {
    if (an->requires_grad) accumulate_grad(*an, self.grad);
    if (bn->requires_grad) {
      Tensor<T> gb(self.grad.shape());
      for (std::int64_t i = 0; i < gb.numel(); ++i) gb[i] = -self.grad[i];
      accumulate_grad(*bn, gb);
    }
  });
}

template <typename T>
Variable<T> mul(const Variable<T>& a, const Variable<T>& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor<T> y(a.value().shape());
  const std::int64_t m = y.numel();
  for (std::int64_t i = 0; i < m; ++i) y[i] = a.value()[i] * b.value()[i];
  auto an = a.node(), bn = b.node();
  return make_op<T>(std::move(y), {a, b}, [an, bn](Node<T>& self) {
    const std::int64_t n = self.grad.numel();
    if (an->requires_grad) {
      Tensor<T> ga(an->value.shape());
      for (std::int64_t i = 0; i < n; ++i) ga[i] = self.grad[i] * bn->value[i];
      accumulate_grad(*an, ga);
    }
    if (bn->requires_grad) {
      Tensor<T> gb(bn->value.shape());
      for (std::int64_t i = 0; i < n; ++i) gb[i] = self.grad[i] * an->value[i];
      accumulate_grad(*bn, gb);
    }
  });
}

template <typename T>
Variable<T> scale(const Variable<T>& a, T c) {
  return unary_elementwise(
      a, [c](T x) { return c * x; }, [c](T, T) { return c; });
}

template <typename T>
Variable<T> add_scalar(const Variable<T>& a, T c) {
  return unary_elementwise(
      a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

// y = a * s with s a scalar Variable.
template <typename T>
Variable<T> mul_by_scalar(const Variable<T>& a, const Variable<T>& s) {
  DFKD_CHECK(s.value().numel() == 1, "mul_by_scalar: multiplier must be scalar");
  const T sv = s.value()[0];
  Tensor<T> y(a.value().shape());
  const std::int64_t m = y.numel();
  for (std::int64_t i = 0; i < m; ++i) y[i] = a.value()[i] * sv;
  auto an = a.node(), sn = s.node();
  return make_op<T>(std::move(y), {a, s}, [an, sn, sv](Node<T>& self) {
    const std::int64_t n = self.grad.numel();
    if (an->requires_grad) {
      Tensor<T> ga(an->value.shape());
      for (std::int64_t i = 0; i < n; ++i) ga[i] = self.grad[i] * sv;
      accumulate_grad(*an, ga);
    }
    if (sn->requires_grad) {
      T gs = T(0);
      for (std::int64_t i = 0; i < n; ++i) gs += self.grad[i] * an->value[i];
      accumulate_grad(*sn, Tensor<T>::scalar(gs));
    }
  });
}

// y = a / s with s a scalar Variable (used for spectral weight normalization).
template <typename T>
Variable<T> div_by_scalar(const Variable<T>& a, const Variable<T>& s) {
  DFKD_CHECK(s.value().numel() == 1, "div_by_scalar: divisor must be scalar");
  const T sv = s.value()[0];
  DFKD_CHECK(sv != T(0), "div_by_scalar: zero divisor");
  Tensor<T> y(a.value().shape());
  const std::int64_t m = y.numel();
  for (std::int64_t i = 0; i < m; ++i) y[i] = a.value()[i] / sv;
  auto an = a.node(), sn = s.node();
  return make_op<T>(std::move(y), {a, s}, [an, sn, sv](Node<T>& self) {
    const std::int64_t n = self.grad.numel();
    if (an->requires_grad) {
      Tensor<T> ga(an->value.shape());
      for (std::int64_t i = 0; i < n; ++i) ga[i] = self.grad[i] / sv;
      accumulate_grad(*an, ga);
    }
    if (sn->requires_grad) {
      T gs = T(0);
      for (std::int64_t i = 0; i < n; ++i) gs -= self.grad[i] * self.value[i];
      accumulate_grad(*sn, Tensor<T>::scalar(gs / sv));
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and shape
// ---------------------------------------------------------------------------

template <typename T>
Variable<T> sum_all(const Variable<T>& a) {
  auto an = a.node();
  return make_op<T>(Tensor<T>::scalar(a.value().sum()), {a}, [an](Node<T>& self) {
    if (!an->requires_grad) return;
    accumulate_grad(*an, Tensor<T>::full(an->value.shape(), self.grad[0]));
  });
}

template <typename T>
Variable<T> mean_all(const Variable<T>& a) {
  const T inv = T(1) / static_cast<T>(a.value().numel());
  auto an = a.node();
  return make_op<T>(Tensor<T>::scalar(a.value().sum() * inv), {a}, [an, inv](Node<T>& self) {
    if (!an->requires_grad) return;
    accumulate_grad(*an, Tensor<T>::full(an->value.shape(), self.grad[0] * inv));
  });
}

template <typename T>
Variable<T> reshape(const Variable<T>& a, std::vector<int> shape) {
  Tensor<T> y = reshaped(a.value(), std::move(shape));
  auto an = a.node();
  return make_op<T>(std::move(y), {a}, [an](Node<T>& self) {
    if (!an->requires_grad) return;
    accumulate_grad(*an, reshaped(self.grad, an->value.shape()));
  });
}

// Row-wise sum of a rank-2 tensor: (N, E) -> (N).
template <typename T>
Variable<T> row_sum(const Variable<T>& a) {
  DFKD_CHECK(a.value().rank() == 2, "row_sum: rank-2 input required");
  const int n = a.value().dim(0), e = a.value().dim(1);
  Tensor<T> y({n});
  for (int i = 0; i < n; ++i) {
    T s = T(0);
    for (int j = 0; j < e; ++j) s += a.value()[static_cast<std::int64_t>(i) * e + j];
    y[i] = s;
  }
  auto an = a.node();
  return make_op<T>(std::move(y), {a}, [an, n, e](Node<T>& self) {
    if (!an->requires_grad) return;
    Tensor<T> ga(an->value.shape());
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < e; ++j) ga[static_cast<std::int64_t>(i) * e + j] = self.grad[i];
    accumulate_grad(*an, ga);
  });
}

// y[i, j] = a[i, j] * s[i].
template <typename T>
Variable<T> rows_scale(const Variable<T>& a, const Variable<T>& s) {
  DFKD_CHECK(a.value().rank() == 2 && s.value().rank() == 1 && a.value().dim(0) == s.value().dim(0),
             "rows_scale: need (N,E) and (N)");
  const int n = a.value().dim(0), e = a.value().dim(1);
  Tensor<T> y(a.value().shape());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < e; ++j) y[static_cast<std::int64_t>(i) * e + j] = a.value()[static_cast<std::int64_t>(i) * e + j] * s.value()[i];
  auto an = a.node(), sn = s.node();
  return make_op<T>(std::move(y), {a, s}, [an, sn, n, e](Node<T>& self) {
    if (an->requires_grad) {
      Tensor<T> ga(an->value.shape());
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < e; ++j)
          ga[static_cast<std::int64_t>(i) * e + j] = self.grad[static_cast<std::int64_t>(i) * e + j] * sn->value[i];
      accumulate_grad(*an, ga);
    }
    if (sn->requires_grad) {
      Tensor<T> gs({n});
      for (int i = 0; i < n; ++i) {
        T acc = T(0);
        for (int j = 0; j < e; ++j)
          acc += self.grad[static_cast<std::int64_t>(i) * e + j] * an->value[static_cast<std::int64_t>(i) * e + j];
        gs[i] = acc;
      }
      accumulate_grad(*sn, gs);
    }
  });
}

template <typename T>
Variable<T> concat_rows(const Variable<T>& a, const Variable<T>& b) {
  DFKD_CHECK(a.value().rank() == 2 && b.value().rank() == 2 && a.value().dim(1) == b.value().dim(1),
             "concat_rows: need matching column counts");
  const int na = a.value().dim(0), nb = b.value().dim(0), e = a.value().dim(1);
  Tensor<T> y({na + nb, e});
  std::copy(a.value().data(), a.value().data() + a.value().numel(), y.data());
  std::copy(b.value().data(), b.value().data() + b.value().numel(), y.data() + a.value().numel());
  auto an = a.node(), bn = b.node();
  return make_op<T>(std::move(y), {a, b}, [an, bn, na, nb, e](Node<T>& self) {
    if (an->requires_grad) {
      Tensor<T> ga({na, e});
      std::copy(self.grad.data(), self.grad.data() + ga.numel(), ga.data());
      accumulate_grad(*an, ga);
    }
    if (bn->requires_grad) {
      Tensor<T> gb({nb, e});
      std::copy(self.grad.data() + static_cast<std::int64_t>(na) * e, self.grad.data() + self.grad.numel(), gb.data());
      accumulate_grad(*bn, gb);
    }
  });
}

// y[i] = a[i, idx[i]].
template <typename T>
Variable<T> gather_cols(const Variable<T>& a, std::vector<int> idx) {
  DFKD_CHECK(a.value().rank() == 2, "gather_cols: rank-2 input required");
  const int n = a.value().dim(0), k = a.value().dim(1);
  DFKD_CHECK(static_cast<int>(idx.size()) == n, "gather_cols: index count mismatch");
  Tensor<T> y({n});
  for (int i = 0; i < n; ++i) {
    DFKD_CHECK(idx[i] >= 0 && idx[i] < k, "gather_cols: index out of range");
    y[i] = a.value()[static_cast<std::int64_t>(i) * k + idx[i]];
  }
  auto an = a.node();
  return make_op<T>(std::move(y), {a}, [an, idx = std::move(idx), n, k](Node<T>& self) {
    if (!an->requires_grad) return;
    Tensor<T> ga(an->value.shape());
    for (int i = 0; i < n; ++i) ga[static_cast<std::int64_t>(i) * k + idx[i]] = self.grad[i];
    accumulate_grad(*an, ga);
  });
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

template <typename T>
Variable<T> matmul(const Variable<T>& a, const Variable<T>& b, bool trans_a = false, bool trans_b = false) {
  DFKD_CHECK(a.value().rank() == 2 && b.value().rank() == 2, "matmul: rank-2 inputs required");
  const int m = trans_a ? a.value().dim(1) : a.value().dim(0);
  const int ka = trans_a ? a.value().dim(0) : a.value().dim(1);
  const int kb = trans_b ? b.value().dim(1) : b.value().dim(0);
  const int n = trans_b ? b.value().dim(0) : b.value().dim(1);
  DFKD_CHECK(ka == kb, "matmul: inner dims " << ka << " vs " << kb);
  Tensor<T> y({m, n});
  gemm(trans_a, trans_b, m, n, ka, T(1), a.value().data(), a.value().dim(1), b.value().data(), b.value().dim(1),
       T(0), y.data(), n);
  auto an = a.node(), bn = b.node();
  return make_op<T>(std::move(y), {a, b}, [an, bn, trans_a, trans_b, m, n, ka](Node<T>& self) {
    const Tensor<T>& g = self.grad;
    if (an->requires_grad) {
      Tensor<T> ga(an->value.shape());
      if (!trans_a) {
        // gA = g * op(B)^T
        gemm(false, !trans_b, m, ka, n, T(1), g.data(), n, bn->value.data(), bn->value.dim(1), T(0), ga.data(), ka);
      } else {
        // A stored (K, M): gA = op(B) * g^T
        gemm(trans_b, true, ka, m, n, T(1), bn->value.data(), bn->value.dim(1), g.data(), n, T(0), ga.data(), m);
      }
      accumulate_grad(*an, ga);
    }
    if (bn->requires_grad) {
      Tensor<T> gb(bn->value.shape());
      if (!trans_b) {
        // gB = op(A)^T * g
        gemm(!trans_a, false, ka, n, m, T(1), an->value.data(), an->value.dim(1), g.data(), n, T(0), gb.data(), n);
      } else {
        // B stored (N, K): gB = g^T * op(A)
        gemm(true, trans_a, n, ka, m, T(1), g.data(), n, an->value.data(), an->value.dim(1), T(0), gb.data(), ka);
      }
      accumulate_grad(*bn, gb);
    }
  });
}

// y = x * W^T + b; x: (N, D), W: (O, D), b: (O) or undefined.
template <typename T>
Variable<T> linear(const Variable<T>& x, const Variable<T>& w, const Variable<T>& b) {
  DFKD_CHECK(x.value().rank() == 2 && w.value().rank() == 2, "linear: rank-2 x and W required");
  const int n = x.value().dim(0), d = x.value().dim(1), o = w.value().dim(0);
  DFKD_CHECK(w.value().dim(1) == d, "linear: W dims " << w.value().shape_str() << " vs input D=" << d);
  Tensor<T> y({n, o});
  gemm(false, true, n, o, d, T(1), x.value().data(), d, w.value().data(), d, T(0), y.data(), o);
  const bool has_bias = b.defined();
  if (has_bias) {
    DFKD_CHECK(b.value().rank() == 1 && b.value().dim(0) == o, "linear: bias shape");
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < o; ++j) y[static_cast<std::int64_t>(i) * o + j] += b.value()[j];
  }
  std::vector<Variable<T>> inputs = has_bias ? std::vector<Variable<T>>{x, w, b} : std::vector<Variable<T>>{x, w};
  auto xn = x.node(), wn = w.node();
  auto bnode = has_bias ? b.node() : nullptr;
  return make_op<T>(std::move(y), inputs, [xn, wn, bnode, n, d, o](Node<T>& self) {
    const Tensor<T>& g = self.grad;
    if (xn->requires_grad) {
      Tensor<T> gx({n, d});
      gemm(false, false, n, d, o, T(1), g.data(), o, wn->value.data(), d, T(0), gx.data(), d);
      accumulate_grad(*xn, gx);
    }
    if (wn->requires_grad) {
      Tensor<T> gw({o, d});
      gemm(true, false, o, d, n, T(1), g.data(), o, xn->value.data(), d, T(0), gw.data(), d);
      accumulate_grad(*wn, gw);
    }
    if (bnode && bnode->requires_grad) {
      Tensor<T> gb({o});
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < o; ++j) gb[j] += g[static_cast<std::int64_t>(i) * o + j];
      accumulate_grad(*bnode, gb);
    }
  });
}

// ---------------------------------------------------------------------------
// Norms and bilinear forms
// ---------------------------------------------------------------------------

// Euclidean norm of a rank-1 tensor. Subgradient 0 at the origin.
template <typename T>
Variable<T> l2_norm(const Variable<T>& a) {
  DFKD_CHECK(a.value().rank() == 1, "l2_norm: rank-1 input required");
  T s = T(0);
  for (std::int64_t i = 0; i < a.value().numel(); ++i) s += a.value()[i] * a.value()[i];
  const T norm = std::sqrt(s);
  auto an = a.node();
  return make_op<T>(Tensor<T>::scalar(norm), {a}, [an, norm](Node<T>& self) {
    if (!an->requires_grad) return;
    Tensor<T> ga(an->value.shape());
    if (norm > T(0)) {
      const T c = self.grad[0] / norm;
      for (std::int64_t i = 0; i < ga.numel(); ++i) ga[i] = c * an->value[i];
    }
    accumulate_grad(*an, ga);
  });
}

// sigma = u^T * mat(W) * v with u, v fixed; mat(W) is W viewed as
// (dim0) x (numel/dim0). Gradient: dW = g * u v^T.
template <typename T>
Variable<T> sigma_bilinear(const Variable<T>& w, const Tensor<T>& u, const Tensor<T>& v) {
  const int m = w.value().dim(0);
  const std::int64_t k = w.value().numel() / m;
  DFKD_CHECK(u.numel() == m && v.numel() == k, "sigma_bilinear: vector sizes");
  T sigma = T(0);
  for (int i = 0; i < m; ++i) {
    T row = T(0);
    const T* wr = w.value().data() + static_cast<std::int64_t>(i) * k;
    for (std::int64_t j = 0; j < k; ++j) row += wr[j] * v[j];
    sigma += u[i] * row;
  }
  auto wn = w.node();
  return make_op<T>(Tensor<T>::scalar(sigma), {w}, [wn, u, v, m, k](Node<T>& self) {
    if (!wn->requires_grad) return;
    Tensor<T> gw(wn->value.shape());
    const T g = self.grad[0];
    for (int i = 0; i < m; ++i) {
      T* gr = gw.data() + static_cast<std::int64_t>(i) * k;
      const T gu = g * u[i];
      for (std::int64_t j = 0; j < k; ++j) gr[j] = gu * v[j];
    }
    accumulate_grad(*wn, gw);
  });
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

// Softmax over the flattened H*W sites, independently per (n, c) slice.
template <typename T>
Variable<T> softmax_spatial(const Variable<T>& a) {
  DFKD_CHECK(a.value().rank() == 4, "softmax_spatial: NCHW input required");
  const int n = a.value().dim(0), c = a.value().dim(1), hw = a.value().dim(2) * a.value().dim(3);
  Tensor<T> y(a.value().shape());
  for (int i = 0; i < n * c; ++i) {
    const T* xs = a.value().data() + static_cast<std::int64_t>(i) * hw;
    T* ys = y.data() + static_cast<std::int64_t>(i) * hw;
    T mx = xs[0];
    for (int s = 1; s < hw; ++s) mx = std::max(mx, xs[s]);
    T sum = T(0);
    for (int s = 0; s < hw; ++s) {
      ys[s] = std::exp(xs[s] - mx);
      sum += ys[s];
    }
    const T inv = T(1) / sum;
    for (int s = 0; s < hw; ++s) ys[s] *= inv;
  }
  auto an = a.node();
  return make_op<T>(std::move(y), {a}, [an, n, c, hw](Node<T>& self) {
    if (!an->requires_grad) return;
    Tensor<T> ga(an->value.shape());
    for (int i = 0; i < n * c; ++i) {
      const T* ys = self.value.data() + static_cast<std::int64_t>(i) * hw;
      const T* gs = self.grad.data() + static_cast<std::int64_t>(i) * hw;
      T* out = ga.data() + static_cast<std::int64_t>(i) * hw;
      T dot = T(0);
      for (int s = 0; s < hw; ++s) dot += gs[s] * ys[s];
      for (int s = 0; s < hw; ++s) out[s] = ys[s] * (gs[s] - dot);
    }
    accumulate_grad(*an, ga);
  });
}

// Row-wise log-softmax of a rank-2 tensor (N, K).
template <typename T>
Variable<T> log_softmax_rows(const Variable<T>& a) {
  DFKD_CHECK(a.value().rank() == 2, "log_softmax_rows: rank-2 input required");
  const int n = a.value().dim(0), k = a.value().dim(1);
  Tensor<T> y(a.value().shape());
  for (int i = 0; i < n; ++i) {
    const T* xs = a.value().data() + static_cast<std::int64_t>(i) * k;
    T* ys = y.data() + static_cast<std::int64_t>(i) * k;
    T mx = xs[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, xs[j]);
    T sum = T(0);
    for (int j = 0; j < k; ++j) sum += std::exp(xs[j] - mx);
    const T lse = mx + std::log(sum);
    for (int j = 0; j < k; ++j) ys[j] = xs[j] - lse;
  }
  auto an = a.node();
  return make_op<T>(std::move(y), {a}, [an, n, k](Node<T>& self) {
    if (!an->requires_grad) return;
    Tensor<T> ga(an->value.shape());
    for (int i = 0; i < n; ++i) {
      const T* ys = self.value.data() + static_cast<std::int64_t>(i) * k;
      const T* gs = self.grad.data() + static_cast<std::int64_t>(i) * k;
      T* out = ga.data() + static_cast<std::int64_t>(i) * k;
      T gsum = T(0);
      for (int j = 0; j < k; ++j) gsum += gs[j];
      for (int j = 0; j < k; ++j) out[j] = gs[j] - std::exp(ys[j]) * gsum;
    }
    accumulate_grad(*an, ga);
  });
}

// ---------------------------------------------------------------------------
// Channel reductions (NCHW)
// ---------------------------------------------------------------------------

// Per-channel mean over (N, H, W): (N,C,H,W) -> (C).
template <typename T>
Variable<T> channel_mean(const Variable<T>& a) {
  DFKD_CHECK(a.value().rank() == 4, "channel_mean: NCHW input required");
  const int n = a.value().dim(0), c = a.value().dim(1), hw = a.value().dim(2) * a.value().dim(3);
  Tensor<T> y({c});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      const T* xs = a.value().data() + (static_cast<std::int64_t>(i) * c + j) * hw;
      T s = T(0);
      for (int t = 0; t < hw; ++t) s += xs[t];
      y[j] += s;
    }
  const T inv = T(1) / static_cast<T>(n * hw);
  for (int j = 0; j < c; ++j) y[j] *= inv;
  auto an = a.node();
  return make_op<T>(std::move(y), {a}, [an, n, c, hw, inv](Node<T>& self) {
    if (!an->requires_grad) return;
    Tensor<T> ga(an->value.shape());
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < c; ++j) {
        T* out = ga.data() + (static_cast<std::int64_t>(i) * c + j) * hw;
        const T g = self.grad[j] * inv;
        for (int t = 0; t < hw; ++t) out[t] = g;
      }
    accumulate_grad(*an, ga);
  });
}

// Broadcast a per-channel vector to NCHW.
template <typename T>
Variable<T> broadcast_channel(const Variable<T>& v, int n, int h, int w) {
  DFKD_CHECK(v.value().rank() == 1, "broadcast_channel: rank-1 input required");
  const int c = v.value().dim(0), hw = h * w;
  Tensor<T> y({n, c, h, w});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      T* ys = y.data() + (static_cast<std::int64_t>(i) * c + j) * hw;
      std::fill(ys, ys + hw, v.value()[j]);
    }
  auto vn = v.node();
  return make_op<T>(std::move(y), {v}, [vn, n, c, hw](Node<T>& self) {
    if (!vn->requires_grad) return;
    Tensor<T> gv({c});
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < c; ++j) {
        const T* gs = self.grad.data() + (static_cast<std::int64_t>(i) * c + j) * hw;
        T s = T(0);
        for (int t = 0; t < hw; ++t) s += gs[t];
        gv[j] += s;
      }
    accumulate_grad(*vn, gv);
  });
}

// Global average pool: (N,C,H,W) -> (N,C).
template <typename T>
Variable<T> global_avg_pool(const Variable<T>& a) {
  DFKD_CHECK(a.value().rank() == 4, "global_avg_pool: NCHW input required");
  const int n = a.value().dim(0), c = a.value().dim(1), hw = a.value().dim(2) * a.value().dim(3);
  const T inv = T(1) / static_cast<T>(hw);
  Tensor<T> y({n, c});
  for (int i = 0; i < n * c; ++i) {
    const T* xs = a.value().data() + static_cast<std::int64_t>(i) * hw;
    T s = T(0);
    for (int t = 0; t < hw; ++t) s += xs[t];
    y[i] = s * inv;
  }
  auto an = a.node();
  return make_op<T>(std::move(y), {a}, [an, n, c, hw, inv](Node<T>& self) {
    if (!an->requires_grad) return;
    Tensor<T> ga(an->value.shape());
    for (int i = 0; i < n * c; ++i) {
      T* out = ga.data() + static_cast<std::int64_t>(i) * hw;
      const T g = self.grad[i] * inv;
      for (int t = 0; t < hw; ++t) out[t] = g;
    }
    accumulate_grad(*an, ga);
  });
}

}  // namespace ops
}  // namespace dfkd
