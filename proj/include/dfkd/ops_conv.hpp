#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "dfkd/autodiff.hpp"
#include "dfkd/blas.hpp"
#include "dfkd/common.hpp"
#include "dfkd/ops.hpp"
#include "dfkd/tensor.hpp"

// Convolution, transposed convolution, batch normalization, and 2x2 max
// pool/unpool. Convolutions run as im2col + GEMM per image; the transposed
// convolution reuses the same gather/scatter pair with the roles of the two
// grids swapped, which keeps forward and backward exactly adjoint.

namespace dfkd {
namespace ops {

namespace detail {

// cols[(c*k*k + kh*k + kw), s] = x[c, oh*stride + kh - pad, ow*stride + kw - pad]
// where s = oh*OW + ow and out-of-bounds reads are zero.
template <typename T>
void im2col(const T* x, int c, int h, int w, int k, int stride, int pad, int oh, int ow, T* cols) {
  const int sites = oh * ow;
  for (int ci = 0; ci < c; ++ci) {
    const T* xc = x + static_cast<std::int64_t>(ci) * h * w;
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        T* row = cols + (static_cast<std::int64_t>(ci) * k * k + kh * k + kw) * sites;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + kh - pad;
          T* dst = row + static_cast<std::int64_t>(oy) * ow;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + ow, T(0));
            continue;
          }
          const T* src = xc + static_cast<std::int64_t>(iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kw - pad;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

// Scatter-add adjoint of im2col: x[c, iy, ix] += cols[(c,kh,kw), s].
template <typename T>
void col2im(const T* cols, int c, int h, int w, int k, int stride, int pad, int oh, int ow, T* x) {
  const int sites = oh * ow;
  for (int ci = 0; ci < c; ++ci) {
    T* xc = x + static_cast<std::int64_t>(ci) * h * w;
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        const T* row = cols + (static_cast<std::int64_t>(ci) * k * k + kh * k + kw) * sites;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + kh - pad;
          if (iy < 0 || iy >= h) continue;
          T* dst = xc + static_cast<std::int64_t>(iy) * w;
          const T* src = row + static_cast<std::int64_t>(oy) * ow;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kw - pad;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

// (Co, Ci, k, k) -> (Co*k*k, Ci)
template <typename T>
void permute_weight_for_transpose(const Tensor<T>& w, Tensor<T>& wp) {
  const int co = w.dim(0), ci = w.dim(1), kk = w.dim(2) * w.dim(3);
  for (int o = 0; o < co; ++o)
    for (int i = 0; i < ci; ++i)
      for (int t = 0; t < kk; ++t)
        wp[(static_cast<std::int64_t>(o) * kk + t) * ci + i] = w[(static_cast<std::int64_t>(o) * ci + i) * kk + t];
}

}  // namespace detail

// 2D convolution; x: (N,Ci,H,W), w: (Co,Ci,k,k), optional bias (Co).
template <typename T>
Variable<T> conv2d(const Variable<T>& x, const Variable<T>& w, const Variable<T>& b, int stride, int pad) {
  DFKD_CHECK(x.value().rank() == 4 && w.value().rank() == 4, "conv2d: NCHW input and OIHW weight required");
  const int n = x.value().dim(0), ci = x.value().dim(1), h = x.value().dim(2), wd = x.value().dim(3);
  const int co = w.value().dim(0), k = w.value().dim(2);
  DFKD_CHECK(w.value().dim(1) == ci, "conv2d: weight expects " << w.value().dim(1) << " channels, got " << ci);
  DFKD_CHECK(w.value().dim(3) == k, "conv2d: square kernels only");
  DFKD_CHECK(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d: kernel larger than padded input");
  const int oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  const int sites = oh * ow, krows = ci * k * k;

  Tensor<T> y({n, co, oh, ow});
  std::vector<T> cols(static_cast<std::size_t>(krows) * sites);
  for (int i = 0; i < n; ++i) {
    detail::im2col(x.value().data() + static_cast<std::int64_t>(i) * ci * h * wd, ci, h, wd, k, stride, pad, oh, ow,
                   cols.data());
    gemm(false, false, co, sites, krows, T(1), w.value().data(), krows, cols.data(), sites, T(0),
         y.data() + static_cast<std::int64_t>(i) * co * sites, sites);
  }
  const bool has_bias = b.defined();
  if (has_bias) {
    DFKD_CHECK(b.value().rank() == 1 && b.value().dim(0) == co, "conv2d: bias shape");
    for (int i = 0; i < n; ++i)
      for (int o = 0; o < co; ++o) {
        T* ys = y.data() + (static_cast<std::int64_t>(i) * co + o) * sites;
        const T bv = b.value()[o];
        for (int s = 0; s < sites; ++s) ys[s] += bv;
      }
  }

  std::vector<Variable<T>> inputs = has_bias ? std::vector<Variable<T>>{x, w, b} : std::vector<Variable<T>>{x, w};
  auto xn = x.node(), wn = w.node();
  auto bn = has_bias ? b.node() : nullptr;
  return make_op<T>(std::move(y), inputs,
                    [xn, wn, bn, n, ci, h, wd, co, k, stride, pad, oh, ow, sites, krows](Node<T>& self) {
    const Tensor<T>& g = self.grad;
    std::vector<T> cols(static_cast<std::size_t>(krows) * sites);
    Tensor<T> gw, gx;
    if (wn->requires_grad) gw = Tensor<T>(wn->value.shape());
    if (xn->requires_grad) gx = Tensor<T>(xn->value.shape());
    for (int i = 0; i < n; ++i) {
      const T* gi = g.data() + static_cast<std::int64_t>(i) * co * sites;
      if (wn->requires_grad) {
        detail::im2col(xn->value.data() + static_cast<std::int64_t>(i) * ci * h * wd, ci, h, wd, k, stride, pad, oh,
                       ow, cols.data());
        gemm(false, true, co, krows, sites, T(1), gi, sites, cols.data(), sites, T(1), gw.data(), krows);
      }
      if (xn->requires_grad) {
        gemm(true, false, krows, sites, co, T(1), wn->value.data(), krows, gi, sites, T(0), cols.data(), sites);
        detail::col2im(cols.data(), ci, h, wd, k, stride, pad, oh, ow,
                       gx.data() + static_cast<std::int64_t>(i) * ci * h * wd);
      }
    }
    if (wn->requires_grad) accumulate_grad(*wn, gw);
    if (xn->requires_grad) accumulate_grad(*xn, gx);
    if (bn && bn->requires_grad) {
      Tensor<T> gb({co});
      for (int i = 0; i < n; ++i)
        for (int o = 0; o < co; ++o) {
          const T* gs = g.data() + (static_cast<std::int64_t>(i) * co + o) * sites;
          T s = T(0);
          for (int t = 0; t < sites; ++t) s += gs[t];
          gb[o] += s;
        }
      accumulate_grad(*bn, gb);
    }
  });
}

// Transposed 2D convolution; x: (N,Ci,H,W), w: (Co,Ci,k,k), output
// (N,Co,OH,OW) with OH = (H-1)*stride - 2*pad + k + out_pad.
template <typename T>
Variable<T> conv_transpose2d(const Variable<T>& x, const Variable<T>& w, const Variable<T>& b, int stride, int pad,
                             int out_pad) {
  DFKD_CHECK(x.value().rank() == 4 && w.value().rank() == 4, "conv_transpose2d: NCHW input and OIHW weight required");
  const int n = x.value().dim(0), ci = x.value().dim(1), h = x.value().dim(2), wd = x.value().dim(3);
  const int co = w.value().dim(0), k = w.value().dim(2);
  DFKD_CHECK(w.value().dim(1) == ci, "conv_transpose2d: weight expects " << w.value().dim(1) << " channels, got " << ci);
  DFKD_CHECK(out_pad >= 0 && out_pad < stride, "conv_transpose2d: out_pad must be in [0, stride)");
  const int oh = (h - 1) * stride - 2 * pad + k + out_pad;
  const int ow = (wd - 1) * stride - 2 * pad + k + out_pad;
  DFKD_CHECK(oh >= 1 && ow >= 1, "conv_transpose2d: empty output");
  const int sites = h * wd, krows = co * k * k;

  Tensor<T> wp({krows, ci});
  detail::permute_weight_for_transpose(w.value(), wp);

  Tensor<T> y({n, co, oh, ow});
  std::vector<T> cols(static_cast<std::size_t>(krows) * sites);
  for (int i = 0; i < n; ++i) {
    gemm(false, false, krows, sites, ci, T(1), wp.data(), ci,
         x.value().data() + static_cast<std::int64_t>(i) * ci * sites, sites, T(0), cols.data(), sites);
    detail::col2im(cols.data(), co, oh, ow, k, stride, pad, h, wd,
                   y.data() + static_cast<std::int64_t>(i) * co * oh * ow);
  }
  const bool has_bias = b.defined();
  if (has_bias) {
    DFKD_CHECK(b.value().rank() == 1 && b.value().dim(0) == co, "conv_transpose2d: bias shape");
    const int osites = oh * ow;
    for (int i = 0; i < n; ++i)
      for (int o = 0; o < co; ++o) {
        T* ys = y.data() + (static_cast<std::int64_t>(i) * co + o) * osites;
        const T bv = b.value()[o];
        for (int s = 0; s < osites; ++s) ys[s] += bv;
      }
  }

  std::vector<Variable<T>> inputs = has_bias ? std::vector<Variable<T>>{x, w, b} : std::vector<Variable<T>>{x, w};
  auto xn = x.node(), wn = w.node();
  auto bn = has_bias ? b.node() : nullptr;
  return make_op<T>(std::move(y), inputs,
                    [xn, wn, bn, n, ci, h, wd, co, k, stride, pad, oh, ow, sites, krows](Node<T>& self) {
    const Tensor<T>& g = self.grad;
    const int osites = oh * ow;
    std::vector<T> gcols(static_cast<std::size_t>(krows) * sites);
    Tensor<T> gwp, gx;
    if (wn->requires_grad) gwp = Tensor<T>({krows, ci});
    if (xn->requires_grad) gx = Tensor<T>(xn->value.shape());
    Tensor<T> wp({krows, ci});
    if (xn->requires_grad) detail::permute_weight_for_transpose(wn->value, wp);
    for (int i = 0; i < n; ++i) {
      detail::im2col(g.data() + static_cast<std::int64_t>(i) * co * osites, co, oh, ow, k, stride, pad, h, wd,
                     gcols.data());
      if (xn->requires_grad) {
        gemm(true, false, ci, sites, krows, T(1), wp.data(), ci, gcols.data(), sites, T(0),
             gx.data() + static_cast<std::int64_t>(i) * ci * sites, sites);
      }
      if (wn->requires_grad) {
        gemm(false, true, krows, ci, sites, T(1), gcols.data(), sites,
             xn->value.data() + static_cast<std::int64_t>(i) * ci * sites, sites, T(1), gwp.data(), ci);
      }
    }
    if (xn->requires_grad) accumulate_grad(*xn, gx);
    if (wn->requires_grad) {
      Tensor<T> gw(wn->value.shape());
      const int kk = k * k;
      for (int o = 0; o < co; ++o)
        for (int c2 = 0; c2 < ci; ++c2)
          for (int t = 0; t < kk; ++t)
            gw[(static_cast<std::int64_t>(o) * ci + c2) * kk + t] =
                gwp[(static_cast<std::int64_t>(o) * kk + t) * ci + c2];
      accumulate_grad(*wn, gw);
    }
    if (bn && bn->requires_grad) {
      Tensor<T> gb({co});
      for (int i = 0; i < n; ++i)
        for (int o = 0; o < co; ++o) {
          const T* gs = g.data() + (static_cast<std::int64_t>(i) * co + o) * osites;
          T s = T(0);
          for (int t = 0; t < osites; ++t) s += gs[t];
          gb[o] += s;
        }
      accumulate_grad(*bn, gb);
    }
  });
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

inline constexpr double kBnEps = 1e-5;

// Training mode: normalizes by batch statistics (biased variance) and updates
// the running estimates in place (unbiased variance, standard convention).
template <typename T>
Variable<T> batchnorm_train(const Variable<T>& x, const Variable<T>& gamma, const Variable<T>& beta,
                            Tensor<T>& running_mean, Tensor<T>& running_var, T momentum) {
  DFKD_CHECK(x.value().rank() == 4, "batchnorm: NCHW input required");
  const int n = x.value().dim(0), c = x.value().dim(1), hw = x.value().dim(2) * x.value().dim(3);
  const std::int64_t m = static_cast<std::int64_t>(n) * hw;
  DFKD_CHECK(m >= 2, "batchnorm: need at least 2 samples per channel");
  DFKD_CHECK(gamma.value().dim(0) == c && beta.value().dim(0) == c, "batchnorm: affine shape");

  Tensor<T> mu({c}), var({c});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      const T* xs = x.value().data() + (static_cast<std::int64_t>(i) * c + j) * hw;
      T s = T(0);
      for (int t = 0; t < hw; ++t) s += xs[t];
      mu[j] += s;
    }
  for (int j = 0; j < c; ++j) mu[j] /= static_cast<T>(m);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      const T* xs = x.value().data() + (static_cast<std::int64_t>(i) * c + j) * hw;
      T s = T(0);
      for (int t = 0; t < hw; ++t) {
        const T d = xs[t] - mu[j];
        s += d * d;
      }
      var[j] += s;
    }
  for (int j = 0; j < c; ++j) var[j] /= static_cast<T>(m);

  Tensor<T> invstd({c});
  for (int j = 0; j < c; ++j) invstd[j] = T(1) / std::sqrt(var[j] + static_cast<T>(kBnEps));

  Tensor<T> y(x.value().shape());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      const T* xs = x.value().data() + (static_cast<std::int64_t>(i) * c + j) * hw;
      T* ys = y.data() + (static_cast<std::int64_t>(i) * c + j) * hw;
      const T a = gamma.value()[j] * invstd[j];
      const T o = beta.value()[j] - a * mu[j];
      for (int t = 0; t < hw; ++t) ys[t] = a * xs[t] + o;
    }

  const T unbias = static_cast<T>(m) / static_cast<T>(m - 1);
  for (int j = 0; j < c; ++j) {
    running_mean[j] = (T(1) - momentum) * running_mean[j] + momentum * mu[j];
    running_var[j] = (T(1) - momentum) * running_var[j] + momentum * var[j] * unbias;
  }

  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return make_op<T>(std::move(y), {x, gamma, beta}, [xn, gn, bn, mu, invstd, n, c, hw, m](Node<T>& self) {
    const Tensor<T>& g = self.grad;
    Tensor<T> dgamma({c}), dbeta({c});
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < c; ++j) {
        const T* xs = xn->value.data() + (static_cast<std::int64_t>(i) * c + j) * hw;
        const T* gs = g.data() + (static_cast<std::int64_t>(i) * c + j) * hw;
        T sg = T(0), sgx = T(0);
        for (int t = 0; t < hw; ++t) {
          sg += gs[t];
          sgx += gs[t] * (xs[t] - mu[j]) * invstd[j];
        }
        dbeta[j] += sg;
        dgamma[j] += sgx;
      }
    if (xn->requires_grad) {
      Tensor<T> gx(xn->value.shape());
      const T invm = T(1) / static_cast<T>(m);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) {
          const T* xs = xn->value.data() + (static_cast<std::int64_t>(i) * c + j) * hw;
          const T* gs = g.data() + (static_cast<std::int64_t>(i) * c + j) * hw;
          T* out = gx.data() + (static_cast<std::int64_t>(i) * c + j) * hw;
          const T a = gn->value[j] * invstd[j];
          for (int t = 0; t < hw; ++t) {
            const T xhat = (xs[t] - mu[j]) * invstd[j];
            out[t] = a * (gs[t] - dbeta[j] * invm - xhat * dgamma[j] * invm);
          }
        }
      accumulate_grad(*xn, gx);
    }
    if (gn->requires_grad) accumulate_grad(*gn, dgamma);
    if (bn->requires_grad) accumulate_grad(*bn, dbeta);
  });
}

// Inference mode: normalizes by the provided running statistics. The stats
// are captured by value so later updates cannot leak into this op's backward.
template <typename T>
Variable<T> batchnorm_eval(const Variable<T>& x, const Variable<T>& gamma, const Variable<T>& beta,
                           const Tensor<T>& running_mean, const Tensor<T>& running_var) {
  DFKD_CHECK(x.value().rank() == 4, "batchnorm: NCHW input required");
  const int n = x.value().dim(0), c = x.value().dim(1), hw = x.value().dim(2) * x.value().dim(3);
  DFKD_CHECK(running_mean.dim(0) == c && running_var.dim(0) == c, "batchnorm: running stats shape");
  Tensor<T> mu = running_mean;
  Tensor<T> invstd({c});
  for (int j = 0; j < c; ++j) invstd[j] = T(1) / std::sqrt(running_var[j] + static_cast<T>(kBnEps));

  Tensor<T> y(x.value().shape());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      const T* xs = x.value().data() + (static_cast<std::int64_t>(i) * c + j) * hw;
      T* ys = y.data() + (static_cast<std::int64_t>(i) * c + j) * hw;
      const T a = gamma.value()[j] * invstd[j];
      const T o = beta.value()[j] - a * mu[j];
      for (int t = 0; t < hw; ++t) ys[t] = a * xs[t] + o;
    }

  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return make_op<T>(std::move(y), {x, gamma, beta}, [xn, gn, bn, mu, invstd, n, c, hw](Node<T>& self) {
    const Tensor<T>& g = self.grad;
    if (xn->requires_grad) {
      Tensor<T> gx(xn->value.shape());
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) {
          const T* gs = g.data() + (static_cast<std::int64_t>(i) * c + j) * hw;
          T* out = gx.data() + (static_cast<std::int64_t>(i) * c + j) * hw;
          const T a = gn->value[j] * invstd[j];
          for (int t = 0; t < hw; ++t) out[t] = a * gs[t];
        }
      accumulate_grad(*xn, gx);
    }
    if (gn->requires_grad || bn->requires_grad) {
      Tensor<T> dgamma({c}), dbeta({c});
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) {
          const T* xs = xn->value.data() + (static_cast<std::int64_t>(i) * c + j) * hw;
          const T* gs = g.data() + (static_cast<std::int64_t>(i) * c + j) * hw;
          T sg = T(0), sgx = T(0);
          for (int t = 0; t < hw; ++t) {
            sg += gs[t];
            sgx += gs[t] * (xs[t] - mu[j]) * invstd[j];
          }
          dbeta[j] += sg;
          dgamma[j] += sgx;
        }
      if (gn->requires_grad) accumulate_grad(*gn, dgamma);
      if (bn->requires_grad) accumulate_grad(*bn, dbeta);
    }
  });
}

// ---------------------------------------------------------------------------
// 2x2 max pool / unpool
// ---------------------------------------------------------------------------

template <typename T>
struct MaxPoolResult {
  Variable<T> values;                                   // (N,C,H/2,W/2)
  std::shared_ptr<std::vector<std::int32_t>> indices;   // flat h*W+w source site per output
};

template <typename T>
MaxPoolResult<T> maxpool2x2(const Variable<T>& x) {
  DFKD_CHECK(x.value().rank() == 4, "maxpool2x2: NCHW input required");
  const int n = x.value().dim(0), c = x.value().dim(1), h = x.value().dim(2), w = x.value().dim(3);
  DFKD_CHECK(h % 2 == 0 && w % 2 == 0 && h >= 2 && w >= 2, "maxpool2x2: spatial dims must be even and >= 2");
  const int oh = h / 2, ow = w / 2;
  Tensor<T> y({n, c, oh, ow});
  auto indices = std::make_shared<std::vector<std::int32_t>>(static_cast<std::size_t>(n) * c * oh * ow);
  std::int64_t oi = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      const T* xs = x.value().data() + (static_cast<std::int64_t>(i) * c + j) * h * w;
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox, ++oi) {
          T best = xs[(2 * oy) * w + 2 * ox];
          int arg = (2 * oy) * w + 2 * ox;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const int pos = (2 * oy + dy) * w + 2 * ox + dx;
              if (xs[pos] > best) {
                best = xs[pos];
                arg = pos;
              }
            }
          y[oi] = best;
          (*indices)[static_cast<std::size_t>(oi)] = arg;
        }
    }
  auto xn = x.node();
  Variable<T> out = make_op<T>(std::move(y), {x}, [xn, indices, n, c, oh, ow, h, w](Node<T>& self) {
    if (!xn->requires_grad) return;
    Tensor<T> gx(xn->value.shape());
    std::int64_t oi = 0;
    for (int i = 0; i < n * c; ++i) {
      T* gxs = gx.data() + static_cast<std::int64_t>(i) * h * w;
      for (int s = 0; s < oh * ow; ++s, ++oi) gxs[(*indices)[static_cast<std::size_t>(oi)]] += self.grad[oi];
    }
    accumulate_grad(*xn, gx);
  });
  return {out, indices};
}

// Places each pooled value back at its recorded argmax site; all other sites
// stay zero. (h, w) is the unpooled spatial size.
template <typename T>
Variable<T> maxunpool2x2(const Variable<T>& v, const std::shared_ptr<std::vector<std::int32_t>>& indices, int h,
                         int w) {
  DFKD_CHECK(v.value().rank() == 4, "maxunpool2x2: NCHW input required");
  const int n = v.value().dim(0), c = v.value().dim(1), oh = v.value().dim(2), ow = v.value().dim(3);
  DFKD_CHECK(h == 2 * oh && w == 2 * ow, "maxunpool2x2: target size must be exactly 2x the input");
  DFKD_CHECK(indices && static_cast<std::int64_t>(indices->size()) == v.value().numel(),
             "maxunpool2x2: indices do not match input");
  Tensor<T> y({n, c, h, w});
  std::int64_t oi = 0;
  for (int i = 0; i < n * c; ++i) {
    T* ys = y.data() + static_cast<std::int64_t>(i) * h * w;
    for (int s = 0; s < oh * ow; ++s, ++oi) {
      const std::int32_t pos = (*indices)[static_cast<std::size_t>(oi)];
      DFKD_CHECK(pos >= 0 && pos < h * w, "maxunpool2x2: index out of range");
      ys[pos] = v.value()[oi];
    }
  }
  auto vn = v.node();
  return make_op<T>(std::move(y), {v}, [vn, indices, n, c, oh, ow, h, w](Node<T>& self) {
    if (!vn->requires_grad) return;
    Tensor<T> gv(vn->value.shape());
    std::int64_t oi = 0;
    for (int i = 0; i < n * c; ++i) {
      const T* gs = self.grad.data() + static_cast<std::int64_t>(i) * h * w;
      for (int s = 0; s < oh * ow; ++s, ++oi) gv[oi] = gs[(*indices)[static_cast<std::size_t>(oi)]];
    }
    accumulate_grad(*vn, gv);
  });
}

}  // namespace ops
}  // namespace dfkd
