#pragma once

#include <cmath>
#include <string>

#include "dfkd/nn.hpp"

// Semantic feature contrast: penultimate features of teacher and student are
// mapped by two-hidden-layer MLPs into a shared space and L2-normalized onto
// the unit hypersphere. The NT-Xent-style loss treats the teacher and student
// views of the same synthetic image as the positive pair and every other
// embedding in the pooled 2N set as a negative; anchors run in both
// directions.

namespace dfkd {

template <typename T>
struct EmbeddingBatch {
  Variable<T> vectors;  // (N, E), rows unit-norm

  int size() const { return vectors.value().dim(0); }
  int dim() const { return vectors.value().dim(1); }
};

template <typename T>
struct ProjectionHead {
  nn::Linear<T> fc1, fc2;  // D -> D -> E
  int in_dim = 0, out_dim = 0;

  ProjectionHead() = default;
  ProjectionHead(int d, int e, Rng& rng) : in_dim(d), out_dim(e) {
    fc1 = nn::Linear<T>(d, d, rng);
    fc2 = nn::Linear<T>(d, e, rng);
  }

  EmbeddingBatch<T> project(const Variable<T>& penultimate) {
    DFKD_CHECK(penultimate.value().rank() == 2 && penultimate.value().dim(1) == in_dim,
               "project: expected (N," << in_dim << "), got " << penultimate.value().shape_str());
    Variable<T> y = fc2.forward(ops::relu(fc1.forward(penultimate)));
    Variable<T> sq_norms = ops::row_sum(ops::mul(y, y));
    for (std::int64_t i = 0; i < sq_norms.value().numel(); ++i)
      DFKD_CHECK(std::sqrt(static_cast<double>(sq_norms.value()[i])) >= 1e-12,
                 "project: row " << i << " has near-zero norm before normalization");
    Variable<T> inv_norms = ops::reciprocal(ops::sqrt_op(sq_norms));
    return {ops::rows_scale(y, inv_norms)};
  }

  void register_into(nn::Registry<T>& reg, const std::string& p) {
    fc1.register_into(reg, p + ".fc1");
    fc2.register_into(reg, p + ".fc2");
  }
};

// Entry (i, j) is the cosine of the angle between row i of A and row j of B
// (rows are unit-norm, so the dot product is the cosine).
template <typename T>
Variable<T> pairwise_cosine(const EmbeddingBatch<T>& a, const EmbeddingBatch<T>& b) {
  DFKD_CHECK(a.dim() == b.dim(), "pairwise_cosine: dim mismatch " << a.dim() << " vs " << b.dim());
  return ops::matmul(a.vectors, b.vectors, false, true);
}

template <typename T>
Variable<T> sfcl_loss(const EmbeddingBatch<T>& f_t, const EmbeddingBatch<T>& f_s, T tau) {
  DFKD_CHECK(tau > T(0), "sfcl_loss: tau must be positive");
  DFKD_CHECK(f_t.size() == f_s.size() && f_t.size() >= 1, "sfcl_loss: batch sizes must match and be >= 1");
  DFKD_CHECK(f_t.dim() == f_s.dim(), "sfcl_loss: embedding dims must match");
  const int n = f_t.size();
  const int n2 = 2 * n;

  Variable<T> pooled = ops::concat_rows(f_t.vectors, f_s.vectors);      // (2N, E)
  Variable<T> sims = ops::matmul(pooled, pooled, false, true);          // (2N, 2N)
  Variable<T> scaled = ops::scale(sims, T(1) / tau);

  Tensor<T> offdiag({n2, n2});
  Tensor<T> positive({n2, n2});
  for (int i = 0; i < n2; ++i)
    for (int j = 0; j < n2; ++j) {
      offdiag[static_cast<std::int64_t>(i) * n2 + j] = i == j ? T(0) : T(1);
      const int partner = i < n ? i + n : i - n;
      positive[static_cast<std::int64_t>(i) * n2 + j] = j == partner ? T(1) : T(0);
    }

  Variable<T> denom = ops::row_sum(ops::mul(ops::exp_op(scaled), Variable<T>::constant(offdiag)));
  Variable<T> pos = ops::row_sum(ops::mul(scaled, Variable<T>::constant(positive)));
  return ops::mean_all(ops::sub(ops::log_op(denom), pos));
}

}  // namespace dfkd
