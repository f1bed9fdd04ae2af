// ilma/kernels.hpp
//
// Copyright (c)  2026  ilmalab authors
//
// Shared forward kernels. Both the autodiff graph and the raw inference
// path call these, so a value computed during training and the same value
// computed during decoding are bit-identical.

#pragma once

#include <algorithm>
#include <cmath>

#include "ilma/tensor.hpp"

namespace ilma {
namespace kern {

// c[m x n] = a[m x k] * b[k x n]
inline void matmul(const Tensor &a, const Tensor &b, Tensor &c) {
  const int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  const double *pa = a.data.data();
  const double *pb = b.data.data();
  double *pc = c.data.data();
  std::fill(c.data.begin(), c.data.end(), 0.0);
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t l = 0; l < k; ++l) {
      const double av = pa[i * k + l];
      const double *brow = pb + l * n;
      double *crow = pc + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// y[m x (r1-r0)] = x[m x k] * W[r0:r1, :]^T (+ b[r0:r1]).
// The row window realizes non-blank views of the output layer without
// copying the underlying storage.
inline void linear(const Tensor &x, const Tensor &w, const Tensor *b, int64_t r0, int64_t r1,
                   Tensor &y) {
  const int64_t m = x.shape[0], k = x.shape[1];
  const int64_t n = r1 - r0;
  const double *px = x.data.data();
  const double *pw = w.data.data();
  double *py = y.data.data();
  for (int64_t i = 0; i < m; ++i) {
    const double *xrow = px + i * k;
    for (int64_t j = 0; j < n; ++j) {
      const double *wrow = pw + (r0 + j) * k;
      double acc = 0.0;
      for (int64_t l = 0; l < k; ++l) acc += xrow[l] * wrow[l];
      py[i * n + j] = b ? acc + b->data[static_cast<size_t>(r0 + j)] : acc;
    }
  }
}

inline void add(const Tensor &a, const Tensor &b, Tensor &y) {
  for (size_t i = 0; i < a.data.size(); ++i) y.data[i] = a.data[i] + b.data[i];
}

// x[m x n] + bias[n], broadcast over rows.
inline void add_bias(const Tensor &x, const Tensor &b, Tensor &y) {
  const int64_t m = x.shape[0], n = x.shape[1];
  for (int64_t i = 0; i < m; ++i) {
    const double *xr = x.data.data() + i * n;
    double *yr = y.data.data() + i * n;
    for (int64_t j = 0; j < n; ++j) yr[j] = xr[j] + b.data[static_cast<size_t>(j)];
  }
}

inline void tanh_(const Tensor &x, Tensor &y) {
  for (size_t i = 0; i < x.data.size(); ++i) y.data[i] = std::tanh(x.data[i]);
}

inline void relu(const Tensor &x, Tensor &y) {
  for (size_t i = 0; i < x.data.size(); ++i) y.data[i] = x.data[i] > 0.0 ? x.data[i] : 0.0;
}

inline double logsumexp_row(const double *x, int64_t n) {
  double m = x[0];
  for (int64_t i = 1; i < n; ++i) m = std::max(m, x[i]);
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) s += std::exp(x[i] - m);
  return m + std::log(s);
}

// Row-wise log-softmax. Rejects non-finite inputs.
inline void log_softmax(const Tensor &x, Tensor &y) {
  if (!all_finite(x.data)) throw NumericError("log_softmax: non-finite input");
  const int64_t rows = x.ndim() == 1 ? 1 : x.shape[0];
  const int64_t n = x.ndim() == 1 ? x.shape[0] : x.shape[1];
  for (int64_t r = 0; r < rows; ++r) {
    const double *xr = x.data.data() + r * n;
    double *yr = y.data.data() + r * n;
    const double lse = logsumexp_row(xr, n);
    for (int64_t j = 0; j < n; ++j) yr[j] = xr[j] - lse;
  }
}

inline double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double hi = std::max(a, b), lo = std::min(a, b);
  return hi + std::log1p(std::exp(lo - hi));
}

}  // namespace kern
}  // namespace ilma
