// Scalar reference kernels. These define the semantics the SIMD variants are
// tested against.

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "impl.h"

namespace maep::kernels::detail {
namespace {

template <typename T>
void add_k(const T* a, const T* b, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

template <typename T>
void sub_k(const T* a, const T* b, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

template <typename T>
void mul_k(const T* a, const T* b, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

template <typename T>
void axpy_k(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
void scale_k(T alpha, const T* x, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = alpha * x[i];
}

template <typename T>
void clamp_k(const T* x, T lo, T hi, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = std::min(std::max(x[i], lo), hi);
}

template <typename T>
void sign_k(const T* x, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    out[i] = static_cast<T>((x[i] > T(0)) - (x[i] < T(0)));
}

template <typename T>
void abs_k(const T* x, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = std::abs(x[i]);
}

template <typename T>
double sum_k(const T* x, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(x[i]);
  return s;
}

template <typename T>
double asum_k(const T* x, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::abs(static_cast<double>(x[i]));
  return s;
}

template <typename T>
double dot_k(const T* a, const T* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

// Reference GEMM. Register-blocked variants must match this k-inner
// accumulation order per output element only up to rounding.
template <typename T>
void gemm_nn_k(std::size_t m, std::size_t n, std::size_t k, const T* a,
               const T* b, T* c, bool accumulate) {
#pragma omp parallel for schedule(static) if (m * n * k > 65536)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    if (!accumulate)
      for (std::size_t j = 0; j < n; ++j) crow[j] = T(0);
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

template <typename T>
KernelTable<T> scalar_table() {
  KernelTable<T> t;
  t.add = add_k<T>;
  t.sub = sub_k<T>;
  t.mul = mul_k<T>;
  t.axpy = axpy_k<T>;
  t.scale = scale_k<T>;
  t.clamp = clamp_k<T>;
  t.sign = sign_k<T>;
  t.absval = abs_k<T>;
  t.sum = sum_k<T>;
  t.asum = asum_k<T>;
  t.dot = dot_k<T>;
  t.gemm_nn = gemm_nn_k<T>;
  return t;
}

template KernelTable<float> scalar_table<float>();
template KernelTable<double> scalar_table<double>();

}  // namespace maep::kernels::detail
