// AVX2+FMA kernel variants. This translation unit is compiled with
// -mavx2 -mfma; dispatch.cpp only installs the table when cpuid reports both.

#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "impl.h"

namespace maep::kernels::detail {
namespace {

// ---------------------------------------------------------------- float ----

void add_f32(const float* a, const float* b, float* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_add_ps(_mm256_loadu_ps(a + i),
                                            _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void sub_f32(const float* a, const float* b, float* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_sub_ps(_mm256_loadu_ps(a + i),
                                            _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) out[i] = a[i] - b[i];
}

void mul_f32(const float* a, const float* b, float* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_mul_ps(_mm256_loadu_ps(a + i),
                                            _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void axpy_f32(float alpha, const float* x, float* y, std::size_t n) {
  const __m256 va = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(
        y + i, _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) y[i] = std::fma(alpha, x[i], y[i]);
}

void scale_f32(float alpha, const float* x, float* out, std::size_t n) {
  const __m256 va = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_mul_ps(va, _mm256_loadu_ps(x + i)));
  for (; i < n; ++i) out[i] = alpha * x[i];
}

void clamp_f32(const float* x, float lo, float hi, float* out, std::size_t n) {
  const __m256 vlo = _mm256_set1_ps(lo), vhi = _mm256_set1_ps(hi);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(
        out + i, _mm256_min_ps(_mm256_max_ps(_mm256_loadu_ps(x + i), vlo), vhi));
  for (; i < n; ++i) out[i] = std::min(std::max(x[i], lo), hi);
}

void sign_f32(const float* x, float* out, std::size_t n) {
  const __m256 zero = _mm256_setzero_ps(), one = _mm256_set1_ps(1.0f);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 v = _mm256_loadu_ps(x + i);
    __m256 pos = _mm256_and_ps(_mm256_cmp_ps(v, zero, _CMP_GT_OQ), one);
    __m256 neg = _mm256_and_ps(_mm256_cmp_ps(v, zero, _CMP_LT_OQ), one);
    _mm256_storeu_ps(out + i, _mm256_sub_ps(pos, neg));
  }
  for (; i < n; ++i) out[i] = static_cast<float>((x[i] > 0.f) - (x[i] < 0.f));
}

void abs_f32(const float* x, float* out, std::size_t n) {
  const __m256 mask = _mm256_castsi256_ps(_mm256_set1_epi32(0x7fffffff));
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_and_ps(_mm256_loadu_ps(x + i), mask));
  for (; i < n; ++i) out[i] = std::abs(x[i]);
}

double hsum_pd(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(lo, _mm_unpackhi_pd(lo, lo)));
}

// f32 reductions widen to double lanes before accumulating.
double sum_f32(const float* x, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd(), acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 v = _mm256_loadu_ps(x + i);
    acc0 = _mm256_add_pd(acc0, _mm256_cvtps_pd(_mm256_castps256_ps128(v)));
    acc1 = _mm256_add_pd(acc1, _mm256_cvtps_pd(_mm256_extractf128_ps(v, 1)));
  }
  double s = hsum_pd(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) s += static_cast<double>(x[i]);
  return s;
}

double asum_f32(const float* x, std::size_t n) {
  const __m256 mask = _mm256_castsi256_ps(_mm256_set1_epi32(0x7fffffff));
  __m256d acc0 = _mm256_setzero_pd(), acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 v = _mm256_and_ps(_mm256_loadu_ps(x + i), mask);
    acc0 = _mm256_add_pd(acc0, _mm256_cvtps_pd(_mm256_castps256_ps128(v)));
    acc1 = _mm256_add_pd(acc1, _mm256_cvtps_pd(_mm256_extractf128_ps(v, 1)));
  }
  double s = hsum_pd(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) s += std::abs(static_cast<double>(x[i]));
  return s;
}

double dot_f32(const float* a, const float* b, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd(), acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 va = _mm256_loadu_ps(a + i);
    __m256 vb = _mm256_loadu_ps(b + i);
    acc0 = _mm256_fmadd_pd(_mm256_cvtps_pd(_mm256_castps256_ps128(va)),
                           _mm256_cvtps_pd(_mm256_castps256_ps128(vb)), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_cvtps_pd(_mm256_extractf128_ps(va, 1)),
                           _mm256_cvtps_pd(_mm256_extractf128_ps(vb, 1)), acc1);
  }
  double s = hsum_pd(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

// Register-tiled GEMM, 4 rows x 16 columns per tile, k streamed.
void gemm_nn_f32(std::size_t m, std::size_t n, std::size_t k, const float* a,
                 const float* b, float* c, bool accumulate) {
  constexpr std::size_t MR = 4, NR = 16;
#pragma omp parallel for schedule(static) if (m * n * k > 65536)
  for (std::ptrdiff_t i0s = 0; i0s < static_cast<std::ptrdiff_t>(m); i0s += MR) {
    const std::size_t i0 = static_cast<std::size_t>(i0s);
    const std::size_t mr = std::min(MR, m - i0);
    std::size_t j0 = 0;
    for (; j0 + NR <= n; j0 += NR) {
      __m256 acc[MR][2];
      for (std::size_t r = 0; r < mr; ++r) {
        if (accumulate) {
          acc[r][0] = _mm256_loadu_ps(c + (i0 + r) * n + j0);
          acc[r][1] = _mm256_loadu_ps(c + (i0 + r) * n + j0 + 8);
        } else {
          acc[r][0] = _mm256_setzero_ps();
          acc[r][1] = _mm256_setzero_ps();
        }
      }
      for (std::size_t p = 0; p < k; ++p) {
        const __m256 b0 = _mm256_loadu_ps(b + p * n + j0);
        const __m256 b1 = _mm256_loadu_ps(b + p * n + j0 + 8);
        for (std::size_t r = 0; r < mr; ++r) {
          const __m256 av = _mm256_set1_ps(a[(i0 + r) * k + p]);
          acc[r][0] = _mm256_fmadd_ps(av, b0, acc[r][0]);
          acc[r][1] = _mm256_fmadd_ps(av, b1, acc[r][1]);
        }
      }
      for (std::size_t r = 0; r < mr; ++r) {
        _mm256_storeu_ps(c + (i0 + r) * n + j0, acc[r][0]);
        _mm256_storeu_ps(c + (i0 + r) * n + j0 + 8, acc[r][1]);
      }
    }
    for (; j0 + 8 <= n; j0 += 8) {
      __m256 acc[MR];
      for (std::size_t r = 0; r < mr; ++r)
        acc[r] = accumulate ? _mm256_loadu_ps(c + (i0 + r) * n + j0)
                            : _mm256_setzero_ps();
      for (std::size_t p = 0; p < k; ++p) {
        const __m256 b0 = _mm256_loadu_ps(b + p * n + j0);
        for (std::size_t r = 0; r < mr; ++r)
          acc[r] = _mm256_fmadd_ps(_mm256_set1_ps(a[(i0 + r) * k + p]), b0,
                                   acc[r]);
      }
      for (std::size_t r = 0; r < mr; ++r)
        _mm256_storeu_ps(c + (i0 + r) * n + j0, acc[r]);
    }
    // column tail, scalar
    for (; j0 < n; ++j0) {
      for (std::size_t r = 0; r < mr; ++r) {
        float s = accumulate ? c[(i0 + r) * n + j0] : 0.0f;
        const float* arow = a + (i0 + r) * k;
        for (std::size_t p = 0; p < k; ++p) s += arow[p] * b[p * n + j0];
        c[(i0 + r) * n + j0] = s;
      }
    }
  }
}

// --------------------------------------------------------------- double ----

void add_f64(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i),
                                            _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void sub_f64(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_sub_pd(_mm256_loadu_pd(a + i),
                                            _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) out[i] = a[i] - b[i];
}

void mul_f64(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i),
                                            _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void axpy_f64(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(
        y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  for (; i < n; ++i) y[i] = std::fma(alpha, x[i], y[i]);
}

void scale_f64(double alpha, const double* x, double* out, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
  for (; i < n; ++i) out[i] = alpha * x[i];
}

void clamp_f64(const double* x, double lo, double hi, double* out,
               std::size_t n) {
  const __m256d vlo = _mm256_set1_pd(lo), vhi = _mm256_set1_pd(hi);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(
        out + i, _mm256_min_pd(_mm256_max_pd(_mm256_loadu_pd(x + i), vlo), vhi));
  for (; i < n; ++i) out[i] = std::min(std::max(x[i], lo), hi);
}

void sign_f64(const double* x, double* out, std::size_t n) {
  const __m256d zero = _mm256_setzero_pd(), one = _mm256_set1_pd(1.0);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d v = _mm256_loadu_pd(x + i);
    __m256d pos = _mm256_and_pd(_mm256_cmp_pd(v, zero, _CMP_GT_OQ), one);
    __m256d neg = _mm256_and_pd(_mm256_cmp_pd(v, zero, _CMP_LT_OQ), one);
    _mm256_storeu_pd(out + i, _mm256_sub_pd(pos, neg));
  }
  for (; i < n; ++i) out[i] = static_cast<double>((x[i] > 0.) - (x[i] < 0.));
}

void abs_f64(const double* x, double* out, std::size_t n) {
  const __m256d mask =
      _mm256_castsi256_pd(_mm256_set1_epi64x(0x7fffffffffffffffLL));
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_and_pd(_mm256_loadu_pd(x + i), mask));
  for (; i < n; ++i) out[i] = std::abs(x[i]);
}

double sum_f64(const double* x, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd(), acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_add_pd(acc0, _mm256_loadu_pd(x + i));
    acc1 = _mm256_add_pd(acc1, _mm256_loadu_pd(x + i + 4));
  }
  double s = hsum_pd(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) s += x[i];
  return s;
}

double asum_f64(const double* x, std::size_t n) {
  const __m256d mask =
      _mm256_castsi256_pd(_mm256_set1_epi64x(0x7fffffffffffffffLL));
  __m256d acc0 = _mm256_setzero_pd(), acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_add_pd(acc0, _mm256_and_pd(_mm256_loadu_pd(x + i), mask));
    acc1 = _mm256_add_pd(acc1, _mm256_and_pd(_mm256_loadu_pd(x + i + 4), mask));
  }
  double s = hsum_pd(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) s += std::abs(x[i]);
  return s;
}

double dot_f64(const double* a, const double* b, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd(), acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4),
                           _mm256_loadu_pd(b + i + 4), acc1);
  }
  double s = hsum_pd(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

void gemm_nn_f64(std::size_t m, std::size_t n, std::size_t k, const double* a,
                 const double* b, double* c, bool accumulate) {
  constexpr std::size_t MR = 4, NR = 8;
#pragma omp parallel for schedule(static) if (m * n * k > 65536)
  for (std::ptrdiff_t i0s = 0; i0s < static_cast<std::ptrdiff_t>(m); i0s += MR) {
    const std::size_t i0 = static_cast<std::size_t>(i0s);
    const std::size_t mr = std::min(MR, m - i0);
    std::size_t j0 = 0;
    for (; j0 + NR <= n; j0 += NR) {
      __m256d acc[MR][2];
      for (std::size_t r = 0; r < mr; ++r) {
        if (accumulate) {
          acc[r][0] = _mm256_loadu_pd(c + (i0 + r) * n + j0);
          acc[r][1] = _mm256_loadu_pd(c + (i0 + r) * n + j0 + 4);
        } else {
          acc[r][0] = _mm256_setzero_pd();
          acc[r][1] = _mm256_setzero_pd();
        }
      }
      for (std::size_t p = 0; p < k; ++p) {
        const __m256d b0 = _mm256_loadu_pd(b + p * n + j0);
        const __m256d b1 = _mm256_loadu_pd(b + p * n + j0 + 4);
        for (std::size_t r = 0; r < mr; ++r) {
          const __m256d av = _mm256_set1_pd(a[(i0 + r) * k + p]);
          acc[r][0] = _mm256_fmadd_pd(av, b0, acc[r][0]);
          acc[r][1] = _mm256_fmadd_pd(av, b1, acc[r][1]);
        }
      }
      for (std::size_t r = 0; r < mr; ++r) {
        _mm256_storeu_pd(c + (i0 + r) * n + j0, acc[r][0]);
        _mm256_storeu_pd(c + (i0 + r) * n + j0 + 4, acc[r][1]);
      }
    }
    for (; j0 < n; ++j0) {
      for (std::size_t r = 0; r < mr; ++r) {
        double s = accumulate ? c[(i0 + r) * n + j0] : 0.0;
        const double* arow = a + (i0 + r) * k;
        for (std::size_t p = 0; p < k; ++p) s += arow[p] * b[p * n + j0];
        c[(i0 + r) * n + j0] = s;
      }
    }
  }
}

}  // namespace

template <>
KernelTable<float> avx2_table<float>() {
  KernelTable<float> t;
  t.add = add_f32;
  t.sub = sub_f32;
  t.mul = mul_f32;
  t.axpy = axpy_f32;
  t.scale = scale_f32;
  t.clamp = clamp_f32;
  t.sign = sign_f32;
  t.absval = abs_f32;
  t.sum = sum_f32;
  t.asum = asum_f32;
  t.dot = dot_f32;
  t.gemm_nn = gemm_nn_f32;
  return t;
}

template <>
KernelTable<double> avx2_table<double>() {
  KernelTable<double> t;
  t.add = add_f64;
  t.sub = sub_f64;
  t.mul = mul_f64;
  t.axpy = axpy_f64;
  t.scale = scale_f64;
  t.clamp = clamp_f64;
  t.sign = sign_f64;
  t.absval = abs_f64;
  t.sum = sum_f64;
  t.asum = asum_f64;
  t.dot = dot_f64;
  t.gemm_nn = gemm_nn_f64;
  return t;
}

}  // namespace maep::kernels::detail

#endif  // x86-64
