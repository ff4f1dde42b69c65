// NEON kernel variants for aarch64. Elementwise and reduction coverage; GEMM
// uses a 4x8 register tile for f32 and 4x4 for f64.

#if defined(__aarch64__)

#include <arm_neon.h>

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "impl.h"

namespace maep::kernels::detail {
namespace {

void add_f32(const float* a, const float* b, float* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    vst1q_f32(out + i, vaddq_f32(vld1q_f32(a + i), vld1q_f32(b + i)));
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void sub_f32(const float* a, const float* b, float* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    vst1q_f32(out + i, vsubq_f32(vld1q_f32(a + i), vld1q_f32(b + i)));
  for (; i < n; ++i) out[i] = a[i] - b[i];
}

void mul_f32(const float* a, const float* b, float* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    vst1q_f32(out + i, vmulq_f32(vld1q_f32(a + i), vld1q_f32(b + i)));
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void axpy_f32(float alpha, const float* x, float* y, std::size_t n) {
  const float32x4_t va = vdupq_n_f32(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    vst1q_f32(y + i, vfmaq_f32(vld1q_f32(y + i), va, vld1q_f32(x + i)));
  for (; i < n; ++i) y[i] = std::fma(alpha, x[i], y[i]);
}

void scale_f32(float alpha, const float* x, float* out, std::size_t n) {
  const float32x4_t va = vdupq_n_f32(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    vst1q_f32(out + i, vmulq_f32(va, vld1q_f32(x + i)));
  for (; i < n; ++i) out[i] = alpha * x[i];
}

void clamp_f32(const float* x, float lo, float hi, float* out, std::size_t n) {
  const float32x4_t vlo = vdupq_n_f32(lo), vhi = vdupq_n_f32(hi);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    vst1q_f32(out + i, vminq_f32(vmaxq_f32(vld1q_f32(x + i), vlo), vhi));
  for (; i < n; ++i) out[i] = std::min(std::max(x[i], lo), hi);
}

void sign_f32(const float* x, float* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    out[i] = static_cast<float>((x[i] > 0.f) - (x[i] < 0.f));
}

void abs_f32(const float* x, float* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) vst1q_f32(out + i, vabsq_f32(vld1q_f32(x + i)));
  for (; i < n; ++i) out[i] = std::abs(x[i]);
}

double sum_f32(const float* x, std::size_t n) {
  float64x2_t acc = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    float32x4_t v = vld1q_f32(x + i);
    acc = vaddq_f64(acc, vcvt_f64_f32(vget_low_f32(v)));
    acc = vaddq_f64(acc, vcvt_f64_f32(vget_high_f32(v)));
  }
  double s = vgetq_lane_f64(acc, 0) + vgetq_lane_f64(acc, 1);
  for (; i < n; ++i) s += static_cast<double>(x[i]);
  return s;
}

double asum_f32(const float* x, std::size_t n) {
  float64x2_t acc = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    float32x4_t v = vabsq_f32(vld1q_f32(x + i));
    acc = vaddq_f64(acc, vcvt_f64_f32(vget_low_f32(v)));
    acc = vaddq_f64(acc, vcvt_f64_f32(vget_high_f32(v)));
  }
  double s = vgetq_lane_f64(acc, 0) + vgetq_lane_f64(acc, 1);
  for (; i < n; ++i) s += std::abs(static_cast<double>(x[i]));
  return s;
}

double dot_f32(const float* a, const float* b, std::size_t n) {
  float64x2_t acc = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    float32x4_t va = vld1q_f32(a + i), vb = vld1q_f32(b + i);
    acc = vfmaq_f64(acc, vcvt_f64_f32(vget_low_f32(va)),
                    vcvt_f64_f32(vget_low_f32(vb)));
    acc = vfmaq_f64(acc, vcvt_f64_f32(vget_high_f32(va)),
                    vcvt_f64_f32(vget_high_f32(vb)));
  }
  double s = vgetq_lane_f64(acc, 0) + vgetq_lane_f64(acc, 1);
  for (; i < n; ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

void gemm_nn_f32(std::size_t m, std::size_t n, std::size_t k, const float* a,
                 const float* b, float* c, bool accumulate) {
  constexpr std::size_t MR = 4, NR = 8;
#pragma omp parallel for schedule(static) if (m * n * k > 65536)
  for (std::ptrdiff_t i0s = 0; i0s < static_cast<std::ptrdiff_t>(m); i0s += MR) {
    const std::size_t i0 = static_cast<std::size_t>(i0s);
    const std::size_t mr = std::min(MR, m - i0);
    std::size_t j0 = 0;
    for (; j0 + NR <= n; j0 += NR) {
      float32x4_t acc[MR][2];
      for (std::size_t r = 0; r < mr; ++r) {
        if (accumulate) {
          acc[r][0] = vld1q_f32(c + (i0 + r) * n + j0);
          acc[r][1] = vld1q_f32(c + (i0 + r) * n + j0 + 4);
        } else {
          acc[r][0] = vdupq_n_f32(0.f);
          acc[r][1] = vdupq_n_f32(0.f);
        }
      }
      for (std::size_t p = 0; p < k; ++p) {
        const float32x4_t b0 = vld1q_f32(b + p * n + j0);
        const float32x4_t b1 = vld1q_f32(b + p * n + j0 + 4);
        for (std::size_t r = 0; r < mr; ++r) {
          const float32x4_t av = vdupq_n_f32(a[(i0 + r) * k + p]);
          acc[r][0] = vfmaq_f32(acc[r][0], av, b0);
          acc[r][1] = vfmaq_f32(acc[r][1], av, b1);
        }
      }
      for (std::size_t r = 0; r < mr; ++r) {
        vst1q_f32(c + (i0 + r) * n + j0, acc[r][0]);
        vst1q_f32(c + (i0 + r) * n + j0 + 4, acc[r][1]);
      }
    }
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

void add_f64(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2)
    vst1q_f64(out + i, vaddq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void sub_f64(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2)
    vst1q_f64(out + i, vsubq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
  for (; i < n; ++i) out[i] = a[i] - b[i];
}

void mul_f64(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2)
    vst1q_f64(out + i, vmulq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void axpy_f64(double alpha, const double* x, double* y, std::size_t n) {
  const float64x2_t va = vdupq_n_f64(alpha);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2)
    vst1q_f64(y + i, vfmaq_f64(vld1q_f64(y + i), va, vld1q_f64(x + i)));
  for (; i < n; ++i) y[i] = std::fma(alpha, x[i], y[i]);
}

void scale_f64(double alpha, const double* x, double* out, std::size_t n) {
  const float64x2_t va = vdupq_n_f64(alpha);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2)
    vst1q_f64(out + i, vmulq_f64(va, vld1q_f64(x + i)));
  for (; i < n; ++i) out[i] = alpha * x[i];
}

void clamp_f64(const double* x, double lo, double hi, double* out,
               std::size_t n) {
  const float64x2_t vlo = vdupq_n_f64(lo), vhi = vdupq_n_f64(hi);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2)
    vst1q_f64(out + i, vminq_f64(vmaxq_f64(vld1q_f64(x + i), vlo), vhi));
  for (; i < n; ++i) out[i] = std::min(std::max(x[i], lo), hi);
}

void sign_f64(const double* x, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    out[i] = static_cast<double>((x[i] > 0.) - (x[i] < 0.));
}

void abs_f64(const double* x, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(out + i, vabsq_f64(vld1q_f64(x + i)));
  for (; i < n; ++i) out[i] = std::abs(x[i]);
}

double sum_f64(const double* x, std::size_t n) {
  float64x2_t acc = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) acc = vaddq_f64(acc, vld1q_f64(x + i));
  double s = vgetq_lane_f64(acc, 0) + vgetq_lane_f64(acc, 1);
  for (; i < n; ++i) s += x[i];
  return s;
}

double asum_f64(const double* x, std::size_t n) {
  float64x2_t acc = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) acc = vaddq_f64(acc, vabsq_f64(vld1q_f64(x + i)));
  double s = vgetq_lane_f64(acc, 0) + vgetq_lane_f64(acc, 1);
  for (; i < n; ++i) s += std::abs(x[i]);
  return s;
}

double dot_f64(const double* a, const double* b, std::size_t n) {
  float64x2_t acc = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2)
    acc = vfmaq_f64(acc, vld1q_f64(a + i), vld1q_f64(b + i));
  double s = vgetq_lane_f64(acc, 0) + vgetq_lane_f64(acc, 1);
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

void gemm_nn_f64(std::size_t m, std::size_t n, std::size_t k, const double* a,
                 const double* b, double* c, bool accumulate) {
  constexpr std::size_t MR = 4, NR = 4;
#pragma omp parallel for schedule(static) if (m * n * k > 65536)
  for (std::ptrdiff_t i0s = 0; i0s < static_cast<std::ptrdiff_t>(m); i0s += MR) {
    const std::size_t i0 = static_cast<std::size_t>(i0s);
    const std::size_t mr = std::min(MR, m - i0);
    std::size_t j0 = 0;
    for (; j0 + NR <= n; j0 += NR) {
      float64x2_t acc[MR][2];
      for (std::size_t r = 0; r < mr; ++r) {
        if (accumulate) {
          acc[r][0] = vld1q_f64(c + (i0 + r) * n + j0);
          acc[r][1] = vld1q_f64(c + (i0 + r) * n + j0 + 2);
        } else {
          acc[r][0] = vdupq_n_f64(0.0);
          acc[r][1] = vdupq_n_f64(0.0);
        }
      }
      for (std::size_t p = 0; p < k; ++p) {
        const float64x2_t b0 = vld1q_f64(b + p * n + j0);
        const float64x2_t b1 = vld1q_f64(b + p * n + j0 + 2);
        for (std::size_t r = 0; r < mr; ++r) {
          const float64x2_t av = vdupq_n_f64(a[(i0 + r) * k + p]);
          acc[r][0] = vfmaq_f64(acc[r][0], av, b0);
          acc[r][1] = vfmaq_f64(acc[r][1], av, b1);
        }
      }
      for (std::size_t r = 0; r < mr; ++r) {
        vst1q_f64(c + (i0 + r) * n + j0, acc[r][0]);
        vst1q_f64(c + (i0 + r) * n + j0 + 2, acc[r][1]);
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
KernelTable<float> neon_table<float>() {
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
KernelTable<double> neon_table<double>() {
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

#endif  // aarch64
