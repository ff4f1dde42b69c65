#pragma once

// Data-parallel inner loops used by the tensor/autograd layer.
//
// Every kernel has a scalar reference implementation and, where the target
// supports it, a SIMD variant (AVX2+FMA on x86-64, NEON on aarch64). The
// active variant is picked once at startup from CPU feature detection and can
// be overridden with set_isa() or the MAEP_ISA environment variable
// ("scalar", "avx2", "neon"). All variants are equivalence-tested against the
// scalar reference.
//
// Reductions accumulate in double regardless of T so that partition sums
// (visible + masked pixel regions) agree with whole-tensor sums to double
// rounding rather than float rounding.

#include <cstddef>
#include <cstdint>

namespace maep::kernels {

enum class Isa { scalar, avx2, neon };

const char* isa_name(Isa isa);
bool isa_supported(Isa isa);
Isa active_isa();
// Throws std::runtime_error if the ISA is not supported on this CPU.
void set_isa(Isa isa);
// Reads MAEP_ISA if set; returns the ISA that ended up active.
Isa init_from_env();

template <typename T>
struct KernelTable {
  // elementwise, out may alias a or b
  void (*add)(const T* a, const T* b, T* out, std::size_t n);
  void (*sub)(const T* a, const T* b, T* out, std::size_t n);
  void (*mul)(const T* a, const T* b, T* out, std::size_t n);
  void (*axpy)(T alpha, const T* x, T* y, std::size_t n);  // y += alpha*x
  void (*scale)(T alpha, const T* x, T* out, std::size_t n);
  void (*clamp)(const T* x, T lo, T hi, T* out, std::size_t n);
  void (*sign)(const T* x, T* out, std::size_t n);  // sign(0) == 0
  void (*absval)(const T* x, T* out, std::size_t n);

  // reductions, double accumulation
  double (*sum)(const T* x, std::size_t n);
  double (*asum)(const T* x, std::size_t n);
  double (*dot)(const T* a, const T* b, std::size_t n);

  // row-major C[M,N] = A[M,K] * B[K,N], optionally accumulating into C
  void (*gemm_nn)(std::size_t m, std::size_t n, std::size_t k, const T* a,
                  const T* b, T* c, bool accumulate);
};

template <typename T>
const KernelTable<T>& table();  // active ISA
template <typename T>
const KernelTable<T>& table(Isa isa);

// GEMM with optional transposes, row-major throughout:
//   C[M,N] (=|+=) op(A) * op(B),  op(A)=[M,K], op(B)=[K,N].
// Transposed operands are packed into contiguous scratch before dispatch.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n,
          std::size_t k, const T* a, const T* b, T* c, bool accumulate);

}  // namespace maep::kernels
