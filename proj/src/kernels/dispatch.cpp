#include "maep/kernels.h"

#include <cstdlib>
#include <stdexcept>
#include <string>
#include <vector>

#include "impl.h"

namespace maep::kernels {
namespace {

struct Tables {
  KernelTable<float> f32;
  KernelTable<double> f64;
};

Tables make_tables(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return {detail::scalar_table<float>(), detail::scalar_table<double>()};
#if defined(__x86_64__) || defined(_M_X64)
    case Isa::avx2:
      return {detail::avx2_table<float>(), detail::avx2_table<double>()};
#endif
#if defined(__aarch64__)
    case Isa::neon:
      return {detail::neon_table<float>(), detail::neon_table<double>()};
#endif
    default:
      throw std::runtime_error(std::string("kernel ISA not built in: ") +
                               isa_name(isa));
  }
}

Tables& active_tables() {
  static Tables t = make_tables(Isa::scalar);
  return t;
}

Isa& active_isa_ref() {
  static Isa isa = Isa::scalar;
  return isa;
}

Isa best_supported() {
#if defined(__x86_64__) || defined(_M_X64)
  if (isa_supported(Isa::avx2)) return Isa::avx2;
#endif
#if defined(__aarch64__)
  return Isa::neon;
#endif
  return Isa::scalar;
}

const Tables& tables_for(Isa isa) {
  static const Tables scalar_t = make_tables(Isa::scalar);
  if (isa == Isa::scalar) return scalar_t;
  if (!isa_supported(isa))
    throw std::runtime_error(std::string("kernel ISA not supported here: ") +
                             isa_name(isa));
  static const Tables simd_t = make_tables(best_supported());
  return simd_t;
}

struct AutoInit {
  AutoInit() { init_from_env(); }
} const g_auto_init;

}  // namespace

const char* isa_name(Isa isa) {
  switch (isa) {
    case Isa::scalar: return "scalar";
    case Isa::avx2: return "avx2";
    case Isa::neon: return "neon";
  }
  return "?";
}

bool isa_supported(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return true;
    case Isa::avx2:
#if defined(__x86_64__) || defined(_M_X64)
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
    case Isa::neon:
#if defined(__aarch64__)
      return true;
#else
      return false;
#endif
  }
  return false;
}

Isa active_isa() { return active_isa_ref(); }

void set_isa(Isa isa) {
  if (!isa_supported(isa))
    throw std::runtime_error(std::string("kernel ISA not supported here: ") +
                             isa_name(isa));
  active_tables() = make_tables(isa);
  active_isa_ref() = isa;
}

Isa init_from_env() {
  const char* env = std::getenv("MAEP_ISA");
  if (env && *env) {
    std::string s(env);
    for (Isa isa : {Isa::scalar, Isa::avx2, Isa::neon}) {
      if (s == isa_name(isa)) {
        set_isa(isa);
        return active_isa();
      }
    }
    throw std::runtime_error("MAEP_ISA must be scalar, avx2 or neon, got: " + s);
  }
  set_isa(best_supported());
  return active_isa();
}

template <>
const KernelTable<float>& table<float>() {
  return active_tables().f32;
}
template <>
const KernelTable<double>& table<double>() {
  return active_tables().f64;
}

template <>
const KernelTable<float>& table<float>(Isa isa) {
  return tables_for(isa).f32;
}
template <>
const KernelTable<double>& table<double>(Isa isa) {
  return tables_for(isa).f64;
}

namespace {

template <typename T>
void pack_transpose(const T* src, std::size_t rows, std::size_t cols, T* dst) {
  // src is [rows, cols]; dst becomes [cols, rows]
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

}  // namespace

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n,
          std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  std::vector<T> pa, pb;
  if (trans_a) {
    pa.resize(m * k);
    pack_transpose(a, k, m, pa.data());  // stored [K,M] -> want [M,K]
    a = pa.data();
  }
  if (trans_b) {
    pb.resize(k * n);
    pack_transpose(b, n, k, pb.data());  // stored [N,K] -> want [K,N]
    b = pb.data();
  }
  table<T>().gemm_nn(m, n, k, a, b, c, accumulate);
}

template void gemm<float>(bool, bool, std::size_t, std::size_t, std::size_t,
                          const float*, const float*, float*, bool);
template void gemm<double>(bool, bool, std::size_t, std::size_t, std::size_t,
                           const double*, const double*, double*, bool);

}  // namespace maep::kernels
