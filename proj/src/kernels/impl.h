#pragma once

// Internal: per-ISA kernel entry points. Only dispatch.cpp includes this.

#include "maep/kernels.h"

namespace maep::kernels::detail {

template <typename T>
KernelTable<T> scalar_table();

#if defined(__x86_64__) || defined(_M_X64)
template <typename T>
KernelTable<T> avx2_table();
#endif

#if defined(__aarch64__)
template <typename T>
KernelTable<T> neon_table();
#endif

}  // namespace maep::kernels::detail
