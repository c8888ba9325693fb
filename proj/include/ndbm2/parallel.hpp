#pragma once

#include <cstddef>
#include <cstdint>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace ndbm2 {

inline int max_threads() {
#if defined(_OPENMP)
  return omp_get_num_procs();
#else
  return 1;
#endif
}

inline int num_threads() {
#if defined(_OPENMP)
  return omp_get_max_threads();
#else
  return 1;
#endif
}

/// Caps internal parallelism. Values < 1 restore the machine default.
inline void set_num_threads(int n) {
#if defined(_OPENMP)
  omp_set_num_threads(n < 1 ? omp_get_num_procs() : n);
#else
  (void)n;
#endif
}

/// Runs fn(i) for i in [0, n). Every index is processed by exactly one
/// thread, so results never depend on the thread count as long as fn(i)
/// only writes outputs owned by i.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
#if defined(_OPENMP)
  const auto count = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static) if (count > 1)
  for (std::int64_t i = 0; i < count; ++i) fn(static_cast<std::size_t>(i));
#else
  for (std::size_t i = 0; i < n; ++i) fn(i);
#endif
}

}  // namespace ndbm2
