#include "exitweave/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <string>

#ifdef EXITWEAVE_HAVE_OPENMP
#include <omp.h>
#endif

namespace exitweave::parallel {

std::optional<int> apply_thread_cap_from_env() {
  const char* raw = std::getenv("EXITWEAVE_THREADS");
  if (raw == nullptr || *raw == '\0') return std::nullopt;
  char* end = nullptr;
  const long n = std::strtol(raw, &end, 10);
  if (end == raw || *end != '\0' || n <= 0) return std::nullopt;
  const int cap = std::min(static_cast<int>(n), max_threads());
  set_threads(cap);
  return cap;
}

void set_threads(int n) {
#ifdef EXITWEAVE_HAVE_OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

int max_threads() {
#ifdef EXITWEAVE_HAVE_OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace exitweave::parallel
