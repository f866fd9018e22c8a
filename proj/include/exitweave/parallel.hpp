#pragma once

#include <optional>

namespace exitweave::parallel {

// Reads EXITWEAVE_THREADS and, if set to a positive integer, caps the OpenMP
// team size. Returns the cap applied, if any. Results never depend on it.
std::optional<int> apply_thread_cap_from_env();

void set_threads(int n);
int max_threads();

}  // namespace exitweave::parallel
