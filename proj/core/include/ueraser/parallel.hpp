#pragma once

#include <cstddef>
#include <functional>

namespace ueraser {

// Worker threads used by parallel_for. Defaults to the hardware count,
// capped by the UERASER_THREADS environment variable (read once).
int worker_count();

// Override the worker count for this process (0 restores the default).
// Used by tests to prove results are independent of parallelism degree.
void set_worker_count(int n);

// Runs fn(i) for i in [0, n). Work items must write only to their own
// slots; with that contract results are identical for every thread count.
// Exceptions from workers are rethrown on the calling thread.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace ueraser
