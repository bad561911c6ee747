// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>

namespace razor {

// Upper bound on worker threads used by parallel_for. Defaults to the hardware
// concurrency; the RZKV_THREADS environment variable overrides it when set.
std::size_t max_threads();
void set_max_threads(std::size_t n);

// Runs fn(i) for i in [0, n). Each index is processed exactly once, by one
// thread, so results written to per-index slots do not depend on the thread
// count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace razor
