// SPDX-License-Identifier: Apache-2.0
#include "razor/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace razor {

namespace {

std::size_t default_threads() {
    std::size_t n = std::max<std::size_t>(1, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("RZKV_THREADS")) {
        try {
            // An explicit setting wins even above the core count so thread-count
            // independence can be exercised on small machines.
            const long cap = std::stol(env);
            if (cap >= 1) n = static_cast<std::size_t>(cap);
        } catch (const std::exception&) {
            // ignore malformed values
        }
    }
    return n;
}

std::atomic<std::size_t>& thread_limit() {
    static std::atomic<std::size_t> limit{default_threads()};
    return limit;
}

}  // namespace

std::size_t max_threads() { return thread_limit().load(); }

void set_max_threads(std::size_t n) { thread_limit().store(std::max<std::size_t>(1, n)); }

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
    const std::size_t workers = std::min(n, max_threads());
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }

    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto work = [&] {
        for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        }
    };

    std::vector<std::jthread> pool;
    pool.reserve(workers - 1);
    for (std::size_t t = 1; t < workers; ++t) pool.emplace_back(work);
    work();
    pool.clear();
    if (failure) std::rethrow_exception(failure);
}

}  // namespace razor
