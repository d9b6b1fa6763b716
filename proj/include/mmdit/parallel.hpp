#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace mmdit {

inline std::size_t default_jobs() {
    return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

// Runs f(i) for i in [0, n) on up to `jobs` threads. Work is claimed in index
// order; callers write results by index so the outcome does not depend on
// scheduling. The first exception (lowest index) is rethrown.
template <class F>
void parallel_for(std::size_t n, std::size_t jobs, F&& f) {
    jobs = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(n, 1));
    if (jobs == 1) {
        for (std::size_t i = 0; i < n; ++i) f(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex err_mu;
    std::exception_ptr err;
    std::size_t err_index = n;
    auto worker = [&] {
        for (std::size_t i; (i = next.fetch_add(1)) < n;) {
            try {
                f(i);
            } catch (...) {
                std::lock_guard lock(err_mu);
                if (i < err_index) {
                    err_index = i;
                    err = std::current_exception();
                }
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    if (err) std::rethrow_exception(err);
}

}  // namespace mmdit
