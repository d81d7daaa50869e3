#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace synthpair {

/// Runs task(i) for i in [0, n) with at most `max_in_flight` tasks running at
/// once. Tasks are claimed in index order. The first exception stops further
/// claims and is rethrown after all workers join; tasks already running are
/// allowed to finish. Callers write results into index-addressed slots, which
/// keeps output order independent of completion order.
template <typename Fn>
void for_each_bounded(std::size_t n, std::size_t max_in_flight, Fn&& task) {
    if (n == 0) return;
    const std::size_t workers = std::clamp<std::size_t>(max_in_flight, 1, n);
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) task(i);
        return;
    }

    std::atomic<std::size_t> next{0};
    std::atomic<bool> stop{false};
    std::exception_ptr first_error;
    std::mutex error_mu;

    auto worker = [&] {
        while (!stop.load(std::memory_order_relaxed)) {
            const std::size_t i = next.fetch_add(1);
            if (i >= n) return;
            try {
                task(i);
            } catch (...) {
                std::lock_guard lock(error_mu);
                if (!first_error) first_error = std::current_exception();
                stop = true;
            }
        }
    };

    {
        std::vector<std::jthread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    }
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace synthpair
