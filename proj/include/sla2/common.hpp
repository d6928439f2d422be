#pragma once

#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace sla2 {

// Thrown on dimension / divisibility violations.
class shape_error : public std::invalid_argument {
public:
    explicit shape_error(const std::string& what) : std::invalid_argument(what) {}
};

// Thrown on numeric failures (non-finite values, non-converged solves, diverged training).
class numeric_error : public std::runtime_error {
public:
    explicit numeric_error(const std::string& what) : std::runtime_error(what) {}
};

// Thrown when a command or operation is invoked without its prerequisites.
class contract_error : public std::runtime_error {
public:
    explicit contract_error(const std::string& what) : std::runtime_error(what) {}
};

inline std::size_t max_worker_threads() {
    static const std::size_t cached = [] {
        if (const char* env = std::getenv("SLA2_THREADS")) {
            const long v = std::strtol(env, nullptr, 10);
            if (v >= 1) {
                return static_cast<std::size_t>(v);
            }
        }
        const unsigned hw = std::thread::hardware_concurrency();
        return static_cast<std::size_t>(hw == 0 ? 1 : hw);
    }();
    return cached;
}

// Runs fn(i) for i in [0, n). Work is split into contiguous index ranges, one per
// thread, so every output element is still produced by a single serial loop and
// results are identical for any thread count.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    const std::size_t threads = std::min(max_worker_threads(), n);
    if (threads <= 1 || n < 2) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(threads - 1);
    const std::size_t chunk = (n + threads - 1) / threads;
    for (std::size_t t = 1; t < threads; ++t) {
        const std::size_t begin = t * chunk;
        const std::size_t end = std::min(n, begin + chunk);
        if (begin >= end) break;
        pool.emplace_back([begin, end, &fn] {
            for (std::size_t i = begin; i < end; ++i) fn(i);
        });
    }
    const std::size_t end0 = std::min(n, chunk);
    for (std::size_t i = 0; i < end0; ++i) fn(i);
    for (auto& th : pool) th.join();
}

}  // namespace sla2
