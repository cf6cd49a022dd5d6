#pragma once

#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace petdiff {

// Runs fn(i, worker) for every i in [0, n), split into contiguous blocks, one
// block per worker. Worker 0 runs on the calling thread; with workers <= 1 no
// thread is spawned. The first exception thrown by any worker is rethrown on
// the caller after all workers join. Callers that need run-to-run determinism
// must keep per-worker state separate and merge it in index order afterwards.
inline void parallel_for(int n, int workers, const std::function<void(int, int)>& fn) {
    if (n <= 0) return;
    if (workers > n) workers = n;
    if (workers <= 1) {
        for (int i = 0; i < n; ++i) fn(i, 0);
        return;
    }
    std::vector<std::exception_ptr> errors(workers);
    auto run_block = [&](int w) {
        const int lo = static_cast<int>(static_cast<long long>(n) * w / workers);
        const int hi = static_cast<int>(static_cast<long long>(n) * (w + 1) / workers);
        try {
            for (int i = lo; i < hi; ++i) fn(i, w);
        } catch (...) {
            errors[w] = std::current_exception();
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    for (int w = 1; w < workers; ++w) pool.emplace_back(run_block, w);
    run_block(0);
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

}  // namespace petdiff
