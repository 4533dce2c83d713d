#pragma once

#include <cstddef>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace deltafuse {

// Execution knobs for the heavier operations. Thread count bounds workers
// only; results are identical for any value.
struct ExecOptions {
    int threads = 1;
};

// Runs fn(i) for i in [0, count), split into contiguous chunks when
// threads > 1. fn must only write state owned by index i. The first
// exception thrown by any chunk is rethrown on the caller's thread.
inline void parallel_for(size_t count, int threads, const std::function<void(size_t)>& fn) {
    if (threads <= 1 || count <= 1) {
        for (size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    const size_t workers = std::min<size_t>(size_t(threads), count);
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    pool.reserve(workers);
    for (size_t w = 0; w < workers; ++w) {
        const size_t begin = count * w / workers;
        const size_t end = count * (w + 1) / workers;
        pool.emplace_back([&, begin, end, w] {
            try {
                for (size_t i = begin; i < end; ++i) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

}  // namespace deltafuse
