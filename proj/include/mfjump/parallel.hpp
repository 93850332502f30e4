#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace mfjump {

// Worker count: --threads flag > MFJUMP_THREADS env > hardware.
inline int& thread_override() {
    static int v = 0;
    return v;
}

inline int worker_count() {
    if (thread_override() > 0) return thread_override();
    if (const char* env = std::getenv("MFJUMP_THREADS")) {
        int v = std::atoi(env);
        if (v > 0) return v;
    }
    unsigned hc = std::thread::hardware_concurrency();
    return hc > 0 ? static_cast<int>(hc) : 1;
}

// Chunked parallel map over [0, count). Chunk boundaries depend only on
// count, not on the worker count, so any per-chunk accumulation the body
// performs can be reduced in chunk order and stays bit-identical across
// thread settings.
inline constexpr int kChunk = 1024;

inline int chunk_count(int count) { return (count + kChunk - 1) / kChunk; }

inline void parallel_chunks(int count, const std::function<void(int chunk, int begin, int end)>& body) {
    int nchunks = chunk_count(count);
    int workers = std::min(worker_count(), nchunks);
    if (workers <= 1) {
        for (int c = 0; c < nchunks; ++c)
            body(c, c * kChunk, std::min(count, (c + 1) * kChunk));
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w]() {
            try {
                for (;;) {
                    int c = next.fetch_add(1);
                    if (c >= nchunks) return;
                    body(c, c * kChunk, std::min(count, (c + 1) * kChunk));
                }
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& err : errors)
        if (err) std::rethrow_exception(err);
}

inline void parallel_for(int count, const std::function<void(int)>& body) {
    parallel_chunks(count, [&](int, int begin, int end) {
        for (int i = begin; i < end; ++i) body(i);
    });
}

}  // namespace mfjump
