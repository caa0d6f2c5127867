#pragma once

#include <functional>
#include <thread>
#include <vector>

namespace rte {

inline int resolve_threads(int requested) {
    if (requested > 0) return requested;
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : int(hw);
}

/// Static block partition of [0, count) over `threads` workers. Each worker
/// owns a disjoint index range, so writes never overlap and results do not
/// depend on the worker count.
template <class Fn>
void parallel_for(int count, int threads, Fn&& fn) {
    threads = std::min(std::max(threads, 1), std::max(count, 1));
    if (threads <= 1 || count <= 1) {
        for (int i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(threads);
    int base = count / threads;
    int rem = count % threads;
    int begin = 0;
    for (int t = 0; t < threads; ++t) {
        int len = base + (t < rem ? 1 : 0);
        int end = begin + len;
        pool.emplace_back([&fn, begin, end] {
            for (int i = begin; i < end; ++i) fn(i);
        });
        begin = end;
    }
    for (auto& th : pool) th.join();
}

}  // namespace rte
