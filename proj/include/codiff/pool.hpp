// SPDX-License-Identifier: Apache-2.0
//
// Tiny fork-join helper. Worker count = min(COLLAB_NUM_WORKERS, hardware).
// Work items must write disjoint outputs; all randomness is drawn from
// per-item substreams, so results do not depend on the worker count.

#pragma once

#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace codiff {

inline int worker_count() {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw < 1) hw = 1;
    if (const char* env = std::getenv("COLLAB_NUM_WORKERS")) {
        int cap = std::atoi(env);
        if (cap >= 1 && cap < hw) hw = cap;
    }
    return hw;
}

inline void parallel_for(size_t n, const std::function<void(size_t)>& fn) {
    int workers = worker_count();
    if (workers <= 1 || n <= 1) {
        for (size_t i = 0; i < n; i++) fn(i);
        return;
    }
    if (static_cast<size_t>(workers) > n) workers = static_cast<int>(n);
    std::vector<std::thread> threads;
    threads.reserve(static_cast<size_t>(workers));
    for (int w = 0; w < workers; w++) {
        threads.emplace_back([&, w]() {
            for (size_t i = static_cast<size_t>(w); i < n; i += static_cast<size_t>(workers)) fn(i);
        });
    }
    for (auto& t : threads) t.join();
}

}  // namespace codiff
