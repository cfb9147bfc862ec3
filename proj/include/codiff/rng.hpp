// SPDX-License-Identifier: Apache-2.0
//
// Counter-based deterministic RNG. Draw k from stream (seed) is a pure
// function of (seed, k), so any stream can be replayed exactly and
// substreams derived from distinct ids never collide by construction.

#pragma once

#include <cmath>
#include <cstdint>

#include "tensor.hpp"

namespace codiff {

namespace detail {
// splitmix64 finalizer.
inline uint64_t mix64(uint64_t x) {
    x ^= x >> 30;
    x *= 0xBF58476D1CE4E5B9ULL;
    x ^= x >> 27;
    x *= 0x94D049BB133111EBULL;
    x ^= x >> 31;
    return x;
}
}  // namespace detail

struct RngStream {
    uint64_t seed = 0;
    uint64_t counter = 0;

    RngStream() = default;
    explicit RngStream(uint64_t s) : seed(s) {}

    uint64_t next_u64() {
        uint64_t x = seed + (++counter) * 0x9E3779B97F4A7C15ULL;
        return detail::mix64(x);
    }

    // Open interval (0,1); never returns 0, so log(u) is safe.
    double uniform() {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * (1.0 / 9007199254740992.0);
    }

    // Box-Muller (cosine branch). Consumes two counter slots per draw.
    float normal() {
        double u1 = uniform();
        double u2 = uniform();
        return static_cast<float>(std::sqrt(-2.0 * std::log(u1)) *
                                  std::cos(2.0 * 3.14159265358979323846 * u2));
    }

    // Integer in [0, n).
    int uniform_int(int n) {
        if (n <= 0) throw std::invalid_argument("rng: uniform_int needs n > 0");
        int v = static_cast<int>(uniform() * n);
        return v < n ? v : n - 1;
    }

    // Independent child stream; safe to hand out per work item.
    RngStream substream(uint64_t id) const {
        return RngStream(detail::mix64(seed ^ (0xA0761D6478BD642FULL * (id + 1))));
    }

    void fill_normal(Tensor& t, float stddev = 1.0f, float mean = 0.0f) {
        for (float& v : *t.data) v = mean + stddev * normal();
    }

    Tensor normal_tensor(const Shape& s, float stddev = 1.0f, float mean = 0.0f) {
        Tensor t = Tensor::zeros(s);
        fill_normal(t, stddev, mean);
        return t;
    }
};

}  // namespace codiff
