#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace sgla {

// Error taxonomy. The CLI maps these onto disjoint exit codes, so keep the
// classes distinct: config (2), data (3), checkpoint (4). Everything else is
// a plain Error.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
public:
    using Error::Error;
};

class CheckpointError : public Error {
public:
    using Error::Error;
};

class AutodiffError : public Error {
public:
    using Error::Error;
};

// Deterministic RNG. The engine stream of mt19937_64 is pinned by the
// standard; the distributions are hand-rolled here because the std::
// distributions are not bit-portable across library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // uniform in [0, 1) with 53 random bits
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() {
        // Box-Muller; one draw per call keeps the stream simple to reason about.
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    std::size_t below(std::size_t n) { return n == 0 ? 0 : static_cast<std::size_t>(next_u64() % n); }

    template <typename V>
    void shuffle(V& v) {
        // Fisher-Yates
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = below(i);
            using std::swap;
            swap(v[i - 1], v[j]);
        }
    }

    // Derives an independent stream seed, e.g. per epoch or per class.
    static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
        std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

private:
    std::mt19937_64 engine_;
};

// Worker cap: SGLA_THREADS, else hardware concurrency.
inline unsigned worker_count() {
    static unsigned cached = [] {
        if (const char* env = std::getenv("SGLA_THREADS")) {
            long v = std::strtol(env, nullptr, 10);
            if (v >= 1) return static_cast<unsigned>(v);
        }
        unsigned hw = std::thread::hardware_concurrency();
        return hw == 0 ? 1u : hw;
    }();
    return cached;
}

// Runs fn(begin, end) over disjoint contiguous chunks of [0, n). Callers must
// only write to locations owned by their chunk; chunking never changes the
// per-location arithmetic order, so results are bit-identical to a serial run.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    const std::size_t threads = std::min<std::size_t>(worker_count(), n);
    if (threads <= 1) {
        if (n > 0) fn(std::size_t{0}, n);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(threads);
    const std::size_t chunk = (n + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
        const std::size_t begin = t * chunk;
        const std::size_t end = std::min(n, begin + chunk);
        if (begin >= end) break;
        pool.emplace_back([&fn, begin, end] { fn(begin, end); });
    }
    for (auto& th : pool) th.join();
}

}  // namespace sgla
