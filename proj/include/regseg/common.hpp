#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace regseg {

// ---------------------------------------------------------------------------
// Error types. The CLI maps these onto exit codes (usage 1, data 2, numeric 3).
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InvalidArgument : Error {
    using Error::Error;
};

// Malformed or truncated files; message carries the byte offset / expected size.
struct FormatError : Error {
    using Error::Error;
};

struct DegenerateRegionError : Error {
    using Error::Error;
};

struct SingularTransformError : Error {
    using Error::Error;
};

struct UndefinedMetricError : Error {
    using Error::Error;
};

struct NumericalError : Error {
    using Error::Error;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw InvalidArgument(msg);
}

// ---------------------------------------------------------------------------
// Deterministic RNG. All distributions are derived from the raw mt19937_64
// stream by hand so the sequence is identical on every platform and stdlib.
// ---------------------------------------------------------------------------

class Rng {
  public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // [0, 1)
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; the sine partner is discarded to keep the state sequence simple.
    double normal() {
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Inclusive range. Modulo bias is ~2^-64 per draw; irrelevant here.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        require(hi >= lo, "uniform_int: empty range");
        auto span = static_cast<std::uint64_t>(hi - lo) + 1u;
        if (span == 0) return static_cast<std::int64_t>(eng_());  // full 64-bit range
        return lo + static_cast<std::int64_t>(eng_() % span);
    }

    // Fisher-Yates; std::shuffle is not reproducible across stdlibs.
    template <typename T>
    void shuffle(std::vector<T>& xs) {
        for (std::size_t i = xs.size(); i > 1; --i) {
            auto j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i) - 1));
            std::swap(xs[i - 1], xs[j]);
        }
    }

    // Independent child stream (e.g. one per phantom case).
    Rng fork(std::uint64_t salt) {
        std::uint64_t s = eng_() ^ (0x9e3779b97f4a7c15ULL * (salt + 1));
        return Rng(s);
    }

  private:
    std::mt19937_64 eng_;
};

// ---------------------------------------------------------------------------
// Thread budget. Default 1 for determinism; all parallel kernels are written
// gather-style so results are identical for any thread count.
// ---------------------------------------------------------------------------

inline int& thread_count() {
    static int n = 1;
    return n;
}

inline void set_thread_count(int n) { thread_count() = n < 1 ? 1 : n; }

// Splits [0, n) into contiguous chunks, one per worker.
inline void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn) {
    int nt = thread_count();
    if (nt <= 1 || n < 4096) {
        fn(0, n);
        return;
    }
    if (static_cast<std::int64_t>(nt) > n) nt = static_cast<int>(n);
    std::vector<std::thread> workers;
    workers.reserve(static_cast<std::size_t>(nt));
    std::int64_t chunk = (n + nt - 1) / nt;
    for (int t = 0; t < nt; ++t) {
        std::int64_t lo = t * chunk;
        std::int64_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        workers.emplace_back([&fn, lo, hi] { fn(lo, hi); });
    }
    for (auto& w : workers) w.join();
}

// FNV-1a over bytes; used for config hashes.
inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xF];
        v >>= 4;
    }
    return out;
}

}  // namespace regseg
