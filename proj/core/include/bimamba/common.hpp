#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace bimamba {

using i64 = std::int64_t;
using u64 = std::uint64_t;

// Base class for everything this library throws on purpose.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shape or dimensionality violations (mismatched operands, bad extents).
class ShapeError : public Error {
public:
    using Error::Error;
};

// Non-finite values, division by zero, diverged computations.
class NumericError : public Error {
public:
    using Error::Error;
};

// API misuse: calling operations outside their stated preconditions.
class ContractError : public Error {
public:
    using Error::Error;
};

// Malformed file content. Carries the byte offset of the failure.
class ParseError : public Error {
public:
    ParseError(const std::string& msg, std::size_t byte_offset)
        : Error(msg + " (byte " + std::to_string(byte_offset) + ")"),
          offset_(byte_offset) {}
    std::size_t byte_offset() const { return offset_; }

private:
    std::size_t offset_;
};

// Deterministic random stream. std::mt19937_64 has a standardized bit
// sequence, and the value derivations below avoid the library-defined
// distribution objects, so a given seed yields the same numbers on any
// platform.
class Rng {
public:
    explicit Rng(u64 seed) : gen_(seed) {}

    u64 next_u64() { return gen_(); }

    // [0, 1)
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal(double mean, double stddev) {
        if (has_spare_) {
            has_spare_ = false;
            return mean + stddev * spare_;
        }
        // Box-Muller; u1 in (0, 1] so the log is finite.
        double u1 = 1.0 - uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return mean + stddev * r * std::cos(theta);
    }

    // [0, n)
    i64 below(i64 n) {
        return static_cast<i64>(gen_() % static_cast<u64>(n));
    }

    bool bernoulli(double p) { return uniform() < p; }

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// splitmix64 finalizer; used to derive independent seeds from a master seed.
inline u64 mix_seed(u64 a, u64 b) {
    u64 z = a + 0x9e3779b97f4a7c15ull * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// FNV-1a, for seeding per-subject streams from string ids.
inline u64 hash_string(std::string_view s) {
    u64 h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

// Worker-thread cap for the compute kernels. Kernels partition work so
// results are bitwise identical for any thread count.
void set_thread_count(int n);
int thread_count();

class ThreadCountGuard {
public:
    explicit ThreadCountGuard(int n) : saved_(thread_count()) { set_thread_count(n); }
    ~ThreadCountGuard() { set_thread_count(saved_); }

private:
    int saved_;
};

}  // namespace bimamba
