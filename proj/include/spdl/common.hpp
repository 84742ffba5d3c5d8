#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace spdl {

// Error taxonomy. Everything thrown by the library derives from Error so the
// CLI can catch one type and exit nonzero.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes or malformed dimensions.
struct ShapeError : Error {
    using Error::Error;
};

// Invalid argument value (bad temperature, head index out of range, ...).
struct ArgumentError : Error {
    using Error::Error;
};

// Malformed input data (unnormalized teacher rows, bad corpus ids, ...).
struct DataError : Error {
    using Error::Error;
};

// Sequence/cache capacity exceeded.
struct CapacityError : Error {
    using Error::Error;
};

// Malformed tree structure or mask encoding.
struct StructureError : Error {
    using Error::Error;
};

// Checkpoint / corpus file problems.
struct IoError : Error {
    using Error::Error;
};

// Non-finite values detected (checked mode, training aborts).
struct NumericError : Error {
    using Error::Error;
};

inline void check(bool cond, const char* msg) {
    if (!cond) {
        throw Error(msg);
    }
}

// Seeded generator used everywhere randomness is needed. One explicit
// instance per run/worker; never a process-global.
using Rng = std::mt19937_64;

inline double rand_uniform(Rng& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double rand_normal(Rng& rng, double mean, double stddev) {
    return std::normal_distribution<double>(mean, stddev)(rng);
}

inline int64_t rand_int(Rng& rng, int64_t lo, int64_t hi_inclusive) {
    return std::uniform_int_distribution<int64_t>(lo, hi_inclusive)(rng);
}

// Inverse-CDF draw from a probability vector. Walk order is fixed (ascending
// index); the final index absorbs any rounding slack.
template <typename T>
int sample_from(const T* probs, int n, Rng& rng) {
    const double u = rand_uniform(rng, 0.0, 1.0);
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        acc += (double)probs[i];
        if (u < acc) {
            return i;
        }
    }
    return n - 1;
}

}  // namespace spdl
