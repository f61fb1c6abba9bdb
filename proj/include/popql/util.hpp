#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace popql {

// Base class for numerical failures (eigen-solver breakdown, non-finite
// intermediates). The CLI maps these to exit code 3.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class SingularSystemError : public NumericError {
public:
    using NumericError::NumericError;
};

class NonErgodicError : public NumericError {
public:
    using NumericError::NumericError;
};

class IllConditionedError : public NumericError {
public:
    IllConditionedError(const std::string& what, double condition)
        : NumericError(what), condition(condition) {}
    double condition;
};

class UnboundedDeltaError : public NumericError {
public:
    using NumericError::NumericError;
};

// Invalid model or configuration content (bad probabilities, shape
// mismatches, malformed files). The CLI maps these to exit code 2.
class ModelError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Deterministic SplitMix64 generator. Used instead of std::mt19937 so that
/// streams are identical across standard-library implementations, which keeps
/// serialized experiment outputs byte-reproducible.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform double in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // integer in [0, n)
    std::uint64_t below(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

private:
    std::uint64_t state_;
};

// Derives an independent child seed from (master, index); used to give each
// sweep cell its own generator.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index);

// Canonical float formatting for CSV/JSON output (shortest round-trippable,
// stable across runs).
std::string format_double(double v);

// SHA-1 hex digest of a byte string; used as the content hash of experiment
// configurations.
std::string sha1_hex(const std::string& payload);

}  // namespace popql
