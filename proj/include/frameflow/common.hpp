#pragma once

// Shared error types and small utilities used across the library.

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>

namespace frameflow {

// Violated call contract (bad shapes, out-of-domain arguments, misuse of an API).
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error("contract violation: " + msg) {}
};

// A computation produced NaN/Inf or failed to converge. Messages name the offending
// quantity so failures in long runs are actionable.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};

// Bad user-facing configuration (unknown keys, unparsable values, missing files).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ContractError(msg);
}

inline void require_finite(double v, const char* what) {
    if (!std::isfinite(v)) throw NumericError(std::string(what) + " is not finite");
}

inline void require_all_finite(const double* v, std::size_t len, const char* what) {
    for (std::size_t i = 0; i < len; ++i)
        if (!std::isfinite(v[i])) throw NumericError(std::string(what) + " has a non-finite entry");
}

// Worker cap for batch parallelism. FRAMEFLOW_THREADS=1 gives bit-reproducible runs;
// unset falls back to the hardware concurrency.
inline int worker_threads() {
    if (const char* env = std::getenv("FRAMEFLOW_THREADS")) {
        int v = std::atoi(env);
        if (v >= 1) return v;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return static_cast<int>(hw ? hw : 1);
}

} // namespace frameflow
