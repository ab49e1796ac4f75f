#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace retsyn {

// Error hierarchy mirrors the CLI exit-code contract.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : Error {      // exit code 2
    using Error::Error;
};
struct MissingArtifactError : Error {  // exit code 3
    using Error::Error;
};
struct NumericalError : Error {   // exit code 4
    using Error::Error;
};

[[noreturn]] inline void raise(const std::string& msg) { throw Error(msg); }

// FNV-1a over bytes; used for config hashing and seed derivation.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 1469598103934665603ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t fnv1a(const std::string& s, uint64_t h = 1469598103934665603ull) {
    return fnv1a(s.data(), s.size(), h);
}

}  // namespace retsyn
