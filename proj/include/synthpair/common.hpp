#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace synthpair {

/// Base error for every recoverable failure raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised when a remote endpoint cannot be reached at all (connection refused,
/// DNS failure, timeout). Distinct from a reachable endpoint returning garbage.
class EndpointUnavailable : public Error {
public:
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Stable hashing. Everything that must be reproducible across machines goes
// through these, never through std::hash.

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

constexpr std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = kFnvOffset) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= kFnvPrime;
    }
    return h;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
    return splitmix64(a ^ splitmix64(b + 0x632be59bd9b4e019ULL));
}

template <typename... Ts>
constexpr std::uint64_t hash_values(std::uint64_t first, Ts... rest) {
    std::uint64_t h = splitmix64(first);
    ((h = hash_combine(h, static_cast<std::uint64_t>(rest))), ...);
    return h;
}

/// Maps 64 random bits to a double in [0, 1) using the top 53 bits.
constexpr double unit_interval(std::uint64_t bits) {
    return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

/// Small portable PRNG (splitmix64 stream). The standard distributions are
/// implementation-defined, so all sampling goes through this.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        state_ += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    double uniform() { return unit_interval(next()); }

    /// Uniform integer in [0, n). Rejection sampling, no modulo bias.
    std::uint64_t below(std::uint64_t n);

    /// Standard normal via Box-Muller.
    double normal();

private:
    std::uint64_t state_;
};

/// Fisher-Yates shuffle driven by Rng.
template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        auto j = static_cast<std::size_t>(rng.below(i));
        std::swap(v[i - 1], v[j]);
    }
}

// ---------------------------------------------------------------------------
// Text helpers shared by the concept bank, the matcher and the caption engine.

/// Bytes >= 0x80 count as word characters so UTF-8 letters never form a
/// boundary.
constexpr bool is_word_byte(unsigned char c) {
    return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c >= 0x80;
}

constexpr bool is_space_byte(unsigned char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

std::string_view trim(std::string_view s);

/// Trim, ASCII-lowercase and collapse internal whitespace runs to one space.
std::string normalize_text(std::string_view s);

/// Collapse whitespace runs to single spaces and trim, preserving case.
std::string collapse_whitespace(std::string_view s);

/// Number of maximal non-space runs.
std::size_t count_words(std::string_view s);

std::vector<std::string> split(std::string_view s, char sep);

/// Lowercase hex SHA-256 of a byte buffer.
std::string sha256_hex(std::string_view bytes);

}  // namespace synthpair
