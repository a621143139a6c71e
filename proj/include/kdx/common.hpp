#ifndef KDX_COMMON_HPP
#define KDX_COMMON_HPP

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace kdx {

// Thrown when tensor/batch dimensions disagree.
class ShapeError : public std::invalid_argument {
public:
    explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

// Thrown on invalid configuration values (bad alpha, epochs, percentages...).
class ConfigError : public std::invalid_argument {
public:
    explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

// FNV-1a 64-bit. Used for parameter hashes, manifest content hashes and
// config hashes; these are provenance fingerprints, not security hashes.
inline std::uint64_t fnv1a64(const void* data, std::size_t len,
                             std::uint64_t seed = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t seed = 0xcbf29ce484222325ULL) {
    return fnv1a64(s.data(), s.size(), seed);
}

inline std::string hash_hex(std::uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return out;
}

// splitmix64 finalizer; mixes a base seed with stream salts so per-epoch /
// per-purpose RNG streams never collide.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1) + 0x94d049bb133111ebULL * (c + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t salt1 = 0, std::uint64_t salt2 = 0) {
    return std::mt19937_64(mix_seed(seed, salt1, salt2));
}

}  // namespace kdx

#endif  // KDX_COMMON_HPP
