#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace hmseg {

// FNV-1a, used both for seed-substream derivation and content hashes.
inline uint64_t fnv1a(std::string_view s, uint64_t h = 1469598103934665603ull) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t fnv1a_bytes(const void* p, size_t n, uint64_t h = 1469598103934665603ull) {
    const unsigned char* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ull;
    }
    return h;
}

// Independent deterministic substream: same (seed, tag) -> same stream.
inline std::mt19937_64 substream(uint64_t seed, std::string_view tag) {
    uint64_t h = fnv1a(tag);
    h ^= seed + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    return std::mt19937_64(h);
}

inline std::mt19937_64 substream(uint64_t seed, std::string_view tag, uint64_t index) {
    std::mt19937_64 eng = substream(seed, tag);
    eng.discard(4);
    uint64_t salt = eng() ^ (index * 0xbf58476d1ce4e5b9ull + 0x94d049bb133111ebull);
    return std::mt19937_64(salt);
}

}  // namespace hmseg
