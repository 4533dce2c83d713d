#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>

namespace deltafuse {

inline constexpr uint64_t kFnvOffsetBasis = 0xcbf29ce484222325ull;
inline constexpr uint64_t kFnvPrime = 0x100000001b3ull;

// 64-bit FNV-1a; `state` chains multi-part hashes.
inline uint64_t fnv1a64(const void* data, size_t len, uint64_t state = kFnvOffsetBasis) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        state ^= p[i];
        state *= kFnvPrime;
    }
    return state;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t state = kFnvOffsetBasis) {
    return fnv1a64(s.data(), s.size(), state);
}

// Exact-match overload: without it a (const char*, state) call would bind
// to the raw-bytes overload above and read `state` as the length.
inline uint64_t fnv1a64(const char* s, uint64_t state = kFnvOffsetBasis) {
    return fnv1a64(std::string_view(s), state);
}

// SplitMix64 output function.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Counter-indexed random stream. Draw i never depends on draw j, so results
// are identical no matter how work is scheduled or iterated.
class CounterRng {
public:
    explicit CounterRng(uint64_t key) : key_(key) {}

    uint64_t at(uint64_t counter) const {
        return splitmix64(key_ + counter * 0x9e3779b97f4a7c15ull);
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform01(uint64_t counter) const {
        return double(at(counter) >> 11) * 0x1.0p-53;
    }

    uint64_t key() const { return key_; }

private:
    uint64_t key_;
};

// Stream key for seeded per-tensor randomness: FNV-1a over the little-endian
// seed bytes followed by the context strings, in order.
inline uint64_t derive_stream_key(uint64_t seed, std::string_view a, std::string_view b = {}) {
    unsigned char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(seed >> (8 * i));
    uint64_t h = fnv1a64(bytes, sizeof(bytes));
    h = fnv1a64(a, h);
    h = fnv1a64(b, h);
    return h;
}

}  // namespace deltafuse
