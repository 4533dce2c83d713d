#include "deltafuse/dtype.hpp"

#include <bit>

namespace deltafuse {

const char* dtype_name(Dtype d) {
    switch (d) {
        case Dtype::F32: return "F32";
        case Dtype::F16: return "F16";
        case Dtype::BF16: return "BF16";
    }
    return "?";
}

std::optional<Dtype> dtype_from_name(std::string_view name) {
    if (name == "F32") return Dtype::F32;
    if (name == "F16") return Dtype::F16;
    if (name == "BF16") return Dtype::BF16;
    return std::nullopt;
}

uint16_t f32_to_f16(float f) {
    const uint32_t x = std::bit_cast<uint32_t>(f);
    const uint16_t sign = uint16_t((x >> 16) & 0x8000u);
    const uint32_t absx = x & 0x7FFFFFFFu;

    if (absx >= 0x7F800000u) {  // inf or nan
        if (absx > 0x7F800000u) {
            uint16_t payload = uint16_t((absx >> 13) & 0x3FFu);
            if (payload == 0) payload = 0x200;  // keep it a nan after truncation
            return uint16_t(sign | 0x7C00u | payload);
        }
        return uint16_t(sign | 0x7C00u);
    }

    const int e = int(absx >> 23);          // biased binary32 exponent
    const uint32_t m = absx & 0x7FFFFFu;

    if (e >= 113) {  // normal half range (|v| >= 2^-14)
        uint32_t combined = uint32_t(e - 112) << 10 | (m >> 13);
        const uint32_t round = m & 0x1FFFu;
        if (round > 0x1000u || (round == 0x1000u && (combined & 1u))) combined++;
        if (combined >= 0x7C00u) return uint16_t(sign | 0x7C00u);  // overflow to inf
        return uint16_t(sign | combined);
    }
    if (e < 102) return sign;  // underflows to signed zero even after rounding

    // subnormal half: value = M * 2^(e-150), expressed in units of 2^-24
    const uint32_t M = m | 0x800000u;
    const uint32_t shift = uint32_t(126 - e);  // 14..24
    uint32_t h = M >> shift;
    const uint32_t round = M & ((1u << shift) - 1u);
    const uint32_t half = 1u << (shift - 1);
    if (round > half || (round == half && (h & 1u))) h++;
    return uint16_t(sign | h);  // h == 0x400 lands on the smallest normal
}

float f16_to_f32(uint16_t h) {
    const uint32_t sign = uint32_t(h & 0x8000u) << 16;
    uint32_t exp = (h >> 10) & 0x1Fu;
    uint32_t man = h & 0x3FFu;
    uint32_t bits;
    if (exp == 0) {
        if (man == 0) {
            bits = sign;
        } else {  // subnormal: renormalize
            int e = 113;
            while ((man & 0x400u) == 0) {
                man <<= 1;
                e--;
            }
            man &= 0x3FFu;
            bits = sign | (uint32_t(e) << 23) | (man << 13);
        }
    } else if (exp == 31) {
        bits = sign | 0x7F800000u | (man << 13);
    } else {
        bits = sign | ((exp + 112u) << 23) | (man << 13);
    }
    return std::bit_cast<float>(bits);
}

uint16_t f32_to_bf16(float f) {
    const uint32_t x = std::bit_cast<uint32_t>(f);
    if ((x & 0x7F800000u) == 0x7F800000u && (x & 0x7FFFFFu) != 0) {
        // nan: truncate, forcing a mantissa bit if truncation would yield inf
        uint16_t t = uint16_t(x >> 16);
        if ((t & 0x7Fu) == 0) t |= 0x40u;
        return t;
    }
    const uint32_t lsb = (x >> 16) & 1u;
    return uint16_t((x + 0x7FFFu + lsb) >> 16);
}

float bf16_to_f32(uint16_t h) {
    return std::bit_cast<float>(uint32_t(h) << 16);
}

float quantize_to_dtype(float v, Dtype d) {
    switch (d) {
        case Dtype::F32: return v;
        case Dtype::F16: return f16_to_f32(f32_to_f16(v));
        case Dtype::BF16: return bf16_to_f32(f32_to_bf16(v));
    }
    return v;
}

}  // namespace deltafuse
