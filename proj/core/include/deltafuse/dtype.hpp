#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string_view>

namespace deltafuse {

// Storage element types for checkpoint tensors. All arithmetic runs on
// float32 values; F16 and BF16 payloads are widened on load and narrowed
// with round-to-nearest-even on save.
enum class Dtype : uint8_t {
    F32,
    F16,
    BF16,
};

constexpr size_t dtype_size(Dtype d) {
    return d == Dtype::F32 ? 4u : 2u;
}

const char* dtype_name(Dtype d);
std::optional<Dtype> dtype_from_name(std::string_view name);

// IEEE binary16 <-> binary32. Narrowing rounds to nearest-even; widening is
// exact. NaN payloads survive a widen/narrow round trip bit-for-bit.
uint16_t f32_to_f16(float f);
float f16_to_f32(uint16_t h);

// bfloat16 (top half of binary32) <-> binary32, same rounding rules.
uint16_t f32_to_bf16(float f);
float bf16_to_f32(uint16_t h);

// Round a value to the nearest one representable in `d`, widened back to
// float. Identity for F32.
float quantize_to_dtype(float v, Dtype d);

}  // namespace deltafuse
