#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "deltafuse/tensor.hpp"

namespace deltafuse {

// safetensors container layout:
//
//   [8 bytes]  little-endian u64 N = header length
//   [N bytes]  UTF-8 JSON: { "tensor_name": { "dtype": "F32"|"F16"|"BF16",
//                                             "shape": [..],
//                                             "data_offsets": [begin, end] },
//                            ...,
//                            "__metadata__": { "key": "value", ... } }
//   [rest]     packed tensor data; offsets are relative to this region
//
// The writer is canonical: names sorted, minimal JSON with lexicographically
// sorted keys, data packed in sorted-name order with no gaps. File bytes are
// a pure function of the logical content, so a re-save of a loaded file is
// byte-identical.

struct LoadOptions {
    // Reject tensors containing NaN unless set.
    bool allow_nan = false;
    // Non-fatal diagnostics (e.g. unreferenced data bytes) are appended here
    // when set, otherwise printed to stderr.
    std::vector<std::string>* warnings = nullptr;
};

// Throws ParseError on malformed containers, ValidationError on content that
// violates tensor invariants. Entries come back ordered by ascending data
// offset.
ModelWeights load_safetensors(const std::filesystem::path& path, const LoadOptions& opts = {});
ModelWeights decode_safetensors(const uint8_t* data, size_t size, const LoadOptions& opts = {});

void save_safetensors(const ModelWeights& weights, const std::filesystem::path& path);
std::vector<uint8_t> encode_safetensors(const ModelWeights& weights);

}  // namespace deltafuse
