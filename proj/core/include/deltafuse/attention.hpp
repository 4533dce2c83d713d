#pragma once

#include <cstdint>
#include <vector>

#include "deltafuse/matrix.hpp"

namespace deltafuse {

// Text-to-vision attention extracted from a decoder forward pass over a
// [vision; text] sequence. Each per-layer slice is the text-row /
// vision-column block of the head-averaged self-attention matrix; rows of
// the underlying full matrix are stochastic before slicing.
struct AttentionMap {
    int64_t vision_len = 0;
    int64_t text_len = 0;
    std::vector<Matrix> per_layer;       // [text_len x vision_len] per layer
    std::vector<Matrix> full_per_layer;  // head-averaged [S x S], for audits
    Matrix averaged;                     // mean of per_layer over layers
};

}  // namespace deltafuse
