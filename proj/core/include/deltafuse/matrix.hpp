#pragma once

#include <cstdint>
#include <vector>

namespace deltafuse {

// Dense row-major float matrix, just enough for the toy stack.
struct Matrix {
    int64_t rows = 0;
    int64_t cols = 0;
    std::vector<float> data;

    Matrix() = default;
    Matrix(int64_t r, int64_t c) : rows(r), cols(c), data(size_t(r * c), 0.0f) {}

    float& at(int64_t r, int64_t c) { return data[size_t(r * cols + c)]; }
    float at(int64_t r, int64_t c) const { return data[size_t(r * cols + c)]; }
};

}  // namespace deltafuse
