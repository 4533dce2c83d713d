#include "deltafuse/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "deltafuse/errors.hpp"
#include "deltafuse/rng.hpp"

namespace deltafuse {

int64_t shape_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

std::string shape_to_string(const std::vector<int64_t>& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

int64_t Tensor::numel() const {
    return shape_numel(shape);
}

Tensor Tensor::make(Dtype dtype, std::vector<int64_t> shape, std::vector<float> values) {
    for (int64_t d : shape) {
        if (d < 0) {
            throw ValidationError("tensor shape has negative dimension " + std::to_string(d));
        }
    }
    const int64_t n = shape_numel(shape);
    if (int64_t(values.size()) != n) {
        throw ValidationError("tensor value count " + std::to_string(values.size()) +
                              " does not match shape " + shape_to_string(shape) + " (" +
                              std::to_string(n) + " elements)");
    }
    Tensor t;
    t.dtype = dtype;
    t.shape = std::move(shape);
    t.values = std::move(values);
    return t;
}

Tensor Tensor::zeros(Dtype dtype, std::vector<int64_t> shape) {
    const int64_t n = shape_numel(shape);
    return make(dtype, std::move(shape), std::vector<float>(size_t(n), 0.0f));
}

Tensor Tensor::scalar(Dtype dtype, float value) {
    return make(dtype, {}, {value});
}

bool Tensor::storage_exact() const {
    if (dtype == Dtype::F32) return true;
    for (float v : values) {
        const float q = quantize_to_dtype(v, dtype);
        if (std::bit_cast<uint32_t>(q) != std::bit_cast<uint32_t>(v)) return false;
    }
    return true;
}

bool Tensor::has_nan() const {
    return std::any_of(values.begin(), values.end(), [](float v) { return std::isnan(v); });
}

void Tensor::quantize() {
    if (dtype == Dtype::F32) return;
    for (float& v : values) v = quantize_to_dtype(v, dtype);
}

namespace {

void check_name(const std::string& name) {
    if (name.empty()) throw ValidationError("tensor name is empty");
    if (name.find('\0') != std::string::npos) {
        throw ValidationError("tensor name contains a NUL byte");
    }
}

}  // namespace

void ModelWeights::add(std::string name, Tensor tensor) {
    check_name(name);
    if (index_.count(name)) {
        throw ValidationError("duplicate tensor name '" + name + "'");
    }
    index_.emplace(name, entries_.size());
    entries_.emplace_back(std::move(name), std::move(tensor));
    fingerprint_.reset();
}

void ModelWeights::replace(const std::string& name, Tensor tensor) {
    auto it = index_.find(name);
    if (it == index_.end()) {
        throw ValidationError("cannot replace missing tensor '" + name + "'");
    }
    entries_[it->second].second = std::move(tensor);
    fingerprint_.reset();
}

const Tensor* ModelWeights::find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &entries_[it->second].second;
}

const Tensor& ModelWeights::at(const std::string& name) const {
    const Tensor* t = find(name);
    if (!t) throw ValidationError("missing tensor '" + name + "'");
    return *t;
}

std::vector<std::string> ModelWeights::sorted_names() const {
    std::vector<std::string> names;
    names.reserve(entries_.size());
    for (const auto& [name, _] : entries_) names.push_back(name);
    std::sort(names.begin(), names.end());
    return names;
}

void ModelWeights::set_metadata(std::string key, std::string value) {
    metadata_[std::move(key)] = std::move(value);
}

namespace {

uint64_t fnv_u64_le(uint64_t v, uint64_t state) {
    unsigned char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(v >> (8 * i));
    return fnv1a64(bytes, sizeof(bytes), state);
}

// Hash the storage encoding of one value (what a file would hold).
uint64_t fnv_value(float v, Dtype d, uint64_t state) {
    unsigned char bytes[4];
    switch (d) {
        case Dtype::F32: {
            const uint32_t b = std::bit_cast<uint32_t>(v);
            for (int i = 0; i < 4; ++i) bytes[i] = static_cast<unsigned char>(b >> (8 * i));
            return fnv1a64(bytes, 4, state);
        }
        case Dtype::F16: {
            const uint16_t b = f32_to_f16(v);
            bytes[0] = static_cast<unsigned char>(b & 0xFF);
            bytes[1] = static_cast<unsigned char>(b >> 8);
            return fnv1a64(bytes, 2, state);
        }
        case Dtype::BF16: {
            const uint16_t b = f32_to_bf16(v);
            bytes[0] = static_cast<unsigned char>(b & 0xFF);
            bytes[1] = static_cast<unsigned char>(b >> 8);
            return fnv1a64(bytes, 2, state);
        }
    }
    return state;
}

}  // namespace

uint64_t ModelWeights::fingerprint() const {
    if (fingerprint_) return *fingerprint_;
    uint64_t h = kFnvOffsetBasis;
    for (const auto& name : sorted_names()) {
        const Tensor& t = *find(name);
        h = fnv1a64(name, h);
        h = fnv1a64("\0", 1, h);
        h = fnv1a64(dtype_name(t.dtype), h);
        h = fnv1a64("\0", 1, h);
        h = fnv_u64_le(uint64_t(t.shape.size()), h);
        for (int64_t d : t.shape) h = fnv_u64_le(uint64_t(d), h);
        for (float v : t.values) h = fnv_value(v, t.dtype, h);
    }
    fingerprint_ = h;
    return h;
}

std::string fingerprint_hex(uint64_t fp) {
    char buf[19];
    std::snprintf(buf, sizeof(buf), "0x%016llx", static_cast<unsigned long long>(fp));
    return buf;
}

bool weights_equal(const ModelWeights& a, const ModelWeights& b) {
    if (a.size() != b.size()) return false;
    if (a.metadata() != b.metadata()) return false;
    for (const auto& [name, ta] : a.entries()) {
        const Tensor* tb = b.find(name);
        if (!tb) return false;
        if (ta.dtype != tb->dtype || ta.shape != tb->shape) return false;
        if (ta.values.size() != tb->values.size()) return false;
        for (size_t i = 0; i < ta.values.size(); ++i) {
            if (std::bit_cast<uint32_t>(ta.values[i]) != std::bit_cast<uint32_t>(tb->values[i])) {
                return false;
            }
        }
    }
    return true;
}

CompatReport validate_compatibility(const ModelWeights& a, const ModelWeights& b) {
    CompatReport report;
    for (const auto& name : a.sorted_names()) {
        const Tensor* tb = b.find(name);
        if (!tb) {
            report.only_in_a.push_back(name);
            continue;
        }
        const Tensor& ta = *a.find(name);
        if (ta.shape != tb->shape) {
            report.shape_mismatches.push_back(
                {name, shape_to_string(ta.shape), shape_to_string(tb->shape)});
        }
        if (ta.dtype != tb->dtype) {
            report.dtype_mismatches.push_back({name, dtype_name(ta.dtype), dtype_name(tb->dtype)});
        }
    }
    for (const auto& name : b.sorted_names()) {
        if (!a.contains(name)) report.only_in_b.push_back(name);
    }
    return report;
}

std::string CompatReport::summary() const {
    if (is_compatible()) return "compatible";
    std::ostringstream os;
    os << "incompatible:";
    if (!only_in_a.empty()) {
        os << "\n  only in first:";
        for (const auto& n : only_in_a) os << ' ' << n;
    }
    if (!only_in_b.empty()) {
        os << "\n  only in second:";
        for (const auto& n : only_in_b) os << ' ' << n;
    }
    for (const auto& m : shape_mismatches) {
        os << "\n  shape mismatch " << m.name << ": " << m.a << " vs " << m.b;
    }
    for (const auto& m : dtype_mismatches) {
        os << "\n  dtype mismatch " << m.name << ": " << m.a << " vs " << m.b;
    }
    return os.str();
}

}  // namespace deltafuse
