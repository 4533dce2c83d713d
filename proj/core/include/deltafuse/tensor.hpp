#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "deltafuse/dtype.hpp"

namespace deltafuse {

// Dense row-major tensor. Values are held as float32 whatever the storage
// dtype; saving narrows with round-to-nearest-even. A tensor is "storage
// exact" when that narrowing is the identity — file round trips are
// bit-exact for storage-exact tensors and lossy otherwise.
struct Tensor {
    Dtype dtype = Dtype::F32;
    std::vector<int64_t> shape;  // non-negative dims; empty means scalar
    std::vector<float> values;   // product(shape) elements

    int64_t numel() const;
    size_t storage_bytes() const { return size_t(numel()) * dtype_size(dtype); }

    // Validating constructor: dims non-negative, value count matches shape.
    static Tensor make(Dtype dtype, std::vector<int64_t> shape, std::vector<float> values);
    static Tensor zeros(Dtype dtype, std::vector<int64_t> shape);
    static Tensor scalar(Dtype dtype, float value);

    bool same_layout(const Tensor& other) const {
        return dtype == other.dtype && shape == other.shape;
    }
    bool storage_exact() const;
    bool has_nan() const;

    // Snap values onto the storage dtype grid.
    void quantize();
};

int64_t shape_numel(const std::vector<int64_t>& shape);
std::string shape_to_string(const std::vector<int64_t>& shape);

// A named, ordered collection of tensors plus free-form string metadata —
// one checkpoint. Iteration follows insertion order; fingerprints and file
// bytes are always derived in sorted-name order, so two collections with the
// same name->tensor mapping hash and serialize identically no matter how
// they were assembled.
class ModelWeights {
public:
    ModelWeights() = default;

    // Throws ValidationError on duplicate, empty, or NUL-containing names.
    void add(std::string name, Tensor tensor);
    // Replaces an existing entry (same name required).
    void replace(const std::string& name, Tensor tensor);

    const Tensor* find(const std::string& name) const;
    const Tensor& at(const std::string& name) const;  // throws if absent
    bool contains(const std::string& name) const { return find(name) != nullptr; }

    const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
    size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }

    std::vector<std::string> sorted_names() const;

    const std::map<std::string, std::string>& metadata() const { return metadata_; }
    void set_metadata(std::string key, std::string value);
    void clear_metadata() { metadata_.clear(); }

    // 64-bit content hash over (sorted names, dtypes, shapes, storage bytes).
    // Metadata does not participate. Cached until the next mutation.
    uint64_t fingerprint() const;

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
    std::unordered_map<std::string, size_t> index_;
    std::map<std::string, std::string> metadata_;
    mutable std::optional<uint64_t> fingerprint_;
};

std::string fingerprint_hex(uint64_t fp);

// Structural equality: same name->tensor map (bitwise value compare, so NaN
// and signed zero are distinguished) and same metadata. Ignores insertion
// order.
bool weights_equal(const ModelWeights& a, const ModelWeights& b);

// Side-by-side structural comparison of two checkpoints.
struct CompatReport {
    struct Mismatch {
        std::string name;
        std::string a;
        std::string b;
    };

    std::vector<std::string> only_in_a;
    std::vector<std::string> only_in_b;
    std::vector<Mismatch> shape_mismatches;
    std::vector<Mismatch> dtype_mismatches;

    bool is_compatible() const {
        return only_in_a.empty() && only_in_b.empty() && shape_mismatches.empty() &&
               dtype_mismatches.empty();
    }
    std::string summary() const;
};

CompatReport validate_compatibility(const ModelWeights& a, const ModelWeights& b);

}  // namespace deltafuse
