#include "deltafuse/safetensors.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <fstream>
#include <iostream>

#include <json.hpp>

#include "deltafuse/errors.hpp"

namespace deltafuse {

namespace {

using nlohmann::json;

void warn(const LoadOptions& opts, const std::string& message) {
    if (opts.warnings) {
        opts.warnings->push_back(message);
    } else {
        std::cerr << "warning: " << message << '\n';
    }
}

uint64_t read_u64_le(const uint8_t* p) {
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

void append_u64_le(std::vector<uint8_t>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(uint8_t(v >> (8 * i)));
}

std::vector<float> decode_values(const uint8_t* p, size_t count, Dtype dtype) {
    std::vector<float> values(count);
    switch (dtype) {
        case Dtype::F32:
            for (size_t i = 0; i < count; ++i) {
                uint32_t b = uint32_t(p[4 * i]) | uint32_t(p[4 * i + 1]) << 8 |
                             uint32_t(p[4 * i + 2]) << 16 | uint32_t(p[4 * i + 3]) << 24;
                values[i] = std::bit_cast<float>(b);
            }
            break;
        case Dtype::F16:
            for (size_t i = 0; i < count; ++i) {
                values[i] = f16_to_f32(uint16_t(p[2 * i] | p[2 * i + 1] << 8));
            }
            break;
        case Dtype::BF16:
            for (size_t i = 0; i < count; ++i) {
                values[i] = bf16_to_f32(uint16_t(p[2 * i] | p[2 * i + 1] << 8));
            }
            break;
    }
    return values;
}

void encode_values(std::vector<uint8_t>& out, const Tensor& t) {
    switch (t.dtype) {
        case Dtype::F32:
            for (float v : t.values) {
                const uint32_t b = std::bit_cast<uint32_t>(v);
                out.push_back(uint8_t(b));
                out.push_back(uint8_t(b >> 8));
                out.push_back(uint8_t(b >> 16));
                out.push_back(uint8_t(b >> 24));
            }
            break;
        case Dtype::F16:
            for (float v : t.values) {
                const uint16_t b = f32_to_f16(v);
                out.push_back(uint8_t(b));
                out.push_back(uint8_t(b >> 8));
            }
            break;
        case Dtype::BF16:
            for (float v : t.values) {
                const uint16_t b = f32_to_bf16(v);
                out.push_back(uint8_t(b));
                out.push_back(uint8_t(b >> 8));
            }
            break;
    }
}

}  // namespace

ModelWeights decode_safetensors(const uint8_t* data, size_t size, const LoadOptions& opts) {
    if (size < 8) throw ParseError("container shorter than the 8-byte header length field");
    const uint64_t header_len = read_u64_le(data);
    if (header_len > size - 8) {
        throw ParseError("declared header length " + std::to_string(header_len) +
                         " exceeds file size " + std::to_string(size));
    }

    json header;
    try {
        header = json::parse(data + 8, data + 8 + header_len);
    } catch (const json::exception& e) {
        throw ParseError(std::string("header is not valid JSON: ") + e.what());
    }
    if (!header.is_object()) throw ParseError("header JSON root is not an object");

    const uint8_t* region = data + 8 + header_len;
    const uint64_t region_size = size - 8 - header_len;

    struct Entry {
        std::string name;
        Dtype dtype;
        std::vector<int64_t> shape;
        uint64_t begin, end;
    };
    std::vector<Entry> parsed;
    std::map<std::string, std::string> metadata;

    for (const auto& [name, value] : header.items()) {
        if (name == "__metadata__") {
            if (!value.is_object()) throw ParseError("__metadata__ is not an object");
            for (const auto& [k, v] : value.items()) {
                if (!v.is_string()) {
                    throw ParseError("__metadata__ value for '" + k + "' is not a string");
                }
                metadata[k] = v.get<std::string>();
            }
            continue;
        }
        if (!value.is_object()) {
            throw ParseError("tensor '" + name + "' entry is not an object");
        }
        if (!value.contains("dtype") || !value["dtype"].is_string()) {
            throw ParseError("tensor '" + name + "' is missing a dtype string");
        }
        const std::string dtype_str = value["dtype"].get<std::string>();
        const auto dtype = dtype_from_name(dtype_str);
        if (!dtype) {
            throw ParseError("unsupported dtype '" + dtype_str + "' for tensor '" + name + "'");
        }
        if (!value.contains("shape") || !value["shape"].is_array()) {
            throw ParseError("tensor '" + name + "' is missing a shape array");
        }
        std::vector<int64_t> shape;
        for (const auto& d : value["shape"]) {
            if (!d.is_number_integer() || d.get<int64_t>() < 0) {
                throw ParseError("tensor '" + name + "' has a non-integer or negative dimension");
            }
            shape.push_back(d.get<int64_t>());
        }
        if (!value.contains("data_offsets") || !value["data_offsets"].is_array() ||
            value["data_offsets"].size() != 2) {
            throw ParseError("tensor '" + name + "' is missing data_offsets [begin, end]");
        }
        uint64_t offs[2];
        for (int i = 0; i < 2; ++i) {
            const auto& o = value["data_offsets"][i];
            if (!o.is_number_unsigned() && !(o.is_number_integer() && o.get<int64_t>() >= 0)) {
                throw ParseError("tensor '" + name + "' has a negative data offset");
            }
            offs[i] = o.get<uint64_t>();
        }
        parsed.push_back({name, *dtype, std::move(shape), offs[0], offs[1]});
    }

    // Offset validation: in-bounds, sized to dtype*numel, non-overlapping.
    uint64_t referenced = 0;
    for (const auto& e : parsed) {
        if (e.begin > e.end || e.end > region_size) {
            throw ParseError("tensor '" + e.name + "' data_offsets [" + std::to_string(e.begin) +
                             "," + std::to_string(e.end) + ") fall outside the data region of " +
                             std::to_string(region_size) + " bytes");
        }
        const uint64_t expected = uint64_t(shape_numel(e.shape)) * dtype_size(e.dtype);
        if (e.end - e.begin != expected) {
            throw ParseError("data_offsets size mismatch for tensor '" + e.name + "': got " +
                             std::to_string(e.end - e.begin) + " bytes, shape " +
                             shape_to_string(e.shape) + " needs " + std::to_string(expected));
        }
        referenced += expected;
    }

    std::vector<const Entry*> by_offset;
    for (const auto& e : parsed) by_offset.push_back(&e);
    std::stable_sort(by_offset.begin(), by_offset.end(), [](const Entry* a, const Entry* b) {
        if (a->begin != b->begin) return a->begin < b->begin;
        return a->end < b->end;
    });
    for (size_t i = 1; i < by_offset.size(); ++i) {
        const Entry* prev = by_offset[i - 1];
        const Entry* cur = by_offset[i];
        if (prev->end > cur->begin && prev->begin < prev->end && cur->begin < cur->end) {
            throw ParseError("tensors '" + prev->name + "' and '" + cur->name +
                             "' have overlapping data ranges");
        }
    }
    if (referenced < region_size) {
        warn(opts, std::to_string(region_size - referenced) +
                       " bytes in the data region are not referenced by any tensor");
    }

    ModelWeights weights;
    for (const Entry* e : by_offset) {
        auto values = decode_values(region + e->begin, size_t(shape_numel(e->shape)), e->dtype);
        Tensor t = Tensor::make(e->dtype, e->shape, std::move(values));
        if (!opts.allow_nan && t.has_nan()) {
            throw ValidationError("tensor '" + e->name + "' contains NaN values");
        }
        weights.add(e->name, std::move(t));
    }
    for (auto& [k, v] : metadata) weights.set_metadata(k, v);
    return weights;
}

ModelWeights load_safetensors(const std::filesystem::path& path, const LoadOptions& opts) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open '" + path.string() + "' for reading");
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                               std::istreambuf_iterator<char>());
    if (in.bad()) throw ParseError("I/O error while reading '" + path.string() + "'");
    return decode_safetensors(bytes.data(), bytes.size(), opts);
}

std::vector<uint8_t> encode_safetensors(const ModelWeights& weights) {
    const auto names = weights.sorted_names();

    // nlohmann's default object keeps keys in std::map order, which is the
    // lexicographic order the canonical form requires.
    json header = json::object();
    uint64_t offset = 0;
    for (const auto& name : names) {
        const Tensor& t = weights.at(name);
        const uint64_t bytes = t.storage_bytes();
        json entry;
        entry["dtype"] = dtype_name(t.dtype);
        entry["shape"] = t.shape;
        entry["data_offsets"] = {offset, offset + bytes};
        header[name] = std::move(entry);
        offset += bytes;
    }
    if (!weights.metadata().empty()) {
        json meta = json::object();
        for (const auto& [k, v] : weights.metadata()) meta[k] = v;
        header["__metadata__"] = std::move(meta);
    }

    const std::string header_str = header.dump();
    std::vector<uint8_t> out;
    out.reserve(8 + header_str.size() + size_t(offset));
    append_u64_le(out, header_str.size());
    out.insert(out.end(), header_str.begin(), header_str.end());
    for (const auto& name : names) encode_values(out, weights.at(name));
    return out;
}

void save_safetensors(const ModelWeights& weights, const std::filesystem::path& path) {
    const auto bytes = encode_safetensors(weights);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ParseError("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw ParseError("I/O error while writing '" + path.string() + "'");
}

}  // namespace deltafuse
