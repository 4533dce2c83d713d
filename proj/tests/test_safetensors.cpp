#include <doctest.h>

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "deltafuse/errors.hpp"
#include "deltafuse/safetensors.hpp"
#include "deltafuse/tensor.hpp"

#include "test_util.hpp"

using namespace deltafuse;
using testutil::TempDir;

namespace {

std::string le64(uint64_t v) {
    std::string s(8, '\0');
    for (int i = 0; i < 8; ++i) s[size_t(i)] = char((v >> (8 * i)) & 0xFF);
    return s;
}

std::string f32_bytes(std::initializer_list<float> vals) {
    std::string s;
    for (float v : vals) {
        char buf[4];
        std::memcpy(buf, &v, 4);
        s.append(buf, 4);
    }
    return s;
}

std::string container(const std::string& header_json, const std::string& data) {
    return le64(header_json.size()) + header_json + data;
}

std::vector<uint8_t> to_bytes(const std::string& s) {
    return std::vector<uint8_t>(s.begin(), s.end());
}

ModelWeights decode(const std::string& file, const LoadOptions& opts = {}) {
    return decode_safetensors(reinterpret_cast<const uint8_t*>(file.data()), file.size(), opts);
}

}  // namespace

TEST_CASE("canonical bytes of a one-tensor file match the frozen reference") {
    ModelWeights w;
    w.add("w", Tensor::make(Dtype::F32, {2}, {1.0f, 2.0f}));
    const std::vector<uint8_t> encoded = encode_safetensors(w);

    const std::string header = R"({"w":{"data_offsets":[0,8],"dtype":"F32","shape":[2]}})";
    REQUIRE(header.size() == 54);
    const std::string expect = container(header, f32_bytes({1.0f, 2.0f}));
    CHECK(encoded == to_bytes(expect));
}

TEST_CASE("header keys and data are ordered by sorted tensor name") {
    ModelWeights w;
    w.add("zz", Tensor::make(Dtype::F32, {1}, {3.0f}));
    w.add("aa", Tensor::make(Dtype::F32, {1}, {4.0f}));
    const std::vector<uint8_t> encoded = encode_safetensors(w);
    const std::string text(encoded.begin(), encoded.end());
    // "aa" must appear before "zz" and own the first data range.
    CHECK(text.find("\"aa\"") < text.find("\"zz\""));
    CHECK(text.find(R"("aa":{"data_offsets":[0,4])") != std::string::npos);
    CHECK(text.find(R"("zz":{"data_offsets":[4,8])") != std::string::npos);
}

TEST_CASE("round-trip preserves values, dtypes, shapes, and metadata") {
    for (uint64_t seed = 1; seed <= 20; ++seed) {
        ModelWeights w = testutil::storage_exact_random_model(seed);
        w.set_metadata("provenance", "unit-test");
        w.set_metadata("seed", std::to_string(seed));
        const std::vector<uint8_t> bytes = encode_safetensors(w);
        const ModelWeights back = decode_safetensors(bytes.data(), bytes.size());
        CHECK(weights_equal(w, back));
        // Canonical writer: encoding the decoded model reproduces the bytes.
        CHECK(encode_safetensors(back) == bytes);
    }
}

TEST_CASE("file save and load round-trips through disk") {
    TempDir dir("st-roundtrip");
    ModelWeights w = testutil::storage_exact_random_model(99);
    const std::string path = dir.file("model.safetensors");
    save_safetensors(w, path);
    const ModelWeights back = load_safetensors(path);
    CHECK(weights_equal(w, back));
}

TEST_CASE("half and bfloat16 tensors round-trip bit-exactly") {
    ModelWeights w;
    w.add("h", Tensor::make(Dtype::F16, {3}, {0.5f, -0x1.0p-24f, 65504.0f}));
    w.add("b", Tensor::make(Dtype::BF16, {2}, {1.0f, -0x1.0p-126f}));
    const auto bytes = encode_safetensors(w);
    const ModelWeights back = decode_safetensors(bytes.data(), bytes.size());
    CHECK(weights_equal(w, back));
}

TEST_CASE("loading orders entries by ascending data offset") {
    const std::string header =
        R"({"second":{"data_offsets":[4,8],"dtype":"F32","shape":[1]},)"
        R"("first":{"data_offsets":[0,4],"dtype":"F32","shape":[1]}})";
    const std::string file = container(header, f32_bytes({7.0f, 8.0f}));
    const ModelWeights w = decode(file);
    REQUIRE(w.size() == 2);
    CHECK(w.entries()[0].first == "first");
    CHECK(w.entries()[0].second.values[0] == 7.0f);
    CHECK(w.entries()[1].first == "second");
    CHECK(w.entries()[1].second.values[0] == 8.0f);
}

TEST_CASE("non-canonical input re-saves canonically") {
    // Extra whitespace and reversed key order: legal, but not what the
    // canonical writer would produce.
    const std::string header =
        R"({ "b": {"dtype": "F32", "shape": [1], "data_offsets": [4, 8]}, )"
        R"("a": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]} })";
    const std::string file = container(header, f32_bytes({1.0f, 2.0f}));
    const ModelWeights w = decode(file);
    const std::vector<uint8_t> canonical = encode_safetensors(w);
    CHECK(canonical != to_bytes(file));
    const ModelWeights again = decode_safetensors(canonical.data(), canonical.size());
    CHECK(weights_equal(w, again));
    CHECK(encode_safetensors(again) == canonical);
}

TEST_CASE("empty model and zero-element tensors round-trip") {
    ModelWeights empty;
    const auto b0 = encode_safetensors(empty);
    CHECK(weights_equal(empty, decode_safetensors(b0.data(), b0.size())));

    ModelWeights w;
    w.add("none", Tensor::make(Dtype::F16, {0, 4}, {}));
    w.add("scalar", Tensor::make(Dtype::F32, {}, {5.0f}));
    const auto b1 = encode_safetensors(w);
    const ModelWeights back = decode_safetensors(b1.data(), b1.size());
    CHECK(weights_equal(w, back));
    CHECK(back.at("none").numel() == 0);
    CHECK(back.at("scalar").shape.empty());
}

TEST_CASE("metadata requires string values") {
    const std::string header = R"({"__metadata__":{"k":5}})";
    const std::string file = container(header, "");
    CHECK_THROWS_AS(decode(file), ParseError);
}

TEST_CASE("truncated and malformed containers are parse errors") {
    SUBCASE("shorter than the length field") {
        const std::string file = "\x02\x00\x00";
        CHECK_THROWS_AS(decode(file), ParseError);
    }
    SUBCASE("declared header length exceeds the file") {
        const std::string file = le64(1000) + "{}";
        CHECK_THROWS_WITH_AS(decode(file),
                             doctest::Contains("exceeds"), ParseError);
    }
    SUBCASE("header is not JSON") {
        const std::string file = container("not json at all", "");
        CHECK_THROWS_AS(decode(file), ParseError);
    }
    SUBCASE("header is a JSON array") {
        const std::string file = container("[1,2]", "");
        CHECK_THROWS_AS(decode(file), ParseError);
    }
    SUBCASE("unsupported dtype") {
        const std::string header = R"({"t":{"data_offsets":[0,8],"dtype":"F64","shape":[1]}})";
        const std::string file = container(header, f32_bytes({0.0f, 0.0f}));
        CHECK_THROWS_WITH_AS(decode(file),
                             doctest::Contains("F64"), ParseError);
    }
    SUBCASE("negative dimension") {
        const std::string header = R"({"t":{"data_offsets":[0,4],"dtype":"F32","shape":[-1]}})";
        const std::string file = container(header, f32_bytes({0.0f}));
        CHECK_THROWS_AS(decode(file), ParseError);
    }
    SUBCASE("offsets out of bounds") {
        const std::string header = R"({"t":{"data_offsets":[0,16],"dtype":"F32","shape":[4]}})";
        const std::string file = container(header, f32_bytes({0.0f}));
        CHECK_THROWS_AS(decode(file), ParseError);
    }
    SUBCASE("offset span disagrees with shape and dtype") {
        const std::string header = R"({"t":{"data_offsets":[0,4],"dtype":"F32","shape":[2]}})";
        const std::string file = container(header, f32_bytes({0.0f, 0.0f}));
        CHECK_THROWS_WITH_AS(decode(file),
                             doctest::Contains("mismatch"), ParseError);
    }
    SUBCASE("overlapping tensor ranges") {
        const std::string header =
            R"({"a":{"data_offsets":[0,8],"dtype":"F32","shape":[2]},)"
            R"("b":{"data_offsets":[4,12],"dtype":"F32","shape":[2]}})";
        const std::string file = container(header, f32_bytes({0.0f, 0.0f, 0.0f}));
        CHECK_THROWS_WITH_AS(decode(file),
                             doctest::Contains("overlap"), ParseError);
    }
}

TEST_CASE("unreferenced bytes produce a warning, not an error") {
    const std::string header = R"({"a":{"data_offsets":[4,8],"dtype":"F32","shape":[1]}})";
    const std::string file = container(header, f32_bytes({9.0f, 1.0f}));
    std::vector<std::string> warnings;
    LoadOptions opts;
    opts.warnings = &warnings;
    const ModelWeights w = decode(file, opts);
    CHECK(w.at("a").values[0] == 1.0f);
    REQUIRE(warnings.size() == 1);
    CHECK(warnings[0].find("not referenced") != std::string::npos);
}

TEST_CASE("NaN payloads are rejected unless explicitly allowed") {
    const std::string header = R"({"t":{"data_offsets":[0,4],"dtype":"F32","shape":[1]}})";
    const std::string file =
        container(header, f32_bytes({std::numeric_limits<float>::quiet_NaN()}));
    CHECK_THROWS_WITH_AS(decode(file),
                         doctest::Contains("NaN"), ValidationError);

    LoadOptions opts;
    opts.allow_nan = true;
    const ModelWeights w = decode(file, opts);
    CHECK(w.at("t").has_nan());
}

TEST_CASE("unreadable path is a parse error") {
    CHECK_THROWS_AS(load_safetensors("/nonexistent/dir/x.safetensors"), ParseError);
}
