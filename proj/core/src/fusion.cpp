#include "deltafuse/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string_view>

#include <json.hpp>

#include "deltafuse/errors.hpp"
#include "deltafuse/rng.hpp"

namespace deltafuse {

namespace {

using nlohmann::json;

constexpr const char* kTextSource = "text";

const EncoderSpec* find_encoder(const FusionConfig& config, const std::string& name) {
    for (const auto& e : config.encoders) {
        if (e.name == name) return &e;
    }
    return nullptr;
}

int64_t ceil_ratio(double ratio, int64_t n) {
    if (n <= 0) return 0;
    const int64_t k = int64_t(std::ceil(ratio * double(n) - 1e-9));
    return std::clamp<int64_t>(k, 0, n);
}

}  // namespace

TokenSequence concat_tokens(const std::vector<Segment>& vision_segments, int64_t text_len) {
    if (text_len < 0) throw ValidationError("text_len must be non-negative");
    TokenSequence seq;
    for (const auto& s : vision_segments) {
        if (s.source == kTextSource) {
            throw ValidationError("vision segment may not use the reserved source name 'text'");
        }
        seq.segments.push_back(s);
        seq.total_len += int64_t(s.indices.size());
    }
    Segment text;
    text.source = kTextSource;
    text.indices.resize(size_t(text_len));
    for (int64_t i = 0; i < text_len; ++i) text.indices[size_t(i)] = i;
    seq.total_len += text_len;
    seq.segments.push_back(std::move(text));
    return seq;
}

TokenSequence apply_pruning(const TokenSequence& seq, const PruningPolicy& policy,
                            const FusionConfig& config) {
    switch (policy.kind) {
        case PruningKind::None:
            return seq;
        case PruningKind::LayerSparsity: {
            if (policy.start_layer < 1 || policy.start_layer > config.num_layers) {
                throw ValidationError("start_layer must lie in [1," +
                                      std::to_string(config.num_layers) + "], got " +
                                      std::to_string(policy.start_layer));
            }
            if (!(policy.keep_ratio > 0.0) || policy.keep_ratio > 1.0) {
                throw ValidationError("keep_ratio must lie in (0,1]");
            }
            // Token identity is untouched; the ratio only shapes per-layer cost.
            return seq;
        }
        case PruningKind::RandomDrop:
            break;
    }

    if (policy.drop_count < 0) throw ValidationError("drop_count must be non-negative");

    // Collect eligible (segment, position) pairs with their random keys.
    struct Candidate {
        uint64_t key;
        size_t segment;
        size_t position;  // position within the segment's index list
        std::string_view source;
        int64_t index;
    };
    std::vector<Candidate> eligible;
    for (size_t s = 0; s < seq.segments.size(); ++s) {
        const Segment& seg = seq.segments[s];
        if (seg.source == kTextSource) continue;  // text is never pruned
        std::optional<std::pair<int64_t, int64_t>> local;
        if (policy.scope == PruningScope::LocalOnly) {
            const EncoderSpec* enc = find_encoder(config, seg.source);
            if (!enc) {
                throw ValidationError("segment source '" + seg.source +
                                      "' is not a configured encoder");
            }
            if (!enc->local_range) continue;  // no local span: nothing eligible here
            local = enc->local_range;
        }
        const CounterRng rng(derive_stream_key(policy.seed, seg.source));
        for (size_t p = 0; p < seg.indices.size(); ++p) {
            const int64_t index = seg.indices[p];
            if (local && (index < local->first || index >= local->second)) continue;
            eligible.push_back({rng.at(uint64_t(index)), s, p, seg.source, index});
        }
    }

    if (policy.drop_count > int64_t(eligible.size())) {
        throw ValidationError("cannot drop " + std::to_string(policy.drop_count) +
                              " tokens: only " + std::to_string(eligible.size()) + " are eligible");
    }

    // Drop the n smallest keys; keys are a pure function of
    // (seed, source, token index), so the outcome is schedule-independent.
    std::sort(eligible.begin(), eligible.end(), [](const Candidate& a, const Candidate& b) {
        if (a.key != b.key) return a.key < b.key;
        if (a.source != b.source) return a.source < b.source;
        return a.index < b.index;
    });

    std::vector<std::vector<uint8_t>> dropped(seq.segments.size());
    for (size_t s = 0; s < seq.segments.size(); ++s) {
        dropped[s].assign(seq.segments[s].indices.size(), 0);
    }
    for (int64_t i = 0; i < policy.drop_count; ++i) {
        dropped[eligible[size_t(i)].segment][eligible[size_t(i)].position] = 1;
    }

    TokenSequence out;
    for (size_t s = 0; s < seq.segments.size(); ++s) {
        const Segment& seg = seq.segments[s];
        Segment kept;
        kept.source = seg.source;
        for (size_t p = 0; p < seg.indices.size(); ++p) {
            if (!dropped[s][p]) kept.indices.push_back(seg.indices[p]);
        }
        out.total_len += int64_t(kept.indices.size());
        out.segments.push_back(std::move(kept));
    }
    return out;
}

FlopsReport estimate_flops(const FusionConfig& config, int64_t fused_len) {
    if (config.model_dim <= 0) throw ValidationError("model_dim must be positive");
    if (config.num_layers < 1) throw ValidationError("num_layers must be at least 1");
    if (fused_len < config.text_len) {
        throw ValidationError("fused_len " + std::to_string(fused_len) +
                              " is shorter than text_len " + std::to_string(config.text_len));
    }

    const int64_t d = config.model_dim;
    const int64_t vision = fused_len - config.text_len;
    int64_t sparse_len = fused_len;
    if (config.pruning.kind == PruningKind::LayerSparsity) {
        if (config.pruning.start_layer < 1 || config.pruning.start_layer > config.num_layers) {
            throw ValidationError("start_layer must lie in [1," +
                                  std::to_string(config.num_layers) + "], got " +
                                  std::to_string(config.pruning.start_layer));
        }
        sparse_len = config.text_len + ceil_ratio(config.pruning.keep_ratio, vision);
    }

    FlopsReport report;
    for (int layer = 1; layer <= config.num_layers; ++layer) {
        const bool reduced = config.pruning.kind == PruningKind::LayerSparsity &&
                             layer >= config.pruning.start_layer;
        const int64_t L = reduced ? sparse_len : fused_len;
        FlopsReport::LayerCost cost;
        cost.effective_len = L;
        cost.attention_proj = 8 * L * d * d;
        cost.attention_scores = 4 * L * L * d;
        cost.mlp = 16 * L * d * d;
        report.total += cost.layer_total();
        report.per_layer.push_back(cost);
    }
    return report;
}

BudgetVerdict budget_check(const FusionConfig& config, int64_t fused_len) {
    if (config.seq_cap <= 0) throw ValidationError("seq_cap must be positive");
    BudgetVerdict v;
    v.fused_len = fused_len;
    v.seq_cap = config.seq_cap;
    v.overflow = std::max<int64_t>(0, fused_len - config.seq_cap);
    v.ok = v.overflow == 0;
    const int64_t vision = std::max<int64_t>(0, fused_len - config.text_len);
    v.suggested_drop = std::min(v.overflow, vision);
    return v;
}

namespace {

int64_t require_int(const json& j, const std::string& path, const char* field, int64_t lo,
                    int64_t hi = INT64_MAX) {
    if (!j.contains(field)) {
        throw ValidationError(path + field + ": required integer field");
    }
    const auto& v = j.at(field);
    if (!v.is_number_integer()) {
        throw ValidationError(path + field + ": expected an integer");
    }
    const int64_t n = v.get<int64_t>();
    if (n < lo || n > hi) {
        throw ValidationError(path + field + ": value " + std::to_string(n) + " out of range");
    }
    return n;
}

void reject_unknown(const json& j, const std::string& path,
                    std::initializer_list<const char*> known) {
    for (const auto& [key, _] : j.items()) {
        if (std::find_if(known.begin(), known.end(),
                         [&](const char* k) { return key == k; }) == known.end()) {
            throw ValidationError(path.empty() ? "unknown field '" + key + "'"
                                               : path + ": unknown field '" + key + "'");
        }
    }
}

PruningPolicy parse_pruning(const json& j, int num_layers) {
    PruningPolicy p;
    if (!j.is_object()) throw ValidationError("pruning: expected an object");
    if (!j.contains("kind") || !j.at("kind").is_string()) {
        throw ValidationError("pruning.kind: required string field");
    }
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "none") {
        reject_unknown(j, "pruning", {"kind"});
        p.kind = PruningKind::None;
    } else if (kind == "random_drop") {
        reject_unknown(j, "pruning", {"kind", "drop_count", "scope", "seed"});
        p.kind = PruningKind::RandomDrop;
        p.drop_count = require_int(j, "pruning.", "drop_count", 0);
        if (j.contains("scope")) {
            const auto& s = j.at("scope");
            if (!s.is_string()) throw ValidationError("pruning.scope: expected a string");
            const std::string scope = s.get<std::string>();
            if (scope == "all") {
                p.scope = PruningScope::All;
            } else if (scope == "local_only") {
                p.scope = PruningScope::LocalOnly;
            } else {
                throw ValidationError("pruning.scope: unknown value '" + scope +
                                      "' (expected 'all' or 'local_only')");
            }
        }
        if (!j.contains("seed")) {
            // Randomized policy: never invent a silent default seed.
            throw ValidationError("pruning.seed: required for kind 'random_drop'");
        }
        if (!j.at("seed").is_number_unsigned()) {
            throw ValidationError("pruning.seed: expected a non-negative integer");
        }
        p.seed = j.at("seed").get<uint64_t>();
    } else if (kind == "layer_sparsity") {
        reject_unknown(j, "pruning", {"kind", "start_layer", "keep_ratio"});
        p.kind = PruningKind::LayerSparsity;
        p.start_layer = int(require_int(j, "pruning.", "start_layer", 1, num_layers));
        if (!j.contains("keep_ratio") || !j.at("keep_ratio").is_number()) {
            throw ValidationError("pruning.keep_ratio: required number field");
        }
        p.keep_ratio = j.at("keep_ratio").get<double>();
        if (!(p.keep_ratio > 0.0) || p.keep_ratio > 1.0) {
            throw ValidationError("pruning.keep_ratio: must lie in (0,1]");
        }
    } else {
        throw ValidationError("pruning.kind: unknown value '" + kind +
                              "' (expected 'none', 'random_drop', or 'layer_sparsity')");
    }
    return p;
}

}  // namespace

FusionConfig parse_fusion_config_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ParseError(std::string("fusion config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ValidationError("fusion config root must be a JSON object");
    reject_unknown(j, "",
                   {"encoders", "text_len", "model_dim", "num_layers", "num_heads", "seq_cap",
                    "pruning"});

    FusionConfig config;
    config.model_dim = require_int(j, "", "model_dim", 1);
    config.num_layers = int(require_int(j, "", "num_layers", 1, 1 << 20));
    config.num_heads = int(require_int(j, "", "num_heads", 1, 1 << 20));
    config.text_len = require_int(j, "", "text_len", 0);
    if (j.contains("seq_cap")) config.seq_cap = require_int(j, "", "seq_cap", 1);

    if (!j.contains("encoders") || !j.at("encoders").is_array()) {
        throw ValidationError("encoders: required array field");
    }
    size_t idx = 0;
    for (const auto& e : j.at("encoders")) {
        const std::string path = "encoders[" + std::to_string(idx) + "].";
        if (!e.is_object()) {
            throw ValidationError("encoders[" + std::to_string(idx) + "]: expected an object");
        }
        reject_unknown(e, "encoders[" + std::to_string(idx) + "]",
                       {"name", "token_len", "hidden_dim", "local_range"});
        EncoderSpec spec;
        if (!e.contains("name") || !e.at("name").is_string()) {
            throw ValidationError(path + "name: required string field");
        }
        spec.name = e.at("name").get<std::string>();
        if (spec.name == kTextSource) {
            throw ValidationError(path + "name: 'text' is reserved");
        }
        spec.token_len = require_int(e, path, "token_len", 0);
        spec.hidden_dim = require_int(e, path, "hidden_dim", 1);
        if (e.contains("local_range")) {
            const auto& r = e.at("local_range");
            if (!r.is_array() || r.size() != 2 || !r[0].is_number_integer() ||
                !r[1].is_number_integer()) {
                throw ValidationError(path + "local_range: expected [begin, end]");
            }
            const int64_t b = r[0].get<int64_t>();
            const int64_t en = r[1].get<int64_t>();
            if (b < 0 || en < b || en > spec.token_len) {
                throw ValidationError(path + "local_range: [" + std::to_string(b) + "," +
                                      std::to_string(en) + ") does not fit token_len " +
                                      std::to_string(spec.token_len));
            }
            spec.local_range = {b, en};
        }
        for (const auto& prev : config.encoders) {
            if (prev.name == spec.name) {
                throw ValidationError(path + "name: duplicate encoder name '" + spec.name + "'");
            }
        }
        config.encoders.push_back(std::move(spec));
        idx++;
    }

    if (j.contains("pruning")) {
        config.pruning = parse_pruning(j.at("pruning"), config.num_layers);
    }
    return config;
}

FusionConfig load_fusion_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open fusion config '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_fusion_config_json(ss.str());
}

}  // namespace deltafuse
