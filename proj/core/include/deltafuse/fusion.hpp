#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace deltafuse {

// One vision encoder feeding the fused token sequence.
struct EncoderSpec {
    std::string name;
    int64_t token_len = 0;   // tokens this encoder contributes
    int64_t hidden_dim = 0;  // width of those tokens
    // Half-open [begin, end) range of token indices carrying local detail
    // (the rest are global context); used by scope-limited pruning.
    std::optional<std::pair<int64_t, int64_t>> local_range;
};

enum class PruningKind {
    None,
    RandomDrop,      // drop a fixed count of vision tokens before the stack
    LayerSparsity,   // keep a ratio of vision tokens from a given layer on
};

enum class PruningScope {
    All,        // any vision token is eligible
    LocalOnly,  // only tokens inside an encoder's local_range are eligible
};

struct PruningPolicy {
    PruningKind kind = PruningKind::None;

    // RandomDrop
    int64_t drop_count = 0;
    PruningScope scope = PruningScope::All;
    uint64_t seed = 0;

    // LayerSparsity: layers counted from 1; layers >= start_layer see the
    // reduced sequence, so start_layer=3 keeps layers 1-2 at full length.
    int start_layer = 1;
    double keep_ratio = 1.0;
};

struct FusionConfig {
    std::vector<EncoderSpec> encoders;
    int64_t text_len = 0;
    int64_t model_dim = 0;
    int num_layers = 0;
    int num_heads = 0;
    int64_t seq_cap = 4096;
    PruningPolicy pruning;
};

// A contiguous run of token indices from one source ("text" or an encoder
// name). Indices are positions within the source's own token list.
struct Segment {
    std::string source;
    std::vector<int64_t> indices;
};

struct TokenSequence {
    std::vector<Segment> segments;
    int64_t total_len = 0;
};

// [V1; V2; ...; Vm; text] concatenation order.
TokenSequence concat_tokens(const std::vector<Segment>& vision_segments, int64_t text_len);

// Applies a policy; text tokens are never pruned and survivor order is
// preserved. RandomDrop removes exactly drop_count eligible vision tokens
// chosen by the (seed, segment source) random stream; LayerSparsity leaves
// the sequence untouched (it only shapes per-layer costs).
TokenSequence apply_pruning(const TokenSequence& seq, const PruningPolicy& policy,
                            const FusionConfig& config);

// Forward-pass cost model for one decoder layer at effective length L and
// width d, counting only matmul multiply-adds (2 flops each):
//   attention projections  8*L*d^2   (Q, K, V, O)
//   attention scores       4*L^2*d   (QK^T plus scores*V)
//   mlp                   16*L*d^2   (d -> 4d -> d)
// Softmax, normalization, and embedding lookups are excluded.
struct FlopsReport {
    struct LayerCost {
        int64_t effective_len = 0;
        int64_t attention_proj = 0;
        int64_t attention_scores = 0;
        int64_t mlp = 0;
        int64_t layer_total() const { return attention_proj + attention_scores + mlp; }
    };
    std::vector<LayerCost> per_layer;
    int64_t total = 0;
};

FlopsReport estimate_flops(const FusionConfig& config, int64_t fused_len);

struct BudgetVerdict {
    bool ok = true;
    int64_t fused_len = 0;
    int64_t seq_cap = 0;
    int64_t overflow = 0;        // tokens past the cap
    int64_t suggested_drop = 0;  // overflow clamped to droppable vision tokens
};

BudgetVerdict budget_check(const FusionConfig& config, int64_t fused_len);

// Config JSON. Parse failures throw ParseError; schema violations throw
// ValidationError naming the field. A random_drop policy must carry an
// explicit "seed".
FusionConfig parse_fusion_config_json(const std::string& text);
FusionConfig load_fusion_config(const std::filesystem::path& path);

}  // namespace deltafuse
