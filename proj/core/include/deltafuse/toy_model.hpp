#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "deltafuse/attention.hpp"
#include "deltafuse/fusion.hpp"
#include "deltafuse/matrix.hpp"
#include "deltafuse/merge.hpp"
#include "deltafuse/tensor.hpp"

namespace deltafuse {

// Desk-scale multimodal decoder: pre-norm transformer with causal masking
// over a [vision tokens; text tokens] sequence, learned absolute positions
// (optional), untied output head, greedy decoding.
struct ToyConfig {
    int64_t model_dim = 32;
    int num_layers = 2;
    int num_heads = 4;
    int64_t vocab_size = 64;
    int64_t max_seq = 256;
    std::vector<int64_t> encoder_dims;        // per-encoder feature width
    std::vector<int64_t> encoder_token_lens;  // tokens per encoder (default 8)
    int64_t image_dim = 64;
    bool use_positions = true;
};

ToyConfig parse_toy_config_json(const std::string& text);
ToyConfig load_toy_config(const std::filesystem::path& path);

// Synthetic vision tower: slice + mean-pool the raw image vector, one
// linear map with a tanh nonlinearity into token features, then a linear
// projection into the decoder width. The projection only writes the
// encoder's reserved coordinate block, so each encoder's tokens live in
// their own slice of the model dimension.
struct ToyEncoder {
    std::string name;
    int64_t feature_dim = 0;
    int64_t token_len = 0;
    int64_t slice_offset = 0;
    int64_t slice_len = 0;
    int64_t pool = 1;            // mean-pool window over the slice
    Matrix encode_weight;        // [slice_len/pool, token_len * feature_dim]
    Matrix project_weight;       // [feature_dim, model_dim]
    int64_t block_begin = 0;     // reserved model-dim rows [begin, end)
    int64_t block_end = 0;
};

// A base decoder plus one variant per encoder. Variant i differs from the
// base only in the rows [block_i) of the first layer's q/k/v input
// projections — the rows that read encoder i's token block — so the
// variants' deltas have pairwise-disjoint support and sum exactly.
struct ToyFamily {
    ToyConfig config;
    ModelWeights base;
    std::vector<ModelWeights> variants;
    std::vector<ToyEncoder> encoders;
};

// Deterministic in (config, member_count, seed). Weight values are snapped
// to a small dyadic grid so float32 weight-space identities (delta +
// base == variant) hold bit-exactly. Throws if member_count exceeds the
// number of reservable blocks (one per encoder, at least one row each) or
// the encoder lists disagree.
ToyFamily build_toy_family(const ToyConfig& config, int member_count, uint64_t seed);

// Image features for one encoder: [token_len x model_dim].
Matrix encode_image(const ToyEncoder& encoder, std::span<const float> image);

struct ForwardResult {
    Matrix logits;  // [text_len x vocab_size]
    AttentionMap attention;
    uint64_t matmul_flops = 0;  // 2 * multiply-adds in decoder-block matmuls
};

// Runs the decoder over [vision_tokens; text embeddings]. Attention maps
// come back head-averaged per layer.
ForwardResult toy_forward(const ToyConfig& config, const ModelWeights& weights,
                          const Matrix& vision_tokens, std::span<const int32_t> text_ids);

struct PipelineResult {
    std::vector<int32_t> prediction;  // greedy next-token id per text position
    AttentionMap attention;
    int64_t fused_len = 0;
    uint64_t measured_flops = 0;
    FlopsReport estimated;
};

// End to end: merge the family per the recipe, encode the image through
// every encoder, concatenate [V1; ...; Vm; text], run the decoder, and
// compare measured block flops against the cost model.
PipelineResult run_pipeline(const ToyFamily& family, const MergeRecipe& recipe,
                            std::span<const float> image, std::span<const int32_t> text_ids);

// Deterministic synthetic inputs.
std::vector<float> random_image(const ToyConfig& config, uint64_t seed);
std::vector<int32_t> random_text(const ToyConfig& config, int64_t text_len, uint64_t seed);

// Cost-model view of a family forward at the given text length.
FusionConfig fusion_config_for(const ToyFamily& family, int64_t text_len);

}  // namespace deltafuse
