#include "deltafuse/toy_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "deltafuse/errors.hpp"
#include "deltafuse/rng.hpp"

namespace deltafuse {

namespace {

using nlohmann::json;

std::string layer_prefix(int layer) {
    return "layers." + std::to_string(layer) + ".";
}

// Weight values are snapped onto multiples of 2^-13 in [-1, 1]. Differences
// and sums of such values are exact in float32, so variant = base + delta
// holds bit-for-bit and disjoint deltas compose without rounding.
float grid_snap(double x) {
    x = std::clamp(x, -1.0, 1.0);
    // Adding 0.0 turns a rounded -0.0 into +0.0 and is exact otherwise;
    // keeping generated weights free of negative zero lets sums of the form
    // base + (value - base) reproduce the value bit for bit.
    return float(std::round(x * 8192.0) / 8192.0 + 0.0);
}

std::vector<float> grid_values(uint64_t key, size_t count, double amplitude) {
    const CounterRng rng(key);
    std::vector<float> values(count);
    for (size_t i = 0; i < count; ++i) {
        values[i] = grid_snap((2.0 * rng.uniform01(i) - 1.0) * amplitude);
    }
    return values;
}

Tensor grid_tensor(uint64_t seed, std::string_view stream, const std::string& name,
                   std::vector<int64_t> shape, double amplitude) {
    const int64_t n = shape_numel(shape);
    return Tensor::make(Dtype::F32, std::move(shape),
                        grid_values(derive_stream_key(seed, stream, name), size_t(n), amplitude));
}

const Tensor& fetch(const ModelWeights& w, const std::string& name,
                    const std::vector<int64_t>& shape) {
    const Tensor* t = w.find(name);
    if (!t) throw ValidationError("decoder weights are missing tensor '" + name + "'");
    if (t->shape != shape) {
        throw ValidationError("tensor '" + name + "' has shape " + shape_to_string(t->shape) +
                              ", expected " + shape_to_string(shape));
    }
    return *t;
}

// [a.rows x b.cols] product; accumulates in double. When `macs` is given the
// multiply-add count is charged to it (the instrumented decoder-block path).
Matrix matmul(const Matrix& a, const Matrix& b, uint64_t* macs) {
    Matrix out(a.rows, b.cols);
    for (int64_t i = 0; i < a.rows; ++i) {
        for (int64_t j = 0; j < b.cols; ++j) {
            double acc = 0.0;
            for (int64_t k = 0; k < a.cols; ++k) {
                acc += double(a.at(i, k)) * double(b.at(k, j));
            }
            out.at(i, j) = float(acc);
        }
    }
    if (macs) *macs += uint64_t(a.rows) * uint64_t(b.cols) * uint64_t(a.cols);
    return out;
}

Matrix weight_matrix(const Tensor& t) {
    Matrix m(t.shape[0], t.shape[1]);
    m.data = t.values;
    return m;
}

Matrix layer_norm(const Matrix& x, const Tensor& gamma, const Tensor& beta) {
    Matrix out(x.rows, x.cols);
    const double eps = 1e-5;
    for (int64_t i = 0; i < x.rows; ++i) {
        double mean = 0.0;
        for (int64_t c = 0; c < x.cols; ++c) mean += x.at(i, c);
        mean /= double(x.cols);
        double var = 0.0;
        for (int64_t c = 0; c < x.cols; ++c) {
            const double dd = x.at(i, c) - mean;
            var += dd * dd;
        }
        var /= double(x.cols);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int64_t c = 0; c < x.cols; ++c) {
            out.at(i, c) = float((x.at(i, c) - mean) * inv * gamma.values[size_t(c)] +
                                 beta.values[size_t(c)]);
        }
    }
    return out;
}

}  // namespace

ToyFamily build_toy_family(const ToyConfig& config, int member_count, uint64_t seed) {
    const int64_t d = config.model_dim;
    if (member_count < 1) throw ValidationError("member_count must be at least 1");
    if (int64_t(member_count) > d) {
        throw ValidationError("member_count " + std::to_string(member_count) +
                              " exceeds the " + std::to_string(d) +
                              " reservable coordinate blocks for model_dim " + std::to_string(d));
    }
    if (config.num_heads < 1 || d % config.num_heads != 0) {
        throw ValidationError("num_heads must divide model_dim");
    }
    if (!config.encoder_dims.empty() && int64_t(config.encoder_dims.size()) < member_count) {
        throw ValidationError("encoder_dims lists " + std::to_string(config.encoder_dims.size()) +
                              " encoders, need " + std::to_string(member_count));
    }
    if (config.image_dim < int64_t(member_count)) {
        throw ValidationError("image_dim must provide at least one input per encoder");
    }

    ToyFamily family;
    family.config = config;

    // --- base decoder ---
    const int64_t dff = 4 * d;
    auto add = [&](ModelWeights& w, const std::string& name, std::vector<int64_t> shape,
                   double amp) { w.add(name, grid_tensor(seed, "base", name, std::move(shape), amp)); };

    ModelWeights& base = family.base;
    add(base, "tok_emb.weight", {config.vocab_size, d}, 0.25);
    add(base, "pos_emb.weight", {config.max_seq, d}, 0.1);
    for (int l = 0; l < config.num_layers; ++l) {
        const std::string p = layer_prefix(l);
        base.add(p + "ln1.gamma", Tensor::make(Dtype::F32, {d}, std::vector<float>(size_t(d), 1.0f)));
        base.add(p + "ln1.beta", Tensor::zeros(Dtype::F32, {d}));
        add(base, p + "attn.wq", {d, d}, 0.25);
        add(base, p + "attn.wk", {d, d}, 0.25);
        add(base, p + "attn.wv", {d, d}, 0.25);
        add(base, p + "attn.wo", {d, d}, 0.25);
        base.add(p + "ln2.gamma", Tensor::make(Dtype::F32, {d}, std::vector<float>(size_t(d), 1.0f)));
        base.add(p + "ln2.beta", Tensor::zeros(Dtype::F32, {d}));
        add(base, p + "mlp.fc1", {d, dff}, 0.25);
        add(base, p + "mlp.fc2", {dff, d}, 0.25);
    }
    base.add("ln_f.gamma", Tensor::make(Dtype::F32, {d}, std::vector<float>(size_t(d), 1.0f)));
    base.add("ln_f.beta", Tensor::zeros(Dtype::F32, {d}));
    add(base, "lm_head.weight", {d, config.vocab_size}, 0.25);

    // --- variants: fresh rows in each member's reserved block of the first
    // layer's input projections ---
    for (int m = 0; m < member_count; ++m) {
        const int64_t block_begin = d * m / member_count;
        const int64_t block_end = d * (m + 1) / member_count;
        const std::string stream = "variant" + std::to_string(m);

        ModelWeights variant;
        for (const auto& [name, tensor] : base.entries()) variant.add(name, tensor);
        for (const char* proj : {"attn.wq", "attn.wk", "attn.wv"}) {
            const std::string name = layer_prefix(0) + proj;
            Tensor t = base.at(name);
            const auto fresh =
                grid_values(derive_stream_key(seed, stream, name), size_t((block_end - block_begin) * d),
                            0.25);
            for (int64_t r = block_begin; r < block_end; ++r) {
                for (int64_t c = 0; c < d; ++c) {
                    t.values[size_t(r * d + c)] = fresh[size_t((r - block_begin) * d + c)];
                }
            }
            variant.replace(name, std::move(t));
        }
        family.variants.push_back(std::move(variant));
    }

    // --- encoders, each projecting into its member's coordinate block ---
    for (int m = 0; m < member_count; ++m) {
        ToyEncoder enc;
        enc.name = "enc" + std::to_string(m);
        enc.feature_dim = config.encoder_dims.empty() ? 16 : config.encoder_dims[size_t(m)];
        enc.token_len = size_t(m) < config.encoder_token_lens.size()
                            ? config.encoder_token_lens[size_t(m)]
                            : 8;
        if (enc.feature_dim < 1 || enc.token_len < 1) {
            throw ValidationError("encoder dims and token lengths must be positive");
        }
        enc.slice_offset = config.image_dim * m / member_count;
        enc.slice_len = config.image_dim * (m + 1) / member_count - enc.slice_offset;
        enc.pool = (m % 2 == 1 && enc.slice_len % 2 == 0) ? 2 : 1;
        enc.block_begin = d * m / member_count;
        enc.block_end = d * (m + 1) / member_count;

        const int64_t pooled = enc.slice_len / enc.pool;
        enc.encode_weight = Matrix(pooled, enc.token_len * enc.feature_dim);
        enc.encode_weight.data = grid_values(derive_stream_key(seed, enc.name, "encode"),
                                             enc.encode_weight.data.size(), 0.5);
        enc.project_weight = Matrix(enc.feature_dim, d);
        const auto proj_vals = grid_values(derive_stream_key(seed, enc.name, "project"),
                                           size_t(enc.feature_dim * (enc.block_end - enc.block_begin)),
                                           0.5);
        for (int64_t f = 0; f < enc.feature_dim; ++f) {
            for (int64_t c = enc.block_begin; c < enc.block_end; ++c) {
                enc.project_weight.at(f, c) =
                    proj_vals[size_t(f * (enc.block_end - enc.block_begin) + (c - enc.block_begin))];
            }
        }
        family.encoders.push_back(std::move(enc));
    }
    return family;
}

Matrix encode_image(const ToyEncoder& encoder, std::span<const float> image) {
    if (int64_t(image.size()) < encoder.slice_offset + encoder.slice_len) {
        throw ValidationError("image vector of " + std::to_string(image.size()) +
                              " values is too short for encoder '" + encoder.name + "'");
    }
    const int64_t pooled_len = encoder.slice_len / encoder.pool;

    // Preprocess: slice, then mean-pool fixed windows.
    std::vector<float> pooled(static_cast<size_t>(pooled_len));
    for (int64_t p = 0; p < pooled_len; ++p) {
        float acc = 0.0f;
        for (int64_t w = 0; w < encoder.pool; ++w) {
            acc += image[size_t(encoder.slice_offset + p * encoder.pool + w)];
        }
        pooled[size_t(p)] = acc / float(encoder.pool);
    }

    // Encode: one linear map + tanh into [token_len x feature_dim].
    Matrix features(encoder.token_len, encoder.feature_dim);
    for (int64_t t = 0; t < encoder.token_len; ++t) {
        for (int64_t f = 0; f < encoder.feature_dim; ++f) {
            double acc = 0.0;
            const int64_t col = t * encoder.feature_dim + f;
            for (int64_t p = 0; p < pooled_len; ++p) {
                acc += double(pooled[size_t(p)]) * double(encoder.encode_weight.at(p, col));
            }
            features.at(t, f) = std::tanh(float(acc));
        }
    }

    // Project into the decoder width (only the reserved block is nonzero).
    return matmul(features, encoder.project_weight, nullptr);
}

ForwardResult toy_forward(const ToyConfig& config, const ModelWeights& weights,
                          const Matrix& vision_tokens, std::span<const int32_t> text_ids) {
    const int64_t d = config.model_dim;
    const int64_t V = vision_tokens.rows;
    const int64_t T = int64_t(text_ids.size());
    const int64_t S = V + T;
    if (config.num_heads < 1 || d % config.num_heads != 0) {
        throw ValidationError("num_heads must divide model_dim");
    }
    if (V > 0 && vision_tokens.cols != d) {
        throw ValidationError("vision tokens are " + std::to_string(vision_tokens.cols) +
                              " wide, decoder expects " + std::to_string(d));
    }
    if (S > config.max_seq) {
        throw ValidationError("sequence of " + std::to_string(S) + " tokens exceeds max_seq " +
                              std::to_string(config.max_seq));
    }
    for (int32_t id : text_ids) {
        if (id < 0 || int64_t(id) >= config.vocab_size) {
            throw ValidationError("text id " + std::to_string(id) + " outside vocab of " +
                                  std::to_string(config.vocab_size));
        }
    }

    const int64_t h = config.num_heads;
    const int64_t dh = d / h;
    const int64_t dff = 4 * d;
    const Tensor& tok_emb = fetch(weights, "tok_emb.weight", {config.vocab_size, d});
    const Tensor& pos_emb = fetch(weights, "pos_emb.weight", {config.max_seq, d});

    Matrix x(S, d);
    for (int64_t r = 0; r < V; ++r) {
        for (int64_t c = 0; c < d; ++c) x.at(r, c) = vision_tokens.at(r, c);
    }
    for (int64_t t = 0; t < T; ++t) {
        const int64_t row = int64_t(text_ids[size_t(t)]) * d;
        for (int64_t c = 0; c < d; ++c) {
            x.at(V + t, c) = tok_emb.values[size_t(row + c)];
        }
    }
    if (config.use_positions) {
        for (int64_t s = 0; s < S; ++s) {
            for (int64_t c = 0; c < d; ++c) x.at(s, c) += pos_emb.values[size_t(s * d + c)];
        }
    }

    ForwardResult result;
    result.attention.vision_len = V;
    result.attention.text_len = T;
    uint64_t macs = 0;
    const double scale = 1.0 / std::sqrt(double(dh));

    for (int l = 0; l < config.num_layers; ++l) {
        const std::string p = layer_prefix(l);
        const Matrix normed =
            layer_norm(x, fetch(weights, p + "ln1.gamma", {d}), fetch(weights, p + "ln1.beta", {d}));
        const Matrix q = matmul(normed, weight_matrix(fetch(weights, p + "attn.wq", {d, d})), &macs);
        const Matrix k = matmul(normed, weight_matrix(fetch(weights, p + "attn.wk", {d, d})), &macs);
        const Matrix v = matmul(normed, weight_matrix(fetch(weights, p + "attn.wv", {d, d})), &macs);

        Matrix attn_out(S, d);
        Matrix head_avg(S, S);
        for (int64_t head = 0; head < h; ++head) {
            const int64_t off = head * dh;
            // Full S x S scores, causally masked before the softmax. The
            // masked entries are still computed — the cost model charges the
            // complete rectangle.
            std::vector<double> probs(size_t(S * S));
            for (int64_t i = 0; i < S; ++i) {
                std::vector<double> row(static_cast<size_t>(S));
                for (int64_t j = 0; j < S; ++j) {
                    double acc = 0.0;
                    for (int64_t c = 0; c < dh; ++c) {
                        acc += double(q.at(i, off + c)) * double(k.at(j, off + c));
                    }
                    row[size_t(j)] =
                        j <= i ? acc * scale : -std::numeric_limits<double>::infinity();
                }
                macs += uint64_t(S) * uint64_t(dh);
                double mx = -std::numeric_limits<double>::infinity();
                for (double s : row) mx = std::max(mx, s);
                double sum = 0.0;
                for (double& s : row) {
                    s = std::exp(s - mx);
                    sum += s;
                }
                for (int64_t j = 0; j < S; ++j) probs[size_t(i * S + j)] = row[size_t(j)] / sum;
            }
            for (int64_t i = 0; i < S; ++i) {
                for (int64_t c = 0; c < dh; ++c) {
                    double acc = 0.0;
                    for (int64_t j = 0; j < S; ++j) {
                        acc += probs[size_t(i * S + j)] * double(v.at(j, off + c));
                    }
                    attn_out.at(i, off + c) = float(acc);
                }
                macs += uint64_t(S) * uint64_t(dh);
            }
            for (int64_t i = 0; i < S; ++i) {
                for (int64_t j = 0; j < S; ++j) {
                    head_avg.at(i, j) += float(probs[size_t(i * S + j)] / double(h));
                }
            }
        }

        Matrix slice(T, V);
        for (int64_t t = 0; t < T; ++t) {
            for (int64_t j = 0; j < V; ++j) slice.at(t, j) = head_avg.at(V + t, j);
        }
        result.attention.per_layer.push_back(std::move(slice));
        result.attention.full_per_layer.push_back(std::move(head_avg));

        const Matrix o = matmul(attn_out, weight_matrix(fetch(weights, p + "attn.wo", {d, d})), &macs);
        for (int64_t s = 0; s < S; ++s) {
            for (int64_t c = 0; c < d; ++c) x.at(s, c) += o.at(s, c);
        }

        const Matrix normed2 =
            layer_norm(x, fetch(weights, p + "ln2.gamma", {d}), fetch(weights, p + "ln2.beta", {d}));
        Matrix inner =
            matmul(normed2, weight_matrix(fetch(weights, p + "mlp.fc1", {d, dff})), &macs);
        for (float& f : inner.data) f = std::tanh(f);
        const Matrix outer =
            matmul(inner, weight_matrix(fetch(weights, p + "mlp.fc2", {dff, d})), &macs);
        for (int64_t s = 0; s < S; ++s) {
            for (int64_t c = 0; c < d; ++c) x.at(s, c) += outer.at(s, c);
        }
    }

    const Matrix final_norm =
        layer_norm(x, fetch(weights, "ln_f.gamma", {d}), fetch(weights, "ln_f.beta", {d}));
    Matrix text_rows(T, d);
    for (int64_t t = 0; t < T; ++t) {
        for (int64_t c = 0; c < d; ++c) text_rows.at(t, c) = final_norm.at(V + t, c);
    }
    // The output head sits outside the per-layer cost model, so it is not
    // charged to the instrumented count.
    result.logits =
        matmul(text_rows, weight_matrix(fetch(weights, "lm_head.weight", {d, config.vocab_size})),
               nullptr);

    result.attention.averaged = Matrix(T, V);
    for (const Matrix& layer : result.attention.per_layer) {
        for (size_t i = 0; i < layer.data.size(); ++i) {
            result.attention.averaged.data[i] +=
                layer.data[i] / float(result.attention.per_layer.size());
        }
    }

    result.matmul_flops = 2 * macs;
    return result;
}

PipelineResult run_pipeline(const ToyFamily& family, const MergeRecipe& recipe,
                            std::span<const float> image, std::span<const int32_t> text_ids) {
    if (int64_t(image.size()) != family.config.image_dim) {
        throw ValidationError("image vector has " + std::to_string(image.size()) +
                              " values, config expects " + std::to_string(family.config.image_dim));
    }

    // The family is the source set: every variant contributes a delta.
    std::vector<DeltaSet> deltas;
    deltas.reserve(family.variants.size());
    for (size_t m = 0; m < family.variants.size(); ++m) {
        deltas.push_back(
            compute_delta(family.variants[m], family.base, "variant" + std::to_string(m)));
    }
    const ModelWeights merged = apply_recipe(recipe, family.base, deltas);

    int64_t vision_total = 0;
    for (const auto& enc : family.encoders) vision_total += enc.token_len;
    Matrix fused(vision_total, family.config.model_dim);
    int64_t row = 0;
    for (const auto& enc : family.encoders) {
        const Matrix tokens = encode_image(enc, image);
        for (int64_t r = 0; r < tokens.rows; ++r) {
            for (int64_t c = 0; c < tokens.cols; ++c) fused.at(row + r, c) = tokens.at(r, c);
        }
        row += tokens.rows;
    }

    ForwardResult fwd = toy_forward(family.config, merged, fused, text_ids);

    PipelineResult out;
    out.fused_len = vision_total + int64_t(text_ids.size());
    out.measured_flops = fwd.matmul_flops;
    out.estimated = estimate_flops(fusion_config_for(family, int64_t(text_ids.size())),
                                   out.fused_len);
    out.attention = std::move(fwd.attention);
    out.prediction.resize(size_t(fwd.logits.rows));
    for (int64_t t = 0; t < fwd.logits.rows; ++t) {
        int32_t best = 0;
        float best_score = -std::numeric_limits<float>::infinity();
        for (int64_t vv = 0; vv < fwd.logits.cols; ++vv) {
            if (fwd.logits.at(t, vv) > best_score) {
                best_score = fwd.logits.at(t, vv);
                best = int32_t(vv);
            }
        }
        out.prediction[size_t(t)] = best;
    }
    return out;
}

std::vector<float> random_image(const ToyConfig& config, uint64_t seed) {
    const CounterRng rng(derive_stream_key(seed, "image"));
    std::vector<float> image(size_t(config.image_dim));
    for (size_t i = 0; i < image.size(); ++i) {
        image[i] = float(2.0 * rng.uniform01(i) - 1.0);
    }
    return image;
}

std::vector<int32_t> random_text(const ToyConfig& config, int64_t text_len, uint64_t seed) {
    const CounterRng rng(derive_stream_key(seed, "text"));
    std::vector<int32_t> ids(static_cast<size_t>(text_len));
    for (size_t i = 0; i < ids.size(); ++i) {
        ids[i] = int32_t(rng.at(i) % uint64_t(config.vocab_size));
    }
    return ids;
}

FusionConfig fusion_config_for(const ToyFamily& family, int64_t text_len) {
    FusionConfig config;
    for (const auto& enc : family.encoders) {
        EncoderSpec spec;
        spec.name = enc.name;
        spec.token_len = enc.token_len;
        spec.hidden_dim = family.config.model_dim;
        config.encoders.push_back(std::move(spec));
    }
    config.text_len = text_len;
    config.model_dim = family.config.model_dim;
    config.num_layers = family.config.num_layers;
    config.num_heads = family.config.num_heads;
    config.seq_cap = family.config.max_seq;
    return config;
}

ToyConfig parse_toy_config_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ParseError(std::string("toy config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ValidationError("toy config root must be a JSON object");

    static const char* known[] = {"model_dim",  "num_layers",         "num_heads",
                                  "vocab_size", "max_seq",            "encoder_dims",
                                  "image_dim",  "encoder_token_lens", "use_positions"};
    for (const auto& [key, _] : j.items()) {
        if (std::find_if(std::begin(known), std::end(known),
                         [&](const char* k) { return key == k; }) == std::end(known)) {
            throw ValidationError("unknown toy config field '" + key + "'");
        }
    }

    ToyConfig config;
    auto get_int = [&](const char* field, int64_t lo, int64_t fallback) -> int64_t {
        if (!j.contains(field)) return fallback;
        if (!j.at(field).is_number_integer()) {
            throw ValidationError(std::string(field) + ": expected an integer");
        }
        const int64_t v = j.at(field).get<int64_t>();
        if (v < lo) {
            throw ValidationError(std::string(field) + ": value " + std::to_string(v) +
                                  " below minimum " + std::to_string(lo));
        }
        return v;
    };
    config.model_dim = get_int("model_dim", 1, config.model_dim);
    config.num_layers = int(get_int("num_layers", 1, config.num_layers));
    config.num_heads = int(get_int("num_heads", 1, config.num_heads));
    config.vocab_size = get_int("vocab_size", 2, config.vocab_size);
    config.max_seq = get_int("max_seq", 1, config.max_seq);
    config.image_dim = get_int("image_dim", 1, config.image_dim);
    if (config.model_dim % config.num_heads != 0) {
        throw ValidationError("num_heads: must divide model_dim");
    }

    auto get_list = [&](const char* field) -> std::vector<int64_t> {
        std::vector<int64_t> out;
        if (!j.contains(field)) return out;
        if (!j.at(field).is_array()) {
            throw ValidationError(std::string(field) + ": expected an array of integers");
        }
        for (const auto& e : j.at(field)) {
            if (!e.is_number_integer() || e.get<int64_t>() < 1) {
                throw ValidationError(std::string(field) + ": entries must be positive integers");
            }
            out.push_back(e.get<int64_t>());
        }
        return out;
    };
    config.encoder_dims = get_list("encoder_dims");
    config.encoder_token_lens = get_list("encoder_token_lens");
    if (!config.encoder_token_lens.empty() && !config.encoder_dims.empty() &&
        config.encoder_token_lens.size() != config.encoder_dims.size()) {
        throw ValidationError("encoder_token_lens: length must match encoder_dims");
    }
    if (j.contains("use_positions")) {
        if (!j.at("use_positions").is_boolean()) {
            throw ValidationError("use_positions: expected a boolean");
        }
        config.use_positions = j.at("use_positions").get<bool>();
    }
    return config;
}

ToyConfig load_toy_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open toy config '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_toy_config_json(ss.str());
}

}  // namespace deltafuse
