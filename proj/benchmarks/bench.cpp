// Microbenchmarks for the hot paths: container encode/decode, the three main
// merge strategies, a toy forward pass, and top-slice overlap scoring.

#include <benchmark/benchmark.h>

#include <cstdint>
#include <string>
#include <vector>

#include "deltafuse/analysis.hpp"
#include "deltafuse/merge.hpp"
#include "deltafuse/rng.hpp"
#include "deltafuse/safetensors.hpp"
#include "deltafuse/tensor.hpp"
#include "deltafuse/toy_model.hpp"

using namespace deltafuse;

namespace {

ModelWeights sample_model(uint64_t seed, int tensors, int64_t elems) {
    CounterRng rng(derive_stream_key(seed, "bench-model"));
    uint64_t ctr = 0;
    ModelWeights w;
    for (int i = 0; i < tensors; ++i) {
        std::vector<float> values(static_cast<size_t>(elems));
        for (float& v : values) v = float(2.0 * rng.uniform01(ctr++) - 1.0);
        w.add("layers." + std::to_string(i) + ".weight",
              Tensor::make(Dtype::F32, {elems}, std::move(values)));
    }
    return w;
}

std::vector<DeltaSet> sample_deltas(const ModelWeights& base, int count, uint64_t seed) {
    CounterRng rng(derive_stream_key(seed, "bench-delta"));
    uint64_t ctr = 0;
    std::vector<DeltaSet> out;
    for (int m = 0; m < count; ++m) {
        ModelWeights d;
        for (const auto& [name, t] : base.entries()) {
            std::vector<float> values(t.values.size());
            for (float& v : values) v = float(0.1 * rng.uniform01(ctr++) - 0.05);
            d.add(name, Tensor::make(t.dtype, t.shape, std::move(values)));
        }
        out.push_back({std::move(d), base.fingerprint(), "m" + std::to_string(m)});
    }
    return out;
}

void BM_EncodeSafetensors(benchmark::State& state) {
    const ModelWeights w = sample_model(1, 16, 16384);
    for (auto _ : state) {
        benchmark::DoNotOptimize(encode_safetensors(w));
    }
    state.SetBytesProcessed(int64_t(state.iterations()) * 16 * 16384 * 4);
}
BENCHMARK(BM_EncodeSafetensors);

void BM_DecodeSafetensors(benchmark::State& state) {
    const std::vector<uint8_t> bytes = encode_safetensors(sample_model(1, 16, 16384));
    for (auto _ : state) {
        benchmark::DoNotOptimize(decode_safetensors(bytes.data(), bytes.size()));
    }
    state.SetBytesProcessed(int64_t(state.iterations()) * int64_t(bytes.size()));
}
BENCHMARK(BM_DecodeSafetensors);

void BM_MergeTaskArithmetic(benchmark::State& state) {
    const ModelWeights base = sample_model(2, 16, 16384);
    const auto deltas = sample_deltas(base, 4, 3);
    for (auto _ : state) {
        benchmark::DoNotOptimize(merge_task_arithmetic(base, deltas, 0.5));
    }
}
BENCHMARK(BM_MergeTaskArithmetic);

void BM_MergeTies(benchmark::State& state) {
    const ModelWeights base = sample_model(2, 16, 16384);
    const auto deltas = sample_deltas(base, 4, 3);
    for (auto _ : state) {
        benchmark::DoNotOptimize(merge_ties(base, deltas, 0.5, 0.2));
    }
}
BENCHMARK(BM_MergeTies);

void BM_MergeDare(benchmark::State& state) {
    const ModelWeights base = sample_model(2, 16, 16384);
    const auto deltas = sample_deltas(base, 4, 3);
    for (auto _ : state) {
        benchmark::DoNotOptimize(merge_dare(base, deltas, 0.5, 0.5, 99));
    }
}
BENCHMARK(BM_MergeDare);

void BM_ToyForward(benchmark::State& state) {
    ToyConfig cfg;
    cfg.model_dim = 32;
    cfg.num_layers = 4;
    cfg.num_heads = 4;
    cfg.vocab_size = 64;
    cfg.max_seq = 128;
    cfg.image_dim = 32;
    const ToyFamily fam = build_toy_family(cfg, 2, 7);
    const std::vector<float> image = random_image(cfg, 11);
    const std::vector<int32_t> text = random_text(cfg, 8, 13);
    Matrix vision(0, cfg.model_dim);
    for (const auto& enc : fam.encoders) {
        const Matrix toks = encode_image(enc, image);
        vision.data.insert(vision.data.end(), toks.data.begin(), toks.data.end());
        vision.rows += toks.rows;
    }
    for (auto _ : state) {
        benchmark::DoNotOptimize(toy_forward(cfg, fam.base, vision, text));
    }
}
BENCHMARK(BM_ToyForward);

void BM_TopkIou(benchmark::State& state) {
    CounterRng rng(derive_stream_key(4, "bench-iou"));
    const int64_t n = 4096;
    std::vector<double> a(static_cast<size_t>(n));
    std::vector<double> b(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        a[size_t(i)] = rng.uniform01(uint64_t(i));
        b[size_t(i)] = rng.uniform01(uint64_t(i + n));
    }
    for (auto _ : state) {
        benchmark::DoNotOptimize(topk_iou(a, b, 10.0));
    }
}
BENCHMARK(BM_TopkIou);

}  // namespace

BENCHMARK_MAIN();
