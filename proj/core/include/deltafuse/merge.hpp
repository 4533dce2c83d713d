#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "deltafuse/parallel.hpp"
#include "deltafuse/tensor.hpp"

namespace deltafuse {

// Per-element weight difference of one fine-tuned model against its shared
// base. Values stay in float32 compute precision (they are never snapped to
// the storage grid — a rounded delta could not reproduce its source model
// exactly); dtype tags mirror the base so layout checks still apply.
struct DeltaSet {
    ModelWeights tensors;
    uint64_t base_fingerprint = 0;
    std::string source_label;
};

enum class MergeMethod {
    TaskArithmetic,
    Interpolate2,
    Average,
    Ties,
    Dare,
    Slerp,
};

const char* merge_method_name(MergeMethod m);
std::optional<MergeMethod> merge_method_from_name(std::string_view name);

struct ModelRef {
    std::string model;  // checkpoint or delta file path
    std::string label;
};

// Declarative description of one merge. Hyperparameters are only read by the
// methods that use them.
struct MergeRecipe {
    MergeMethod method = MergeMethod::TaskArithmetic;
    std::string base;
    std::vector<ModelRef> sources;
    double lambda = 1.0;        // scaling term on the summed deltas
    double alpha = 0.5;         // two-model interpolation weight
    double retain_ratio = 0.2;  // fraction of entries kept by trimming
    double drop_rate = 0.5;     // per-element drop probability
    double t = 0.5;             // spherical interpolation position
    uint64_t seed = 0;
};

// model - base, elementwise in float32. Requires full compatibility; the
// failure report is embedded in the error message.
DeltaSet compute_delta(const ModelWeights& model, const ModelWeights& base,
                       std::string source_label = {});

// base + lambda * sum(deltas), elementwise.
ModelWeights merge_task_arithmetic(const ModelWeights& base, const std::vector<DeltaSet>& deltas,
                                   double lambda, const ExecOptions& exec = {});

// alpha * delta_a + (1 - alpha) * delta_b + base.
ModelWeights interpolate_two(const ModelWeights& base, const DeltaSet& delta_a,
                             const DeltaSet& delta_b, double alpha, const ExecOptions& exec = {});

// Plain mean of raw weights (not deltas). Input order never changes the
// result: summation runs in fingerprint order.
ModelWeights merge_average(const std::vector<const ModelWeights*>& models,
                           const ExecOptions& exec = {});

// Trim / elect sign / disjoint mean. Per tensor, each delta keeps its
// ceil(retain_ratio * n) largest-magnitude entries (ties to the lower flat
// index); per element the sign of the float64 sum of kept values is elected
// (zero sum elects zero) and sign-matching kept values are averaged.
// Result: base + lambda * mean.
ModelWeights merge_ties(const ModelWeights& base, const std::vector<DeltaSet>& deltas,
                        double lambda, double retain_ratio, const ExecOptions& exec = {});

// Per-element Bernoulli(drop_rate) drop; kept entries rescale by
// 1/(1-drop_rate); then task arithmetic. The draw for element j of tensor
// `name` in the delta labelled L depends only on (seed, L, name, j).
ModelWeights merge_dare(const ModelWeights& base, const std::vector<DeltaSet>& deltas,
                        double lambda, double drop_rate, uint64_t seed,
                        const ExecOptions& exec = {});

// Spherical interpolation between two deltas, per tensor on the flattened
// vectors; falls back to linear interpolation for near-parallel or
// near-zero pairs. Result: base + slerp(delta_a, delta_b, t).
ModelWeights merge_slerp(const ModelWeights& base, const DeltaSet& delta_a,
                         const DeltaSet& delta_b, double t, const ExecOptions& exec = {});

// Dispatch on recipe.method using precomputed deltas against `base`.
// Average reconstitutes each source as base + delta first.
ModelWeights apply_recipe(const MergeRecipe& recipe, const ModelWeights& base,
                          const std::vector<DeltaSet>& deltas, const ExecOptions& exec = {});

// Candidate hyperparameter axes for a sweep. Only the axes a method reads
// take part in its Cartesian product.
struct MergeGrid {
    std::vector<double> lambdas;
    std::vector<double> alphas;
    std::vector<double> retain_ratios;
    std::vector<double> drop_rates;
    std::vector<double> ts;

    static MergeGrid defaults_for(MergeMethod m);
};

struct GridResult {
    MergeRecipe recipe;
    double score = 0.0;
};

struct GridSearchOptions {
    int threads = 1;
    // Evaluations run concurrently only when the evaluator is declared safe.
    bool evaluator_concurrent_safe = false;
};

// Evaluates every combination and returns all results sorted by descending
// score; ties break toward the lexicographically smaller
// (lambda, alpha, retain_ratio, drop_rate, t) tuple. An evaluator failure
// aborts the sweep with the failing combination identified.
std::vector<GridResult> grid_search(const ModelWeights& base, const std::vector<DeltaSet>& deltas,
                                    const MergeRecipe& recipe_template, const MergeGrid& grid,
                                    const std::function<double(const ModelWeights&)>& evaluator,
                                    const GridSearchOptions& opts = {});

// Human-readable "ties lambda=0.5 retain_ratio=0.2" style echo: the method
// name plus only the axes that method reads.
std::string recipe_params_string(const MergeRecipe& recipe);

// Delta files are safetensors containers holding F32 tensors (exact compute
// values) plus metadata recording the base fingerprint and source label.
void save_delta(const DeltaSet& delta, const std::filesystem::path& path);
DeltaSet load_delta(const std::filesystem::path& path, const ModelWeights& base);
bool is_delta_file(const ModelWeights& raw);

// Recipe JSON. Parse failures throw ParseError; schema violations throw
// ValidationError naming the offending field. A Dare recipe must carry an
// explicit "seed".
MergeRecipe parse_recipe_json(const std::string& text);
MergeRecipe load_recipe(const std::filesystem::path& path);
std::string recipe_to_json(const MergeRecipe& recipe);

}  // namespace deltafuse
