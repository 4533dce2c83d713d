#include "deltafuse/merge.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <tuple>

#include <json.hpp>

#include "deltafuse/errors.hpp"
#include "deltafuse/rng.hpp"
#include "deltafuse/safetensors.hpp"

namespace deltafuse {

namespace {

using nlohmann::json;

// Adding an exact zero keeps the base bits (including signed zero), so
// no-op merges reproduce the base exactly.
inline float apply_update(float base, float update) {
    return update == 0.0f ? base : base + update;
}

void check_delta_against_base(const ModelWeights& base, const DeltaSet& delta) {
    if (delta.base_fingerprint != base.fingerprint()) {
        throw ValidationError("delta '" + delta.source_label +
                              "' was computed against a different base: expected fingerprint " +
                              fingerprint_hex(base.fingerprint()) + ", delta carries " +
                              fingerprint_hex(delta.base_fingerprint));
    }
    if (delta.tensors.size() != base.size()) {
        throw ValidationError("delta '" + delta.source_label + "' has " +
                              std::to_string(delta.tensors.size()) + " tensors but the base has " +
                              std::to_string(base.size()));
    }
    for (const auto& [name, bt] : base.entries()) {
        const Tensor* dt = delta.tensors.find(name);
        if (!dt) {
            throw ValidationError("delta '" + delta.source_label + "' is missing tensor '" + name +
                                  "'");
        }
        if (dt->shape != bt.shape) {
            throw ValidationError("delta '" + delta.source_label + "' tensor '" + name +
                                  "' has shape " + shape_to_string(dt->shape) + ", base has " +
                                  shape_to_string(bt.shape));
        }
        if (dt->dtype != bt.dtype) {
            throw ValidationError("delta '" + delta.source_label + "' tensor '" + name +
                                  "' is tagged " + dtype_name(dt->dtype) + ", base is " +
                                  dtype_name(bt.dtype));
        }
    }
}

// Builds the result in the base's entry order from per-entry tensors.
ModelWeights assemble(const ModelWeights& base, std::vector<Tensor>&& tensors) {
    ModelWeights out;
    for (size_t i = 0; i < base.entries().size(); ++i) {
        out.add(base.entries()[i].first, std::move(tensors[i]));
    }
    return out;
}

int64_t ties_keep_count(double retain_ratio, int64_t n) {
    if (n <= 0) return 0;
    // Tiny slack so ratios like 0.1 whose binary representation lands a
    // hair above an exact product do not bump the count.
    int64_t k = int64_t(std::ceil(retain_ratio * double(n) - 1e-9));
    return std::clamp<int64_t>(k, 1, n);
}

int sign_of(double v) {
    if (v > 0) return 1;
    if (v < 0) return -1;
    return 0;
}

void require_finite_ratio(const char* name, double v, double lo, double hi, bool lo_open,
                          bool hi_open) {
    const bool lo_ok = lo_open ? v > lo : v >= lo;
    const bool hi_ok = hi_open ? v < hi : v <= hi;
    if (!std::isfinite(v) || !lo_ok || !hi_ok) {
        std::ostringstream os;
        os << name << " must lie in " << (lo_open ? '(' : '[') << lo << "," << hi
           << (hi_open ? ')' : ']') << ", got " << v;
        throw ValidationError(os.str());
    }
}

}  // namespace

const char* merge_method_name(MergeMethod m) {
    switch (m) {
        case MergeMethod::TaskArithmetic: return "task_arithmetic";
        case MergeMethod::Interpolate2: return "interpolate2";
        case MergeMethod::Average: return "average";
        case MergeMethod::Ties: return "ties";
        case MergeMethod::Dare: return "dare";
        case MergeMethod::Slerp: return "slerp";
    }
    return "?";
}

std::optional<MergeMethod> merge_method_from_name(std::string_view name) {
    if (name == "task_arithmetic") return MergeMethod::TaskArithmetic;
    if (name == "interpolate2") return MergeMethod::Interpolate2;
    if (name == "average") return MergeMethod::Average;
    if (name == "ties") return MergeMethod::Ties;
    if (name == "dare") return MergeMethod::Dare;
    if (name == "slerp") return MergeMethod::Slerp;
    return std::nullopt;
}

DeltaSet compute_delta(const ModelWeights& model, const ModelWeights& base,
                       std::string source_label) {
    const CompatReport report = validate_compatibility(model, base);
    if (!report.is_compatible()) {
        throw ValidationError("cannot diff incompatible checkpoints: " + report.summary());
    }
    DeltaSet delta;
    delta.base_fingerprint = base.fingerprint();
    delta.source_label = std::move(source_label);
    for (const auto& [name, bt] : base.entries()) {
        const Tensor& mt = model.at(name);
        std::vector<float> diff(mt.values.size());
        for (size_t i = 0; i < diff.size(); ++i) diff[i] = mt.values[i] - bt.values[i];
        delta.tensors.add(name, Tensor::make(bt.dtype, bt.shape, std::move(diff)));
    }
    return delta;
}

ModelWeights merge_task_arithmetic(const ModelWeights& base, const std::vector<DeltaSet>& deltas,
                                   double lambda, const ExecOptions& exec) {
    if (deltas.empty()) throw ValidationError("task arithmetic needs at least one delta");
    for (const auto& d : deltas) check_delta_against_base(base, d);

    std::vector<Tensor> out(base.size());
    parallel_for(base.size(), exec.threads, [&](size_t i) {
        const auto& [name, bt] = base.entries()[i];
        std::vector<float> merged(bt.values.size());
        for (size_t e = 0; e < merged.size(); ++e) {
            double acc = 0.0;
            for (const auto& d : deltas) acc += d.tensors.find(name)->values[e];
            merged[e] = apply_update(bt.values[e], float(lambda * acc));
        }
        out[i] = Tensor::make(bt.dtype, bt.shape, std::move(merged));
    });
    return assemble(base, std::move(out));
}

ModelWeights interpolate_two(const ModelWeights& base, const DeltaSet& delta_a,
                             const DeltaSet& delta_b, double alpha, const ExecOptions& exec) {
    require_finite_ratio("alpha", alpha, 0.0, 1.0, false, false);
    check_delta_against_base(base, delta_a);
    check_delta_against_base(base, delta_b);

    std::vector<Tensor> out(base.size());
    parallel_for(base.size(), exec.threads, [&](size_t i) {
        const auto& [name, bt] = base.entries()[i];
        const Tensor& ta = *delta_a.tensors.find(name);
        const Tensor& tb = *delta_b.tensors.find(name);
        std::vector<float> merged(bt.values.size());
        for (size_t e = 0; e < merged.size(); ++e) {
            const double upd = alpha * double(ta.values[e]) + (1.0 - alpha) * double(tb.values[e]);
            merged[e] = apply_update(bt.values[e], float(upd));
        }
        out[i] = Tensor::make(bt.dtype, bt.shape, std::move(merged));
    });
    return assemble(base, std::move(out));
}

ModelWeights merge_average(const std::vector<const ModelWeights*>& models,
                           const ExecOptions& exec) {
    if (models.empty()) throw ValidationError("average needs at least one model");
    for (size_t i = 1; i < models.size(); ++i) {
        const CompatReport report = validate_compatibility(*models[0], *models[i]);
        if (!report.is_compatible()) {
            throw ValidationError("cannot average incompatible checkpoints: " + report.summary());
        }
    }

    // Canonical summation order — by content fingerprint — so the result is
    // identical for any permutation of the input list.
    std::vector<const ModelWeights*> ordered = models;
    std::stable_sort(ordered.begin(), ordered.end(),
                     [](const ModelWeights* a, const ModelWeights* b) {
                         return a->fingerprint() < b->fingerprint();
                     });

    const ModelWeights& first = *ordered.front();
    const auto names = first.sorted_names();
    std::vector<Tensor> out(names.size());
    parallel_for(names.size(), exec.threads, [&](size_t i) {
        const Tensor& ft = first.at(names[i]);
        std::vector<float> merged(ft.values.size());
        for (size_t e = 0; e < merged.size(); ++e) {
            double acc = 0.0;
            for (const ModelWeights* m : ordered) acc += m->find(names[i])->values[e];
            merged[e] = float(acc / double(ordered.size()));
        }
        out[i] = Tensor::make(ft.dtype, ft.shape, std::move(merged));
    });

    ModelWeights result;
    for (size_t i = 0; i < names.size(); ++i) result.add(names[i], std::move(out[i]));
    return result;
}

ModelWeights merge_ties(const ModelWeights& base, const std::vector<DeltaSet>& deltas,
                        double lambda, double retain_ratio, const ExecOptions& exec) {
    if (deltas.empty()) throw ValidationError("ties needs at least one delta");
    require_finite_ratio("retain_ratio", retain_ratio, 0.0, 1.0, true, false);
    for (const auto& d : deltas) check_delta_against_base(base, d);

    std::vector<Tensor> out(base.size());
    parallel_for(base.size(), exec.threads, [&](size_t i) {
        const auto& [name, bt] = base.entries()[i];
        const int64_t n = bt.numel();
        const int64_t k = ties_keep_count(retain_ratio, n);

        // Trim: per delta, keep the k largest-magnitude entries; equal
        // magnitudes resolve toward the lower flat index.
        std::vector<std::vector<uint8_t>> kept(deltas.size());
        for (size_t d = 0; d < deltas.size(); ++d) {
            const auto& values = deltas[d].tensors.find(name)->values;
            std::vector<int64_t> idx(static_cast<size_t>(n));
            for (int64_t j = 0; j < n; ++j) idx[size_t(j)] = j;
            auto better = [&](int64_t a, int64_t b) {
                const float fa = std::fabs(values[size_t(a)]);
                const float fb = std::fabs(values[size_t(b)]);
                if (fa != fb) return fa > fb;
                return a < b;
            };
            if (k < n) std::nth_element(idx.begin(), idx.begin() + k, idx.end(), better);
            kept[d].assign(size_t(n), 0);
            for (int64_t j = 0; j < k; ++j) kept[d][size_t(idx[size_t(j)])] = 1;
        }

        std::vector<float> merged(static_cast<size_t>(n));
        for (int64_t e = 0; e < n; ++e) {
            double sum = 0.0;
            for (size_t d = 0; d < deltas.size(); ++d) {
                if (kept[d][size_t(e)]) sum += deltas[d].tensors.find(name)->values[size_t(e)];
            }
            const int elected = sign_of(sum);
            double mean = 0.0;
            if (elected != 0) {
                double acc = 0.0;
                int64_t count = 0;
                for (size_t d = 0; d < deltas.size(); ++d) {
                    if (!kept[d][size_t(e)]) continue;
                    const float v = deltas[d].tensors.find(name)->values[size_t(e)];
                    if (sign_of(v) == elected) {
                        acc += v;
                        count++;
                    }
                }
                if (count > 0) mean = acc / double(count);
            }
            merged[size_t(e)] = apply_update(bt.values[size_t(e)], float(lambda * mean));
        }
        out[i] = Tensor::make(bt.dtype, bt.shape, std::move(merged));
    });
    return assemble(base, std::move(out));
}

ModelWeights merge_dare(const ModelWeights& base, const std::vector<DeltaSet>& deltas,
                        double lambda, double drop_rate, uint64_t seed, const ExecOptions& exec) {
    if (deltas.empty()) throw ValidationError("dare needs at least one delta");
    require_finite_ratio("drop_rate", drop_rate, 0.0, 1.0, false, true);
    for (const auto& d : deltas) check_delta_against_base(base, d);

    const double rescale = 1.0 / (1.0 - drop_rate);
    std::vector<DeltaSet> transformed(deltas.size());
    for (size_t d = 0; d < deltas.size(); ++d) {
        transformed[d].base_fingerprint = deltas[d].base_fingerprint;
        transformed[d].source_label = deltas[d].source_label;
    }
    // One flat task list over (delta, tensor) pairs so thread count never
    // changes which stream an element draws from.
    const size_t per = base.size();
    std::vector<std::vector<Tensor>> slots(deltas.size(), std::vector<Tensor>(per));
    parallel_for(deltas.size() * per, exec.threads, [&](size_t task) {
        const size_t d = task / per;
        const size_t i = task % per;
        const auto& [name, bt] = base.entries()[i];
        const Tensor& dt = *deltas[d].tensors.find(name);
        const CounterRng rng(derive_stream_key(seed, deltas[d].source_label, name));
        std::vector<float> values(dt.values.size());
        for (size_t e = 0; e < values.size(); ++e) {
            if (rng.uniform01(e) < drop_rate) {
                values[e] = 0.0f;
            } else {
                values[e] = float(double(dt.values[e]) * rescale);
            }
        }
        slots[d][i] = Tensor::make(bt.dtype, bt.shape, std::move(values));
    });
    for (size_t d = 0; d < deltas.size(); ++d) {
        for (size_t i = 0; i < per; ++i) {
            transformed[d].tensors.add(base.entries()[i].first, std::move(slots[d][i]));
        }
    }
    return merge_task_arithmetic(base, transformed, lambda, exec);
}

ModelWeights merge_slerp(const ModelWeights& base, const DeltaSet& delta_a,
                         const DeltaSet& delta_b, double t, const ExecOptions& exec) {
    require_finite_ratio("t", t, 0.0, 1.0, false, false);
    check_delta_against_base(base, delta_a);
    check_delta_against_base(base, delta_b);

    std::vector<Tensor> out(base.size());
    parallel_for(base.size(), exec.threads, [&](size_t i) {
        const auto& [name, bt] = base.entries()[i];
        const auto& a = delta_a.tensors.find(name)->values;
        const auto& b = delta_b.tensors.find(name)->values;

        double dot = 0.0, na2 = 0.0, nb2 = 0.0;
        for (size_t e = 0; e < a.size(); ++e) {
            dot += double(a[e]) * double(b[e]);
            na2 += double(a[e]) * double(a[e]);
            nb2 += double(b[e]) * double(b[e]);
        }
        const double na = std::sqrt(na2);
        const double nb = std::sqrt(nb2);

        // Degenerate directions fall back to linear interpolation.
        double ca = 1.0 - t;
        double cb = t;
        if (na >= 1e-12 && nb >= 1e-12) {
            const double cosv = std::clamp(dot / (na * nb), -1.0, 1.0);
            const double omega = std::acos(cosv);
            const double so = std::sin(omega);
            if (so >= 1e-6) {
                ca = std::sin((1.0 - t) * omega) / so;
                cb = std::sin(t * omega) / so;
            }
        }

        std::vector<float> merged(a.size());
        for (size_t e = 0; e < merged.size(); ++e) {
            const double upd = ca * double(a[e]) + cb * double(b[e]);
            merged[e] = apply_update(bt.values[e], float(upd));
        }
        out[i] = Tensor::make(bt.dtype, bt.shape, std::move(merged));
    });
    return assemble(base, std::move(out));
}

ModelWeights apply_recipe(const MergeRecipe& recipe, const ModelWeights& base,
                          const std::vector<DeltaSet>& deltas, const ExecOptions& exec) {
    auto need_two = [&]() {
        if (deltas.size() != 2) {
            throw ValidationError(std::string(merge_method_name(recipe.method)) +
                                  " needs exactly 2 sources, got " +
                                  std::to_string(deltas.size()));
        }
    };
    switch (recipe.method) {
        case MergeMethod::TaskArithmetic:
            return merge_task_arithmetic(base, deltas, recipe.lambda, exec);
        case MergeMethod::Interpolate2:
            need_two();
            return interpolate_two(base, deltas[0], deltas[1], recipe.alpha, exec);
        case MergeMethod::Average: {
            // Reconstitute each source as base + delta, then average.
            std::vector<ModelWeights> sources;
            sources.reserve(deltas.size());
            for (const auto& d : deltas) {
                sources.push_back(merge_task_arithmetic(base, {d}, 1.0, exec));
            }
            std::vector<const ModelWeights*> ptrs;
            for (const auto& m : sources) ptrs.push_back(&m);
            return merge_average(ptrs, exec);
        }
        case MergeMethod::Ties:
            return merge_ties(base, deltas, recipe.lambda, recipe.retain_ratio, exec);
        case MergeMethod::Dare:
            return merge_dare(base, deltas, recipe.lambda, recipe.drop_rate, recipe.seed, exec);
        case MergeMethod::Slerp:
            need_two();
            return merge_slerp(base, deltas[0], deltas[1], recipe.t, exec);
    }
    throw ValidationError("unknown merge method");
}

MergeGrid MergeGrid::defaults_for(MergeMethod m) {
    MergeGrid grid;
    switch (m) {
        case MergeMethod::TaskArithmetic:
            grid.lambdas = {0.1, 0.3, 0.5, 0.7, 0.9, 1.0};
            break;
        case MergeMethod::Ties:
            grid.lambdas = {0.1, 0.3, 0.5, 0.7, 0.9, 1.0};
            grid.retain_ratios = {0.1, 0.2, 0.3};
            break;
        case MergeMethod::Dare:
            grid.lambdas = {0.1, 0.3, 0.5, 0.7, 0.9, 1.0};
            grid.drop_rates = {0.1, 0.3, 0.5, 0.7, 0.9};
            break;
        case MergeMethod::Interpolate2:
            grid.alphas = {0.1, 0.3, 0.5, 0.7, 0.9};
            break;
        case MergeMethod::Slerp:
            grid.ts = {0.1, 0.3, 0.5, 0.7, 0.9};
            break;
        case MergeMethod::Average:
            break;
    }
    return grid;
}

namespace {

std::vector<MergeRecipe> grid_combinations(const MergeRecipe& templ, const MergeGrid& grid) {
    auto need = [&](const std::vector<double>& axis, const char* name) -> const std::vector<double>& {
        if (axis.empty()) {
            throw ValidationError(std::string("grid axis '") + name + "' is empty for method '" +
                                  merge_method_name(templ.method) + "'");
        }
        return axis;
    };
    std::vector<MergeRecipe> combos;
    switch (templ.method) {
        case MergeMethod::TaskArithmetic:
            for (double l : need(grid.lambdas, "lambdas")) {
                MergeRecipe r = templ;
                r.lambda = l;
                combos.push_back(r);
            }
            break;
        case MergeMethod::Interpolate2:
            for (double a : need(grid.alphas, "alphas")) {
                MergeRecipe r = templ;
                r.alpha = a;
                combos.push_back(r);
            }
            break;
        case MergeMethod::Average:
            combos.push_back(templ);
            break;
        case MergeMethod::Ties:
            for (double l : need(grid.lambdas, "lambdas")) {
                for (double rr : need(grid.retain_ratios, "retain_ratios")) {
                    MergeRecipe r = templ;
                    r.lambda = l;
                    r.retain_ratio = rr;
                    combos.push_back(r);
                }
            }
            break;
        case MergeMethod::Dare:
            for (double l : need(grid.lambdas, "lambdas")) {
                for (double dr : need(grid.drop_rates, "drop_rates")) {
                    MergeRecipe r = templ;
                    r.lambda = l;
                    r.drop_rate = dr;
                    combos.push_back(r);
                }
            }
            break;
        case MergeMethod::Slerp:
            for (double t : need(grid.ts, "ts")) {
                MergeRecipe r = templ;
                r.t = t;
                combos.push_back(r);
            }
            break;
    }
    return combos;
}

auto params_tuple(const MergeRecipe& r) {
    return std::make_tuple(r.lambda, r.alpha, r.retain_ratio, r.drop_rate, r.t);
}

}  // namespace

std::vector<GridResult> grid_search(const ModelWeights& base, const std::vector<DeltaSet>& deltas,
                                    const MergeRecipe& recipe_template, const MergeGrid& grid,
                                    const std::function<double(const ModelWeights&)>& evaluator,
                                    const GridSearchOptions& opts) {
    if (!evaluator) throw ValidationError("grid search needs an evaluator");
    const auto combos = grid_combinations(recipe_template, grid);

    std::vector<GridResult> results(combos.size());
    auto evaluate = [&](size_t i, const ExecOptions& exec) {
        const MergeRecipe& r = combos[i];
        try {
            const ModelWeights merged = apply_recipe(r, base, deltas, exec);
            results[i] = {r, evaluator(merged)};
        } catch (const std::exception& e) {
            throw ValidationError("grid search aborted at " + recipe_params_string(r) + ": " +
                                  e.what());
        }
    };

    if (opts.threads > 1 && opts.evaluator_concurrent_safe) {
        parallel_for(combos.size(), opts.threads, [&](size_t i) { evaluate(i, ExecOptions{1}); });
    } else {
        for (size_t i = 0; i < combos.size(); ++i) evaluate(i, ExecOptions{opts.threads});
    }

    std::sort(results.begin(), results.end(), [](const GridResult& a, const GridResult& b) {
        if (a.score != b.score) return a.score > b.score;
        return params_tuple(a.recipe) < params_tuple(b.recipe);
    });
    return results;
}

std::string recipe_params_string(const MergeRecipe& r) {
    char buf[192];
    switch (r.method) {
        case MergeMethod::TaskArithmetic:
            std::snprintf(buf, sizeof(buf), "lambda=%g", r.lambda);
            break;
        case MergeMethod::Interpolate2:
            std::snprintf(buf, sizeof(buf), "alpha=%g", r.alpha);
            break;
        case MergeMethod::Average:
            std::snprintf(buf, sizeof(buf), "(no parameters)");
            break;
        case MergeMethod::Ties:
            std::snprintf(buf, sizeof(buf), "lambda=%g retain_ratio=%g", r.lambda, r.retain_ratio);
            break;
        case MergeMethod::Dare:
            std::snprintf(buf, sizeof(buf), "lambda=%g drop_rate=%g seed=%llu", r.lambda,
                          r.drop_rate, static_cast<unsigned long long>(r.seed));
            break;
        case MergeMethod::Slerp:
            std::snprintf(buf, sizeof(buf), "t=%g", r.t);
            break;
    }
    return std::string(merge_method_name(r.method)) + " " + buf;
}

namespace {

constexpr const char* kMetaFormat = "deltafuse.format";
constexpr const char* kMetaBaseFingerprint = "deltafuse.base_fingerprint";
constexpr const char* kMetaSourceLabel = "deltafuse.source_label";

}  // namespace

void save_delta(const DeltaSet& delta, const std::filesystem::path& path) {
    // Deltas are stored as F32 whatever the base dtype: narrowing a
    // difference of BF16/F16 weights would lose the exact update.
    ModelWeights file;
    for (const auto& [name, t] : delta.tensors.entries()) {
        file.add(name, Tensor::make(Dtype::F32, t.shape, t.values));
    }
    file.set_metadata(kMetaFormat, "delta");
    file.set_metadata(kMetaBaseFingerprint, fingerprint_hex(delta.base_fingerprint));
    file.set_metadata(kMetaSourceLabel, delta.source_label);
    save_safetensors(file, path);
}

bool is_delta_file(const ModelWeights& raw) {
    auto it = raw.metadata().find(kMetaFormat);
    return it != raw.metadata().end() && it->second == "delta";
}

DeltaSet load_delta(const std::filesystem::path& path, const ModelWeights& base) {
    const ModelWeights raw = load_safetensors(path);
    if (!is_delta_file(raw)) {
        throw ValidationError("'" + path.string() + "' is not a delta file (missing " +
                              kMetaFormat + "=delta metadata)");
    }
    uint64_t stored_fp = 0;
    if (auto it = raw.metadata().find(kMetaBaseFingerprint); it != raw.metadata().end()) {
        stored_fp = std::stoull(it->second, nullptr, 16);
    }
    if (stored_fp != base.fingerprint()) {
        throw ValidationError("delta file '" + path.string() +
                              "' was computed against a different base: expected " +
                              fingerprint_hex(base.fingerprint()) + ", file carries " +
                              fingerprint_hex(stored_fp));
    }

    DeltaSet delta;
    delta.base_fingerprint = stored_fp;
    if (auto it = raw.metadata().find(kMetaSourceLabel); it != raw.metadata().end()) {
        delta.source_label = it->second;
    }
    if (raw.size() != base.size()) {
        throw ValidationError("delta file '" + path.string() + "' has " +
                              std::to_string(raw.size()) + " tensors but the base has " +
                              std::to_string(base.size()));
    }
    for (const auto& [name, bt] : base.entries()) {
        const Tensor* dt = raw.find(name);
        if (!dt) {
            throw ValidationError("delta file '" + path.string() + "' is missing tensor '" + name +
                                  "'");
        }
        if (dt->shape != bt.shape) {
            throw ValidationError("delta file tensor '" + name + "' has shape " +
                                  shape_to_string(dt->shape) + ", base has " +
                                  shape_to_string(bt.shape));
        }
        delta.tensors.add(name, Tensor::make(bt.dtype, bt.shape, dt->values));
    }
    return delta;
}

namespace {

double require_number(const json& j, const char* field, double lo, double hi, bool lo_open,
                      bool hi_open) {
    const auto& v = j.at(field);
    if (!v.is_number()) {
        throw ValidationError(std::string(field) + ": expected a number");
    }
    const double d = v.get<double>();
    require_finite_ratio(field, d, lo, hi, lo_open, hi_open);
    return d;
}

}  // namespace

MergeRecipe parse_recipe_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ParseError(std::string("recipe is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ValidationError("recipe root must be a JSON object");

    static const char* known[] = {"method", "base",       "sources",      "lambda", "alpha",
                                  "retain_ratio", "drop_rate", "t", "seed"};
    for (const auto& [key, _] : j.items()) {
        if (std::find_if(std::begin(known), std::end(known),
                         [&](const char* k) { return key == k; }) == std::end(known)) {
            throw ValidationError("unknown recipe field '" + key + "'");
        }
    }

    MergeRecipe r;
    if (!j.contains("method") || !j["method"].is_string()) {
        throw ValidationError("method: required string field");
    }
    const std::string method_str = j["method"].get<std::string>();
    const auto method = merge_method_from_name(method_str);
    if (!method) {
        throw ValidationError("method: unknown value '" + method_str +
                              "' (expected one of task_arithmetic, interpolate2, average, ties, "
                              "dare, slerp)");
    }
    r.method = *method;

    if (j.contains("base")) {
        if (!j["base"].is_string()) throw ValidationError("base: expected a string path");
        r.base = j["base"].get<std::string>();
    }
    if (j.contains("sources")) {
        if (!j["sources"].is_array()) throw ValidationError("sources: expected an array");
        size_t idx = 0;
        for (const auto& s : j["sources"]) {
            ModelRef ref;
            if (s.is_string()) {
                ref.model = s.get<std::string>();
                ref.label = std::filesystem::path(ref.model).stem().string();
            } else if (s.is_object()) {
                if (!s.contains("model") || !s["model"].is_string()) {
                    throw ValidationError("sources[" + std::to_string(idx) +
                                          "].model: required string field");
                }
                ref.model = s["model"].get<std::string>();
                if (s.contains("label")) {
                    if (!s["label"].is_string()) {
                        throw ValidationError("sources[" + std::to_string(idx) +
                                              "].label: expected a string");
                    }
                    ref.label = s["label"].get<std::string>();
                } else {
                    ref.label = std::filesystem::path(ref.model).stem().string();
                }
            } else {
                throw ValidationError("sources[" + std::to_string(idx) +
                                      "]: expected a string or an object");
            }
            r.sources.push_back(std::move(ref));
            idx++;
        }
    }

    if (j.contains("lambda")) {
        if (!j["lambda"].is_number()) throw ValidationError("lambda: expected a number");
        r.lambda = j["lambda"].get<double>();
        if (!std::isfinite(r.lambda)) throw ValidationError("lambda: must be finite");
    }
    if (j.contains("alpha")) r.alpha = require_number(j, "alpha", 0.0, 1.0, false, false);
    if (j.contains("retain_ratio")) {
        r.retain_ratio = require_number(j, "retain_ratio", 0.0, 1.0, true, false);
    }
    if (j.contains("drop_rate")) r.drop_rate = require_number(j, "drop_rate", 0.0, 1.0, false, true);
    if (j.contains("t")) r.t = require_number(j, "t", 0.0, 1.0, false, false);
    if (j.contains("seed")) {
        if (!j["seed"].is_number_unsigned()) {
            throw ValidationError("seed: expected a non-negative integer");
        }
        r.seed = j["seed"].get<uint64_t>();
    } else if (r.method == MergeMethod::Dare) {
        // Randomized method: an implicit seed would silently change results
        // between readers, so demand one.
        throw ValidationError("seed: required for method 'dare'");
    }
    return r;
}

MergeRecipe load_recipe(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open recipe '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_recipe_json(ss.str());
}

std::string recipe_to_json(const MergeRecipe& r) {
    json j;
    j["method"] = merge_method_name(r.method);
    if (!r.base.empty()) j["base"] = r.base;
    if (!r.sources.empty()) {
        json arr = json::array();
        for (const auto& s : r.sources) {
            arr.push_back(json{{"label", s.label}, {"model", s.model}});
        }
        j["sources"] = std::move(arr);
    }
    j["lambda"] = r.lambda;
    j["alpha"] = r.alpha;
    j["retain_ratio"] = r.retain_ratio;
    j["drop_rate"] = r.drop_rate;
    j["t"] = r.t;
    j["seed"] = r.seed;
    return j.dump();
}

}  // namespace deltafuse
