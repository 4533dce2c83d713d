#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "deltafuse/analysis.hpp"
#include "deltafuse/errors.hpp"
#include "deltafuse/fusion.hpp"
#include "deltafuse/merge.hpp"
#include "deltafuse/safetensors.hpp"
#include "deltafuse/toy_model.hpp"

namespace deltafuse {

namespace {

using nlohmann::ordered_json;

enum class Format { Human, Csv, Json };

Format parse_format(const std::string& s) {
    if (s == "human") return Format::Human;
    if (s == "csv") return Format::Csv;
    if (s == "json") return Format::Json;
    throw ValidationError("format: unknown value '" + s + "' (expected human, csv, or json)");
}

std::string fmt_g(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

std::vector<double> parse_double_list(const std::string& text, const char* flag) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            size_t used = 0;
            const double v = std::stod(item, &used);
            if (used != item.size() || !std::isfinite(v)) throw std::invalid_argument(item);
            out.push_back(v);
        } catch (const std::exception&) {
            throw ValidationError(std::string(flag) + ": '" + item + "' is not a finite number");
        }
    }
    if (out.empty()) throw ValidationError(std::string(flag) + ": empty list");
    return out;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ParseError("cannot open '" + path.string() + "' for writing");
    f << text;
    if (!f) throw ParseError("failed writing '" + path.string() + "'");
}

double max_abs_difference(const Tensor& a, const Tensor& b) {
    double mx = 0.0;
    for (size_t i = 0; i < a.values.size(); ++i) {
        mx = std::max(mx, double(std::fabs(double(a.values[i]) - double(b.values[i]))));
    }
    return mx;
}

// Delta of a possibly-partial source: tensors absent from the source get a
// zero delta, extras in the source are ignored; shared tensors must still
// match the base's layout exactly.
DeltaSet partial_delta(const ModelWeights& model, const ModelWeights& base,
                       std::string source_label) {
    DeltaSet delta;
    delta.base_fingerprint = base.fingerprint();
    delta.source_label = std::move(source_label);
    for (const auto& [name, bt] : base.entries()) {
        const Tensor* mt = model.find(name);
        if (!mt) {
            delta.tensors.add(name, Tensor::zeros(bt.dtype, bt.shape));
            continue;
        }
        if (mt->shape != bt.shape) {
            throw ValidationError("tensor '" + name + "' has shape " + shape_to_string(mt->shape) +
                                  " in the source, base has " + shape_to_string(bt.shape));
        }
        if (mt->dtype != bt.dtype) {
            throw ValidationError("tensor '" + name + "' is " + dtype_name(mt->dtype) +
                                  " in the source, base is " + dtype_name(bt.dtype));
        }
        std::vector<float> values(mt->values.size());
        for (size_t i = 0; i < values.size(); ++i) {
            values[i] = mt->values[i] - bt.values[i];
        }
        delta.tensors.add(name, Tensor::make(bt.dtype, bt.shape, std::move(values)));
    }
    return delta;
}

struct LoadedSource {
    DeltaSet delta;
    std::string path;
    bool was_delta_file = false;
};

// A merge source on disk is either a full checkpoint or a delta file; the
// container metadata decides. The recipe's label wins in both cases so DARE
// streams are reproducible from the recipe alone.
LoadedSource load_source(const ModelRef& ref, const ModelWeights& base, bool allow_partial) {
    LoadedSource src;
    src.path = ref.model;
    const ModelWeights raw = load_safetensors(ref.model);
    if (is_delta_file(raw)) {
        src.was_delta_file = true;
        src.delta = load_delta(ref.model, base);
        src.delta.source_label = ref.label;
    } else if (allow_partial) {
        src.delta = partial_delta(raw, base, ref.label);
    } else {
        src.delta = compute_delta(raw, base, ref.label);
    }
    return src;
}

// ---------------------------------------------------------------- merge ----

struct MergeArgs {
    std::string recipe_path;
    std::string out_path;
    std::string report_path;
    int threads = 1;
    bool allow_partial = false;
    std::string format = "human";
};

int run_merge(const MergeArgs& a, std::ostream& out) {
    const Format format = parse_format(a.format);
    MergeRecipe recipe = load_recipe(a.recipe_path);
    if (recipe.base.empty()) throw ValidationError("base: required for merge");
    if (recipe.sources.empty()) throw ValidationError("sources: at least one model required");

    const ModelWeights base = load_safetensors(recipe.base);
    std::vector<LoadedSource> sources;
    std::vector<DeltaSet> deltas;
    for (const auto& ref : recipe.sources) {
        sources.push_back(load_source(ref, base, a.allow_partial));
        deltas.push_back(sources.back().delta);
    }

    const ExecOptions exec{a.threads};
    const ModelWeights merged = apply_recipe(recipe, base, deltas, exec);
    save_safetensors(merged, a.out_path);

    ordered_json report;
    report["method"] = merge_method_name(recipe.method);
    report["parameters"] = recipe_params_string(recipe);
    report["recipe"] = ordered_json::parse(recipe_to_json(recipe));
    report["base_fingerprint"] = fingerprint_hex(base.fingerprint());
    report["output_fingerprint"] = fingerprint_hex(merged.fingerprint());
    ordered_json src_list = ordered_json::array();
    for (const auto& s : sources) {
        src_list.push_back({{"label", s.delta.source_label},
                            {"path", s.path},
                            {"kind", s.was_delta_file ? "delta" : "checkpoint"}});
    }
    report["sources"] = std::move(src_list);
    ordered_json tensor_stats = ordered_json::array();
    for (const auto& [name, bt] : base.entries()) {
        tensor_stats.push_back({{"name", name},
                                {"numel", bt.numel()},
                                {"max_abs_delta", max_abs_difference(merged.at(name), bt)}});
    }
    report["tensors"] = std::move(tensor_stats);
    const std::string report_path =
        a.report_path.empty() ? a.out_path + ".report.json" : a.report_path;
    write_text_file(report_path, report.dump(2) + "\n");

    switch (format) {
        case Format::Human:
            out << "merged " << base.size() << " tensors via " << recipe_params_string(recipe)
                << "\n"
                << "base fingerprint   " << fingerprint_hex(base.fingerprint()) << "\n"
                << "output fingerprint " << fingerprint_hex(merged.fingerprint()) << "\n"
                << "wrote " << a.out_path << "\n"
                << "wrote " << report_path << "\n";
            break;
        case Format::Csv:
            out << "name,numel,max_abs_delta\n";
            for (const auto& t : report["tensors"]) {
                out << t["name"].get<std::string>() << "," << t["numel"].get<int64_t>() << ","
                    << fmt_g(t["max_abs_delta"].get<double>()) << "\n";
            }
            break;
        case Format::Json:
            out << report.dump(2) << "\n";
            break;
    }
    return 0;
}

// ---------------------------------------------------------------- delta ----

struct DeltaArgs {
    std::string model_path;
    std::string base_path;
    std::string out_path;
    std::string label;
    std::string format = "human";
};

int run_delta(const DeltaArgs& a, std::ostream& out) {
    const Format format = parse_format(a.format);
    const ModelWeights base = load_safetensors(a.base_path);
    const ModelWeights model = load_safetensors(a.model_path);
    const std::string label =
        a.label.empty() ? std::filesystem::path(a.model_path).stem().string() : a.label;
    const DeltaSet delta = compute_delta(model, base, label);
    save_delta(delta, a.out_path);

    int64_t nonzero = 0;
    for (const auto& [name, t] : delta.tensors.entries()) {
        nonzero += std::count_if(t.values.begin(), t.values.end(),
                                 [](float v) { return v != 0.0f; });
    }
    switch (format) {
        case Format::Human:
            out << "delta '" << label << "': " << delta.tensors.size() << " tensors, " << nonzero
                << " nonzero entries\n"
                << "base fingerprint " << fingerprint_hex(delta.base_fingerprint) << "\n"
                << "wrote " << a.out_path << "\n";
            break;
        case Format::Csv: {
            out << "name,numel,max_abs_delta\n";
            for (const auto& [name, t] : delta.tensors.entries()) {
                double mx = 0.0;
                for (float v : t.values) mx = std::max(mx, double(std::fabs(v)));
                out << name << "," << t.numel() << "," << fmt_g(mx) << "\n";
            }
            break;
        }
        case Format::Json: {
            ordered_json j;
            j["label"] = label;
            j["base_fingerprint"] = fingerprint_hex(delta.base_fingerprint);
            j["tensor_count"] = delta.tensors.size();
            j["nonzero_entries"] = nonzero;
            j["output"] = a.out_path;
            out << j.dump(2) << "\n";
            break;
        }
    }
    return 0;
}

// ------------------------------------------------------------- validate ----

int run_validate(const std::string& path_a, const std::string& path_b, const std::string& fmt,
                 std::ostream& out) {
    const Format format = parse_format(fmt);
    const ModelWeights a = load_safetensors(path_a);
    const ModelWeights b = load_safetensors(path_b);
    const CompatReport report = validate_compatibility(a, b);

    switch (format) {
        case Format::Human:
            out << report.summary() << "\n";
            break;
        case Format::Csv:
            out << "issue,name,detail_a,detail_b\n";
            for (const auto& n : report.only_in_a) out << "only_in_a," << n << ",,\n";
            for (const auto& n : report.only_in_b) out << "only_in_b," << n << ",,\n";
            for (const auto& m : report.shape_mismatches) {
                out << "shape_mismatch," << m.name << "," << m.a << "," << m.b << "\n";
            }
            for (const auto& m : report.dtype_mismatches) {
                out << "dtype_mismatch," << m.name << "," << m.a << "," << m.b << "\n";
            }
            break;
        case Format::Json: {
            ordered_json j;
            j["compatible"] = report.is_compatible();
            j["only_in_a"] = report.only_in_a;
            j["only_in_b"] = report.only_in_b;
            ordered_json shapes = ordered_json::array();
            for (const auto& m : report.shape_mismatches) {
                shapes.push_back({{"name", m.name}, {"a", m.a}, {"b", m.b}});
            }
            j["shape_mismatches"] = std::move(shapes);
            ordered_json dtypes = ordered_json::array();
            for (const auto& m : report.dtype_mismatches) {
                dtypes.push_back({{"name", m.name}, {"a", m.a}, {"b", m.b}});
            }
            j["dtype_mismatches"] = std::move(dtypes);
            out << j.dump(2) << "\n";
            break;
        }
    }
    return report.is_compatible() ? 0 : 1;
}

// ------------------------------------------------- fuse-plan and flops -----

TokenSequence planned_sequence(const FusionConfig& config, TokenSequence* before = nullptr) {
    std::vector<Segment> segments;
    for (const auto& enc : config.encoders) {
        Segment s;
        s.source = enc.name;
        s.indices.resize(size_t(enc.token_len));
        std::iota(s.indices.begin(), s.indices.end(), int64_t{0});
        segments.push_back(std::move(s));
    }
    const TokenSequence seq = concat_tokens(segments, config.text_len);
    if (before) *before = seq;
    return apply_pruning(seq, config.pruning, config);
}

int run_fuse_plan(const std::string& config_path, const std::string& fmt, std::ostream& out) {
    const Format format = parse_format(fmt);
    const FusionConfig config = load_fusion_config(config_path);
    TokenSequence before;
    const TokenSequence seq = planned_sequence(config, &before);
    const BudgetVerdict verdict = budget_check(config, seq.total_len);

    switch (format) {
        case Format::Human: {
            out << "fused token plan (" << seq.segments.size() << " segments)\n";
            for (size_t i = 0; i < seq.segments.size(); ++i) {
                out << "  " << seq.segments[i].source << ": " << seq.segments[i].indices.size()
                    << " of " << before.segments[i].indices.size() << " tokens\n";
            }
            out << "total " << seq.total_len << " tokens, cap " << verdict.seq_cap << ": "
                << (verdict.ok ? "within budget"
                              : "over budget by " + std::to_string(verdict.overflow) +
                                    " (suggest dropping " + std::to_string(verdict.suggested_drop) +
                                    " vision tokens)")
                << "\n";
            break;
        }
        case Format::Csv:
            out << "source,kept,original\n";
            for (size_t i = 0; i < seq.segments.size(); ++i) {
                out << seq.segments[i].source << "," << seq.segments[i].indices.size() << ","
                    << before.segments[i].indices.size() << "\n";
            }
            break;
        case Format::Json: {
            ordered_json j;
            ordered_json segs = ordered_json::array();
            for (size_t i = 0; i < seq.segments.size(); ++i) {
                segs.push_back({{"source", seq.segments[i].source},
                                {"kept", seq.segments[i].indices.size()},
                                {"original", before.segments[i].indices.size()},
                                {"indices", seq.segments[i].indices}});
            }
            j["segments"] = std::move(segs);
            j["total_len"] = seq.total_len;
            j["budget"] = {{"ok", verdict.ok},
                           {"seq_cap", verdict.seq_cap},
                           {"overflow", verdict.overflow},
                           {"suggested_drop", verdict.suggested_drop}};
            out << j.dump(2) << "\n";
            break;
        }
    }
    return 0;
}

int run_flops(const std::string& config_path, const std::string& fmt, std::ostream& out) {
    const Format format = parse_format(fmt);
    const FusionConfig config = load_fusion_config(config_path);
    const TokenSequence seq = planned_sequence(config);
    const FlopsReport report = estimate_flops(config, seq.total_len);

    switch (format) {
        case Format::Human: {
            char buf[160];
            std::snprintf(buf, sizeof(buf), "%6s %14s %16s %18s %16s %16s\n", "layer", "eff_len",
                          "attention_proj", "attention_scores", "mlp", "layer_total");
            out << buf;
            for (size_t i = 0; i < report.per_layer.size(); ++i) {
                const auto& l = report.per_layer[i];
                std::snprintf(buf, sizeof(buf), "%6zu %14lld %16lld %18lld %16lld %16lld\n", i + 1,
                              (long long)l.effective_len, (long long)l.attention_proj,
                              (long long)l.attention_scores, (long long)l.mlp,
                              (long long)l.layer_total());
                out << buf;
            }
            out << "total flops: " << report.total << " (fused length " << seq.total_len << ")\n";
            break;
        }
        case Format::Csv:
            out << "layer,effective_len,attention_proj,attention_scores,mlp,layer_total\n";
            for (size_t i = 0; i < report.per_layer.size(); ++i) {
                const auto& l = report.per_layer[i];
                out << (i + 1) << "," << l.effective_len << "," << l.attention_proj << ","
                    << l.attention_scores << "," << l.mlp << "," << l.layer_total() << "\n";
            }
            out << "total,,,,," << report.total << "\n";
            break;
        case Format::Json: {
            ordered_json j;
            ordered_json layers = ordered_json::array();
            for (const auto& l : report.per_layer) {
                layers.push_back({{"effective_len", l.effective_len},
                                  {"attention_proj", l.attention_proj},
                                  {"attention_scores", l.attention_scores},
                                  {"mlp", l.mlp},
                                  {"layer_total", l.layer_total()}});
            }
            j["per_layer"] = std::move(layers);
            j["total"] = report.total;
            j["fused_len"] = seq.total_len;
            out << j.dump(2) << "\n";
            break;
        }
    }
    return 0;
}

// ------------------------------------------------------------- toy-demo ----

struct ToyDemoArgs {
    std::string config_path;
    std::string recipe_path;
    uint64_t seed = 0;
    int64_t text_len = 8;
    std::string attention_csv;
    std::string format = "human";
};

std::string attention_csv_text(const ToyFamily& family, const std::vector<double>& scores) {
    std::string csv = "token,source,score\n";
    size_t idx = 0;
    for (const auto& enc : family.encoders) {
        for (int64_t t = 0; t < enc.token_len; ++t, ++idx) {
            csv += std::to_string(idx) + "," + enc.name + "," + fmt_g(scores[idx]) + "\n";
        }
    }
    return csv;
}

int run_toy_demo(const ToyDemoArgs& a, std::ostream& out) {
    const Format format = parse_format(a.format);
    const ToyConfig config = load_toy_config(a.config_path);
    const MergeRecipe recipe = load_recipe(a.recipe_path);
    if (a.text_len < 1) throw ValidationError("text-len: must be at least 1");
    const int members = config.encoder_dims.empty() ? 2 : int(config.encoder_dims.size());

    const ToyFamily family = build_toy_family(config, members, a.seed);
    const std::vector<float> image = random_image(config, a.seed);
    const std::vector<int32_t> text = random_text(config, a.text_len, a.seed);
    const PipelineResult result = run_pipeline(family, recipe, image, text);
    const std::vector<double> scores = average_attention(result.attention);
    const double ratio = double(result.measured_flops) / double(result.estimated.total);
    const std::string csv = attention_csv_text(family, scores);
    if (!a.attention_csv.empty()) write_text_file(a.attention_csv, csv);

    switch (format) {
        case Format::Human: {
            out << "family: " << members << " members, model_dim " << config.model_dim << ", "
                << config.num_layers << " layers\n"
                << "merge: " << recipe_params_string(recipe) << "\n"
                << "fused length: " << result.fused_len << " ("
                << (result.fused_len - a.text_len) << " vision + " << a.text_len << " text)\n";
            out << "prediction:";
            for (int32_t id : result.prediction) out << " " << id;
            out << "\n";
            char buf[128];
            std::snprintf(buf, sizeof(buf), "flops: measured %llu, estimated %lld, ratio %.6f\n",
                          (unsigned long long)result.measured_flops,
                          (long long)result.estimated.total, ratio);
            out << buf;
            if (!a.attention_csv.empty()) out << "wrote " << a.attention_csv << "\n";
            break;
        }
        case Format::Csv:
            out << csv;
            break;
        case Format::Json: {
            ordered_json j;
            j["members"] = members;
            j["method"] = merge_method_name(recipe.method);
            j["parameters"] = recipe_params_string(recipe);
            j["fused_len"] = result.fused_len;
            j["prediction"] = result.prediction;
            j["measured_flops"] = result.measured_flops;
            j["estimated_flops"] = result.estimated.total;
            j["flops_ratio"] = ratio;
            j["attention_scores"] = scores;
            out << j.dump(2) << "\n";
            break;
        }
    }
    return 0;
}

// ---------------------------------------------------------- analyze-iou ----

struct AnalyzeIouArgs {
    std::string path_a;
    std::string path_b;
    std::string ps = "5,10,20,50";
    std::string out_path;
    std::string format = "csv";
};

int run_analyze_iou(const AnalyzeIouArgs& a, std::ostream& out) {
    const Format format = parse_format(a.format);
    const std::vector<double> ps = parse_double_list(a.ps, "ps");
    for (double p : ps) {
        if (!(p > 0.0) || p > 100.0) {
            throw ValidationError("ps: percent " + fmt_g(p) + " outside (0, 100]");
        }
    }
    const std::vector<double> scores_a = load_scores_csv(a.path_a);
    const std::vector<double> scores_b = load_scores_csv(a.path_b);
    const IoUCurve curve = iou_curve(scores_a, scores_b, ps);

    switch (format) {
        case Format::Human:
            for (const auto& pt : curve.points) {
                out << "top " << fmt_g(pt.percent) << "%: IoU " << fmt_g(pt.iou) << "\n";
            }
            if (!a.out_path.empty()) {
                write_text_file(a.out_path, curve.to_csv());
                out << "wrote " << a.out_path << "\n";
            }
            break;
        case Format::Csv:
            if (a.out_path.empty()) {
                out << curve.to_csv();
            } else {
                write_text_file(a.out_path, curve.to_csv());
            }
            break;
        case Format::Json: {
            ordered_json j = ordered_json::array();
            for (const auto& pt : curve.points) {
                j.push_back({{"percent", pt.percent}, {"iou", pt.iou}});
            }
            const std::string text = j.dump(2) + "\n";
            if (a.out_path.empty()) {
                out << text;
            } else {
                write_text_file(a.out_path, text);
            }
            break;
        }
    }
    return 0;
}

// ---------------------------------------------------------- grid-search ----

struct GridSearchArgs {
    std::string recipe_path;
    std::string target_path;
    std::string out_path;
    std::string lambdas, alphas, retain_ratios, drop_rates, ts;
    int threads = 1;
    std::string format = "human";
};

int run_grid_search(const GridSearchArgs& a, std::ostream& out) {
    const Format format = parse_format(a.format);
    MergeRecipe recipe = load_recipe(a.recipe_path);
    if (recipe.base.empty()) throw ValidationError("base: required for grid search");
    if (recipe.sources.empty()) throw ValidationError("sources: at least one model required");

    const ModelWeights base = load_safetensors(recipe.base);
    std::vector<DeltaSet> deltas;
    for (const auto& ref : recipe.sources) {
        deltas.push_back(load_source(ref, base, false).delta);
    }
    const ModelWeights target = load_safetensors(a.target_path);
    const CompatReport compat = validate_compatibility(target, base);
    if (!compat.is_compatible()) {
        throw ValidationError("target is incompatible with the base:\n" + compat.summary());
    }

    MergeGrid grid = MergeGrid::defaults_for(recipe.method);
    if (!a.lambdas.empty()) grid.lambdas = parse_double_list(a.lambdas, "lambdas");
    if (!a.alphas.empty()) grid.alphas = parse_double_list(a.alphas, "alphas");
    if (!a.retain_ratios.empty()) {
        grid.retain_ratios = parse_double_list(a.retain_ratios, "retain-ratios");
    }
    if (!a.drop_rates.empty()) grid.drop_rates = parse_double_list(a.drop_rates, "drop-rates");
    if (!a.ts.empty()) grid.ts = parse_double_list(a.ts, "ts");

    // Score = negative L2 distance to the target across all tensors, so a
    // perfect reconstruction ranks first with score 0.
    const auto evaluator = [&](const ModelWeights& candidate) {
        double acc = 0.0;
        for (const auto& [name, t] : candidate.entries()) {
            const Tensor& tt = target.at(name);
            for (size_t i = 0; i < t.values.size(); ++i) {
                const double dd = double(t.values[i]) - double(tt.values[i]);
                acc += dd * dd;
            }
        }
        return -std::sqrt(acc);
    };
    GridSearchOptions opts;
    opts.threads = a.threads;
    opts.evaluator_concurrent_safe = true;
    const std::vector<GridResult> results = grid_search(base, deltas, recipe, grid, evaluator, opts);

    std::string csv = "rank,method,lambda,alpha,retain_ratio,drop_rate,t,score\n";
    for (size_t i = 0; i < results.size(); ++i) {
        const MergeRecipe& r = results[i].recipe;
        csv += std::to_string(i + 1) + "," + merge_method_name(r.method) + "," + fmt_g(r.lambda) +
               "," + fmt_g(r.alpha) + "," + fmt_g(r.retain_ratio) + "," + fmt_g(r.drop_rate) +
               "," + fmt_g(r.t) + "," + fmt_g(results[i].score) + "\n";
    }
    if (!a.out_path.empty()) write_text_file(a.out_path, csv);

    switch (format) {
        case Format::Human:
            out << results.size() << " combinations evaluated\n";
            for (size_t i = 0; i < results.size(); ++i) {
                out << "  " << (i + 1) << ". " << recipe_params_string(results[i].recipe)
                    << "  score " << fmt_g(results[i].score) << "\n";
            }
            if (!a.out_path.empty()) out << "wrote " << a.out_path << "\n";
            break;
        case Format::Csv:
            out << csv;
            break;
        case Format::Json: {
            ordered_json j = ordered_json::array();
            for (size_t i = 0; i < results.size(); ++i) {
                const MergeRecipe& r = results[i].recipe;
                j.push_back({{"rank", i + 1},
                             {"method", merge_method_name(r.method)},
                             {"lambda", r.lambda},
                             {"alpha", r.alpha},
                             {"retain_ratio", r.retain_ratio},
                             {"drop_rate", r.drop_rate},
                             {"t", r.t},
                             {"score", results[i].score}});
            }
            out << j.dump(2) << "\n";
            break;
        }
    }
    return 0;
}

}  // namespace

int cli_run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"delta-parameter model merging, vision-token fusion planning, and "
                 "inference-cost estimation"};
    app.require_subcommand(1);

    MergeArgs merge_args;
    CLI::App* merge = app.add_subcommand("merge", "merge models per a recipe file");
    merge->add_option("--recipe", merge_args.recipe_path, "recipe JSON path")->required();
    merge->add_option("--out", merge_args.out_path, "output checkpoint path")->required();
    merge->add_option("--report", merge_args.report_path,
                      "sidecar report path (default: <out>.report.json)");
    merge->add_option("--threads", merge_args.threads, "worker threads")->check(CLI::Range(1, 256));
    merge->add_flag("--allow-partial", merge_args.allow_partial,
                    "zero-fill deltas for tensors a source lacks");
    merge->add_option("--format", merge_args.format, "human, csv, or json");

    DeltaArgs delta_args;
    CLI::App* delta = app.add_subcommand("delta", "write model minus base as a delta file");
    delta->add_option("--model", delta_args.model_path, "fine-tuned checkpoint")->required();
    delta->add_option("--base", delta_args.base_path, "base checkpoint")->required();
    delta->add_option("--out", delta_args.out_path, "output delta path")->required();
    delta->add_option("--label", delta_args.label, "source label (default: model stem)");
    delta->add_option("--format", delta_args.format, "human, csv, or json");

    std::string validate_a, validate_b, validate_format = "human";
    CLI::App* validate = app.add_subcommand("validate", "compare two checkpoints for layout");
    validate->add_option("a", validate_a, "first checkpoint")->required();
    validate->add_option("b", validate_b, "second checkpoint")->required();
    validate->add_option("--format", validate_format, "human, csv, or json");

    std::string fuse_config, fuse_format = "human";
    CLI::App* fuse_plan = app.add_subcommand("fuse-plan", "plan the fused token sequence");
    fuse_plan->add_option("--config", fuse_config, "fusion config JSON path")->required();
    fuse_plan->add_option("--format", fuse_format, "human, csv, or json");

    std::string flops_config, flops_format = "human";
    CLI::App* flops = app.add_subcommand("flops", "estimate decoder flops for a fusion config");
    flops->add_option("--config", flops_config, "fusion config JSON path")->required();
    flops->add_option("--format", flops_format, "human, csv, or json");

    ToyDemoArgs toy_args;
    CLI::App* toy = app.add_subcommand("toy-demo", "run the toy multimodal pipeline end to end");
    toy->add_option("--config", toy_args.config_path, "toy config JSON path")->required();
    toy->add_option("--recipe", toy_args.recipe_path, "merge recipe JSON path")->required();
    toy->add_option("--seed", toy_args.seed, "random seed (required; no silent default)")
        ->required();
    toy->add_option("--text-len", toy_args.text_len, "text tokens to generate");
    toy->add_option("--attention-csv", toy_args.attention_csv, "write per-token scores here");
    toy->add_option("--format", toy_args.format, "human, csv, or json");

    AnalyzeIouArgs iou_args;
    CLI::App* iou = app.add_subcommand("analyze-iou", "top-p% overlap of two score files");
    iou->add_option("--a", iou_args.path_a, "first score CSV")->required();
    iou->add_option("--b", iou_args.path_b, "second score CSV")->required();
    iou->add_option("--ps", iou_args.ps, "comma-separated percents (default 5,10,20,50)");
    iou->add_option("--out", iou_args.out_path, "write curve CSV here instead of stdout");
    iou->add_option("--format", iou_args.format, "human, csv, or json");

    GridSearchArgs grid_args;
    CLI::App* grid = app.add_subcommand("grid-search", "sweep merge hyperparameters to a target");
    grid->add_option("--recipe", grid_args.recipe_path, "recipe JSON path")->required();
    grid->add_option("--target", grid_args.target_path, "target checkpoint to match")->required();
    grid->add_option("--out", grid_args.out_path, "write ranked CSV here");
    grid->add_option("--lambdas", grid_args.lambdas, "override scaling-term axis");
    grid->add_option("--alphas", grid_args.alphas, "override interpolation axis");
    grid->add_option("--retain-ratios", grid_args.retain_ratios, "override trim axis");
    grid->add_option("--drop-rates", grid_args.drop_rates, "override drop axis");
    grid->add_option("--ts", grid_args.ts, "override spherical position axis");
    grid->add_option("--threads", grid_args.threads, "worker threads")->check(CLI::Range(1, 256));
    grid->add_option("--format", grid_args.format, "human, csv, or json");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "usage error: " << e.what() << "\n";
        return 2;
    }

    try {
        if (app.got_subcommand(merge)) return run_merge(merge_args, out);
        if (app.got_subcommand(delta)) return run_delta(delta_args, out);
        if (app.got_subcommand(validate)) {
            return run_validate(validate_a, validate_b, validate_format, out);
        }
        if (app.got_subcommand(fuse_plan)) return run_fuse_plan(fuse_config, fuse_format, out);
        if (app.got_subcommand(flops)) return run_flops(flops_config, flops_format, out);
        if (app.got_subcommand(toy)) return run_toy_demo(toy_args, out);
        if (app.got_subcommand(iou)) return run_analyze_iou(iou_args, out);
        if (app.got_subcommand(grid)) return run_grid_search(grid_args, out);
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const ParseError& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
    err << "usage error: no subcommand given\n";
    return 2;
}

}  // namespace deltafuse
