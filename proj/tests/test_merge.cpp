#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "deltafuse/errors.hpp"
#include "deltafuse/merge.hpp"
#include "deltafuse/safetensors.hpp"
#include "deltafuse/tensor.hpp"

#include "test_util.hpp"

using namespace deltafuse;
using testutil::Family;
using testutil::TempDir;

namespace {

ModelWeights one_tensor(std::vector<float> vals, Dtype dt = Dtype::F32) {
    const int64_t n = int64_t(vals.size());
    ModelWeights w;
    w.add("t", Tensor::make(dt, {n}, std::move(vals)));
    return w;
}

std::vector<DeltaSet> family_deltas(const Family& fam) {
    std::vector<DeltaSet> ds;
    for (size_t i = 0; i < fam.models.size(); ++i) {
        ds.push_back(compute_delta(fam.models[i], fam.base, "m" + std::to_string(i)));
    }
    return ds;
}

}  // namespace

TEST_CASE("task arithmetic with lambda 1 and one delta reproduces the fine-tune") {
    for (uint64_t seed = 1; seed <= 15; ++seed) {
        const Family fam = testutil::make_family(seed, 1);
        const auto ds = family_deltas(fam);
        const ModelWeights merged = merge_task_arithmetic(fam.base, ds, 1.0);
        CHECK(testutil::values_bitwise_equal(merged, fam.models[0]));
    }
}

TEST_CASE("task arithmetic with lambda 0 reproduces the base bitwise") {
    for (uint64_t seed = 1; seed <= 15; ++seed) {
        const Family fam = testutil::make_family(seed, 3);
        const ModelWeights merged = merge_task_arithmetic(fam.base, family_deltas(fam), 0.0);
        CHECK(testutil::values_bitwise_equal(merged, fam.base));
    }
}

TEST_CASE("opposite deltas cancel exactly") {
    const Family fam = testutil::make_family(7, 1);
    const DeltaSet d = compute_delta(fam.models[0], fam.base, "plus");
    DeltaSet neg = d;
    neg.source_label = "minus";
    ModelWeights negated;
    for (const auto& [name, t] : d.tensors.entries()) {
        Tensor nt = t;
        for (float& v : nt.values) v = -v;
        negated.add(name, std::move(nt));
    }
    neg.tensors = std::move(negated);
    const ModelWeights merged = merge_task_arithmetic(fam.base, {d, neg}, 0.65);
    CHECK(testutil::values_bitwise_equal(merged, fam.base));
}

TEST_CASE("two-model interpolation endpoints are the source models, bitwise") {
    for (uint64_t seed = 1; seed <= 15; ++seed) {
        const Family fam = testutil::make_family(seed, 2);
        const auto ds = family_deltas(fam);
        const ModelWeights at_a = interpolate_two(fam.base, ds[0], ds[1], 1.0);
        const ModelWeights at_b = interpolate_two(fam.base, ds[0], ds[1], 0.0);
        CHECK(testutil::values_bitwise_equal(at_a, fam.models[0]));
        CHECK(testutil::values_bitwise_equal(at_b, fam.models[1]));
    }
}

TEST_CASE("spherical interpolation endpoints are the source models, bitwise") {
    for (uint64_t seed = 1; seed <= 15; ++seed) {
        const Family fam = testutil::make_family(seed, 2);
        const auto ds = family_deltas(fam);
        const ModelWeights at_a = merge_slerp(fam.base, ds[0], ds[1], 0.0);
        const ModelWeights at_b = merge_slerp(fam.base, ds[0], ds[1], 1.0);
        CHECK(testutil::values_bitwise_equal(at_a, fam.models[0]));
        CHECK(testutil::values_bitwise_equal(at_b, fam.models[1]));
    }
}

TEST_CASE("spherical interpolation of orthogonal deltas matches the closed form") {
    const ModelWeights base = one_tensor({0.0f, 0.0f});
    DeltaSet da{one_tensor({1.0f, 0.0f}), base.fingerprint(), "a"};
    DeltaSet db{one_tensor({0.0f, 1.0f}), base.fingerprint(), "b"};
    const ModelWeights mid = merge_slerp(base, da, db, 0.5);
    const double expect = std::sqrt(2.0) / 2.0;  // sin(pi/4)/sin(pi/2)
    CHECK(std::abs(mid.at("t").values[0] - expect) < 1e-6);
    CHECK(std::abs(mid.at("t").values[1] - expect) < 1e-6);
}

TEST_CASE("spherical interpolation falls back to linear for degenerate pairs") {
    const ModelWeights base = one_tensor({0.0f, 0.0f});
    SUBCASE("parallel") {
        DeltaSet da{one_tensor({1.0f, 0.0f}), base.fingerprint(), "a"};
        DeltaSet db{one_tensor({2.0f, 0.0f}), base.fingerprint(), "b"};
        const ModelWeights mid = merge_slerp(base, da, db, 0.5);
        CHECK(mid.at("t").values[0] == doctest::Approx(1.5).epsilon(1e-9));
        CHECK(mid.at("t").values[1] == 0.0f);
    }
    SUBCASE("one delta is zero") {
        DeltaSet da{one_tensor({1.0f, 0.0f}), base.fingerprint(), "a"};
        DeltaSet db{one_tensor({0.0f, 0.0f}), base.fingerprint(), "b"};
        const ModelWeights mid = merge_slerp(base, da, db, 0.5);
        CHECK(mid.at("t").values[0] == doctest::Approx(0.5).epsilon(1e-9));
    }
    SUBCASE("anti-parallel") {
        DeltaSet da{one_tensor({1.0f, 0.0f}), base.fingerprint(), "a"};
        DeltaSet db{one_tensor({-1.0f, 0.0f}), base.fingerprint(), "b"};
        const ModelWeights mid = merge_slerp(base, da, db, 0.5);
        CHECK(mid.at("t").values[0] == doctest::Approx(0.0).epsilon(1e-9));
    }
}

TEST_CASE("dropout-free dare is task arithmetic, bitwise") {
    for (uint64_t seed = 1; seed <= 10; ++seed) {
        const Family fam = testutil::make_family(seed, 3);
        const auto ds = family_deltas(fam);
        const ModelWeights ta = merge_task_arithmetic(fam.base, ds, 0.55);
        const ModelWeights dare = merge_dare(fam.base, ds, 0.55, 0.0, seed * 1000 + 17);
        CHECK(testutil::values_bitwise_equal(ta, dare));
    }
}

TEST_CASE("dare draws depend on seed and on source label") {
    // Large tensor so a pattern collision is effectively impossible.
    std::vector<float> base_vals(512, 0.0f);
    std::vector<float> delta_vals(512, 1.0f);
    const ModelWeights base = one_tensor(base_vals);
    const DeltaSet d{one_tensor(delta_vals), base.fingerprint(), "a"};
    DeltaSet relabeled = d;
    relabeled.source_label = "b";

    const ModelWeights r1 = merge_dare(base, {d}, 1.0, 0.5, 42);
    const ModelWeights r2 = merge_dare(base, {d}, 1.0, 0.5, 42);
    const ModelWeights r3 = merge_dare(base, {d}, 1.0, 0.5, 43);
    const ModelWeights r4 = merge_dare(base, {relabeled}, 1.0, 0.5, 42);
    CHECK(testutil::values_bitwise_equal(r1, r2));
    CHECK_FALSE(testutil::values_bitwise_equal(r1, r3));
    CHECK_FALSE(testutil::values_bitwise_equal(r1, r4));

    // Kept entries carry the 1/(1-p) rescale; dropped entries leave the base.
    int kept = 0;
    for (float v : r1.at("t").values) {
        if (v != 0.0f) {
            CHECK(v == 2.0f);
            ++kept;
        }
    }
    CHECK(kept > 180);  // ~256 expected out of 512
    CHECK(kept < 332);
}

TEST_CASE("dare output is invariant to tensor iteration order and thread count") {
    const Family fam = testutil::make_family(11, 2);
    const auto ds = family_deltas(fam);
    const ModelWeights ref = merge_dare(fam.base, ds, 0.8, 0.5, 7);
    const auto ref_bytes = encode_safetensors(ref);

    // Same logical family rebuilt with entries inserted in reverse order.
    auto reversed = [](const ModelWeights& w) {
        ModelWeights out;
        const auto& es = w.entries();
        for (auto it = es.rbegin(); it != es.rend(); ++it) out.add(it->first, it->second);
        return out;
    };
    ModelWeights rbase = reversed(fam.base);
    std::vector<DeltaSet> rds;
    for (const auto& d : ds) rds.push_back({reversed(d.tensors), d.base_fingerprint, d.source_label});
    const ModelWeights again = merge_dare(rbase, rds, 0.8, 0.5, 7);
    CHECK(encode_safetensors(again) == ref_bytes);

    for (int threads : {2, 4, 8}) {
        const ModelWeights mt = merge_dare(fam.base, ds, 0.8, 0.5, 7, ExecOptions{threads});
        CHECK(encode_safetensors(mt) == ref_bytes);
    }
}

TEST_CASE("average of a single model is that model") {
    const Family fam = testutil::make_family(3, 1);
    const ModelWeights avg = merge_average({&fam.models[0]});
    CHECK(testutil::values_bitwise_equal(avg, fam.models[0]));
}

TEST_CASE("average is invariant to argument order") {
    const Family fam = testutil::make_family(5, 3);
    std::vector<const ModelWeights*> fwd{&fam.models[0], &fam.models[1], &fam.models[2]};
    std::vector<const ModelWeights*> rev{&fam.models[2], &fam.models[0], &fam.models[1]};
    const ModelWeights a = merge_average(fwd);
    const ModelWeights b = merge_average(rev);
    CHECK(testutil::values_bitwise_equal(a, b));
}

TEST_CASE("average of identical models is the model itself") {
    const Family fam = testutil::make_family(9, 1);
    const ModelWeights avg =
        merge_average({&fam.models[0], &fam.models[0], &fam.models[0]});
    CHECK(testutil::values_bitwise_equal(avg, fam.models[0]));
}

TEST_CASE("trim keeps the largest magnitudes with ties to the lower index") {
    const ModelWeights base = one_tensor({0.25f, 0.25f, 0.25f, 0.25f});
    DeltaSet d{one_tensor({1.0f, -1.0f, 0.5f, -2.0f}), base.fingerprint(), "d"};
    // retain 0.5 of 4 entries -> keep 2: |-2| then the |1| vs |-1| tie, which
    // goes to flat index 0.
    const ModelWeights merged = merge_ties(base, {d}, 1.0, 0.5);
    const auto& v = merged.at("t").values;
    CHECK(v[0] == 1.25f);
    CHECK(v[1] == 0.25f);
    CHECK(v[2] == 0.25f);
    CHECK(v[3] == -1.75f);
}

TEST_CASE("sign election and disjoint mean on hand-built columns") {
    const ModelWeights base = one_tensor({0.0f, 0.0f, 0.0f});
    // Columns across the two deltas: {3,-1}, {3,0}, {2,-2}.
    DeltaSet d1{one_tensor({3.0f, 3.0f, 2.0f}), base.fingerprint(), "d1"};
    DeltaSet d2{one_tensor({-1.0f, 0.0f, -2.0f}), base.fingerprint(), "d2"};
    const ModelWeights merged = merge_ties(base, {d1, d2}, 1.0, 1.0);
    const auto& v = merged.at("t").values;
    CHECK(v[0] == 3.0f);  // sum 2 elects +, mean of {3}
    CHECK(v[1] == 3.0f);  // zero never matches the elected sign
    CHECK(v[2] == 0.0f);  // sum 0 elects zero -> base preserved
}

TEST_CASE("fully retained ties over disjoint supports equals task arithmetic") {
    // Each delta touches a distinct third of the tensor, so election and the
    // disjoint mean reduce to the single contributor.
    const int64_t n = 12;
    std::vector<float> base_vals(n, 0.125f);
    const ModelWeights base = one_tensor(base_vals);
    std::vector<DeltaSet> ds;
    testutil::SeqRng rng(404);
    for (int m = 0; m < 3; ++m) {
        std::vector<float> vals(n, 0.0f);
        for (int64_t i = m * 4; i < (m + 1) * 4; ++i)
            vals[size_t(i)] = testutil::grid_value(rng, Dtype::F32);
        ds.push_back({one_tensor(vals), base.fingerprint(), "m" + std::to_string(m)});
    }
    const ModelWeights ties = merge_ties(base, ds, 1.0, 1.0);
    const ModelWeights ta = merge_task_arithmetic(base, ds, 1.0);
    CHECK(testutil::values_bitwise_equal(ties, ta));
}

TEST_CASE("ties agrees with an independent oracle, bitwise") {
    testutil::SeqRng rng(2024);
    for (int iter = 0; iter < 100; ++iter) {
        const int64_t n = rng.next_int(1, 48);
        std::vector<float> base_vals;
        for (int64_t i = 0; i < n; ++i) base_vals.push_back(testutil::grid_value(rng, Dtype::F32));
        const ModelWeights base = one_tensor(base_vals);
        const int k = int(rng.next_int(1, 4));
        std::vector<DeltaSet> ds;
        std::vector<std::vector<float>> raw_deltas;
        for (int m = 0; m < k; ++m) {
            std::vector<float> vals;
            for (int64_t i = 0; i < n; ++i) vals.push_back(testutil::grid_value(rng, Dtype::F32));
            raw_deltas.push_back(vals);
            ds.push_back({one_tensor(vals), base.fingerprint(), "m" + std::to_string(m)});
        }
        for (double retain : {0.1, 0.5, 1.0}) {
            const double lambda = 0.75;
            const ModelWeights got = merge_ties(base, ds, lambda, retain);
            const std::vector<float> want =
                testutil::ties_oracle(base_vals, raw_deltas, lambda, retain);
            const auto& gv = got.at("t").values;
            REQUIRE(gv.size() == want.size());
            CHECK(std::memcmp(gv.data(), want.data(), want.size() * sizeof(float)) == 0);
        }
    }
}

TEST_CASE("hyperparameters outside their domain are rejected") {
    const Family fam = testutil::make_family(2, 2);
    const auto ds = family_deltas(fam);
    CHECK_THROWS_AS(merge_ties(fam.base, ds, 1.0, 0.0), ValidationError);
    CHECK_THROWS_AS(merge_ties(fam.base, ds, 1.0, 1.5), ValidationError);
    CHECK_THROWS_AS(merge_dare(fam.base, ds, 1.0, 1.0, 5), ValidationError);
    CHECK_THROWS_AS(merge_dare(fam.base, ds, 1.0, -0.1, 5), ValidationError);
    CHECK_THROWS_AS(interpolate_two(fam.base, ds[0], ds[1], 1.5), ValidationError);
    CHECK_THROWS_AS(merge_slerp(fam.base, ds[0], ds[1], -0.25), ValidationError);
    CHECK_THROWS_AS(merge_task_arithmetic(fam.base, {}, 1.0), ValidationError);
    CHECK_THROWS_AS(merge_average({}), ValidationError);
}

TEST_CASE("a delta from a different base is rejected by every method") {
    const Family fam = testutil::make_family(21, 2);
    const Family other = testutil::make_family(22, 1);
    auto ds = family_deltas(fam);
    const DeltaSet foreign = compute_delta(other.models[0], other.base, "foreign");
    if (fam.base.fingerprint() == other.base.fingerprint()) return;  // can't happen in practice
    CHECK_THROWS_WITH_AS(merge_task_arithmetic(fam.base, {foreign}, 1.0),
                         doctest::Contains("fingerprint"), ValidationError);
    CHECK_THROWS_AS(merge_ties(fam.base, {ds[0], foreign}, 1.0, 0.5), ValidationError);
    CHECK_THROWS_AS(merge_dare(fam.base, {foreign}, 1.0, 0.5, 1), ValidationError);
}

TEST_CASE("diffing incompatible checkpoints fails with the report embedded") {
    ModelWeights a = one_tensor({1.0f, 2.0f});
    ModelWeights b;
    b.add("other", Tensor::make(Dtype::F32, {2}, {1.0f, 2.0f}));
    CHECK_THROWS_WITH_AS(compute_delta(a, b), doctest::Contains("incompatible"), ValidationError);
}

TEST_CASE("recipe dispatch matches direct calls") {
    const Family fam = testutil::make_family(31, 2);
    const auto ds = family_deltas(fam);
    MergeRecipe r;

    r.method = MergeMethod::TaskArithmetic;
    r.lambda = 0.4;
    CHECK(testutil::values_bitwise_equal(apply_recipe(r, fam.base, ds),
                                         merge_task_arithmetic(fam.base, ds, 0.4)));
    r.method = MergeMethod::Interpolate2;
    r.alpha = 0.3;
    CHECK(testutil::values_bitwise_equal(apply_recipe(r, fam.base, ds),
                                         interpolate_two(fam.base, ds[0], ds[1], 0.3)));
    r.method = MergeMethod::Ties;
    r.lambda = 1.0;
    r.retain_ratio = 0.5;
    CHECK(testutil::values_bitwise_equal(apply_recipe(r, fam.base, ds),
                                         merge_ties(fam.base, ds, 1.0, 0.5)));
    r.method = MergeMethod::Dare;
    r.drop_rate = 0.5;
    r.seed = 99;
    CHECK(testutil::values_bitwise_equal(apply_recipe(r, fam.base, ds),
                                         merge_dare(fam.base, ds, 1.0, 0.5, 99)));
    r.method = MergeMethod::Slerp;
    r.t = 0.25;
    CHECK(testutil::values_bitwise_equal(apply_recipe(r, fam.base, ds),
                                         merge_slerp(fam.base, ds[0], ds[1], 0.25)));
}

TEST_CASE("two-model methods reject other source counts") {
    const Family fam = testutil::make_family(8, 3);
    const auto ds = family_deltas(fam);
    MergeRecipe r;
    r.method = MergeMethod::Interpolate2;
    CHECK_THROWS_WITH_AS(apply_recipe(r, fam.base, ds), doctest::Contains("exactly 2"),
                         ValidationError);
    r.method = MergeMethod::Slerp;
    CHECK_THROWS_AS(apply_recipe(r, fam.base, {ds[0]}), ValidationError);
}

TEST_CASE("merge runs identically across thread counts") {
    const Family fam = testutil::make_family(77, 3);
    const auto ds = family_deltas(fam);
    const ModelWeights ref = merge_ties(fam.base, ds, 0.9, 0.4, ExecOptions{1});
    for (int threads : {2, 5}) {
        const ModelWeights mt = merge_ties(fam.base, ds, 0.9, 0.4, ExecOptions{threads});
        CHECK(testutil::values_bitwise_equal(ref, mt));
    }
}

TEST_CASE("delta files round-trip exactly and re-tag dtype from the base") {
    TempDir dir("delta-roundtrip");
    for (uint64_t seed = 40; seed < 46; ++seed) {
        const Family fam = testutil::make_family(seed, 1);
        const DeltaSet d = compute_delta(fam.models[0], fam.base, "ft");
        const std::string path = dir.file("d" + std::to_string(seed) + ".safetensors");
        save_delta(d, path);

        // On disk every tensor is stored widened to F32.
        const ModelWeights raw = load_safetensors(path);
        CHECK(is_delta_file(raw));
        for (const auto& [name, t] : raw.entries()) CHECK(t.dtype == Dtype::F32);

        const DeltaSet back = load_delta(path, fam.base);
        CHECK(back.base_fingerprint == fam.base.fingerprint());
        CHECK(back.source_label == "ft");
        CHECK(testutil::values_bitwise_equal(back.tensors, d.tensors));
        for (const auto& [name, t] : back.tensors.entries())
            CHECK(t.dtype == fam.base.at(name).dtype);

        // Applying the reloaded delta reproduces the fine-tune bitwise.
        const ModelWeights rebuilt = merge_task_arithmetic(fam.base, {back}, 1.0);
        CHECK(testutil::values_bitwise_equal(rebuilt, fam.models[0]));
    }
}

TEST_CASE("delta files refuse the wrong base and non-delta inputs") {
    TempDir dir("delta-reject");
    const Family fam = testutil::make_family(50, 1);
    const Family other = testutil::make_family(51, 1);
    const DeltaSet d = compute_delta(fam.models[0], fam.base, "ft");
    const std::string path = dir.file("d.safetensors");
    save_delta(d, path);
    CHECK_THROWS_WITH_AS(load_delta(path, other.base), doctest::Contains("different base"),
                         ValidationError);

    const std::string plain = dir.file("plain.safetensors");
    save_safetensors(fam.base, plain);
    CHECK_FALSE(is_delta_file(load_safetensors(plain)));
    CHECK_THROWS_AS(load_delta(plain, fam.base), ValidationError);
}

TEST_CASE("grid search enumerates the method-specific axes") {
    const Family fam = testutil::make_family(60, 2);
    const auto ds = family_deltas(fam);
    auto count_for = [&](MergeMethod m) {
        MergeRecipe templ;
        templ.method = m;
        templ.seed = 1;
        const auto results = grid_search(fam.base, ds, templ, MergeGrid::defaults_for(m),
                                         [](const ModelWeights&) { return 0.0; });
        return results.size();
    };
    CHECK(count_for(MergeMethod::TaskArithmetic) == 6);
    CHECK(count_for(MergeMethod::Ties) == 18);
    CHECK(count_for(MergeMethod::Dare) == 30);
    CHECK(count_for(MergeMethod::Interpolate2) == 5);
    CHECK(count_for(MergeMethod::Slerp) == 5);
}

TEST_CASE("grid search recovers the lambda that produced the target") {
    const Family fam = testutil::make_family(61, 2);
    const auto ds = family_deltas(fam);
    const ModelWeights target = merge_task_arithmetic(fam.base, ds, 0.7);
    auto evaluator = [&](const ModelWeights& cand) {
        double sq = 0.0;
        for (const auto& [name, t] : cand.entries()) {
            const Tensor& tt = target.at(name);
            for (size_t i = 0; i < t.values.size(); ++i) {
                const double diff = double(t.values[i]) - double(tt.values[i]);
                sq += diff * diff;
            }
        }
        return -std::sqrt(sq);
    };
    MergeRecipe templ;
    templ.method = MergeMethod::TaskArithmetic;
    const auto results =
        grid_search(fam.base, ds, templ, MergeGrid::defaults_for(MergeMethod::TaskArithmetic),
                    evaluator);
    REQUIRE(!results.empty());
    CHECK(results[0].recipe.lambda == doctest::Approx(0.7));
    CHECK(results[0].score >= results.back().score);
    for (size_t i = 1; i < results.size(); ++i) CHECK(results[i - 1].score >= results[i].score);
}

TEST_CASE("tied scores order by ascending hyperparameter tuple") {
    const Family fam = testutil::make_family(62, 2);
    const auto ds = family_deltas(fam);
    MergeRecipe templ;
    templ.method = MergeMethod::Ties;
    const auto results =
        grid_search(fam.base, ds, templ, MergeGrid::defaults_for(MergeMethod::Ties),
                    [](const ModelWeights&) { return 42.0; });
    REQUIRE(results.size() == 18);
    CHECK(results[0].recipe.lambda == doctest::Approx(0.1));
    CHECK(results[0].recipe.retain_ratio == doctest::Approx(0.1));
    for (size_t i = 1; i < results.size(); ++i) {
        const auto& p = results[i - 1].recipe;
        const auto& q = results[i].recipe;
        const bool ordered =
            p.lambda < q.lambda || (p.lambda == q.lambda && p.retain_ratio <= q.retain_ratio);
        CHECK(ordered);
    }
}

TEST_CASE("an evaluator failure identifies the failing combination") {
    const Family fam = testutil::make_family(63, 2);
    const auto ds = family_deltas(fam);
    MergeRecipe templ;
    templ.method = MergeMethod::TaskArithmetic;
    auto evaluator = [](const ModelWeights&) -> double { throw std::runtime_error("boom"); };
    CHECK_THROWS_WITH_AS(
        grid_search(fam.base, ds, templ, MergeGrid::defaults_for(MergeMethod::TaskArithmetic),
                    evaluator),
        doctest::Contains("lambda"), ValidationError);
}

TEST_CASE("concurrent grid search matches the serial ordering") {
    const Family fam = testutil::make_family(64, 2);
    const auto ds = family_deltas(fam);
    const ModelWeights target = merge_task_arithmetic(fam.base, ds, 0.3);
    auto evaluator = [&](const ModelWeights& cand) {
        double sq = 0.0;
        for (const auto& [name, t] : cand.entries()) {
            const Tensor& tt = target.at(name);
            for (size_t i = 0; i < t.values.size(); ++i) {
                const double diff = double(t.values[i]) - double(tt.values[i]);
                sq += diff * diff;
            }
        }
        return -sq;
    };
    MergeRecipe templ;
    templ.method = MergeMethod::TaskArithmetic;
    const MergeGrid grid = MergeGrid::defaults_for(MergeMethod::TaskArithmetic);
    const auto serial = grid_search(fam.base, ds, templ, grid, evaluator);
    GridSearchOptions opts;
    opts.threads = 4;
    opts.evaluator_concurrent_safe = true;
    const auto parallel = grid_search(fam.base, ds, templ, grid, evaluator, opts);
    REQUIRE(serial.size() == parallel.size());
    for (size_t i = 0; i < serial.size(); ++i) {
        CHECK(serial[i].recipe.lambda == parallel[i].recipe.lambda);
        CHECK(serial[i].score == parallel[i].score);
    }
}

TEST_CASE("recipe JSON round-trips and rejects schema violations") {
    MergeRecipe r;
    r.method = MergeMethod::Dare;
    r.base = "base.safetensors";
    r.sources = {{"a.safetensors", "a"}, {"b.safetensors", ""}};
    r.lambda = 0.8;
    r.drop_rate = 0.35;
    r.seed = 12345;
    const MergeRecipe back = parse_recipe_json(recipe_to_json(r));
    CHECK(back.method == MergeMethod::Dare);
    CHECK(back.base == r.base);
    REQUIRE(back.sources.size() == 2);
    CHECK(back.sources[0].label == "a");
    CHECK(back.lambda == doctest::Approx(0.8));
    CHECK(back.drop_rate == doctest::Approx(0.35));
    CHECK(back.seed == 12345);

    CHECK_THROWS_AS(parse_recipe_json("{not json"), ParseError);
    CHECK_THROWS_AS(parse_recipe_json("[]"), ValidationError);
    CHECK_THROWS_WITH_AS(parse_recipe_json(R"({"method":"ties","surprise":1})"),
                         doctest::Contains("surprise"), ValidationError);
    CHECK_THROWS_WITH_AS(parse_recipe_json(R"({"method":"blend"})"),
                         doctest::Contains("blend"), ValidationError);
    CHECK_THROWS_WITH_AS(parse_recipe_json(R"({"lambda":0.5})"),
                         doctest::Contains("method"), ValidationError);
    CHECK_THROWS_WITH_AS(parse_recipe_json(R"({"method":"dare"})"),
                         doctest::Contains("seed"), ValidationError);
    CHECK_THROWS_AS(parse_recipe_json(R"({"method":"ties","lambda":"big"})"), ValidationError);
    CHECK_THROWS_AS(parse_recipe_json(R"({"method":"ties","seed":-4})"), ValidationError);
}

TEST_CASE("parameter echo lists only the axes the method reads") {
    MergeRecipe r;
    r.method = MergeMethod::Ties;
    r.lambda = 0.5;
    r.retain_ratio = 0.2;
    CHECK(recipe_params_string(r) == "ties lambda=0.5 retain_ratio=0.2");
    r.method = MergeMethod::Average;
    CHECK(recipe_params_string(r) == "average (no parameters)");
    r.method = MergeMethod::Dare;
    r.drop_rate = 0.5;
    r.seed = 3;
    const std::string echo = recipe_params_string(r);
    CHECK(echo.find("drop_rate=0.5") != std::string::npos);
    CHECK(echo.find("seed=3") != std::string::npos);
    CHECK(echo.find("retain_ratio") == std::string::npos);
}

TEST_CASE("method names round-trip") {
    for (MergeMethod m : {MergeMethod::TaskArithmetic, MergeMethod::Interpolate2,
                          MergeMethod::Average, MergeMethod::Ties, MergeMethod::Dare,
                          MergeMethod::Slerp}) {
        const auto parsed = merge_method_from_name(merge_method_name(m));
        REQUIRE(parsed.has_value());
        CHECK(*parsed == m);
    }
    CHECK_FALSE(merge_method_from_name("blend").has_value());
}
