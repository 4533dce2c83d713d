#include "deltafuse/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "deltafuse/errors.hpp"
#include "deltafuse/rng.hpp"

namespace deltafuse {

namespace {

// Indices of the k largest scores; equal scores resolve to the lower index.
std::vector<int64_t> top_indices(std::span<const double> scores, int64_t k) {
    std::vector<int64_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), int64_t{0});
    const auto better = [&](int64_t lhs, int64_t rhs) {
        if (scores[size_t(lhs)] != scores[size_t(rhs)]) {
            return scores[size_t(lhs)] > scores[size_t(rhs)];
        }
        return lhs < rhs;
    };
    std::nth_element(idx.begin(), idx.begin() + (k - 1), idx.end(), better);
    idx.resize(size_t(k));
    std::sort(idx.begin(), idx.end());
    return idx;
}

double centroid_and_spread(const Matrix& m, std::vector<double>& centroid) {
    centroid.assign(size_t(m.cols), 0.0);
    for (int64_t r = 0; r < m.rows; ++r) {
        for (int64_t c = 0; c < m.cols; ++c) centroid[size_t(c)] += m.at(r, c);
    }
    for (double& v : centroid) v /= double(m.rows);
    double spread = 0.0;
    for (int64_t r = 0; r < m.rows; ++r) {
        double dist2 = 0.0;
        for (int64_t c = 0; c < m.cols; ++c) {
            const double dd = double(m.at(r, c)) - centroid[size_t(c)];
            dist2 += dd * dd;
        }
        spread += std::sqrt(dist2);
    }
    return spread / double(m.rows);
}

// Cosine similarity between two rows; either zero vector yields 0.
double row_cosine(const Matrix& a, int64_t ra, const Matrix& b, int64_t rb) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int64_t c = 0; c < a.cols; ++c) {
        const double x = a.at(ra, c);
        const double y = b.at(rb, c);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace

std::vector<double> average_attention(const AttentionMap& map) {
    if (map.per_layer.empty()) {
        throw ValidationError("attention map has no layers to average");
    }
    if (map.text_len < 1 || map.vision_len < 1) {
        throw ValidationError("attention map needs at least one text row and one vision column");
    }
    std::vector<double> scores(size_t(map.vision_len), 0.0);
    for (const Matrix& layer : map.per_layer) {
        if (layer.rows != map.text_len || layer.cols != map.vision_len) {
            throw ValidationError("attention layer slice is " + std::to_string(layer.rows) + "x" +
                                  std::to_string(layer.cols) + ", expected " +
                                  std::to_string(map.text_len) + "x" +
                                  std::to_string(map.vision_len));
        }
        for (int64_t t = 0; t < layer.rows; ++t) {
            for (int64_t j = 0; j < layer.cols; ++j) scores[size_t(j)] += layer.at(t, j);
        }
    }
    const double denom = double(map.per_layer.size()) * double(map.text_len);
    for (double& s : scores) s /= denom;
    return scores;
}

double topk_iou(std::span<const double> a, std::span<const double> b, double percent) {
    if (a.size() != b.size()) {
        throw ValidationError("score vectors differ in length: " + std::to_string(a.size()) +
                              " vs " + std::to_string(b.size()));
    }
    if (a.empty()) throw ValidationError("score vectors are empty");
    if (!(percent > 0.0) || percent > 100.0) {
        throw ValidationError("percent must lie in (0, 100]");
    }
    const int64_t n = int64_t(a.size());
    const int64_t k =
        std::clamp(int64_t(std::ceil(percent / 100.0 * double(n) - 1e-9)), int64_t{1}, n);

    const std::vector<int64_t> ta = top_indices(a, k);
    const std::vector<int64_t> tb = top_indices(b, k);
    std::vector<int64_t> common;
    std::set_intersection(ta.begin(), ta.end(), tb.begin(), tb.end(), std::back_inserter(common));
    const double inter = double(common.size());
    return inter / (2.0 * double(k) - inter);
}

std::string IoUCurve::to_csv() const {
    std::string out = "percent,iou\n";
    char buf[64];
    for (const Point& pt : points) {
        std::snprintf(buf, sizeof(buf), "%.10g,%.10g\n", pt.percent, pt.iou);
        out += buf;
    }
    return out;
}

IoUCurve iou_curve(std::span<const double> a, std::span<const double> b,
                   std::span<const double> percents) {
    IoUCurve curve;
    curve.points.reserve(percents.size());
    for (double p : percents) {
        curve.points.push_back({p, topk_iou(a, b, p)});
    }
    return curve;
}

FeatureStats feature_stats(const Matrix& a, const Matrix& b, uint64_t seed, int64_t pair_cap) {
    if (a.rows < 1 || b.rows < 1) throw ValidationError("feature sets must be non-empty");
    if (a.cols != b.cols) {
        throw ValidationError("feature sets differ in width: " + std::to_string(a.cols) + " vs " +
                              std::to_string(b.cols));
    }
    if (a.cols < 1) throw ValidationError("feature vectors must have at least one dimension");
    if (pair_cap < 1) throw ValidationError("pair_cap must be positive");

    FeatureStats stats;
    std::vector<double> ca, cb;
    stats.spread_a = centroid_and_spread(a, ca);
    stats.spread_b = centroid_and_spread(b, cb);
    double dist2 = 0.0;
    for (size_t c = 0; c < ca.size(); ++c) {
        const double dd = ca[c] - cb[c];
        dist2 += dd * dd;
    }
    stats.centroid_distance = std::sqrt(dist2);

    const int64_t total_pairs = a.rows * b.rows;
    double acc = 0.0;
    if (total_pairs <= pair_cap) {
        for (int64_t i = 0; i < a.rows; ++i) {
            for (int64_t j = 0; j < b.rows; ++j) acc += row_cosine(a, i, b, j);
        }
        stats.mean_pairwise_cosine = acc / double(total_pairs);
    } else {
        const CounterRng rng(derive_stream_key(seed, "feature-pairs"));
        for (int64_t t = 0; t < pair_cap; ++t) {
            const int64_t i = int64_t(rng.at(uint64_t(2 * t)) % uint64_t(a.rows));
            const int64_t j = int64_t(rng.at(uint64_t(2 * t + 1)) % uint64_t(b.rows));
            acc += row_cosine(a, i, b, j);
        }
        stats.mean_pairwise_cosine = acc / double(pair_cap);
    }
    return stats;
}

std::vector<double> load_scores_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open score file '" + path.string() + "'");
    std::vector<double> scores;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const size_t comma = line.rfind(',');
        const std::string field = comma == std::string::npos ? line : line.substr(comma + 1);
        try {
            size_t used = 0;
            const double v = std::stod(field, &used);
            if (used != field.size()) throw std::invalid_argument(field);
            scores.push_back(v);
        } catch (const std::exception&) {
            if (line_no == 1) continue;  // header row
            throw ParseError("line " + std::to_string(line_no) + " of '" + path.string() +
                             "' has no numeric score: '" + field + "'");
        }
    }
    if (scores.empty()) {
        throw ParseError("score file '" + path.string() + "' contains no scores");
    }
    return scores;
}

}  // namespace deltafuse
