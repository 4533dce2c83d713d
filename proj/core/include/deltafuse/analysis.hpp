#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "deltafuse/attention.hpp"
#include "deltafuse/matrix.hpp"

namespace deltafuse {

// One attention score per vision token, tagged with where it came from.
struct TokenScoreVector {
    std::string source;
    std::vector<double> scores;
};

// Collapses a text-over-vision attention map to one score per vision token:
// the mean over layers and text rows of the head-averaged weights.
std::vector<double> average_attention(const AttentionMap& map);

// Overlap of the top-p% highest-scoring indices of two equal-length score
// vectors, as Jaccard similarity |A ∩ B| / |A ∪ B|. The retained count is
// k = max(1, ceil(p/100 * n)); score ties prefer the lower index, so the
// selection is deterministic. p must lie in (0, 100].
double topk_iou(std::span<const double> a, std::span<const double> b, double percent);

struct IoUCurve {
    struct Point {
        double percent = 0.0;
        double iou = 0.0;
    };
    std::vector<Point> points;

    // Two-column CSV: "percent,iou" header plus one row per point.
    std::string to_csv() const;
};

IoUCurve iou_curve(std::span<const double> a, std::span<const double> b,
                   std::span<const double> percents);

// Geometry of two point clouds (rows = vectors) in a shared space.
struct FeatureStats {
    double centroid_distance = 0.0;   // L2 distance between the two means
    double mean_pairwise_cosine = 0.0;  // mean cosine over cross-set pairs
    double spread_a = 0.0;  // mean L2 distance of a's rows from a's centroid
    double spread_b = 0.0;
};

// When the cross-pair count exceeds pair_cap, the cosine mean is estimated
// from pair_cap seeded samples (with replacement) instead of the full grid.
FeatureStats feature_stats(const Matrix& a, const Matrix& b, uint64_t seed,
                           int64_t pair_cap = 10000);

// Reads per-token scores from a CSV file: the score is the last comma-
// separated field of each row; a non-numeric first row is treated as a
// header. Blank lines are skipped.
std::vector<double> load_scores_csv(const std::filesystem::path& path);

}  // namespace deltafuse
