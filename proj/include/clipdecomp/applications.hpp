#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "clipdecomp/decomposition.hpp"
#include "clipdecomp/tensor.hpp"

namespace clipdecomp {

// One score per image patch, row-major over the patch grid; the class token
// never appears in a heatmap.
struct Heatmap {
    std::size_t grid_height = 0;
    std::size_t grid_width = 0;
    std::vector<float> grid;
    std::string image_id;
    std::string source_id;  // text direction or head that produced the scores

    std::size_t numel() const { return grid_height * grid_width; }
};

struct BoolMask {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> data;

    std::size_t numel() const { return height * width; }
};

struct SegmentationMetrics {
    double pixel_accuracy = 0.0;
    double miou = 0.0;
    double map = 0.0;
};

struct RetrievalResult {
    std::vector<std::size_t> indices;  // gallery positions, best first
    std::vector<std::string> ids;
    std::vector<double> scores;
};

struct GroupStat {
    std::size_t group = 0;
    std::size_t correct = 0;
    std::size_t total = 0;
    double accuracy = 0.0;
};

struct WorstGroupResult {
    double worst = 0.0;
    std::vector<GroupStat> per_group;  // ascending group id
};

// grid[i] = <token_contribution(d, i+1), text_dir>; token 0 is excluded.
Heatmap token_heatmap(const DecomposedRepresentation& d, const Tensor& text_dir);

// grid[i] = <msa term (i+1, layer, head), text_dir>.
Heatmap joint_heatmap(const DecomposedRepresentation& d, std::size_t layer, std::size_t head,
                      const Tensor& text_dir);

// Subtracts the elementwise mean of the class heatmaps.
Heatmap bias_normalize(const Heatmap& h, const std::vector<Heatmap>& class_heatmaps);

// Threshold defaults to the per-image mean score; >= keeps the boundary.
BoolMask binarize(const Heatmap& h, std::optional<double> threshold = std::nullopt);

Tensor upsample_nearest(const Tensor& grid, std::size_t factor);
Tensor upsample_bilinear(const Tensor& grid, std::size_t factor);

// Ranked (score, label) average precision: points grouped by equal score,
// trapezoidal rule, starting from (recall 0, precision 1). No positive
// labels means nothing can be missed and scores 1.
double average_precision(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels);

// Ground truth lives at pixel resolution = patch grid x patch_upsample. The
// mask is upsampled nearest-neighbor; continuous scores use nearest by
// default or bilinear when requested (mAP only).
SegmentationMetrics seg_metrics(const Heatmap& scores, const BoolMask& mask, const BoolMask& gt,
                                std::size_t patch_upsample, bool bilinear_scores = false);

// Raw inner product between head contributions, descending; ties keep
// gallery order.
RetrievalResult retrieve_by_head(const DecomposedRepresentation& query,
                                 const std::vector<DecomposedRepresentation>& gallery,
                                 std::size_t layer, std::size_t head, std::size_t k);

WorstGroupResult worst_group_accuracy(const std::vector<std::size_t>& predictions,
                                      const std::vector<std::size_t>& labels,
                                      const std::vector<std::size_t>& groups);

}  // namespace clipdecomp
