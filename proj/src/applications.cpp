#include "clipdecomp/applications.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

#include "clipdecomp/errors.hpp"

namespace clipdecomp {

namespace {

double dot_f64(const float* a, const float* b, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    }
    return acc;
}

void check_text_dir(const DecomposedRepresentation& d, const Tensor& text_dir) {
    if (text_dir.ndim() != 1 || text_dir.shape[0] != d.output_dim) {
        throw ShapeError("text direction " + text_dir.shape_str() + " does not match output dim " +
                         std::to_string(d.output_dim));
    }
    double sq = 0.0;
    for (float v : text_dir.data) sq += static_cast<double>(v) * static_cast<double>(v);
    if (sq == 0.0) throw std::invalid_argument("text direction must be non-zero");
}

}  // namespace

Heatmap token_heatmap(const DecomposedRepresentation& d, const Tensor& text_dir) {
    check_text_dir(d, text_dir);
    Heatmap h;
    h.grid_height = d.grid_height;
    h.grid_width = d.grid_width;
    h.image_id = d.image_id;
    h.grid.resize(h.numel());
    for (std::size_t i = 1; i < d.num_tokens; ++i) {
        const Tensor contrib = token_contribution(d, i);
        h.grid[i - 1] = static_cast<float>(
            dot_f64(contrib.data.data(), text_dir.data.data(), d.output_dim));
    }
    return h;
}

Heatmap joint_heatmap(const DecomposedRepresentation& d, std::size_t layer, std::size_t head,
                      const Tensor& text_dir) {
    check_text_dir(d, text_dir);
    d.check_indices(0, layer, head);
    Heatmap h;
    h.grid_height = d.grid_height;
    h.grid_width = d.grid_width;
    h.image_id = d.image_id;
    h.source_id = "layer" + std::to_string(layer) + ".head" + std::to_string(head);
    h.grid.resize(h.numel());
    for (std::size_t i = 1; i < d.num_tokens; ++i) {
        h.grid[i - 1] = static_cast<float>(
            dot_f64(d.msa_term(i, layer, head), text_dir.data.data(), d.output_dim));
    }
    return h;
}

Heatmap bias_normalize(const Heatmap& h, const std::vector<Heatmap>& class_heatmaps) {
    if (class_heatmaps.empty()) {
        throw std::invalid_argument("bias normalization needs at least one class heatmap");
    }
    for (const Heatmap& c : class_heatmaps) {
        if (c.grid_height != h.grid_height || c.grid_width != h.grid_width) {
            throw ShapeError("class heatmap grid " + std::to_string(c.grid_height) + "x" +
                             std::to_string(c.grid_width) + " does not match " +
                             std::to_string(h.grid_height) + "x" + std::to_string(h.grid_width));
        }
    }
    Heatmap out = h;
    const double inv = 1.0 / static_cast<double>(class_heatmaps.size());
    for (std::size_t i = 0; i < h.numel(); ++i) {
        double mean = 0.0;
        for (const Heatmap& c : class_heatmaps) mean += c.grid[i];
        out.grid[i] = static_cast<float>(h.grid[i] - mean * inv);
    }
    return out;
}

BoolMask binarize(const Heatmap& h, std::optional<double> threshold) {
    double cut;
    if (threshold) {
        cut = *threshold;
    } else {
        double mean = 0.0;
        for (float v : h.grid) mean += v;
        cut = mean / static_cast<double>(h.numel());
    }
    BoolMask mask;
    mask.height = h.grid_height;
    mask.width = h.grid_width;
    mask.data.resize(h.numel());
    for (std::size_t i = 0; i < h.numel(); ++i) {
        mask.data[i] = static_cast<double>(h.grid[i]) >= cut ? 1 : 0;
    }
    return mask;
}

Tensor upsample_nearest(const Tensor& grid, std::size_t factor) {
    if (grid.ndim() != 2) throw ShapeError("upsample expects a 2-D grid, got " + grid.shape_str());
    if (factor == 0) throw std::invalid_argument("upsample factor must be positive");
    const std::size_t h = grid.shape[0], w = grid.shape[1];
    Tensor out({h * factor, w * factor});
    for (std::size_t y = 0; y < h * factor; ++y) {
        for (std::size_t x = 0; x < w * factor; ++x) {
            out.data[y * w * factor + x] = grid.data[(y / factor) * w + (x / factor)];
        }
    }
    return out;
}

Tensor upsample_bilinear(const Tensor& grid, std::size_t factor) {
    if (grid.ndim() != 2) throw ShapeError("upsample expects a 2-D grid, got " + grid.shape_str());
    if (factor == 0) throw std::invalid_argument("upsample factor must be positive");
    const std::size_t h = grid.shape[0], w = grid.shape[1];
    const std::size_t oh = h * factor, ow = w * factor;
    Tensor out({oh, ow});
    const double f = static_cast<double>(factor);
    for (std::size_t y = 0; y < oh; ++y) {
        // Pixel centers map into source coordinates; edges clamp.
        double sy = (static_cast<double>(y) + 0.5) / f - 0.5;
        sy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
        const std::size_t y0 = static_cast<std::size_t>(sy);
        const std::size_t y1 = std::min(y0 + 1, h - 1);
        const double wy = sy - static_cast<double>(y0);
        for (std::size_t x = 0; x < ow; ++x) {
            double sx = (static_cast<double>(x) + 0.5) / f - 0.5;
            sx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
            const std::size_t x0 = static_cast<std::size_t>(sx);
            const std::size_t x1 = std::min(x0 + 1, w - 1);
            const double wx = sx - static_cast<double>(x0);
            const double top = (1.0 - wx) * grid.data[y0 * w + x0] + wx * grid.data[y0 * w + x1];
            const double bot = (1.0 - wx) * grid.data[y1 * w + x0] + wx * grid.data[y1 * w + x1];
            out.data[y * ow + x] = static_cast<float>((1.0 - wy) * top + wy * bot);
        }
    }
    return out;
}

double average_precision(const std::vector<double>& scores,
                         const std::vector<std::uint8_t>& labels) {
    if (scores.size() != labels.size()) {
        throw ShapeError("average precision: " + std::to_string(scores.size()) + " scores vs " +
                         std::to_string(labels.size()) + " labels");
    }
    const std::size_t total_pos = static_cast<std::size_t>(
        std::count_if(labels.begin(), labels.end(), [](std::uint8_t b) { return b != 0; }));
    if (total_pos == 0) return 1.0;

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    double ap = 0.0;
    double prev_recall = 0.0, prev_precision = 1.0;
    std::size_t tp = 0, seen = 0;
    std::size_t i = 0;
    while (i < order.size()) {
        // One PR point per distinct score value.
        const double s = scores[order[i]];
        while (i < order.size() && scores[order[i]] == s) {
            tp += labels[order[i]] != 0 ? 1 : 0;
            ++seen;
            ++i;
        }
        const double recall = static_cast<double>(tp) / static_cast<double>(total_pos);
        const double precision = static_cast<double>(tp) / static_cast<double>(seen);
        ap += (recall - prev_recall) * (precision + prev_precision) * 0.5;
        prev_recall = recall;
        prev_precision = precision;
    }
    return ap;
}

SegmentationMetrics seg_metrics(const Heatmap& scores, const BoolMask& mask, const BoolMask& gt,
                                std::size_t patch_upsample, bool bilinear_scores) {
    if (patch_upsample == 0) throw std::invalid_argument("upsample factor must be positive");
    if (mask.height != scores.grid_height || mask.width != scores.grid_width) {
        throw ShapeError("mask " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                         " does not match heatmap " + std::to_string(scores.grid_height) + "x" +
                         std::to_string(scores.grid_width));
    }
    if (gt.height != mask.height * patch_upsample || gt.width != mask.width * patch_upsample) {
        throw ShapeError("ground truth " + std::to_string(gt.height) + "x" +
                         std::to_string(gt.width) + " does not match upsampled grid " +
                         std::to_string(mask.height * patch_upsample) + "x" +
                         std::to_string(mask.width * patch_upsample));
    }

    SegmentationMetrics m;
    const std::size_t n = gt.numel();
    std::size_t agree = 0;
    std::size_t inter_fg = 0, union_fg = 0, inter_bg = 0, union_bg = 0;
    for (std::size_t y = 0; y < gt.height; ++y) {
        for (std::size_t x = 0; x < gt.width; ++x) {
            const bool p = mask.data[(y / patch_upsample) * mask.width + (x / patch_upsample)] != 0;
            const bool g = gt.data[y * gt.width + x] != 0;
            agree += (p == g) ? 1 : 0;
            inter_fg += (p && g) ? 1 : 0;
            union_fg += (p || g) ? 1 : 0;
            inter_bg += (!p && !g) ? 1 : 0;
            union_bg += (!p || !g) ? 1 : 0;
        }
    }
    m.pixel_accuracy = static_cast<double>(agree) / static_cast<double>(n);
    const double iou_fg =
        union_fg == 0 ? 1.0 : static_cast<double>(inter_fg) / static_cast<double>(union_fg);
    const double iou_bg =
        union_bg == 0 ? 1.0 : static_cast<double>(inter_bg) / static_cast<double>(union_bg);
    m.miou = 0.5 * (iou_fg + iou_bg);

    Tensor grid({scores.grid_height, scores.grid_width});
    std::copy(scores.grid.begin(), scores.grid.end(), grid.data.begin());
    const Tensor up = bilinear_scores ? upsample_bilinear(grid, patch_upsample)
                                      : upsample_nearest(grid, patch_upsample);
    std::vector<double> pixel_scores(up.data.begin(), up.data.end());
    std::vector<std::uint8_t> labels(gt.data.begin(), gt.data.end());
    m.map = average_precision(pixel_scores, labels);
    return m;
}

RetrievalResult retrieve_by_head(const DecomposedRepresentation& query,
                                 const std::vector<DecomposedRepresentation>& gallery,
                                 std::size_t layer, std::size_t head, std::size_t k) {
    if (gallery.empty()) throw std::invalid_argument("retrieval gallery is empty");
    if (k > gallery.size()) {
        throw IndexError("k = " + std::to_string(k) + " exceeds gallery size " +
                         std::to_string(gallery.size()));
    }
    const Tensor q = head_contribution(query, layer, head);

    std::vector<double> scores(gallery.size());
    for (std::size_t g = 0; g < gallery.size(); ++g) {
        const Tensor c = head_contribution(gallery[g], layer, head);
        if (c.shape != q.shape) {
            throw ShapeError("gallery item " + std::to_string(g) + " has output dim " +
                             c.shape_str() + ", query has " + q.shape_str());
        }
        scores[g] = dot_f64(q.data.data(), c.data.data(), q.shape[0]);
    }

    std::vector<std::size_t> order(gallery.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    RetrievalResult out;
    for (std::size_t r = 0; r < k; ++r) {
        out.indices.push_back(order[r]);
        out.ids.push_back(gallery[order[r]].image_id);
        out.scores.push_back(scores[order[r]]);
    }
    return out;
}

WorstGroupResult worst_group_accuracy(const std::vector<std::size_t>& predictions,
                                      const std::vector<std::size_t>& labels,
                                      const std::vector<std::size_t>& groups) {
    if (predictions.size() != labels.size() || predictions.size() != groups.size()) {
        throw ShapeError("predictions, labels, and groups must have equal length");
    }
    if (predictions.empty()) throw std::invalid_argument("no samples to score");

    std::map<std::size_t, GroupStat> stats;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        GroupStat& s = stats[groups[i]];
        s.group = groups[i];
        s.total += 1;
        s.correct += predictions[i] == labels[i] ? 1 : 0;
    }

    WorstGroupResult out;
    out.worst = 1.0;
    for (auto& [gid, s] : stats) {
        s.accuracy = static_cast<double>(s.correct) / static_cast<double>(s.total);
        out.worst = std::min(out.worst, s.accuracy);
        out.per_group.push_back(s);
    }
    return out;
}

}  // namespace clipdecomp
