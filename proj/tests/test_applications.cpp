#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>
#include <vector>

#include "clipdecomp/applications.hpp"
#include "clipdecomp/decomposition.hpp"
#include "clipdecomp/errors.hpp"
#include "clipdecomp/image_io.hpp"
#include "toy_models.hpp"

using namespace clipdecomp;
using namespace clipdecomp::testing;

namespace {

Tensor unit_dir(std::mt19937_64& rng, std::size_t dim) {
    Tensor d = random_tensor(rng, {dim}, 1.0f);
    double sq = 0.0;
    for (float v : d.data) sq += static_cast<double>(v) * v;
    const float inv = static_cast<float>(1.0 / std::sqrt(sq));
    for (float& v : d.data) v *= inv;
    return d;
}

Heatmap make_heatmap(std::size_t h, std::size_t w, std::vector<float> values) {
    Heatmap out;
    out.grid_height = h;
    out.grid_width = w;
    out.grid = std::move(values);
    return out;
}

BoolMask make_mask(std::size_t h, std::size_t w, std::vector<std::uint8_t> values) {
    BoolMask out;
    out.height = h;
    out.width = w;
    out.data = std::move(values);
    return out;
}

}  // namespace

TEST_CASE("token heatmap is linear in the text direction") {
    std::mt19937_64 rng(410);
    for (int trial = 0; trial < 20; ++trial) {
        const DecomposedRepresentation d = random_ledger(rng, 2, 3, 2, 2, 5);
        const Tensor u = unit_dir(rng, 5);
        const Tensor v = unit_dir(rng, 5);
        const float a = 0.75f, b = -1.5f;
        Tensor mix({5});
        for (std::size_t k = 0; k < 5; ++k) mix.data[k] = a * u.data[k] + b * v.data[k];

        const Heatmap hu = token_heatmap(d, u);
        const Heatmap hv = token_heatmap(d, v);
        const Heatmap hm = token_heatmap(d, mix);
        REQUIRE(hm.numel() == 6);
        for (std::size_t i = 0; i < hm.numel(); ++i) {
            CHECK(std::abs(hm.grid[i] - (a * hu.grid[i] + b * hv.grid[i])) <= 1e-4);
        }
    }
}

TEST_CASE("token heatmap matches per-token ledger projections") {
    std::mt19937_64 rng(411);
    const DecomposedRepresentation d = random_ledger(rng, 2, 2, 3, 2, 4);
    const Tensor dir = unit_dir(rng, 4);
    const Heatmap h = token_heatmap(d, dir);
    REQUIRE(h.grid_height == 2);
    REQUIRE(h.grid_width == 2);
    for (std::size_t i = 1; i < d.num_tokens; ++i) {
        const Tensor contrib = token_contribution(d, i);
        double expect = 0.0;
        for (std::size_t k = 0; k < 4; ++k) {
            expect += static_cast<double>(contrib.data[k]) * dir.data[k];
        }
        CHECK(std::abs(static_cast<double>(h.grid[i - 1]) - expect) <= 1e-6);
    }
}

TEST_CASE("joint heatmaps over all heads sum to the token heatmap") {
    std::mt19937_64 rng(412);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t layers = 1 + trial % 3;
        const std::size_t heads = 1 + trial % 2;
        const DecomposedRepresentation d = random_ledger(rng, 2, 2, layers, heads, 3);
        const Tensor dir = unit_dir(rng, 3);

        const Heatmap token = token_heatmap(d, dir);
        std::vector<double> sum(token.numel(), 0.0);
        for (std::size_t l = 0; l < layers; ++l) {
            for (std::size_t h = 0; h < heads; ++h) {
                const Heatmap joint = joint_heatmap(d, l, h, dir);
                CHECK(joint.source_id ==
                      "layer" + std::to_string(l) + ".head" + std::to_string(h));
                for (std::size_t i = 0; i < joint.numel(); ++i) sum[i] += joint.grid[i];
            }
        }
        for (std::size_t i = 0; i < token.numel(); ++i) {
            CHECK(std::abs(sum[i] - token.grid[i]) <= 1e-5);
        }
    }
}

TEST_CASE("single-layer single-head joint heatmap equals the token heatmap") {
    std::mt19937_64 rng(413);
    const DecomposedRepresentation d = random_ledger(rng, 3, 2, 1, 1, 4);
    const Tensor dir = unit_dir(rng, 4);
    const Heatmap token = token_heatmap(d, dir);
    const Heatmap joint = joint_heatmap(d, 0, 0, dir);
    for (std::size_t i = 0; i < token.numel(); ++i) {
        CHECK(std::abs(token.grid[i] - joint.grid[i]) <= 1e-7);
    }
}

TEST_CASE("heatmap rejects mis-shaped or zero text directions") {
    std::mt19937_64 rng(414);
    const DecomposedRepresentation d = random_ledger(rng, 2, 2, 1, 1, 4);
    CHECK_THROWS_AS(token_heatmap(d, Tensor({3})), ShapeError);
    CHECK_THROWS_AS(token_heatmap(d, Tensor({4})), std::invalid_argument);
    CHECK_THROWS_AS(joint_heatmap(d, 1, 0, unit_dir(rng, 4)), IndexError);
}

TEST_CASE("attention focused on one patch lights up exactly that cell") {
    std::mt19937_64 rng(415);
    ToyParams p;
    const std::size_t focus = 3;
    const RiggedAttention rig = make_focused_attention_model(rng, focus, p);
    const DecomposedRepresentation d = decompose_image(rig.model, rig.image);
    const Tensor dir = unit_dir(rng, p.output_dim);
    const Heatmap h = token_heatmap(d, dir);
    REQUIRE(h.numel() == 4);

    // Every non-focus patch receives an identical ledger slice, so their cells agree bitwise.
    float other = h.grid[focus == 1 ? 1 : 0];
    for (std::size_t i = 1; i <= 4; ++i) {
        if (i == focus) continue;
        CHECK(h.grid[i - 1] == other);
    }
    CHECK(std::abs(h.grid[focus - 1] - other) > 1e-6);
}

TEST_CASE("bias normalization subtracts the mean class heatmap") {
    std::mt19937_64 rng(416);
    Heatmap base = make_heatmap(2, 2, {1.0f, -2.0f, 0.5f, 3.0f});

    SUBCASE("subtracting a heatmap from itself zeroes it") {
        const Heatmap out = bias_normalize(base, {base});
        for (float v : out.grid) CHECK(v == 0.0f);
    }
    SUBCASE("all-zero class heatmaps leave the input unchanged") {
        const Heatmap zeros = make_heatmap(2, 2, {0, 0, 0, 0});
        const Heatmap out = bias_normalize(base, {zeros, zeros});
        for (std::size_t i = 0; i < 4; ++i) CHECK(out.grid[i] == base.grid[i]);
    }
    SUBCASE("random banks match a direct mean subtraction") {
        std::vector<Heatmap> bank;
        for (int c = 0; c < 5; ++c) {
            const Tensor t = random_tensor(rng, {4}, 2.0f);
            bank.push_back(make_heatmap(2, 2, {t.data[0], t.data[1], t.data[2], t.data[3]}));
        }
        const Heatmap out = bias_normalize(base, bank);
        for (std::size_t i = 0; i < 4; ++i) {
            double mean = 0.0;
            for (const Heatmap& c : bank) mean += c.grid[i];
            mean /= 5.0;
            CHECK(std::abs(out.grid[i] - (base.grid[i] - mean)) <= 1e-6);
        }
    }
    SUBCASE("grid mismatch and empty banks are rejected") {
        CHECK_THROWS_AS(bias_normalize(base, {}), std::invalid_argument);
        CHECK_THROWS_AS(bias_normalize(base, {make_heatmap(1, 2, {0, 0})}), ShapeError);
    }
}

TEST_CASE("default binarization thresholds at the grid mean") {
    SUBCASE("constant grids binarize to all foreground") {
        const BoolMask m = binarize(make_heatmap(2, 2, {0.7f, 0.7f, 0.7f, 0.7f}), std::nullopt);
        for (auto v : m.data) CHECK(v == 1);
    }
    SUBCASE("a single spike keeps only the spike") {
        const BoolMask m = binarize(make_heatmap(2, 2, {1.0f, 0.0f, 0.0f, 0.0f}), std::nullopt);
        CHECK(m.data == std::vector<std::uint8_t>({1, 0, 0, 0}));
    }
    SUBCASE("a zero-mean grid keeps the non-negative half") {
        const BoolMask m = binarize(make_heatmap(2, 2, {-2.0f, -1.0f, 1.0f, 2.0f}), std::nullopt);
        CHECK(m.data == std::vector<std::uint8_t>({0, 0, 1, 1}));
    }
    SUBCASE("an explicit threshold overrides the mean") {
        const Heatmap h = make_heatmap(2, 2, {1.0f, 0.0f, 0.0f, 0.0f});
        CHECK(binarize(h, 0.5).data == std::vector<std::uint8_t>({1, 0, 0, 0}));
        CHECK(binarize(h, 2.0).data == std::vector<std::uint8_t>({0, 0, 0, 0}));
        CHECK(binarize(h, -1.0).data == std::vector<std::uint8_t>({1, 1, 1, 1}));
    }
}

TEST_CASE("nearest upsampling repeats each cell into a block") {
    Tensor grid({2, 2});
    grid.data = {1, 2, 3, 4};
    const Tensor up = upsample_nearest(grid, 2);
    REQUIRE(up.shape == std::vector<std::size_t>({4, 4}));
    const std::vector<float> expect = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
    CHECK(up.data == expect);
    CHECK_THROWS_AS(upsample_nearest(Tensor({2}), 2), ShapeError);
    CHECK_THROWS_AS(upsample_nearest(grid, 0), std::invalid_argument);
}

TEST_CASE("bilinear upsampling interpolates pixel centers and clamps edges") {
    SUBCASE("constant grids stay constant") {
        Tensor grid({2, 3});
        std::fill(grid.data.begin(), grid.data.end(), 0.25f);
        const Tensor up = upsample_bilinear(grid, 3);
        for (float v : up.data) CHECK(v == doctest::Approx(0.25f));
    }
    SUBCASE("a two-cell ramp produces the textbook quarter offsets") {
        Tensor grid({1, 2});
        grid.data = {0.0f, 1.0f};
        const Tensor up = upsample_bilinear(grid, 2);
        REQUIRE(up.shape == std::vector<std::size_t>({2, 4}));
        const std::vector<float> expect = {0.0f, 0.25f, 0.75f, 1.0f};
        for (std::size_t y = 0; y < 2; ++y) {
            for (std::size_t x = 0; x < 4; ++x) {
                CHECK(up.data[y * 4 + x] == doctest::Approx(expect[x]).epsilon(1e-6));
            }
        }
    }
}

TEST_CASE("average precision follows the trapezoidal precision-recall rule") {
    SUBCASE("a perfect ranking scores 1") {
        CHECK(average_precision({0.9, 0.8, 0.1}, {1, 1, 0}) == doctest::Approx(1.0));
    }
    SUBCASE("no positives scores 1 by convention") {
        CHECK(average_precision({0.9, 0.8}, {0, 0}) == 1.0);
    }
    SUBCASE("an interleaved ranking matches the hand value") {
        // Prefix points (recall, precision): (1/2, 1), (1/2, 1/2), (1, 2/3), (1, 1/2).
        const double ap = average_precision({0.9, 0.8, 0.7, 0.6}, {1, 0, 1, 0});
        CHECK(ap == doctest::Approx(19.0 / 24.0).epsilon(1e-12));
    }
    SUBCASE("tied scores collapse into one precision-recall point") {
        const double ap = average_precision({0.9, 0.9}, {1, 0});
        CHECK(ap == doctest::Approx(0.75).epsilon(1e-12));
    }
    SUBCASE("length mismatch is rejected") {
        CHECK_THROWS_AS(average_precision({0.9}, {1, 0}), ShapeError);
    }
}

TEST_CASE("segmentation metrics reproduce the two-by-two hand case") {
    const Heatmap scores = make_heatmap(2, 2, {10.0f, 0.0f, 0.0f, 0.0f});
    const BoolMask mask = make_mask(2, 2, {1, 0, 0, 0});
    const BoolMask gt = make_mask(2, 2, {1, 1, 0, 0});
    const SegmentationMetrics m = seg_metrics(scores, mask, gt, 1, false);
    CHECK(m.pixel_accuracy == 0.75);
    CHECK(m.miou == doctest::Approx(7.0 / 12.0).epsilon(1e-12));
    CHECK(m.map == doctest::Approx(7.0 / 8.0).epsilon(1e-12));
}

TEST_CASE("a perfect mask scores 1 on every segmentation metric") {
    const Heatmap scores = make_heatmap(2, 2, {10.0f, 0.0f, 0.0f, 0.0f});
    const BoolMask mask = make_mask(2, 2, {1, 0, 0, 0});
    const SegmentationMetrics m = seg_metrics(scores, mask, mask, 1, false);
    CHECK(m.pixel_accuracy == 1.0);
    CHECK(m.miou == 1.0);
    CHECK(m.map == 1.0);
}

TEST_CASE("swapping foreground and background keeps accuracy and mIoU") {
    const Heatmap scores = make_heatmap(2, 2, {3.0f, 2.0f, 1.0f, 0.0f});
    const BoolMask mask = make_mask(2, 2, {1, 0, 0, 0});
    const BoolMask gt = make_mask(2, 2, {1, 1, 0, 0});
    const BoolMask mask_inv = make_mask(2, 2, {0, 1, 1, 1});
    const BoolMask gt_inv = make_mask(2, 2, {0, 0, 1, 1});
    const SegmentationMetrics a = seg_metrics(scores, mask, gt, 1, false);
    const SegmentationMetrics b = seg_metrics(scores, mask_inv, gt_inv, 1, false);
    CHECK(a.pixel_accuracy == b.pixel_accuracy);
    CHECK(a.miou == doctest::Approx(b.miou).epsilon(1e-12));
}

TEST_CASE("patch grids are upsampled to the ground-truth resolution") {
    const Heatmap scores = make_heatmap(2, 2, {5.0f, 1.0f, 1.0f, 1.0f});
    const BoolMask mask = make_mask(2, 2, {1, 0, 0, 0});
    BoolMask gt = make_mask(4, 4, std::vector<std::uint8_t>(16, 0));
    gt.data[0] = gt.data[1] = gt.data[4] = gt.data[5] = 1;
    const SegmentationMetrics m = seg_metrics(scores, mask, gt, 2, false);
    CHECK(m.pixel_accuracy == 1.0);
    CHECK(m.miou == 1.0);
    CHECK(m.map == 1.0);
    CHECK_THROWS_AS(seg_metrics(scores, mask, gt, 1, false), ShapeError);
    CHECK_THROWS_AS(seg_metrics(scores, mask, gt, 0, false), std::invalid_argument);
}

TEST_CASE("empty masks against empty ground truth count as perfect") {
    const Heatmap scores = make_heatmap(1, 2, {0.0f, 0.0f});
    const BoolMask none = make_mask(1, 2, {0, 0});
    const SegmentationMetrics m = seg_metrics(scores, none, none, 1, false);
    CHECK(m.pixel_accuracy == 1.0);
    CHECK(m.miou == 1.0);
    CHECK(m.map == 1.0);
}

TEST_CASE("head retrieval ranks the gallery by head-contribution dot product") {
    std::mt19937_64 rng(417);

    SUBCASE("a gallery containing the query returns it first") {
        const DecomposedRepresentation q = random_ledger(rng, 2, 2, 2, 2, 4, "query");
        std::vector<DecomposedRepresentation> gallery;
        for (int g = 0; g < 4; ++g) {
            gallery.push_back(random_ledger(rng, 2, 2, 2, 2, 4, "g" + std::to_string(g)));
        }
        gallery.push_back(q);
        gallery.back().image_id = "copy";
        // Cauchy-Schwarz does not guarantee the copy wins on raw dot products, so boost it.
        for (float& v : gallery.back().msa_terms.data) v *= 10.0f;
        const RetrievalResult r = retrieve_by_head(q, gallery, 1, 0, 3);
        REQUIRE(r.indices.size() == 3);
        CHECK(r.indices[0] == 4);
        CHECK(r.ids[0] == "copy");
        CHECK(r.scores[0] >= r.scores[1]);
        CHECK(r.scores[1] >= r.scores[2]);
    }

    SUBCASE("scores agree with a naive full-sort oracle") {
        for (int trial = 0; trial < 50; ++trial) {
            const DecomposedRepresentation q = random_ledger(rng, 1, 2, 2, 2, 3);
            std::vector<DecomposedRepresentation> gallery;
            for (int g = 0; g < 6; ++g) gallery.push_back(random_ledger(rng, 1, 2, 2, 2, 3));
            const std::size_t layer = trial % 2, head = (trial / 2) % 2;

            std::vector<std::pair<double, std::size_t>> oracle;
            const Tensor qc = head_contribution(q, layer, head);
            for (std::size_t g = 0; g < gallery.size(); ++g) {
                const Tensor gc = head_contribution(gallery[g], layer, head);
                double s = 0.0;
                for (std::size_t k = 0; k < 3; ++k) {
                    s += static_cast<double>(qc.data[k]) * gc.data[k];
                }
                oracle.emplace_back(s, g);
            }
            std::stable_sort(oracle.begin(), oracle.end(), [](const auto& a, const auto& b) {
                return a.first > b.first;
            });

            const RetrievalResult r = retrieve_by_head(q, gallery, layer, head, gallery.size());
            for (std::size_t k = 0; k < gallery.size(); ++k) {
                CHECK(r.indices[k] == oracle[k].second);
                CHECK(std::abs(r.scores[k] - oracle[k].first) <= 1e-9);
            }
        }
    }

    SUBCASE("ties keep gallery order") {
        const DecomposedRepresentation q = random_ledger(rng, 1, 1, 1, 1, 2, "q");
        DecomposedRepresentation a = random_ledger(rng, 1, 1, 1, 1, 2, "a");
        std::fill(a.msa_terms.data.begin(), a.msa_terms.data.end(), 0.0f);
        DecomposedRepresentation b = a;
        b.image_id = "b";
        const RetrievalResult r = retrieve_by_head(q, {a, b}, 0, 0, 2);
        CHECK(r.indices == std::vector<std::size_t>({0, 1}));
        CHECK(r.ids == std::vector<std::string>({"a", "b"}));
    }

    SUBCASE("bounds and empty galleries are rejected") {
        const DecomposedRepresentation q = random_ledger(rng, 1, 1, 1, 1, 2);
        const std::vector<DecomposedRepresentation> gallery = {random_ledger(rng, 1, 1, 1, 1, 2)};
        CHECK_THROWS_AS(retrieve_by_head(q, {}, 0, 0, 0), std::invalid_argument);
        CHECK_THROWS_AS(retrieve_by_head(q, gallery, 0, 0, 2), IndexError);
        CHECK_THROWS_AS(retrieve_by_head(q, gallery, 0, 1, 1), IndexError);
        CHECK_THROWS_AS(retrieve_by_head(q, gallery, 1, 0, 1), IndexError);
    }
}

TEST_CASE("worst-group accuracy reports the weakest group") {
    SUBCASE("all-correct predictions score 1 in every group") {
        const WorstGroupResult r = worst_group_accuracy({1, 2, 3}, {1, 2, 3}, {0, 1, 1});
        CHECK(r.worst == 1.0);
        REQUIRE(r.per_group.size() == 2);
        CHECK(r.per_group[0].accuracy == 1.0);
        CHECK(r.per_group[1].accuracy == 1.0);
    }
    SUBCASE("the minimum over groups is returned") {
        const WorstGroupResult r = worst_group_accuracy({1, 2, 3, 4}, {1, 2, 3, 0}, {0, 0, 1, 1});
        CHECK(r.worst == 0.5);
        REQUIRE(r.per_group.size() == 2);
        CHECK(r.per_group[0].group == 0);
        CHECK(r.per_group[0].accuracy == 1.0);
        CHECK(r.per_group[1].group == 1);
        CHECK(r.per_group[1].correct == 1);
        CHECK(r.per_group[1].total == 2);
    }
    SUBCASE("length mismatches and empty inputs are rejected") {
        CHECK_THROWS_AS(worst_group_accuracy({1}, {1, 2}, {0, 0}), ShapeError);
        CHECK_THROWS_AS(worst_group_accuracy({}, {}, {}), std::invalid_argument);
    }
}

TEST_CASE("pgm output is min-max scaled with a mid-gray constant fallback") {
    TempDir tmp;
    const std::string path = tmp.file("map.pgm");

    Tensor grid({1, 3});
    grid.data = {0.0f, 0.5f, 1.0f};
    write_pgm(path, grid);
    std::ifstream f(path, std::ios::binary);
    std::string contents((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    CHECK(contents == std::string("P5\n3 1\n255\n") + '\0' + '\x80' + '\xff');

    Tensor flat({1, 2});
    flat.data = {4.0f, 4.0f};
    write_pgm(path, flat);
    std::ifstream g(path, std::ios::binary);
    std::string flat_contents((std::istreambuf_iterator<char>(g)), std::istreambuf_iterator<char>());
    CHECK(flat_contents == std::string("P5\n2 1\n255\n") + '\x80' + '\x80');
}
