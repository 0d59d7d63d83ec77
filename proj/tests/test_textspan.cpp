#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

#include "clipdecomp/archive.hpp"
#include "clipdecomp/tensor.hpp"
#include "clipdecomp/textspan.hpp"
#include "toy_models.hpp"

using namespace clipdecomp;
using clipdecomp::testing::TempDir;

namespace {

TextEmbeddingBank make_bank(Tensor embeddings, const std::string& provenance = "general-pool") {
    TextEmbeddingBank bank;
    for (std::size_t i = 0; i < embeddings.shape[0]; ++i) {
        bank.descriptions.push_back("candidate " + std::to_string(i));
    }
    bank.embeddings = std::move(embeddings);
    bank.provenance = provenance;
    return bank;
}

TextEmbeddingBank projected_bank(const TextEmbeddingBank& bank, const Tensor& c) {
    TextEmbeddingBank out = bank;
    out.embeddings = project_rows_to_span(bank.embeddings, c);
    return out;
}

// Dense symmetric solve by Gaussian elimination with partial pivoting; the
// test-side projector math must not reuse the library's basis code.
std::vector<double> solve(std::vector<std::vector<double>> a, std::vector<double> b) {
    const std::size_t n = b.size();
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t pivot = col;
        for (std::size_t r = col + 1; r < n; ++r) {
            if (std::abs(a[r][col]) > std::abs(a[pivot][col])) pivot = r;
        }
        std::swap(a[col], a[pivot]);
        std::swap(b[col], b[pivot]);
        const double diag = a[col][col];
        for (std::size_t r = col + 1; r < n; ++r) {
            const double f = a[r][col] / diag;
            for (std::size_t k = col; k < n; ++k) a[r][k] -= f * a[col][k];
            b[r] -= f * b[col];
        }
    }
    std::vector<double> x(n);
    for (std::size_t ri = n; ri-- > 0;) {
        double acc = b[ri];
        for (std::size_t k = ri + 1; k < n; ++k) acc -= a[ri][k] * x[k];
        x[ri] = acc / a[ri][ri];
    }
    return x;
}

// Orthogonal projection of x onto the row space of `rows` via the normal
// equations: coefficients = (A At)^-1 A x, projection = At coefficients.
std::vector<double> project_explicit(const Tensor& rows, const std::vector<double>& x) {
    const std::size_t k = rows.shape[0], d = rows.shape[1];
    std::vector<std::vector<double>> gram(k, std::vector<double>(k));
    std::vector<double> rhs(k, 0.0);
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            double acc = 0.0;
            for (std::size_t t = 0; t < d; ++t) {
                acc += static_cast<double>(rows.at(i, t)) * rows.at(j, t);
            }
            gram[i][j] = acc;
        }
        for (std::size_t t = 0; t < d; ++t) rhs[i] += static_cast<double>(rows.at(i, t)) * x[t];
    }
    const std::vector<double> coef = solve(gram, rhs);
    std::vector<double> out(d, 0.0);
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t t = 0; t < d; ++t) out[t] += coef[i] * rows.at(i, t);
    }
    return out;
}

}  // namespace

TEST_CASE("projecting a row already inside the span is the identity") {
    const Tensor span({2, 3}, {1, 0, 0, 0, 1, 0});
    const Tensor rows({1, 3}, {0.4f, -2.0f, 0});
    const Tensor out = project_rows_to_span(rows, span);
    CHECK(testing::max_abs_diff(out, rows) <= 1e-6);
}

TEST_CASE("hand projection onto a single axis") {
    const Tensor span({1, 2}, {1, 0});
    const Tensor rows({1, 2}, {3, 4});
    const Tensor out = project_rows_to_span(rows, span);
    CHECK(out.at(0, 0) == doctest::Approx(3.0));
    CHECK(out.at(0, 1) == doctest::Approx(0.0));
}

TEST_CASE("projection is idempotent on random instances") {
    std::mt19937_64 rng(81);
    const Tensor span = testing::random_tensor(rng, {3, 6}, 1.0);
    const Tensor rows = testing::random_tensor(rng, {8, 6}, 1.0);
    const Tensor once = project_rows_to_span(rows, span);
    const Tensor twice = project_rows_to_span(once, span);
    CHECK(testing::max_abs_diff(once, twice) <= 1e-5);
}

TEST_CASE("zero span maps everything to zero") {
    const Tensor span({2, 3});
    const Tensor rows({2, 3}, {1, 2, 3, 4, 5, 6});
    const Tensor out = project_rows_to_span(rows, span);
    for (float v : out.data) CHECK(v == 0.0f);
}

TEST_CASE("greedy selection hand case picks the varying direction") {
    const Tensor c({2, 2}, {1, 0, -1, 0});
    const TextEmbeddingBank bank = make_bank(Tensor({2, 2}, {1, 0, 0, 1}));
    const HeadBasis basis = textspan(c, projected_bank(bank, c), 1);

    REQUIRE(basis.selected.size() == 1);
    CHECK(basis.selected[0] == 0);
    CHECK(basis.descriptions[0] == "candidate 0");
    CHECK(basis.step_variance[0] == doctest::Approx(1.0));
    CHECK_FALSE(basis.truncated);
    CHECK(std::abs(std::abs(basis.components.at(0, 0)) - 1.0f) <= 1e-6);
}

TEST_CASE("first greedy pick equals the brute-force variance argmax") {
    std::mt19937_64 rng(82);
    for (int trial = 0; trial < 25; ++trial) {
        const std::size_t K = 3 + rng() % 48;   // up to 50 rows
        const std::size_t M = 2 + rng() % 199;  // up to 200 candidates
        const std::size_t d = 2 + rng() % 7;
        const Tensor c = testing::random_tensor(rng, {K, d}, 1.0);
        const TextEmbeddingBank bank =
            projected_bank(make_bank(testing::random_tensor(rng, {M, d}, 1.0)), c);

        double best = -1.0;
        std::size_t best_j = 0;
        for (std::size_t j = 0; j < M; ++j) {
            Tensor dots({K});
            for (std::size_t k = 0; k < K; ++k) {
                dots.data[k] = static_cast<float>(dot(row(bank.embeddings, j), row(c, k)));
            }
            const double var = variance(dots);
            if (var > best) {
                best = var;
                best_j = j;
            }
        }
        const HeadBasis basis = textspan(c, bank, 1);
        REQUIRE(basis.selected.size() == 1);
        CHECK(basis.selected[0] == best_j);
    }
}

TEST_CASE("the selected direction carries no variance after deflation") {
    std::mt19937_64 rng(83);
    const Tensor c = testing::random_tensor(rng, {6, 4}, 1.0);
    const TextEmbeddingBank bank =
        projected_bank(make_bank(testing::random_tensor(rng, {10, 4}, 1.0)), c);
    const HeadBasis basis = textspan(c, bank, 2);
    REQUIRE(basis.selected.size() == 2);

    // Mining again against the residual of step 1 must never re-select the
    // first direction: its variance over the deflated rows is zero, which the
    // second selection's own step variance being positive confirms indirectly.
    CHECK(basis.selected[0] != basis.selected[1]);
    for (double v : basis.step_variance) CHECK(v >= 0.0);

    // Components are orthonormal.
    for (std::size_t i = 0; i < 2; ++i) {
        for (std::size_t j = 0; j < 2; ++j) {
            const double g = dot(row(basis.components, i), row(basis.components, j));
            CHECK(std::abs(g - (i == j ? 1.0 : 0.0)) <= 1e-6);
        }
    }
}

TEST_CASE("selections for a smaller basis are a prefix of the larger one") {
    std::mt19937_64 rng(84);
    for (int trial = 0; trial < 10; ++trial) {
        const Tensor c = testing::random_tensor(rng, {8, 5}, 1.0);
        const TextEmbeddingBank bank =
            projected_bank(make_bank(testing::random_tensor(rng, {20, 5}, 1.0)), c);
        const HeadBasis small = textspan(c, bank, 2);
        const HeadBasis large = textspan(c, bank, 4);
        REQUIRE(large.selected.size() == 4);
        for (std::size_t i = 0; i < 2; ++i) CHECK(small.selected[i] == large.selected[i]);

        // Cumulative captured variance never decreases step over step.
        for (double v : large.step_variance) CHECK(v >= -1e-12);
    }
}

TEST_CASE("truncate_basis equals mining with the smaller size") {
    std::mt19937_64 rng(85);
    const Tensor c = testing::random_tensor(rng, {10, 6}, 1.0);
    const TextEmbeddingBank bank =
        projected_bank(make_bank(testing::random_tensor(rng, {30, 6}, 1.0)), c);
    const HeadBasis full = textspan(c, bank, 5);
    const HeadBasis direct = textspan(c, bank, 3);
    const HeadBasis cut = truncate_basis(full, 3);

    CHECK(cut.selected == direct.selected);
    CHECK(cut.descriptions == direct.descriptions);
    REQUIRE(cut.components.shape == direct.components.shape);
    CHECK(testing::max_abs_diff(cut.components, direct.components) <= 1e-7);
    REQUIRE(cut.step_variance.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(cut.step_variance[i] == doctest::Approx(direct.step_variance[i]));
    }
    CHECK_FALSE(cut.truncated);

    // Truncating to the full size or beyond is the identity.
    CHECK(truncate_basis(full, 5).selected == full.selected);
    CHECK(truncate_basis(full, 9).selected == full.selected);
}

TEST_CASE("rank-exhausted pools truncate with the flag, not an error") {
    // Head outputs span one direction, so only one candidate survives.
    const Tensor c({3, 3}, {2, 0, 0, -1, 0, 0, 0.5f, 0, 0});
    const TextEmbeddingBank bank = make_bank(Tensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
    const HeadBasis basis = textspan(c, projected_bank(bank, c), 3);
    CHECK(basis.truncated);
    CHECK(basis.selected.size() == 1);
    CHECK(basis.selected[0] == 0);
}

TEST_CASE("an all-zero candidate pool truncates immediately") {
    const Tensor c({2, 3}, {1, 0, 0, 0, 1, 0});
    const TextEmbeddingBank bank = make_bank(Tensor({2, 3}));
    const HeadBasis basis = textspan(c, bank, 1);
    CHECK(basis.truncated);
    CHECK(basis.selected.empty());
    CHECK(basis.components.shape[0] == 0);
}

TEST_CASE("oversized requests and degenerate row counts are rejected") {
    const Tensor c({2, 2}, {1, 0, 0, 1});
    const TextEmbeddingBank bank = make_bank(Tensor({2, 2}, {1, 0, 0, 1}));
    CHECK_THROWS_AS(textspan(c, bank, 3), std::invalid_argument);
    const Tensor single({1, 2}, {1, 0});
    CHECK_THROWS_AS(textspan(single, bank, 1), ShapeError);
}

TEST_CASE("explained variance reaches the total exactly at full span") {
    std::mt19937_64 rng(86);
    const std::size_t K = 9, d = 4;
    const Tensor c = testing::random_tensor(rng, {K, d}, 1.0);

    // Center the rows, then hand the full centered row space over as basis.
    Tensor centered({K, d});
    std::vector<double> mean(d, 0.0);
    for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t j = 0; j < d; ++j) mean[j] += c.at(k, j);
    }
    for (double& v : mean) v /= static_cast<double>(K);
    double total = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t j = 0; j < d; ++j) {
            centered.at(k, j) = static_cast<float>(c.at(k, j) - mean[j]);
            total += (c.at(k, j) - mean[j]) * (c.at(k, j) - mean[j]);
        }
    }
    total /= static_cast<double>(K);

    HeadBasis basis;
    basis.components = orthonormal_basis(centered, 1e-9);
    basis.selected.resize(basis.components.shape[0]);
    basis.descriptions.resize(basis.components.shape[0]);
    basis.step_variance.resize(basis.components.shape[0], 0.0);

    const double ev = explained_variance(c, basis);
    CHECK(std::abs(ev - total) <= 1e-8 * std::max(1.0, total));
}

TEST_CASE("explained variance of an empty basis is zero") {
    std::mt19937_64 rng(87);
    const Tensor c = testing::random_tensor(rng, {5, 3}, 1.0);
    HeadBasis basis;
    basis.components = Tensor({0, 3});
    CHECK(explained_variance(c, basis) == 0.0);
}

TEST_CASE("explained variance is bounded and matches an explicit projector") {
    std::mt19937_64 rng(88);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t K = 4 + rng() % 10;
        const std::size_t d = 3 + rng() % 5;
        const std::size_t b = 1 + rng() % d;
        const Tensor c = testing::random_tensor(rng, {K, d}, 1.0);

        HeadBasis basis;
        basis.components = testing::random_tensor(rng, {b, d}, 1.0);  // not orthonormal
        basis.selected.resize(b);
        basis.descriptions.resize(b);
        basis.step_variance.resize(b, 0.0);

        std::vector<double> mean(d, 0.0);
        for (std::size_t k = 0; k < K; ++k) {
            for (std::size_t j = 0; j < d; ++j) mean[j] += c.at(k, j);
        }
        for (double& v : mean) v /= static_cast<double>(K);

        double want = 0.0, total = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            std::vector<double> x(d);
            for (std::size_t j = 0; j < d; ++j) x[j] = c.at(k, j) - mean[j];
            const std::vector<double> p = project_explicit(basis.components, x);
            for (std::size_t j = 0; j < d; ++j) {
                want += p[j] * p[j];
                total += x[j] * x[j];
            }
        }
        want /= static_cast<double>(K);
        total /= static_cast<double>(K);

        const double ev = explained_variance(c, basis);
        CHECK(ev <= total + 1e-8);
        CHECK(std::abs(ev - want) <= 1e-6 * std::max(1.0, total));
    }
}

TEST_CASE("contribution projection hand cases") {
    HeadBasis basis;
    basis.components = Tensor({1, 2}, {1, 0});
    basis.selected = {0};
    basis.descriptions = {"x"};
    basis.step_variance = {0.0};

    const Tensor projected = project_contribution(Tensor({2}, {3, 4}), basis);
    CHECK(projected.data[0] == doctest::Approx(3.0));
    CHECK(projected.data[1] == doctest::Approx(0.0));

    const Tensor inside = project_contribution(Tensor({2}, {2.5f, 0}), basis);
    CHECK(inside.data[0] == doctest::Approx(2.5));
    CHECK(inside.data[1] == doctest::Approx(0.0));
}

TEST_CASE("projecting onto an empty basis is an error") {
    HeadBasis basis;
    basis.components = Tensor({0, 2});
    CHECK_THROWS_AS(project_contribution(Tensor({2}, {1, 2}), basis), std::invalid_argument);
}

TEST_CASE("text bank files round trip") {
    std::mt19937_64 rng(89);
    TextEmbeddingBank bank = make_bank(testing::random_tensor(rng, {4, 3}, 1.0), "common-words");
    bank.descriptions = {"a photo", "blue tint", "two dogs", "studio light"};

    TempDir tmp("bank");
    save_text_bank(bank, tmp.file("bank.jsonl"));
    const TextEmbeddingBank back = load_text_bank(tmp.file("bank.jsonl"));
    CHECK(back.descriptions == bank.descriptions);
    CHECK(back.provenance == "common-words");
    CHECK(back.embeddings.data == bank.embeddings.data);
}

TEST_CASE("text bank loader rejects zero-norm rows") {
    std::mt19937_64 rng(90);
    TextEmbeddingBank bank = make_bank(testing::random_tensor(rng, {3, 3}, 1.0));
    TempDir tmp("bank_zero");
    save_text_bank(bank, tmp.file("bank.jsonl"));

    // Overwrite the embedding archive with a zero row in the middle.
    Tensor bad = bank.embeddings;
    for (std::size_t j = 0; j < 3; ++j) bad.at(1, j) = 0.0f;
    Archive a;
    a["embeddings"] = ArchiveEntry::from_tensor(bad);
    save_archive(a, tmp.file("bank.jsonl") + ".nta");
    CHECK_THROWS_AS(load_text_bank(tmp.file("bank.jsonl")), ShapeError);
}

TEST_CASE("unknown provenance tags are rejected") {
    std::mt19937_64 rng(91);
    TextEmbeddingBank bank = make_bank(testing::random_tensor(rng, {2, 3}, 1.0), "mystery-pool");
    CHECK_THROWS_AS(bank.validate(), FormatError);
}

TEST_CASE("head basis files round trip") {
    std::mt19937_64 rng(92);
    const Tensor c = testing::random_tensor(rng, {7, 4}, 1.0);
    TextEmbeddingBank bank =
        projected_bank(make_bank(testing::random_tensor(rng, {12, 4}, 1.0)), c);
    HeadBasis basis = textspan(c, bank, 3);
    basis.layer = 5;
    basis.head = 2;

    TempDir tmp("basis");
    save_head_basis(basis, tmp.file("basis.json"));
    const HeadBasis back = load_head_basis(tmp.file("basis.json"));
    CHECK(back.layer == 5);
    CHECK(back.head == 2);
    CHECK(back.selected == basis.selected);
    CHECK(back.descriptions == basis.descriptions);
    CHECK(back.step_variance == basis.step_variance);
    CHECK(back.total_variance == basis.total_variance);
    CHECK(back.truncated == basis.truncated);
    CHECK(back.provenance == basis.provenance);
    CHECK(back.components.data == basis.components.data);
}
