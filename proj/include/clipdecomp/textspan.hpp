#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "clipdecomp/tensor.hpp"

namespace clipdecomp {

// Candidate text directions in the joint space, with their descriptions.
// Provenance labels which pool the bank came from; downstream outputs carry
// it so pool-ablation runs stay distinguishable.
struct TextEmbeddingBank {
    std::vector<std::string> descriptions;
    Tensor embeddings;  // [M x output_dim]
    std::string provenance;
    void validate() const;
};

inline constexpr const char* kBankProvenanceTags[] = {"general-pool", "common-words",
                                                      "class-specific", "random-vectors"};

// Greedy basis mined for one head: selected candidate indices in selection
// order, the orthonormalized directions, and the variance bookkeeping.
struct HeadBasis {
    std::size_t layer = 0;
    std::size_t head = 0;
    std::vector<std::size_t> selected;
    std::vector<std::string> descriptions;
    Tensor components;  // [m x output_dim], orthonormal rows
    std::vector<double> step_variance;
    double total_variance = 0.0;
    bool truncated = false;  // candidate pool ran out of rank before m steps
    std::string provenance;
};

// Replaces each row of `rows` with its orthogonal projection onto the row
// space of `span_rows`. A zero span maps everything to zero.
Tensor project_rows_to_span(const Tensor& rows, const Tensor& span_rows, double tol = 1e-6);

// Greedy selection: at each step rank candidates by the variance of their
// dot products with the head outputs, take the best, then deflate both the
// head outputs and the remaining candidates along the chosen direction.
// Candidates whose residual drops below 1e-8 of the initial largest norm are
// retired. Expects bank rows already projected onto the span of c.
HeadBasis textspan(const Tensor& c, const TextEmbeddingBank& bank, std::size_t m);

// Mean squared norm of the mean-centered rows of c after projection onto the
// basis span. Components are re-orthonormalized internally, so any basis
// (orthonormal or not) yields a value bounded by the total variance.
double explained_variance(const Tensor& c, const HeadBasis& basis);

Tensor project_contribution(const Tensor& c_head, const HeadBasis& basis);

// Prefix of a mined basis: identical to mining with the smaller m, since the
// greedy selections for m' < m are a prefix of those for m.
HeadBasis truncate_basis(const HeadBasis& basis, std::size_t m);

// JSON-lines descriptions ("index", "description", "provenance") with the
// embedding matrix in "<path>.nta".
TextEmbeddingBank load_text_bank(const std::string& jsonl_path);
void save_text_bank(const TextEmbeddingBank& bank, const std::string& jsonl_path);

// Basis JSON (selections, variances, flags) with components in "<path>.nta".
void save_head_basis(const HeadBasis& basis, const std::string& json_path);
HeadBasis load_head_basis(const std::string& json_path);

}  // namespace clipdecomp
