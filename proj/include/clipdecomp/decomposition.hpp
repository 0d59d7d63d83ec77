#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "clipdecomp/model.hpp"
#include "clipdecomp/tensor.hpp"

namespace clipdecomp {

// Additive ledger for one image: the projected representation equals
// init_term + sum(mlp_terms) + sum(msa_terms) by construction.
// The final layer-norm is folded in: its multiplicative factor scales every
// term, its additive constant is split equally across the msa slots, and each
// layer's attention output bias (plus the value-bias pass-through) is parked
// at that layer's (token 0, head 0) slot so the total stays exact.
struct DecomposedRepresentation {
    std::size_t num_tokens = 0;  // patches + 1 for the class token
    std::size_t num_layers = 0;
    std::size_t num_heads = 0;
    std::size_t output_dim = 0;

    Tensor init_term;  // [output_dim]
    Tensor mlp_terms;  // [num_layers x output_dim]
    Tensor msa_terms;  // [num_tokens x num_layers x num_heads x output_dim]

    // Class-token statistics of the final residual state, recorded from the
    // unablated pass; ablation never recomputes them.
    double ln_mu = 0.0;
    double ln_sigma = 0.0;

    std::size_t grid_height = 0;
    std::size_t grid_width = 0;
    std::string image_id;
    std::string model_hash;

    const float* msa_term(std::size_t token, std::size_t layer, std::size_t head) const;
    float* msa_term(std::size_t token, std::size_t layer, std::size_t head);
    void check_indices(std::size_t token, std::size_t layer, std::size_t head) const;
};

// Per-slot means over a reference image set, used for mean-ablation.
struct MeanBank {
    std::size_t source_count = 0;
    std::vector<std::string> source_ids;
    Tensor init_term;
    Tensor mlp_terms;
    Tensor msa_terms;
};

class MeanBankBuilder {
public:
    void add(const DecomposedRepresentation& d);
    MeanBank finish() const;

private:
    std::size_t count_ = 0;
    std::vector<std::string> source_ids_;
    std::vector<std::size_t> init_shape_, mlp_shape_, msa_shape_;
    std::vector<double> init_acc_, mlp_acc_, msa_acc_;
};

MeanBank build_mean_bank(const std::vector<DecomposedRepresentation>& decomps);

enum class AblationMode { mean, zero };

struct AblationSpec {
    bool all_mlps = false;
    std::size_t msa_prefix_layers = 0;  // ablate msa terms of layers [0, prefix)
    std::vector<std::pair<std::size_t, std::size_t>> heads;  // (layer, head), all tokens
    bool class_token_rows = false;  // token-0 msa terms across every layer and head
    AblationMode mode = AblationMode::mean;

    bool empty() const {
        return !all_mlps && msa_prefix_layers == 0 && heads.empty() && !class_token_rows;
    }
};

struct ClassBank {
    std::vector<std::string> names;
    Tensor embeddings;  // [num_classes x output_dim]
    void validate() const;  // rejects zero-norm rows
};

DecomposedRepresentation decompose_image(const ViTModel& model, const ImageInput& image,
                                         std::string image_id = "");

// Fixed-order 64-bit sum of every ledger term.
Tensor reconstruct(const DecomposedRepresentation& d);

// Sum over tokens for one head.
Tensor head_contribution(const DecomposedRepresentation& d, std::size_t layer, std::size_t head);

// Sum over layers and heads for one token.
Tensor token_contribution(const DecomposedRepresentation& d, std::size_t token);

// Copy of the ledger with every selected term replaced by its bank mean (or
// zero); the untouched terms and ln stats pass through unchanged.
DecomposedRepresentation apply_ablation_ledger(const DecomposedRepresentation& d,
                                               const AblationSpec& spec, const MeanBank& bank);

Tensor apply_ablation(const DecomposedRepresentation& d, const AblationSpec& spec,
                      const MeanBank& bank);

// Argmax of cosine similarity; ties break to the lowest index.
std::size_t zero_shot_classify(const Tensor& rep, const ClassBank& bank);

// Archive plus a "<path>.json" manifest (model hash, image id, grid, shapes).
void save_decomposition(const DecomposedRepresentation& d, const std::string& path);
DecomposedRepresentation load_decomposition(const std::string& path);

void save_mean_bank(const MeanBank& bank, const std::string& path);
MeanBank load_mean_bank(const std::string& path);

}  // namespace clipdecomp
