#pragma once

#include <string>
#include <vector>

#include "clipdecomp/tensor.hpp"

namespace clipdecomp {

struct ViTConfig {
    std::size_t num_layers = 0;    // L
    std::size_t num_heads = 0;     // H
    std::size_t width = 0;         // d
    std::size_t output_dim = 0;    // d'
    std::size_t patch_size = 0;
    std::size_t image_height = 0;
    std::size_t image_width = 0;
    double ln_eps = 1e-5;

    std::size_t grid_height() const { return image_height / patch_size; }
    std::size_t grid_width() const { return image_width / patch_size; }
    std::size_t num_patches() const { return grid_height() * grid_width(); }  // N
    std::size_t num_tokens() const { return num_patches() + 1; }              // N+1
    std::size_t head_dim() const { return width / num_heads; }

    void validate() const;
};

// One transformer block. Linear weights follow the [out x in] convention,
// y = W x + b; the fused QKV matrix stacks the query, key and value blocks
// in that order along the output axis.
struct LayerWeights {
    Tensor ln1_weight, ln1_bias;            // [d]
    Tensor qkv_weight, qkv_bias;            // [3d x d], [3d]
    Tensor attn_out_weight, attn_out_bias;  // [d x d], [d]
    Tensor ln2_weight, ln2_bias;            // [d]
    Tensor mlp_up_weight, mlp_up_bias;      // [4d x d], [4d]
    Tensor mlp_down_weight, mlp_down_bias;  // [d x 4d], [d]
};

struct ViTModel {
    ViTConfig config;
    Tensor patch_weight;  // [d x 3*p*p]
    Tensor patch_bias;    // [d]; zeros when the checkpoint has none
    Tensor cls_token;     // [d]
    Tensor pos_embed;     // [(N+1) x d]
    std::vector<LayerWeights> layers;
    Tensor ln_final_weight, ln_final_bias;  // [d]
    Tensor proj;                            // [d' x d]
};

// Preprocessed pixels, [3 x H x W], already resized and channel-normalized.
struct ImageInput {
    Tensor pixels;
};

// Archive loader; tensor names are listed in NAMES.md. The config sidecar
// lives at "<archive_path>.json".
ViTModel load_model(const std::string& archive_path);
void save_model(const ViTModel& model, const std::string& archive_path);

// Class token + patch projections + positional embeddings, [(N+1) x d].
// Patches are row-major over the grid; each patch flattens channel-major.
Tensor patch_embed(const ViTModel& model, const ImageInput& image);

// Attention probabilities for one layer, [H x (N+1) x (N+1)]; the input is
// the pre-LN residual stream entering the layer. Row [h][0] holds the
// class-token weights.
Tensor attention_weights(const LayerWeights& layer, const Tensor& z_in, const ViTConfig& config);

// Plain uninstrumented forward pass; returns the unnormalized joint-space
// representation [d'].
Tensor reference_forward(const ViTModel& model, const ImageInput& image);

// Building blocks shared with the decomposition pass.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);   // x [T x in] -> [T x out]
Tensor ln_rows(const Tensor& z, const Tensor& gamma, const Tensor& beta, double eps);
Tensor attention_probs(const Tensor& qkv, std::size_t num_heads);           // qkv [T x 3d] -> [H x T x T]
Tensor msa_forward(const LayerWeights& layer, const Tensor& z, const ViTConfig& config);
Tensor mlp_forward(const LayerWeights& layer, const Tensor& z, const ViTConfig& config);

}  // namespace clipdecomp
