#include "clipdecomp/decomposition.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

#include <json.hpp>

#include "clipdecomp/archive.hpp"
#include "clipdecomp/errors.hpp"

namespace clipdecomp {

namespace {

using nlohmann::json;

std::size_t msa_offset(const DecomposedRepresentation& d, std::size_t token, std::size_t layer,
                       std::size_t head) {
    return ((token * d.num_layers + layer) * d.num_heads + head) * d.output_dim;
}

void check_bank_shapes(const DecomposedRepresentation& d, const MeanBank& bank) {
    if (bank.init_term.shape != d.init_term.shape || bank.mlp_terms.shape != d.mlp_terms.shape ||
        bank.msa_terms.shape != d.msa_terms.shape) {
        throw ShapeError("mean bank shapes do not match the decomposition");
    }
}

}  // namespace

const float* DecomposedRepresentation::msa_term(std::size_t token, std::size_t layer,
                                                std::size_t head) const {
    check_indices(token, layer, head);
    return msa_terms.data.data() + msa_offset(*this, token, layer, head);
}

float* DecomposedRepresentation::msa_term(std::size_t token, std::size_t layer, std::size_t head) {
    check_indices(token, layer, head);
    return msa_terms.data.data() + msa_offset(*this, token, layer, head);
}

void DecomposedRepresentation::check_indices(std::size_t token, std::size_t layer,
                                             std::size_t head) const {
    if (token >= num_tokens) {
        throw IndexError("token index " + std::to_string(token) + " out of range [0, " +
                         std::to_string(num_tokens) + ")");
    }
    if (layer >= num_layers) {
        throw IndexError("layer index " + std::to_string(layer) + " out of range [0, " +
                         std::to_string(num_layers) + ")");
    }
    if (head >= num_heads) {
        throw IndexError("head index " + std::to_string(head) + " out of range [0, " +
                         std::to_string(num_heads) + ")");
    }
}

DecomposedRepresentation decompose_image(const ViTModel& model, const ImageInput& image,
                                         std::string image_id) {
    const ViTConfig& c = model.config;
    c.validate();
    const std::size_t T = c.num_tokens();
    const std::size_t L = c.num_layers;
    const std::size_t H = c.num_heads;
    const std::size_t D = c.output_dim;
    const std::size_t d = c.width;
    const std::size_t hd = c.head_dim();

    // Stream evolution goes through the same functions as reference_forward,
    // so both passes see bitwise-identical residual states.
    Tensor z = patch_embed(model, image);
    std::vector<float> z0_cls(z.data.begin(), z.data.begin() + d);

    std::vector<Tensor> alphas;       // per layer [H x T], class-token attention rows
    std::vector<Tensor> values;      // per layer [T x d], value vectors without bias
    std::vector<std::vector<float>> mlp_cls;  // per layer [d]
    alphas.reserve(L);
    values.reserve(L);
    mlp_cls.reserve(L);

    for (std::size_t l = 0; l < L; ++l) {
        const LayerWeights& w = model.layers[l];

        const Tensor ln1 = ln_rows(z, w.ln1_weight, w.ln1_bias, c.ln_eps);
        const Tensor qkv = linear(ln1, w.qkv_weight, w.qkv_bias);
        const Tensor probs = attention_probs(qkv, H);

        Tensor alpha({H, T});
        for (std::size_t h = 0; h < H; ++h) {
            const float* row = probs.data.data() + (h * T) * T;  // class-token row of head h
            std::copy(row, row + T, alpha.data.data() + h * T);
        }
        alphas.push_back(std::move(alpha));

        Tensor value_weight({d, d});
        std::copy(w.qkv_weight.data.begin() + 2 * d * d, w.qkv_weight.data.begin() + 3 * d * d,
                  value_weight.data.begin());
        values.push_back(linear(ln1, value_weight, Tensor{}));

        z = add(z, msa_forward(w, z, c));
        const Tensor mlp_out = mlp_forward(w, z, c);
        mlp_cls.emplace_back(mlp_out.data.begin(), mlp_out.data.begin() + d);
        z = add(z, mlp_out);
    }

    // Final-LN folding: class-token statistics of the final residual state.
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += z.data[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        const double cdev = z.data[j] - mu;
        var += cdev * cdev;
    }
    var /= static_cast<double>(d);
    const double inv_std = 1.0 / std::sqrt(var + c.ln_eps);

    std::vector<double> a(d), b(d);
    for (std::size_t j = 0; j < d; ++j) {
        a[j] = static_cast<double>(model.ln_final_weight.data[j]) * inv_std;
        b[j] = static_cast<double>(model.ln_final_bias.data[j]) - mu * a[j];
    }

    // Effective projection folds the multiplicative factor into P.
    std::vector<double> proj_eff(D * d);
    std::vector<double> ln_const(D, 0.0);
    for (std::size_t o = 0; o < D; ++o) {
        const float* pr = model.proj.data.data() + o * d;
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            proj_eff[o * d + j] = static_cast<double>(pr[j]) * a[j];
            acc += static_cast<double>(pr[j]) * b[j];
        }
        ln_const[o] = acc;
    }

    DecomposedRepresentation out;
    out.num_tokens = T;
    out.num_layers = L;
    out.num_heads = H;
    out.output_dim = D;
    out.grid_height = c.grid_height();
    out.grid_width = c.grid_width();
    out.image_id = std::move(image_id);
    out.ln_mu = mu;
    out.ln_sigma = std::sqrt(var);
    out.init_term = Tensor({D});
    out.mlp_terms = Tensor({L, D});
    out.msa_terms = Tensor({T, L, H, D});

    for (std::size_t o = 0; o < D; ++o) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) acc += proj_eff[o * d + j] * z0_cls[j];
        out.init_term.data[o] = static_cast<float>(acc);
    }
    for (std::size_t l = 0; l < L; ++l) {
        for (std::size_t o = 0; o < D; ++o) {
            double acc = 0.0;
            for (std::size_t j = 0; j < d; ++j) acc += proj_eff[o * d + j] * mlp_cls[l][j];
            out.mlp_terms.data[l * D + o] = static_cast<float>(acc);
        }
    }

    // Additive LN constant, split equally across every msa slot.
    std::vector<double> share(D);
    const double slots = static_cast<double>(T * L * H);
    for (std::size_t o = 0; o < D; ++o) share[o] = ln_const[o] / slots;

    std::vector<double> head_proj(D * d);  // per layer: effective projection times W_out
    std::vector<double> parked(D);
    for (std::size_t l = 0; l < L; ++l) {
        const LayerWeights& w = model.layers[l];

        for (std::size_t o = 0; o < D; ++o) {
            for (std::size_t t = 0; t < d; ++t) {
                double acc = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    acc += proj_eff[o * d + j] * static_cast<double>(w.attn_out_weight.data[j * d + t]);
                }
                head_proj[o * d + t] = acc;
            }
        }

        // Attention constant for this layer: output bias plus the value-bias
        // pass-through (attention rows sum to 1, so it is input-independent).
        for (std::size_t o = 0; o < D; ++o) {
            double acc = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                double cj = static_cast<double>(w.attn_out_bias.data[j]);
                const float* wr = w.attn_out_weight.data.data() + j * d;
                for (std::size_t t = 0; t < d; ++t) {
                    cj += static_cast<double>(wr[t]) * static_cast<double>(w.qkv_bias.data[2 * d + t]);
                }
                acc += proj_eff[o * d + j] * cj;
            }
            parked[o] = acc;
        }

        const Tensor& alpha = alphas[l];
        const Tensor& val = values[l];
        for (std::size_t i = 0; i < T; ++i) {
            for (std::size_t h = 0; h < H; ++h) {
                const double a_ih = static_cast<double>(alpha.data[h * T + i]);
                const float* vi = val.data.data() + i * d + h * hd;
                float* dst = out.msa_term(i, l, h);
                for (std::size_t o = 0; o < D; ++o) {
                    const double* ep = head_proj.data() + o * d + h * hd;
                    double acc = 0.0;
                    for (std::size_t t = 0; t < hd; ++t) {
                        acc += ep[t] * static_cast<double>(vi[t]);
                    }
                    double term = a_ih * acc + share[o];
                    if (i == 0 && h == 0) term += parked[o];
                    dst[o] = static_cast<float>(term);
                }
            }
        }
    }
    return out;
}

Tensor reconstruct(const DecomposedRepresentation& d) {
    const std::size_t D = d.output_dim;
    std::vector<double> acc(D, 0.0);
    for (std::size_t o = 0; o < D; ++o) acc[o] = d.init_term.data[o];
    for (std::size_t l = 0; l < d.num_layers; ++l) {
        for (std::size_t o = 0; o < D; ++o) acc[o] += d.mlp_terms.data[l * D + o];
    }
    const std::size_t slots = d.num_tokens * d.num_layers * d.num_heads;
    for (std::size_t s = 0; s < slots; ++s) {
        const float* term = d.msa_terms.data.data() + s * D;
        for (std::size_t o = 0; o < D; ++o) acc[o] += term[o];
    }
    Tensor out({D});
    for (std::size_t o = 0; o < D; ++o) out.data[o] = static_cast<float>(acc[o]);
    return out;
}

Tensor head_contribution(const DecomposedRepresentation& d, std::size_t layer, std::size_t head) {
    d.check_indices(0, layer, head);
    const std::size_t D = d.output_dim;
    std::vector<double> acc(D, 0.0);
    for (std::size_t i = 0; i < d.num_tokens; ++i) {
        const float* term = d.msa_term(i, layer, head);
        for (std::size_t o = 0; o < D; ++o) acc[o] += term[o];
    }
    Tensor out({D});
    for (std::size_t o = 0; o < D; ++o) out.data[o] = static_cast<float>(acc[o]);
    return out;
}

Tensor token_contribution(const DecomposedRepresentation& d, std::size_t token) {
    d.check_indices(token, 0, 0);
    const std::size_t D = d.output_dim;
    std::vector<double> acc(D, 0.0);
    for (std::size_t l = 0; l < d.num_layers; ++l) {
        for (std::size_t h = 0; h < d.num_heads; ++h) {
            const float* term = d.msa_term(token, l, h);
            for (std::size_t o = 0; o < D; ++o) acc[o] += term[o];
        }
    }
    Tensor out({D});
    for (std::size_t o = 0; o < D; ++o) out.data[o] = static_cast<float>(acc[o]);
    return out;
}

void MeanBankBuilder::add(const DecomposedRepresentation& d) {
    if (count_ == 0) {
        init_shape_ = d.init_term.shape;
        mlp_shape_ = d.mlp_terms.shape;
        msa_shape_ = d.msa_terms.shape;
        init_acc_.assign(d.init_term.numel(), 0.0);
        mlp_acc_.assign(d.mlp_terms.numel(), 0.0);
        msa_acc_.assign(d.msa_terms.numel(), 0.0);
    } else if (d.init_term.shape != init_shape_ || d.mlp_terms.shape != mlp_shape_ ||
               d.msa_terms.shape != msa_shape_) {
        throw ShapeError("decomposition shapes differ within one mean bank");
    }
    for (std::size_t i = 0; i < init_acc_.size(); ++i) init_acc_[i] += d.init_term.data[i];
    for (std::size_t i = 0; i < mlp_acc_.size(); ++i) mlp_acc_[i] += d.mlp_terms.data[i];
    for (std::size_t i = 0; i < msa_acc_.size(); ++i) msa_acc_[i] += d.msa_terms.data[i];
    source_ids_.push_back(d.image_id);
    ++count_;
}

MeanBank MeanBankBuilder::finish() const {
    if (count_ == 0) throw std::invalid_argument("mean bank needs at least one decomposition");
    MeanBank bank;
    bank.source_count = count_;
    bank.source_ids = source_ids_;
    const double inv = 1.0 / static_cast<double>(count_);
    bank.init_term = Tensor(init_shape_);
    bank.mlp_terms = Tensor(mlp_shape_);
    bank.msa_terms = Tensor(msa_shape_);
    for (std::size_t i = 0; i < init_acc_.size(); ++i) {
        bank.init_term.data[i] = static_cast<float>(init_acc_[i] * inv);
    }
    for (std::size_t i = 0; i < mlp_acc_.size(); ++i) {
        bank.mlp_terms.data[i] = static_cast<float>(mlp_acc_[i] * inv);
    }
    for (std::size_t i = 0; i < msa_acc_.size(); ++i) {
        bank.msa_terms.data[i] = static_cast<float>(msa_acc_[i] * inv);
    }
    return bank;
}

MeanBank build_mean_bank(const std::vector<DecomposedRepresentation>& decomps) {
    MeanBankBuilder builder;
    for (const auto& d : decomps) builder.add(d);
    return builder.finish();
}

DecomposedRepresentation apply_ablation_ledger(const DecomposedRepresentation& d,
                                               const AblationSpec& spec, const MeanBank& bank) {
    if (spec.msa_prefix_layers > d.num_layers) {
        throw IndexError("msa prefix " + std::to_string(spec.msa_prefix_layers) + " exceeds " +
                         std::to_string(d.num_layers) + " layers");
    }
    for (const auto& [l, h] : spec.heads) d.check_indices(0, l, h);
    const bool use_mean = spec.mode == AblationMode::mean;
    if (use_mean && !spec.empty()) check_bank_shapes(d, bank);

    DecomposedRepresentation out = d;
    const std::size_t D = d.output_dim;

    auto replace_msa = [&](std::size_t i, std::size_t l, std::size_t h) {
        float* dst = out.msa_term(i, l, h);
        if (use_mean) {
            const float* src = bank.msa_terms.data.data() + msa_offset(d, i, l, h);
            std::copy(src, src + D, dst);
        } else {
            std::fill(dst, dst + D, 0.0f);
        }
    };

    if (spec.all_mlps) {
        if (use_mean) {
            out.mlp_terms.data = bank.mlp_terms.data;
        } else {
            std::fill(out.mlp_terms.data.begin(), out.mlp_terms.data.end(), 0.0f);
        }
    }
    for (std::size_t l = 0; l < spec.msa_prefix_layers; ++l) {
        for (std::size_t i = 0; i < d.num_tokens; ++i) {
            for (std::size_t h = 0; h < d.num_heads; ++h) replace_msa(i, l, h);
        }
    }
    for (const auto& [l, h] : spec.heads) {
        for (std::size_t i = 0; i < d.num_tokens; ++i) replace_msa(i, l, h);
    }
    if (spec.class_token_rows) {
        for (std::size_t l = 0; l < d.num_layers; ++l) {
            for (std::size_t h = 0; h < d.num_heads; ++h) replace_msa(0, l, h);
        }
    }
    return out;
}

Tensor apply_ablation(const DecomposedRepresentation& d, const AblationSpec& spec,
                      const MeanBank& bank) {
    return reconstruct(apply_ablation_ledger(d, spec, bank));
}

void ClassBank::validate() const {
    if (embeddings.ndim() != 2 || embeddings.shape[0] != names.size()) {
        throw ShapeError("class bank: embeddings " + embeddings.shape_str() + " do not match " +
                         std::to_string(names.size()) + " names");
    }
    const std::size_t D = embeddings.shape[1];
    for (std::size_t r = 0; r < names.size(); ++r) {
        double sq = 0.0;
        for (std::size_t o = 0; o < D; ++o) {
            const double v = embeddings.data[r * D + o];
            sq += v * v;
        }
        if (sq == 0.0) {
            throw ShapeError("class bank: zero-norm embedding for class '" + names[r] + "'");
        }
    }
}

std::size_t zero_shot_classify(const Tensor& rep, const ClassBank& bank) {
    bank.validate();
    if (rep.ndim() != 1 || rep.shape[0] != bank.embeddings.shape[1]) {
        throw ShapeError("representation " + rep.shape_str() + " does not match class embeddings " +
                         bank.embeddings.shape_str());
    }
    const std::size_t D = rep.shape[0];
    double rep_sq = 0.0;
    for (std::size_t o = 0; o < D; ++o) {
        rep_sq += static_cast<double>(rep.data[o]) * static_cast<double>(rep.data[o]);
    }
    if (rep_sq == 0.0) throw std::invalid_argument("cannot classify a zero-norm representation");
    const double rep_norm = std::sqrt(rep_sq);

    std::size_t best = 0;
    double best_sim = -std::numeric_limits<double>::infinity();
    for (std::size_t cidx = 0; cidx < bank.names.size(); ++cidx) {
        const float* row = bank.embeddings.data.data() + cidx * D;
        double dot_acc = 0.0, row_sq = 0.0;
        for (std::size_t o = 0; o < D; ++o) {
            dot_acc += static_cast<double>(rep.data[o]) * static_cast<double>(row[o]);
            row_sq += static_cast<double>(row[o]) * static_cast<double>(row[o]);
        }
        const double sim = dot_acc / (rep_norm * std::sqrt(row_sq));
        if (sim > best_sim) {
            best_sim = sim;
            best = cidx;
        }
    }
    return best;
}

void save_decomposition(const DecomposedRepresentation& d, const std::string& path) {
    Archive archive;
    archive["init_term"] = ArchiveEntry::from_tensor(d.init_term);
    archive["mlp_terms"] = ArchiveEntry::from_tensor(d.mlp_terms);
    archive["msa_terms"] = ArchiveEntry::from_tensor(d.msa_terms);
    archive["ln_stats"] = ArchiveEntry::from_f64({2}, {d.ln_mu, d.ln_sigma});
    save_archive(archive, path);

    json manifest = {
        {"model_hash", d.model_hash},
        {"image_id", d.image_id},
        {"grid", {d.grid_height, d.grid_width}},
        {"num_tokens", d.num_tokens},
        {"num_layers", d.num_layers},
        {"num_heads", d.num_heads},
        {"output_dim", d.output_dim},
    };
    std::ofstream f(path + ".json", std::ios::trunc);
    if (!f) throw FormatError(path + ".json: cannot open for writing");
    f << manifest.dump(2) << "\n";
}

DecomposedRepresentation load_decomposition(const std::string& path) {
    const Archive archive = load_archive(path);
    const std::string manifest_path = path + ".json";
    std::ifstream f(manifest_path);
    if (!f) throw FormatError(manifest_path + ": missing decomposition manifest");
    json manifest;
    try {
        manifest = json::parse(f);
    } catch (const json::exception& e) {
        throw FormatError(manifest_path + ": " + e.what());
    }

    DecomposedRepresentation d;
    try {
        d.model_hash = manifest.value("model_hash", "");
        d.image_id = manifest.value("image_id", "");
        d.grid_height = manifest.at("grid").at(0).get<std::size_t>();
        d.grid_width = manifest.at("grid").at(1).get<std::size_t>();
        d.num_tokens = manifest.at("num_tokens").get<std::size_t>();
        d.num_layers = manifest.at("num_layers").get<std::size_t>();
        d.num_heads = manifest.at("num_heads").get<std::size_t>();
        d.output_dim = manifest.at("output_dim").get<std::size_t>();
    } catch (const json::exception& e) {
        throw FormatError(manifest_path + ": " + e.what());
    }

    auto need = [&](const char* name) -> const ArchiveEntry& {
        auto it = archive.find(name);
        if (it == archive.end()) throw FormatError(path + ": missing tensor '" + std::string(name) + "'");
        return it->second;
    };
    d.init_term = need("init_term").to_tensor();
    d.mlp_terms = need("mlp_terms").to_tensor();
    d.msa_terms = need("msa_terms").to_tensor();
    const std::vector<double> stats = need("ln_stats").to_f64();
    if (stats.size() != 2) throw FormatError(path + ": tensor 'ln_stats' must hold 2 values");
    d.ln_mu = stats[0];
    d.ln_sigma = stats[1];

    const std::vector<std::size_t> expect_msa = {d.num_tokens, d.num_layers, d.num_heads, d.output_dim};
    if (d.init_term.shape != std::vector<std::size_t>{d.output_dim} ||
        d.mlp_terms.shape != std::vector<std::size_t>{d.num_layers, d.output_dim} ||
        d.msa_terms.shape != expect_msa) {
        throw ShapeError(path + ": tensor shapes disagree with the manifest");
    }
    if (d.grid_height * d.grid_width + 1 != d.num_tokens) {
        throw ShapeError(path + ": grid does not match num_tokens");
    }
    return d;
}

void save_mean_bank(const MeanBank& bank, const std::string& path) {
    Archive archive;
    archive["init_term"] = ArchiveEntry::from_tensor(bank.init_term);
    archive["mlp_terms"] = ArchiveEntry::from_tensor(bank.mlp_terms);
    archive["msa_terms"] = ArchiveEntry::from_tensor(bank.msa_terms);
    save_archive(archive, path);

    json manifest = {
        {"source_count", bank.source_count},
        {"source_ids", bank.source_ids},
    };
    std::ofstream f(path + ".json", std::ios::trunc);
    if (!f) throw FormatError(path + ".json: cannot open for writing");
    f << manifest.dump(2) << "\n";
}

MeanBank load_mean_bank(const std::string& path) {
    const Archive archive = load_archive(path);
    MeanBank bank;
    auto need = [&](const char* name) -> const ArchiveEntry& {
        auto it = archive.find(name);
        if (it == archive.end()) throw FormatError(path + ": missing tensor '" + std::string(name) + "'");
        return it->second;
    };
    bank.init_term = need("init_term").to_tensor();
    bank.mlp_terms = need("mlp_terms").to_tensor();
    bank.msa_terms = need("msa_terms").to_tensor();

    const std::string manifest_path = path + ".json";
    std::ifstream f(manifest_path);
    if (!f) throw FormatError(manifest_path + ": missing mean bank manifest");
    try {
        const json manifest = json::parse(f);
        bank.source_count = manifest.at("source_count").get<std::size_t>();
        bank.source_ids = manifest.value("source_ids", std::vector<std::string>{});
    } catch (const json::exception& e) {
        throw FormatError(manifest_path + ": " + e.what());
    }
    return bank;
}

}  // namespace clipdecomp
