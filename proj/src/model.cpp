#include "clipdecomp/model.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "clipdecomp/archive.hpp"
#include "clipdecomp/errors.hpp"

namespace clipdecomp {

namespace {

using nlohmann::json;

const ArchiveEntry& require_entry(const Archive& archive, const std::string& name, const std::string& origin) {
    auto it = archive.find(name);
    if (it == archive.end()) {
        throw FormatError(origin + ": missing tensor '" + name + "'");
    }
    return it->second;
}

Tensor require_tensor(const Archive& archive, const std::string& name, const std::string& origin,
                      const std::vector<std::size_t>& expected_shape) {
    Tensor t = require_entry(archive, name, origin).to_tensor();
    if (t.shape != expected_shape) {
        throw ShapeError(origin + ": tensor '" + name + "' has shape " + t.shape_str() + ", expected " +
                         shape_str(expected_shape));
    }
    return t;
}

}  // namespace

void ViTConfig::validate() const {
    if (num_layers < 1) throw ShapeError("config: num_layers must be >= 1");
    if (num_heads < 1) throw ShapeError("config: num_heads must be >= 1");
    if (width == 0 || width % num_heads != 0) {
        throw ShapeError("config: width " + std::to_string(width) + " not divisible by num_heads " +
                         std::to_string(num_heads));
    }
    if (output_dim == 0) throw ShapeError("config: output_dim must be >= 1");
    if (patch_size == 0 || image_height % patch_size != 0 || image_width % patch_size != 0) {
        throw ShapeError("config: image size " + std::to_string(image_height) + "x" +
                         std::to_string(image_width) + " not divisible by patch size " +
                         std::to_string(patch_size));
    }
    if (num_patches() < 1) throw ShapeError("config: need at least one image patch");
    if (ln_eps <= 0.0) throw ShapeError("config: ln_eps must be positive");
}

ViTModel load_model(const std::string& archive_path) {
    const Archive archive = load_archive(archive_path);

    const std::string sidecar_path = archive_path + ".json";
    std::ifstream sidecar(sidecar_path);
    if (!sidecar) throw FormatError(sidecar_path + ": missing model config sidecar");
    json cfg;
    try {
        cfg = json::parse(sidecar);
    } catch (const json::exception& e) {
        throw FormatError(sidecar_path + ": " + e.what());
    }

    ViTModel model;
    ViTConfig& c = model.config;
    try {
        c.num_heads = cfg.at("num_heads").get<std::size_t>();
        c.patch_size = cfg.at("patch_size").get<std::size_t>();
        c.image_height = cfg.at("image_size").at(0).get<std::size_t>();
        c.image_width = cfg.at("image_size").at(1).get<std::size_t>();
        c.ln_eps = cfg.value("ln_eps", 1e-5);
    } catch (const json::exception& e) {
        throw FormatError(sidecar_path + ": " + e.what());
    }

    // Remaining dimensions come from the tensor shapes themselves.
    const ArchiveEntry& cls = require_entry(archive, "cls_token", archive_path);
    if (cls.dims.size() != 1) throw ShapeError(archive_path + ": tensor 'cls_token' must be 1-D");
    c.width = static_cast<std::size_t>(cls.dims[0]);

    const ArchiveEntry& proj = require_entry(archive, "proj", archive_path);
    if (proj.dims.size() != 2 || static_cast<std::size_t>(proj.dims[1]) != c.width) {
        throw ShapeError(archive_path + ": tensor 'proj' must be [output_dim x " + std::to_string(c.width) + "]");
    }
    c.output_dim = static_cast<std::size_t>(proj.dims[0]);

    std::size_t num_layers = 0;
    while (archive.count("layers." + std::to_string(num_layers) + ".ln1.weight")) ++num_layers;
    c.num_layers = num_layers;
    c.validate();

    const std::size_t d = c.width;
    const std::size_t tokens = c.num_tokens();
    const std::size_t patch_cols = 3 * c.patch_size * c.patch_size;

    model.cls_token = cls.to_tensor();
    model.proj = proj.to_tensor();
    model.patch_weight = require_tensor(archive, "patch_embed.weight", archive_path, {d, patch_cols});
    if (archive.count("patch_embed.bias")) {
        model.patch_bias = require_tensor(archive, "patch_embed.bias", archive_path, {d});
    } else {
        model.patch_bias = Tensor({d});
    }
    model.pos_embed = require_tensor(archive, "pos_embed", archive_path, {tokens, d});
    model.ln_final_weight = require_tensor(archive, "ln_final.weight", archive_path, {d});
    model.ln_final_bias = require_tensor(archive, "ln_final.bias", archive_path, {d});

    model.layers.resize(c.num_layers);
    for (std::size_t l = 0; l < c.num_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        LayerWeights& w = model.layers[l];
        w.ln1_weight = require_tensor(archive, p + "ln1.weight", archive_path, {d});
        w.ln1_bias = require_tensor(archive, p + "ln1.bias", archive_path, {d});
        w.qkv_weight = require_tensor(archive, p + "qkv.weight", archive_path, {3 * d, d});
        w.qkv_bias = require_tensor(archive, p + "qkv.bias", archive_path, {3 * d});
        w.attn_out_weight = require_tensor(archive, p + "attn_out.weight", archive_path, {d, d});
        w.attn_out_bias = require_tensor(archive, p + "attn_out.bias", archive_path, {d});
        w.ln2_weight = require_tensor(archive, p + "ln2.weight", archive_path, {d});
        w.ln2_bias = require_tensor(archive, p + "ln2.bias", archive_path, {d});
        w.mlp_up_weight = require_tensor(archive, p + "mlp_up.weight", archive_path, {4 * d, d});
        w.mlp_up_bias = require_tensor(archive, p + "mlp_up.bias", archive_path, {4 * d});
        w.mlp_down_weight = require_tensor(archive, p + "mlp_down.weight", archive_path, {d, 4 * d});
        w.mlp_down_bias = require_tensor(archive, p + "mlp_down.bias", archive_path, {d});
    }
    return model;
}

void save_model(const ViTModel& model, const std::string& archive_path) {
    Archive archive;
    archive["cls_token"] = ArchiveEntry::from_tensor(model.cls_token);
    archive["proj"] = ArchiveEntry::from_tensor(model.proj);
    archive["patch_embed.weight"] = ArchiveEntry::from_tensor(model.patch_weight);
    archive["patch_embed.bias"] = ArchiveEntry::from_tensor(model.patch_bias);
    archive["pos_embed"] = ArchiveEntry::from_tensor(model.pos_embed);
    archive["ln_final.weight"] = ArchiveEntry::from_tensor(model.ln_final_weight);
    archive["ln_final.bias"] = ArchiveEntry::from_tensor(model.ln_final_bias);
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        const LayerWeights& w = model.layers[l];
        archive[p + "ln1.weight"] = ArchiveEntry::from_tensor(w.ln1_weight);
        archive[p + "ln1.bias"] = ArchiveEntry::from_tensor(w.ln1_bias);
        archive[p + "qkv.weight"] = ArchiveEntry::from_tensor(w.qkv_weight);
        archive[p + "qkv.bias"] = ArchiveEntry::from_tensor(w.qkv_bias);
        archive[p + "attn_out.weight"] = ArchiveEntry::from_tensor(w.attn_out_weight);
        archive[p + "attn_out.bias"] = ArchiveEntry::from_tensor(w.attn_out_bias);
        archive[p + "ln2.weight"] = ArchiveEntry::from_tensor(w.ln2_weight);
        archive[p + "ln2.bias"] = ArchiveEntry::from_tensor(w.ln2_bias);
        archive[p + "mlp_up.weight"] = ArchiveEntry::from_tensor(w.mlp_up_weight);
        archive[p + "mlp_up.bias"] = ArchiveEntry::from_tensor(w.mlp_up_bias);
        archive[p + "mlp_down.weight"] = ArchiveEntry::from_tensor(w.mlp_down_weight);
        archive[p + "mlp_down.bias"] = ArchiveEntry::from_tensor(w.mlp_down_bias);
    }
    save_archive(archive, archive_path);

    json cfg = {
        {"num_heads", model.config.num_heads},
        {"patch_size", model.config.patch_size},
        {"image_size", {model.config.image_height, model.config.image_width}},
        {"ln_eps", model.config.ln_eps},
    };
    std::ofstream sidecar(archive_path + ".json", std::ios::trunc);
    if (!sidecar) throw FormatError(archive_path + ".json: cannot open for writing");
    sidecar << cfg.dump(2) << "\n";
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (x.ndim() != 2 || weight.ndim() != 2 || x.shape[1] != weight.shape[1]) {
        throw ShapeError("linear: input " + x.shape_str() + " incompatible with weight " + weight.shape_str());
    }
    const std::size_t rows = x.shape[0], in = x.shape[1], out_dim = weight.shape[0];
    const bool has_bias = bias.numel() != 0;
    if (has_bias && bias.numel() != out_dim) {
        throw ShapeError("linear: bias " + bias.shape_str() + " incompatible with weight " + weight.shape_str());
    }
    Tensor out({rows, out_dim});
    for (std::size_t r = 0; r < rows; ++r) {
        const float* xr = x.data.data() + r * in;
        for (std::size_t o = 0; o < out_dim; ++o) {
            const float* wr = weight.data.data() + o * in;
            double acc = has_bias ? static_cast<double>(bias.data[o]) : 0.0;
            for (std::size_t t = 0; t < in; ++t) {
                acc += static_cast<double>(xr[t]) * static_cast<double>(wr[t]);
            }
            out.data[r * out_dim + o] = static_cast<float>(acc);
        }
    }
    return out;
}

Tensor ln_rows(const Tensor& z, const Tensor& gamma, const Tensor& beta, double eps) {
    if (z.ndim() != 2 || gamma.numel() != z.shape[1] || beta.numel() != z.shape[1]) {
        throw ShapeError("ln_rows: input " + z.shape_str() + " incompatible with parameters " +
                         gamma.shape_str() + ", " + beta.shape_str());
    }
    const std::size_t rows = z.shape[0], d = z.shape[1];
    Tensor out(z.shape);
    for (std::size_t r = 0; r < rows; ++r) {
        const float* x = z.data.data() + r * d;
        double mean = 0.0;
        for (std::size_t i = 0; i < d; ++i) mean += x[i];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double c = x[i] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::size_t i = 0; i < d; ++i) {
            out.data[r * d + i] =
                static_cast<float>((x[i] - mean) * inv * gamma.data[i] + beta.data[i]);
        }
    }
    return out;
}

Tensor attention_probs(const Tensor& qkv, std::size_t num_heads) {
    if (qkv.ndim() != 2 || qkv.shape[1] % 3 != 0) {
        throw ShapeError("attention_probs: qkv must be [T x 3d], got " + qkv.shape_str());
    }
    const std::size_t tokens = qkv.shape[0];
    const std::size_t d = qkv.shape[1] / 3;
    if (num_heads == 0 || d % num_heads != 0) {
        throw ShapeError("attention_probs: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(num_heads) + " heads");
    }
    const std::size_t hd = d / num_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

    Tensor probs({num_heads, tokens, tokens});
    std::vector<double> logits(tokens);
    for (std::size_t h = 0; h < num_heads; ++h) {
        const std::size_t q_off = h * hd;
        const std::size_t k_off = d + h * hd;
        for (std::size_t s = 0; s < tokens; ++s) {
            const float* qs = qkv.data.data() + s * 3 * d + q_off;
            double maxv = -std::numeric_limits<double>::infinity();
            for (std::size_t t = 0; t < tokens; ++t) {
                const float* kt = qkv.data.data() + t * 3 * d + k_off;
                double acc = 0.0;
                for (std::size_t i = 0; i < hd; ++i) {
                    acc += static_cast<double>(qs[i]) * static_cast<double>(kt[i]);
                }
                logits[t] = acc * inv_sqrt;
                maxv = std::max(maxv, logits[t]);
            }
            double sum = 0.0;
            for (std::size_t t = 0; t < tokens; ++t) {
                logits[t] = std::exp(logits[t] - maxv);
                sum += logits[t];
            }
            float* dst = probs.data.data() + (h * tokens + s) * tokens;
            for (std::size_t t = 0; t < tokens; ++t) {
                dst[t] = static_cast<float>(logits[t] / sum);
            }
        }
    }
    return probs;
}

Tensor attention_weights(const LayerWeights& layer, const Tensor& z_in, const ViTConfig& config) {
    const Tensor ln = ln_rows(z_in, layer.ln1_weight, layer.ln1_bias, config.ln_eps);
    const Tensor qkv = linear(ln, layer.qkv_weight, layer.qkv_bias);
    return attention_probs(qkv, config.num_heads);
}

Tensor msa_forward(const LayerWeights& layer, const Tensor& z, const ViTConfig& config) {
    const std::size_t tokens = z.shape[0];
    const std::size_t d = config.width;
    const std::size_t heads = config.num_heads;
    const std::size_t hd = config.head_dim();

    const Tensor ln = ln_rows(z, layer.ln1_weight, layer.ln1_bias, config.ln_eps);
    const Tensor qkv = linear(ln, layer.qkv_weight, layer.qkv_bias);
    const Tensor probs = attention_probs(qkv, heads);

    // Per-head value mixing; head h writes its slice of the concatenated output.
    Tensor mixed({tokens, d});
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t v_off = 2 * d + h * hd;
        for (std::size_t s = 0; s < tokens; ++s) {
            const float* p = probs.data.data() + (h * tokens + s) * tokens;
            for (std::size_t i = 0; i < hd; ++i) {
                double acc = 0.0;
                for (std::size_t t = 0; t < tokens; ++t) {
                    acc += static_cast<double>(p[t]) * static_cast<double>(qkv.data[t * 3 * d + v_off + i]);
                }
                mixed.data[s * d + h * hd + i] = static_cast<float>(acc);
            }
        }
    }
    return linear(mixed, layer.attn_out_weight, layer.attn_out_bias);
}

Tensor mlp_forward(const LayerWeights& layer, const Tensor& z, const ViTConfig& config) {
    const Tensor ln = ln_rows(z, layer.ln2_weight, layer.ln2_bias, config.ln_eps);
    const Tensor up = gelu(linear(ln, layer.mlp_up_weight, layer.mlp_up_bias));
    return linear(up, layer.mlp_down_weight, layer.mlp_down_bias);
}

Tensor patch_embed(const ViTModel& model, const ImageInput& image) {
    const ViTConfig& c = model.config;
    const std::vector<std::size_t> expected = {3, c.image_height, c.image_width};
    if (image.pixels.shape != expected) {
        throw ShapeError("image has shape " + image.pixels.shape_str() + ", model expects " +
                         shape_str(expected));
    }
    const std::size_t p = c.patch_size;
    const std::size_t gw = c.grid_width(), gh = c.grid_height();
    const std::size_t d = c.width;
    const std::size_t flat_len = 3 * p * p;

    Tensor out({c.num_tokens(), d});
    for (std::size_t i = 0; i < d; ++i) {
        out.data[i] = static_cast<float>(static_cast<double>(model.cls_token.data[i]) +
                                         static_cast<double>(model.pos_embed.data[i]));
    }

    std::vector<float> flat(flat_len);
    for (std::size_t gr = 0; gr < gh; ++gr) {
        for (std::size_t gc = 0; gc < gw; ++gc) {
            for (std::size_t ch = 0; ch < 3; ++ch) {
                for (std::size_t y = 0; y < p; ++y) {
                    for (std::size_t x = 0; x < p; ++x) {
                        flat[ch * p * p + y * p + x] =
                            image.pixels.data[(ch * c.image_height + gr * p + y) * c.image_width + gc * p + x];
                    }
                }
            }
            const std::size_t token = 1 + gr * gw + gc;
            for (std::size_t o = 0; o < d; ++o) {
                const float* wr = model.patch_weight.data.data() + o * flat_len;
                double acc = static_cast<double>(model.patch_bias.data[o]) +
                             static_cast<double>(model.pos_embed.data[token * d + o]);
                for (std::size_t t = 0; t < flat_len; ++t) {
                    acc += static_cast<double>(wr[t]) * static_cast<double>(flat[t]);
                }
                out.data[token * d + o] = static_cast<float>(acc);
            }
        }
    }
    return out;
}

Tensor reference_forward(const ViTModel& model, const ImageInput& image) {
    const ViTConfig& c = model.config;
    Tensor z = patch_embed(model, image);
    for (const LayerWeights& layer : model.layers) {
        z = add(z, msa_forward(layer, z, c));
        z = add(z, mlp_forward(layer, z, c));
    }
    Tensor cls({1, c.width});
    std::copy(z.data.begin(), z.data.begin() + c.width, cls.data.begin());
    const Tensor ln = ln_rows(cls, model.ln_final_weight, model.ln_final_bias, c.ln_eps);
    const Tensor rep = linear(ln, model.proj, Tensor{});
    Tensor out({c.output_dim});
    std::copy(rep.data.begin(), rep.data.end(), out.data.begin());
    return out;
}

}  // namespace clipdecomp
