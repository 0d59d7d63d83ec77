#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "clipdecomp/applications.hpp"
#include "clipdecomp/archive.hpp"
#include "clipdecomp/decomposition.hpp"
#include "clipdecomp/errors.hpp"
#include "clipdecomp/image_io.hpp"
#include "clipdecomp/model.hpp"
#include "clipdecomp/support.hpp"
#include "clipdecomp/tensor.hpp"
#include "clipdecomp/textspan.hpp"

using nlohmann::json;
using namespace clipdecomp;

namespace {

// ---------------------------------------------------------------------------
// Run plumbing: config file, manifest, shared loaders.

struct CommonOpts {
    std::size_t threads = 1;
    std::uint64_t seed = 0;
};

// The config file supplies defaults; explicit flags win. Keys mirror long
// flag names. Unknown keys are ignored so one config can serve several
// subcommands.
json read_config_from_argv(int argc, char** argv) {
    std::string path;
    for (int i = 1; i < argc; ++i) {
        const std::string arg = argv[i];
        if (arg == "--config" && i + 1 < argc) {
            path = argv[i + 1];
        } else if (arg.rfind("--config=", 0) == 0) {
            path = arg.substr(9);
        }
    }
    if (path.empty()) return json::object();
    std::ifstream f(path);
    if (!f) throw FormatError(path + ": cannot open config");
    try {
        return json::parse(f);
    } catch (const json::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
}

template <typename T>
void cfg_default(const json& config, const char* key, T& var) {
    if (!config.contains(key)) return;
    try {
        var = config.at(key).get<T>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("config key '") + key + "': " + e.what());
    }
}

// Every run ends by writing "<out>.manifest.json" as the commit marker. The
// thread count is deliberately absent: outputs must not depend on it.
class RunManifest {
public:
    RunManifest(std::string command, std::uint64_t seed) : command_(std::move(command)), seed_(seed) {}

    void set(const std::string& key, const json& value) { settings_[key] = value; }
    void add_input(const std::string& path) { inputs_[path] = hex64(fnv1a64_file(path)); }
    void add_output(const std::string& path) { outputs_.push_back(path); }

    void write(const std::string& primary_out) {
        const json doc = {
            {"command", command_},
            {"version", kVersion},
            {"seed", seed_},
            {"settings", settings_},
            {"inputs", inputs_},
            {"outputs", outputs_},
        };
        const std::string path = primary_out + ".manifest.json";
        std::ofstream f(path, std::ios::trunc);
        if (!f) throw FormatError(path + ": cannot open for writing");
        f << doc.dump(2) << "\n";
    }

private:
    std::string command_;
    std::uint64_t seed_;
    json settings_ = json::object();
    json inputs_ = json::object();
    std::vector<std::string> outputs_;
};

void write_json_output(const json& doc, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw FormatError(path + ": cannot open for writing");
    f << doc.dump(2) << "\n";
}

json read_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw FormatError(path + ": cannot open");
    try {
        return json::parse(f);
    } catch (const json::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
}

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

ImageInput load_image_any(const std::string& path, const ViTConfig& config) {
    if (ends_with(path, ".ppm")) {
        return read_ppm(path, config.image_height, config.image_width);
    }
    const Archive archive = load_archive(path);
    auto it = archive.find("pixels");
    if (it == archive.end()) throw FormatError(path + ": missing tensor 'pixels'");
    ImageInput image;
    image.pixels = it->second.to_tensor();
    return image;
}

BoolMask load_mask(const std::string& path) {
    const Archive archive = load_archive(path);
    auto it = archive.find("mask");
    if (it == archive.end()) throw FormatError(path + ": missing tensor 'mask'");
    const Tensor t = it->second.to_tensor();
    if (t.ndim() != 2) throw ShapeError(path + ": mask must be 2-D, got " + t.shape_str());
    BoolMask mask;
    mask.height = t.shape[0];
    mask.width = t.shape[1];
    mask.data.resize(t.numel());
    for (std::size_t i = 0; i < t.numel(); ++i) mask.data[i] = t.data[i] != 0.0f ? 1 : 0;
    return mask;
}

ClassBank load_class_bank(const std::string& jsonl_path) {
    const TextEmbeddingBank bank = load_text_bank(jsonl_path);
    ClassBank classes;
    classes.names = bank.descriptions;
    classes.embeddings = bank.embeddings;
    classes.validate();
    return classes;
}

std::vector<std::pair<std::size_t, std::size_t>> parse_heads(const std::vector<std::string>& specs) {
    std::vector<std::pair<std::size_t, std::size_t>> heads;
    for (const std::string& chunk : specs) {
        std::size_t start = 0;
        while (start <= chunk.size()) {
            const std::size_t comma = chunk.find(',', start);
            const std::string item =
                chunk.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
            if (!item.empty()) {
                const std::size_t colon = item.find(':');
                if (colon == std::string::npos) {
                    throw FormatError("head spec '" + item + "' is not layer:head");
                }
                try {
                    heads.emplace_back(std::stoul(item.substr(0, colon)),
                                       std::stoul(item.substr(colon + 1)));
                } catch (const std::exception&) {
                    throw FormatError("head spec '" + item + "' is not layer:head");
                }
            }
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
    }
    return heads;
}

std::vector<std::size_t> parse_size_list(const std::string& arg) {
    std::vector<std::size_t> sizes;
    std::size_t start = 0;
    while (start <= arg.size() && !arg.empty()) {
        const std::size_t comma = arg.find(',', start);
        const std::string item =
            arg.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
        if (!item.empty()) {
            try {
                sizes.push_back(std::stoul(item));
            } catch (const std::exception&) {
                throw FormatError("size list entry '" + item + "' is not an integer");
            }
        }
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return sizes;
}

json heads_to_json(const std::vector<std::pair<std::size_t, std::size_t>>& heads) {
    json out = json::array();
    for (const auto& [l, h] : heads) out.push_back({l, h});
    return out;
}

Tensor text_direction(const TextEmbeddingBank& bank, std::size_t index) {
    if (index >= bank.embeddings.shape[0]) {
        throw IndexError("text index " + std::to_string(index) + " out of range [0, " +
                         std::to_string(bank.embeddings.shape[0]) + ")");
    }
    return row(bank.embeddings, index);
}

// Labeled decomposition set used by the experiment subcommands.
struct LabeledInput {
    std::string path;
    std::optional<std::size_t> label;
    std::optional<std::size_t> group;
};

std::vector<LabeledInput> read_labeled_inputs(const json& list, const std::string& origin) {
    if (!list.is_array() || list.empty()) {
        throw FormatError(origin + ": expected a non-empty array of input records");
    }
    std::vector<LabeledInput> inputs;
    for (const auto& rec : list) {
        LabeledInput in;
        try {
            in.path = rec.at("decomposition").get<std::string>();
            if (rec.contains("label")) in.label = rec.at("label").get<std::size_t>();
            if (rec.contains("group")) in.group = rec.at("group").get<std::size_t>();
        } catch (const json::exception& e) {
            throw FormatError(origin + ": " + e.what());
        }
        inputs.push_back(std::move(in));
    }
    return inputs;
}

std::vector<DecomposedRepresentation> load_decompositions(const std::vector<LabeledInput>& inputs,
                                                          std::size_t threads) {
    std::vector<DecomposedRepresentation> decomps(inputs.size());
    parallel_for(inputs.size(), threads,
                 [&](std::size_t i) { decomps[i] = load_decomposition(inputs[i].path); });
    return decomps;
}

double accuracy_of(const std::vector<std::size_t>& preds, const std::vector<std::size_t>& labels) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i] == labels[i] ? 1 : 0;
    return static_cast<double>(correct) / static_cast<double>(preds.size());
}

json group_block(const std::vector<std::size_t>& preds, const std::vector<std::size_t>& labels,
                 const std::vector<std::size_t>& groups) {
    const WorstGroupResult wg = worst_group_accuracy(preds, labels, groups);
    json per_group = json::array();
    for (const GroupStat& s : wg.per_group) {
        per_group.push_back(
            {{"group", s.group}, {"correct", s.correct}, {"total", s.total}, {"accuracy", s.accuracy}});
    }
    return {{"accuracy", accuracy_of(preds, labels)}, {"worst_group", wg.worst}, {"per_group", per_group}};
}

// Uniform draw from [0, n) by masked rejection: exact and identical on every
// platform, unlike the standard distribution templates.
std::size_t draw_below(std::mt19937_64& gen, std::size_t n) {
    std::uint64_t mask = 1;
    while (mask < n) mask <<= 1;
    --mask;
    while (true) {
        const std::uint64_t v = gen() & mask;
        if (v < n) return static_cast<std::size_t>(v);
    }
}

std::vector<std::pair<std::size_t, std::size_t>> sample_heads(std::mt19937_64& gen, std::size_t count,
                                                              std::size_t layers, std::size_t heads) {
    const std::size_t total = layers * heads;
    if (count > total) {
        throw IndexError("cannot sample " + std::to_string(count) + " distinct heads from " +
                         std::to_string(total));
    }
    std::vector<std::uint8_t> taken(total, 0);
    std::vector<std::pair<std::size_t, std::size_t>> out;
    while (out.size() < count) {
        const std::size_t flat = draw_below(gen, total);
        if (taken[flat]) continue;
        taken[flat] = 1;
        out.emplace_back(flat / heads, flat % heads);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Subcommands. Option state lives on a shared_ptr captured by the callback,
// which runs inside app.parse after the setup function has returned.

void setup_decompose(const json& config, CLI::App* cmd, const CommonOpts* common) {
    struct Opts {
        std::string model, image, image_id, images, out, out_dir, means_out;
    };
    auto o = std::make_shared<Opts>();
    cfg_default(config, "model", o->model);
    cfg_default(config, "image", o->image);
    cfg_default(config, "image-id", o->image_id);
    cfg_default(config, "images", o->images);
    cfg_default(config, "out", o->out);
    cfg_default(config, "out-dir", o->out_dir);
    cfg_default(config, "means-out", o->means_out);

    cmd->add_option("--model", o->model, "model archive");
    cmd->add_option("--image", o->image, "input image (.ppm or archive with 'pixels')");
    cmd->add_option("--image-id", o->image_id, "identifier stored with the decomposition");
    cmd->add_option("--images", o->images, "JSON list of {path, id} records");
    cmd->add_option("--out", o->out, "output decomposition archive (single image)");
    cmd->add_option("--out-dir", o->out_dir, "output directory (batch)");
    cmd->add_option("--means-out", o->means_out, "also write the mean bank over the batch");

    cmd->callback([o, common]() {
        if (o->model.empty()) throw FormatError("decompose: --model is required");
        const bool batch = !o->images.empty();
        if (batch == !o->image.empty()) {
            throw FormatError("decompose: pass exactly one of --image or --images");
        }

        RunManifest manifest("decompose", common->seed);
        manifest.add_input(o->model);
        manifest.set("model", o->model);
        const ViTModel model = load_model(o->model);
        const std::string model_hash = hex64(fnv1a64_file(o->model));

        struct Job {
            std::string path, id, out;
        };
        std::vector<Job> jobs;
        std::string primary_out;
        if (batch) {
            if (o->out_dir.empty()) throw FormatError("decompose: --out-dir is required with --images");
            manifest.add_input(o->images);
            manifest.set("images", o->images);
            manifest.set("out-dir", o->out_dir);
            const json list = read_json_file(o->images);
            if (!list.is_array() || list.empty()) {
                throw FormatError(o->images + ": expected a non-empty array");
            }
            for (const auto& rec : list) {
                Job job;
                try {
                    job.path = rec.at("path").get<std::string>();
                    job.id = rec.at("id").get<std::string>();
                } catch (const json::exception& e) {
                    throw FormatError(o->images + ": " + e.what());
                }
                job.out = o->out_dir + "/" + job.id + ".nta";
                jobs.push_back(std::move(job));
            }
            std::filesystem::create_directories(o->out_dir);
            primary_out = o->out_dir + "/decompose";
        } else {
            if (o->out.empty()) throw FormatError("decompose: --out is required with --image");
            jobs.push_back({o->image, o->image_id.empty() ? o->image : o->image_id, o->out});
            manifest.set("image", o->image);
            manifest.set("out", o->out);
            primary_out = o->out;
        }
        for (const Job& job : jobs) manifest.add_input(job.path);

        parallel_for(jobs.size(), common->threads, [&](std::size_t i) {
            const ImageInput image = load_image_any(jobs[i].path, model.config);
            DecomposedRepresentation d = decompose_image(model, image, jobs[i].id);
            d.model_hash = model_hash;
            save_decomposition(d, jobs[i].out);
        });
        for (const Job& job : jobs) {
            manifest.add_output(job.out);
            manifest.add_output(job.out + ".json");
        }
        if (!o->means_out.empty()) {
            // Serial accumulation in input order keeps the bank independent
            // of the thread count.
            MeanBankBuilder builder;
            for (const Job& job : jobs) builder.add(load_decomposition(job.out));
            save_mean_bank(builder.finish(), o->means_out);
            manifest.set("means-out", o->means_out);
            manifest.add_output(o->means_out);
            manifest.add_output(o->means_out + ".json");
        }
        manifest.write(primary_out);
    });
}

void setup_classify(const json& config, CLI::App* cmd, const CommonOpts* common) {
    struct Opts {
        std::string decomposition, model, image, classes, out;
    };
    auto o = std::make_shared<Opts>();
    cfg_default(config, "decomposition", o->decomposition);
    cfg_default(config, "model", o->model);
    cfg_default(config, "image", o->image);
    cfg_default(config, "classes", o->classes);
    cfg_default(config, "out", o->out);

    cmd->add_option("--decomposition", o->decomposition, "decomposition archive to classify");
    cmd->add_option("--model", o->model, "model archive (raw forward mode)");
    cmd->add_option("--image", o->image, "input image (raw forward mode)");
    cmd->add_option("--classes", o->classes, "class bank (JSON lines + embeddings)");
    cmd->add_option("--out", o->out, "output JSON");

    cmd->callback([o, common]() {
        if (o->classes.empty()) throw FormatError("classify: --classes is required");
        if (o->out.empty()) throw FormatError("classify: --out is required");
        const bool from_decomp = !o->decomposition.empty();
        if (from_decomp == (!o->model.empty() || !o->image.empty())) {
            throw FormatError("classify: pass either --decomposition or --model with --image");
        }

        RunManifest manifest("classify", common->seed);
        manifest.add_input(o->classes);
        manifest.add_input(o->classes + ".nta");
        manifest.set("classes", o->classes);
        manifest.set("out", o->out);
        const ClassBank classes = load_class_bank(o->classes);

        Tensor rep;
        std::string image_id;
        if (from_decomp) {
            manifest.add_input(o->decomposition);
            manifest.set("decomposition", o->decomposition);
            const DecomposedRepresentation d = load_decomposition(o->decomposition);
            rep = reconstruct(d);
            image_id = d.image_id;
        } else {
            if (o->model.empty() || o->image.empty()) {
                throw FormatError("classify: raw forward mode needs --model and --image");
            }
            manifest.add_input(o->model);
            manifest.add_input(o->image);
            manifest.set("model", o->model);
            manifest.set("image", o->image);
            const ViTModel model = load_model(o->model);
            rep = reference_forward(model, load_image_any(o->image, model.config));
            image_id = o->image;
        }

        const std::size_t pred = zero_shot_classify(rep, classes);
        json similarities = json::array();
        double rep_sq = 0.0;
        for (float v : rep.data) rep_sq += static_cast<double>(v) * static_cast<double>(v);
        const double rep_norm = std::sqrt(rep_sq);
        const std::size_t d_out = rep.numel();
        for (std::size_t cidx = 0; cidx < classes.names.size(); ++cidx) {
            double dot_acc = 0.0, emb_sq = 0.0;
            for (std::size_t i = 0; i < d_out; ++i) {
                const double e = classes.embeddings.data[cidx * d_out + i];
                dot_acc += static_cast<double>(rep.data[i]) * e;
                emb_sq += e * e;
            }
            similarities.push_back(dot_acc / (rep_norm * std::sqrt(emb_sq)));
        }

        const json doc = {
            {"image_id", image_id},
            {"prediction", pred},
            {"class_name", classes.names[pred]},
            {"similarities", similarities},
        };
        write_json_output(doc, o->out);
        manifest.add_output(o->out);
        manifest.write(o->out);
    });
}

void setup_ablate(const json& config, CLI::App* cmd, const CommonOpts* common) {
    struct Opts {
        std::string inputs, means, classes, out, mode = "mean";
        bool all_mlps = false, class_token_rows = false, sweep_prefix = false;
        std::size_t msa_prefix = 0, random_heads = 0, trials = 5;
        std::vector<std::string> head_specs;
    };
    auto o = std::make_shared<Opts>();
    cfg_default(config, "inputs", o->inputs);
    cfg_default(config, "means", o->means);
    cfg_default(config, "classes", o->classes);
    cfg_default(config, "out", o->out);
    cfg_default(config, "mode", o->mode);
    cfg_default(config, "all-mlps", o->all_mlps);
    cfg_default(config, "class-token-rows", o->class_token_rows);
    cfg_default(config, "sweep-prefix", o->sweep_prefix);
    cfg_default(config, "msa-prefix", o->msa_prefix);
    cfg_default(config, "random-heads", o->random_heads);
    cfg_default(config, "trials", o->trials);
    cfg_default(config, "heads", o->head_specs);

    cmd->add_option("--inputs", o->inputs, "JSON list of {decomposition, label?, group?}");
    cmd->add_option("--means", o->means, "mean bank archive");
    cmd->add_option("--classes", o->classes, "class bank");
    cmd->add_option("--out", o->out, "output JSON");
    cmd->add_option("--mode", o->mode, "mean or zero")->check(CLI::IsMember({"mean", "zero"}));
    cmd->add_flag("--all-mlps", o->all_mlps, "ablate every MLP term");
    cmd->add_option("--msa-prefix", o->msa_prefix, "ablate msa terms of the first N layers");
    cmd->add_option("--heads", o->head_specs, "head list as layer:head[,layer:head...]");
    cmd->add_flag("--class-token-rows", o->class_token_rows, "ablate token-0 msa terms");
    cmd->add_flag("--sweep-prefix", o->sweep_prefix, "evaluate every msa prefix length");
    cmd->add_option("--random-heads", o->random_heads, "also evaluate N randomly drawn heads per trial");
    cmd->add_option("--trials", o->trials, "random-head trials");

    cmd->callback([o, common]() {
        if (o->inputs.empty()) throw FormatError("ablate: --inputs is required");
        if (o->classes.empty()) throw FormatError("ablate: --classes is required");
        if (o->out.empty()) throw FormatError("ablate: --out is required");

        AblationSpec spec;
        spec.all_mlps = o->all_mlps;
        spec.msa_prefix_layers = o->msa_prefix;
        spec.heads = parse_heads(o->head_specs);
        spec.class_token_rows = o->class_token_rows;
        spec.mode = o->mode == "zero" ? AblationMode::zero : AblationMode::mean;

        const bool needs_bank = spec.mode == AblationMode::mean &&
                                (!spec.empty() || o->sweep_prefix || o->random_heads > 0);
        if (needs_bank && o->means.empty()) {
            throw FormatError("ablate: --means is required for mean-mode ablation");
        }

        RunManifest manifest("ablate", common->seed);
        manifest.add_input(o->inputs);
        manifest.add_input(o->classes);
        manifest.add_input(o->classes + ".nta");
        manifest.set("inputs", o->inputs);
        manifest.set("classes", o->classes);
        manifest.set("out", o->out);
        manifest.set("mode", o->mode);
        manifest.set("spec", json{{"all_mlps", spec.all_mlps},
                                  {"msa_prefix_layers", spec.msa_prefix_layers},
                                  {"heads", heads_to_json(spec.heads)},
                                  {"class_token_rows", spec.class_token_rows}});

        const std::vector<LabeledInput> inputs = read_labeled_inputs(read_json_file(o->inputs), o->inputs);
        for (const auto& in : inputs) manifest.add_input(in.path);
        const std::vector<DecomposedRepresentation> decomps = load_decompositions(inputs, common->threads);
        const ClassBank classes = load_class_bank(o->classes);

        MeanBank bank;
        if (!o->means.empty()) {
            manifest.add_input(o->means);
            manifest.set("means", o->means);
            bank = load_mean_bank(o->means);
        }

        auto classify_with = [&](const AblationSpec& s) {
            std::vector<std::size_t> preds(decomps.size());
            parallel_for(decomps.size(), common->threads, [&](std::size_t i) {
                preds[i] = zero_shot_classify(apply_ablation(decomps[i], s, bank), classes);
            });
            return preds;
        };

        std::vector<std::size_t> labels, groups;
        const bool have_labels =
            std::all_of(inputs.begin(), inputs.end(), [](const auto& in) { return in.label.has_value(); });
        const bool have_groups =
            std::all_of(inputs.begin(), inputs.end(), [](const auto& in) { return in.group.has_value(); });
        if (have_labels) {
            for (const auto& in : inputs) labels.push_back(*in.label);
        }
        if (have_groups) {
            for (const auto& in : inputs) groups.push_back(*in.group);
        }

        const std::vector<std::size_t> base_preds = classify_with(AblationSpec{});
        const std::vector<std::size_t> ablated_preds = classify_with(spec);

        json doc;
        doc["mode"] = o->mode;
        doc["spec"] = {{"all_mlps", spec.all_mlps},
                       {"msa_prefix_layers", spec.msa_prefix_layers},
                       {"heads", heads_to_json(spec.heads)},
                       {"class_token_rows", spec.class_token_rows}};

        json per_image = json::array();
        for (std::size_t i = 0; i < decomps.size(); ++i) {
            json rec = {{"id", decomps[i].image_id}, {"base", base_preds[i]}, {"ablated", ablated_preds[i]}};
            if (have_labels) rec["label"] = labels[i];
            if (have_groups) rec["group"] = groups[i];
            per_image.push_back(std::move(rec));
        }
        doc["per_image"] = per_image;

        if (o->sweep_prefix) {
            doc["experiment"] = "msa_prefix_sweep";
            const std::size_t L = decomps.front().num_layers;
            json sweep = json::array();
            for (std::size_t prefix = 0; prefix <= L; ++prefix) {
                AblationSpec s;
                s.mode = spec.mode;
                s.msa_prefix_layers = prefix;
                const std::vector<std::size_t> preds = classify_with(s);
                json rec = {{"prefix", prefix}};
                if (have_labels) rec["accuracy"] = accuracy_of(preds, labels);
                sweep.push_back(std::move(rec));
            }
            doc["prefix_sweep"] = sweep;
            if (have_labels) doc["base_accuracy"] = accuracy_of(base_preds, labels);
        } else if (o->random_heads > 0) {
            if (!have_labels || !have_groups) {
                throw FormatError("ablate: random-head trials need labels and groups on every input");
            }
            doc["experiment"] = "spurious_head_ablation";
            doc["base"] = group_block(base_preds, labels, groups);
            doc["ablated"] = group_block(ablated_preds, labels, groups);

            const std::size_t L = decomps.front().num_layers;
            const std::size_t H = decomps.front().num_heads;
            json trial_records = json::array();
            double best_worst = -1.0;
            for (std::size_t t = 0; t < o->trials; ++t) {
                std::mt19937_64 gen(common->seed + t);
                AblationSpec s;
                s.mode = spec.mode;
                s.heads = sample_heads(gen, o->random_heads, L, H);
                const std::vector<std::size_t> preds = classify_with(s);
                const WorstGroupResult wg = worst_group_accuracy(preds, labels, groups);
                best_worst = std::max(best_worst, wg.worst);
                trial_records.push_back({{"heads", heads_to_json(s.heads)},
                                         {"worst_group", wg.worst},
                                         {"accuracy", accuracy_of(preds, labels)}});
            }
            doc["random"] = {{"best_worst_group", best_worst}, {"trials", trial_records}};
        } else {
            doc["experiment"] = "ablation";
            if (have_labels) {
                doc["base_accuracy"] = accuracy_of(base_preds, labels);
                doc["ablated_accuracy"] = accuracy_of(ablated_preds, labels);
            }
            if (have_labels && have_groups) {
                doc["base_groups"] = group_block(base_preds, labels, groups);
                doc["ablated_groups"] = group_block(ablated_preds, labels, groups);
            }
        }

        write_json_output(doc, o->out);
        manifest.add_output(o->out);
        manifest.write(o->out);
    });
}

void setup_textspan(const json& config, CLI::App* cmd, const CommonOpts* common) {
    struct Opts {
        std::string inputs, bank, means, classes, out, m_list;
        std::size_t layer = 0, head = 0, m = 0, last_layers = 0;
        bool project_and_classify = false;
    };
    auto o = std::make_shared<Opts>();
    cfg_default(config, "inputs", o->inputs);
    cfg_default(config, "bank", o->bank);
    cfg_default(config, "means", o->means);
    cfg_default(config, "classes", o->classes);
    cfg_default(config, "out", o->out);
    cfg_default(config, "layer", o->layer);
    cfg_default(config, "head", o->head);
    cfg_default(config, "m", o->m);
    cfg_default(config, "last-layers", o->last_layers);
    cfg_default(config, "m-list", o->m_list);
    cfg_default(config, "project-and-classify", o->project_and_classify);

    cmd->add_option("--inputs", o->inputs, "JSON list of {decomposition, label?}");
    cmd->add_option("--bank", o->bank, "candidate text bank (JSON lines + embeddings)");
    cmd->add_option("--layer", o->layer, "layer index (single-head mode)");
    cmd->add_option("--head", o->head, "head index (single-head mode)");
    cmd->add_option("--m", o->m, "basis size");
    cmd->add_option("--out", o->out, "output JSON");
    cmd->add_flag("--project-and-classify", o->project_and_classify,
                  "mine bases for the selected layers, project head terms, classify");
    cmd->add_option("--last-layers", o->last_layers, "mine every head of the last N layers");
    cmd->add_option("--m-list", o->m_list, "comma-separated basis sizes for the accuracy sweep");
    cmd->add_option("--means", o->means, "mean bank (projection experiment)");
    cmd->add_option("--classes", o->classes, "class bank (projection experiment)");

    cmd->callback([o, common]() {
        if (o->inputs.empty()) throw FormatError("textspan: --inputs is required");
        if (o->bank.empty()) throw FormatError("textspan: --bank is required");
        if (o->out.empty()) throw FormatError("textspan: --out is required");

        RunManifest manifest("textspan", common->seed);
        manifest.add_input(o->inputs);
        manifest.add_input(o->bank);
        manifest.add_input(o->bank + ".nta");
        manifest.set("inputs", o->inputs);
        manifest.set("bank", o->bank);
        manifest.set("out", o->out);

        const std::vector<LabeledInput> inputs = read_labeled_inputs(read_json_file(o->inputs), o->inputs);
        for (const auto& in : inputs) manifest.add_input(in.path);
        const std::vector<DecomposedRepresentation> decomps = load_decompositions(inputs, common->threads);
        const TextEmbeddingBank bank = load_text_bank(o->bank);

        const std::size_t K = decomps.size();
        const std::size_t D = decomps.front().output_dim;

        auto head_matrix = [&](std::size_t l, std::size_t h) {
            Tensor c({K, D});
            for (std::size_t k = 0; k < K; ++k) {
                const Tensor contrib = head_contribution(decomps[k], l, h);
                std::copy(contrib.data.begin(), contrib.data.end(), c.data.begin() + k * D);
            }
            return c;
        };

        auto mine_basis = [&](std::size_t l, std::size_t h, std::size_t size) {
            const Tensor c = head_matrix(l, h);
            TextEmbeddingBank projected = bank;
            projected.embeddings = project_rows_to_span(bank.embeddings, c);
            HeadBasis basis = textspan(c, projected, size);
            basis.layer = l;
            basis.head = h;
            return basis;
        };

        if (!o->project_and_classify) {
            if (o->m == 0) throw FormatError("textspan: --m must be positive");
            manifest.set("layer", o->layer);
            manifest.set("head", o->head);
            manifest.set("m", o->m);
            const HeadBasis basis = mine_basis(o->layer, o->head, o->m);
            save_head_basis(basis, o->out);
            manifest.add_output(o->out);
            manifest.add_output(o->out + ".nta");
            manifest.write(o->out);
            return;
        }

        if (o->classes.empty() || o->means.empty()) {
            throw FormatError("textspan: projection experiment needs --classes and --means");
        }
        if (o->last_layers == 0) throw FormatError("textspan: --last-layers must be positive");
        std::vector<std::size_t> sizes = parse_size_list(o->m_list);
        if (sizes.empty() && o->m > 0) sizes.push_back(o->m);
        if (sizes.empty()) throw FormatError("textspan: --m-list or --m is required");
        std::sort(sizes.begin(), sizes.end());

        manifest.add_input(o->classes);
        manifest.add_input(o->classes + ".nta");
        manifest.add_input(o->means);
        manifest.set("classes", o->classes);
        manifest.set("means", o->means);
        manifest.set("last-layers", o->last_layers);
        {
            json sizes_json = json::array();
            for (std::size_t s : sizes) sizes_json.push_back(s);
            manifest.set("m-list", sizes_json);
        }

        const ClassBank classes = load_class_bank(o->classes);
        const MeanBank means = load_mean_bank(o->means);

        const std::size_t L = decomps.front().num_layers;
        const std::size_t H = decomps.front().num_heads;
        if (o->last_layers > L) throw IndexError("--last-layers exceeds layer count");
        std::vector<std::pair<std::size_t, std::size_t>> selected;
        for (std::size_t l = L - o->last_layers; l < L; ++l) {
            for (std::size_t h = 0; h < H; ++h) selected.emplace_back(l, h);
        }
        std::vector<std::pair<std::size_t, std::size_t>> others;
        for (std::size_t l = 0; l + o->last_layers < L; ++l) {
            for (std::size_t h = 0; h < H; ++h) others.emplace_back(l, h);
        }

        // Greedy selections for m' < m are a prefix of those for m, so one
        // mining pass at the largest size serves the whole sweep.
        const std::size_t max_m = sizes.back();
        std::vector<HeadBasis> bases(selected.size());
        parallel_for(selected.size(), common->threads, [&](std::size_t s) {
            bases[s] = mine_basis(selected[s].first, selected[s].second, max_m);
        });

        // Everything except the selected heads is mean-ablated once.
        AblationSpec others_spec;
        others_spec.all_mlps = true;
        others_spec.heads = others;
        others_spec.mode = AblationMode::mean;

        std::vector<std::size_t> labels;
        for (const auto& in : inputs) {
            if (!in.label) throw FormatError("textspan: projection experiment needs labels");
            labels.push_back(*in.label);
        }

        std::vector<std::size_t> base_preds(K);
        parallel_for(K, common->threads, [&](std::size_t k) {
            base_preds[k] = zero_shot_classify(reconstruct(decomps[k]), classes);
        });

        json results = json::array();
        for (std::size_t size : sizes) {
            std::vector<std::size_t> preds(K);
            parallel_for(K, common->threads, [&](std::size_t k) {
                const Tensor ablated = apply_ablation(decomps[k], others_spec, means);
                std::vector<double> rep(D);
                for (std::size_t i = 0; i < D; ++i) rep[i] = ablated.data[i];
                for (std::size_t s = 0; s < selected.size(); ++s) {
                    const auto [l, h] = selected[s];
                    const Tensor contrib = head_contribution(decomps[k], l, h);
                    const HeadBasis truncated = truncate_basis(bases[s], size);
                    if (truncated.components.numel() == 0) {
                        for (std::size_t i = 0; i < D; ++i) rep[i] -= contrib.data[i];
                        continue;
                    }
                    const Tensor projected = project_contribution(contrib, truncated);
                    for (std::size_t i = 0; i < D; ++i) {
                        rep[i] += static_cast<double>(projected.data[i]) - contrib.data[i];
                    }
                }
                Tensor rep_f({D});
                for (std::size_t i = 0; i < D; ++i) rep_f.data[i] = static_cast<float>(rep[i]);
                preds[k] = zero_shot_classify(rep_f, classes);
            });
            results.push_back({{"m", size}, {"accuracy", accuracy_of(preds, labels)}});
        }

        const json doc = {
            {"experiment", "textspan_projection"},
            {"pool", bank.provenance},
            {"base_accuracy", accuracy_of(base_preds, labels)},
            {"results", results},
        };
        write_json_output(doc, o->out);
        manifest.add_output(o->out);
        manifest.write(o->out);
    });
}

void setup_segment(const json& config, CLI::App* cmd, const CommonOpts* common) {
    struct Opts {
        std::string inputs, bank, out;
        bool bilinear = false, normalize_bias = false;
        double threshold = 0.0;
        bool threshold_set = false;
    };
    auto o = std::make_shared<Opts>();
    cfg_default(config, "inputs", o->inputs);
    cfg_default(config, "bank", o->bank);
    cfg_default(config, "out", o->out);
    cfg_default(config, "bilinear", o->bilinear);
    cfg_default(config, "normalize-bias", o->normalize_bias);
    if (config.contains("threshold")) {
        o->threshold = config.at("threshold").get<double>();
        o->threshold_set = true;
    }

    cmd->add_option("--inputs", o->inputs, "JSON list of {decomposition, gt, text_index}");
    cmd->add_option("--bank", o->bank, "text bank holding the class directions");
    cmd->add_option("--out", o->out, "output JSON");
    cmd->add_flag("--bilinear", o->bilinear, "bilinear score upsampling for mAP");
    cmd->add_flag("--normalize-bias", o->normalize_bias,
                  "subtract the mean heatmap over every bank direction");
    auto* threshold_opt =
        cmd->add_option("--threshold", o->threshold, "binarization threshold (default: per-image mean)");

    cmd->callback([o, common, threshold_opt]() {
        if (o->inputs.empty()) throw FormatError("segment: --inputs is required");
        if (o->bank.empty()) throw FormatError("segment: --bank is required");
        if (o->out.empty()) throw FormatError("segment: --out is required");
        if (threshold_opt->count() > 0) o->threshold_set = true;

        RunManifest manifest("segment", common->seed);
        manifest.add_input(o->inputs);
        manifest.add_input(o->bank);
        manifest.add_input(o->bank + ".nta");
        manifest.set("inputs", o->inputs);
        manifest.set("bank", o->bank);
        manifest.set("out", o->out);
        manifest.set("bilinear", o->bilinear);
        manifest.set("normalize-bias", o->normalize_bias);
        if (o->threshold_set) manifest.set("threshold", o->threshold);

        struct SegJob {
            std::string decomposition, gt;
            std::size_t text_index = 0;
        };
        std::vector<SegJob> jobs;
        const json list = read_json_file(o->inputs);
        if (!list.is_array() || list.empty()) {
            throw FormatError(o->inputs + ": expected a non-empty array");
        }
        for (const auto& rec : list) {
            SegJob job;
            try {
                job.decomposition = rec.at("decomposition").get<std::string>();
                job.gt = rec.at("gt").get<std::string>();
                job.text_index = rec.at("text_index").get<std::size_t>();
            } catch (const json::exception& e) {
                throw FormatError(o->inputs + ": " + e.what());
            }
            jobs.push_back(std::move(job));
        }
        for (const auto& job : jobs) {
            manifest.add_input(job.decomposition);
            manifest.add_input(job.gt);
        }

        const TextEmbeddingBank bank = load_text_bank(o->bank);

        struct SegRow {
            std::string id;
            SegmentationMetrics metrics;
        };
        std::vector<SegRow> rows(jobs.size());
        parallel_for(jobs.size(), common->threads, [&](std::size_t i) {
            const DecomposedRepresentation d = load_decomposition(jobs[i].decomposition);
            Heatmap h = token_heatmap(d, text_direction(bank, jobs[i].text_index));
            if (o->normalize_bias) {
                std::vector<Heatmap> class_maps;
                for (std::size_t t = 0; t < bank.embeddings.shape[0]; ++t) {
                    class_maps.push_back(token_heatmap(d, text_direction(bank, t)));
                }
                h = bias_normalize(h, class_maps);
            }
            const BoolMask mask = o->threshold_set ? binarize(h, o->threshold) : binarize(h);
            const BoolMask gt = load_mask(jobs[i].gt);
            if (gt.height % h.grid_height != 0 || gt.width % h.grid_width != 0 ||
                gt.height / h.grid_height != gt.width / h.grid_width) {
                throw ShapeError(jobs[i].gt + ": ground truth is not an integer upsample of the grid");
            }
            const std::size_t factor = gt.height / h.grid_height;
            rows[i].id = d.image_id;
            rows[i].metrics = seg_metrics(h, mask, gt, factor, o->bilinear);
        });

        json per_image = json::array();
        double acc = 0.0, miou = 0.0, map = 0.0;
        for (const SegRow& r : rows) {
            per_image.push_back({{"id", r.id},
                                 {"pixel_accuracy", r.metrics.pixel_accuracy},
                                 {"miou", r.metrics.miou},
                                 {"map", r.metrics.map}});
            acc += r.metrics.pixel_accuracy;
            miou += r.metrics.miou;
            map += r.metrics.map;
        }
        const double inv = 1.0 / static_cast<double>(rows.size());
        const json doc = {
            {"experiment", "segmentation"},
            {"per_image", per_image},
            {"aggregate", {{"pixel_accuracy", acc * inv}, {"miou", miou * inv}, {"map", map * inv}}},
        };
        write_json_output(doc, o->out);
        manifest.add_output(o->out);
        manifest.write(o->out);
    });
}

void setup_retrieve(const json& config, CLI::App* cmd, const CommonOpts* common) {
    struct Opts {
        std::string query, gallery, out;
        std::size_t layer = 0, head = 0, k = 0;
    };
    auto o = std::make_shared<Opts>();
    cfg_default(config, "query", o->query);
    cfg_default(config, "gallery", o->gallery);
    cfg_default(config, "out", o->out);
    cfg_default(config, "layer", o->layer);
    cfg_default(config, "head", o->head);
    cfg_default(config, "k", o->k);

    cmd->add_option("--query", o->query, "query decomposition");
    cmd->add_option("--gallery", o->gallery, "JSON list of {decomposition}");
    cmd->add_option("--layer", o->layer, "layer index");
    cmd->add_option("--head", o->head, "head index");
    cmd->add_option("--k", o->k, "results to keep (default: whole gallery)");
    cmd->add_option("--out", o->out, "output JSON");

    cmd->callback([o, common]() {
        if (o->query.empty()) throw FormatError("retrieve: --query is required");
        if (o->gallery.empty()) throw FormatError("retrieve: --gallery is required");
        if (o->out.empty()) throw FormatError("retrieve: --out is required");

        RunManifest manifest("retrieve", common->seed);
        manifest.add_input(o->query);
        manifest.add_input(o->gallery);
        manifest.set("query", o->query);
        manifest.set("gallery", o->gallery);
        manifest.set("layer", o->layer);
        manifest.set("head", o->head);
        manifest.set("k", o->k);
        manifest.set("out", o->out);

        const std::vector<LabeledInput> gallery_inputs =
            read_labeled_inputs(read_json_file(o->gallery), o->gallery);
        for (const auto& in : gallery_inputs) manifest.add_input(in.path);

        const DecomposedRepresentation query = load_decomposition(o->query);
        const std::vector<DecomposedRepresentation> gallery =
            load_decompositions(gallery_inputs, common->threads);
        const std::size_t keep = o->k == 0 ? gallery.size() : o->k;
        const RetrievalResult result = retrieve_by_head(query, gallery, o->layer, o->head, keep);

        json items = json::array();
        for (std::size_t r = 0; r < result.indices.size(); ++r) {
            items.push_back(
                {{"index", result.indices[r]}, {"id", result.ids[r]}, {"score", result.scores[r]}});
        }
        const json doc = {
            {"query", query.image_id},
            {"layer", o->layer},
            {"head", o->head},
            {"results", items},
        };
        write_json_output(doc, o->out);
        manifest.add_output(o->out);
        manifest.write(o->out);
    });
}

void setup_joint_heatmap(const json& config, CLI::App* cmd, const CommonOpts* common) {
    struct Opts {
        std::string decomposition, bank, out, out_pgm;
        std::size_t layer = 0, head = 0, text_index = 0;
        bool token_level = false;
    };
    auto o = std::make_shared<Opts>();
    cfg_default(config, "decomposition", o->decomposition);
    cfg_default(config, "bank", o->bank);
    cfg_default(config, "out", o->out);
    cfg_default(config, "out-pgm", o->out_pgm);
    cfg_default(config, "layer", o->layer);
    cfg_default(config, "head", o->head);
    cfg_default(config, "text-index", o->text_index);
    cfg_default(config, "token-level", o->token_level);

    cmd->add_option("--decomposition", o->decomposition, "decomposition archive");
    cmd->add_option("--bank", o->bank, "text bank with the probe direction");
    cmd->add_option("--text-index", o->text_index, "bank row to probe with");
    cmd->add_option("--layer", o->layer, "layer index");
    cmd->add_option("--head", o->head, "head index");
    cmd->add_flag("--token-level", o->token_level, "sum over every layer and head instead");
    cmd->add_option("--out", o->out, "output heatmap JSON");
    cmd->add_option("--out-pgm", o->out_pgm, "also render the grid as PGM");

    cmd->callback([o, common]() {
        if (o->decomposition.empty()) throw FormatError("joint-heatmap: --decomposition is required");
        if (o->bank.empty()) throw FormatError("joint-heatmap: --bank is required");
        if (o->out.empty()) throw FormatError("joint-heatmap: --out is required");

        RunManifest manifest("joint-heatmap", common->seed);
        manifest.add_input(o->decomposition);
        manifest.add_input(o->bank);
        manifest.add_input(o->bank + ".nta");
        manifest.set("decomposition", o->decomposition);
        manifest.set("bank", o->bank);
        manifest.set("text-index", o->text_index);
        manifest.set("out", o->out);
        manifest.set("token-level", o->token_level);
        if (!o->token_level) {
            manifest.set("layer", o->layer);
            manifest.set("head", o->head);
        }

        const DecomposedRepresentation d = load_decomposition(o->decomposition);
        const TextEmbeddingBank bank = load_text_bank(o->bank);
        const Tensor dir = text_direction(bank, o->text_index);
        const Heatmap h =
            o->token_level ? token_heatmap(d, dir) : joint_heatmap(d, o->layer, o->head, dir);

        json scores = json::array();
        for (float v : h.grid) scores.push_back(v);
        const json doc = {
            {"image_id", h.image_id},
            {"source_id", h.source_id},
            {"text", bank.descriptions[o->text_index]},
            {"grid", {h.grid_height, h.grid_width}},
            {"scores", scores},
        };
        write_json_output(doc, o->out);
        manifest.add_output(o->out);

        if (!o->out_pgm.empty()) {
            Tensor grid({h.grid_height, h.grid_width});
            std::copy(h.grid.begin(), h.grid.end(), grid.data.begin());
            write_pgm(o->out_pgm, grid);
            manifest.add_output(o->out_pgm);
        }
        manifest.write(o->out);
    });
}

void setup_render_pgm(const json& config, CLI::App* cmd, const CommonOpts* common) {
    struct Opts {
        std::string heatmap, out;
        std::size_t upsample = 1;
        bool bilinear = false;
    };
    auto o = std::make_shared<Opts>();
    cfg_default(config, "heatmap", o->heatmap);
    cfg_default(config, "out", o->out);
    cfg_default(config, "upsample", o->upsample);
    cfg_default(config, "bilinear", o->bilinear);

    cmd->add_option("--heatmap", o->heatmap, "heatmap JSON produced by joint-heatmap");
    cmd->add_option("--out", o->out, "output PGM");
    cmd->add_option("--upsample", o->upsample, "integer upsampling factor");
    cmd->add_flag("--bilinear", o->bilinear, "bilinear instead of nearest upsampling");

    cmd->callback([o, common]() {
        if (o->heatmap.empty()) throw FormatError("render-pgm: --heatmap is required");
        if (o->out.empty()) throw FormatError("render-pgm: --out is required");

        RunManifest manifest("render-pgm", common->seed);
        manifest.add_input(o->heatmap);
        manifest.set("heatmap", o->heatmap);
        manifest.set("out", o->out);
        manifest.set("upsample", o->upsample);
        manifest.set("bilinear", o->bilinear);

        const json doc = read_json_file(o->heatmap);
        std::size_t gh, gw;
        std::vector<float> values;
        try {
            gh = doc.at("grid").at(0).get<std::size_t>();
            gw = doc.at("grid").at(1).get<std::size_t>();
            for (const auto& v : doc.at("scores")) values.push_back(v.get<float>());
        } catch (const json::exception& e) {
            throw FormatError(o->heatmap + ": " + e.what());
        }
        if (values.size() != gh * gw) {
            throw ShapeError(o->heatmap + ": score count does not match the grid");
        }
        Tensor grid({gh, gw});
        std::copy(values.begin(), values.end(), grid.data.begin());
        if (o->upsample > 1) {
            grid = o->bilinear ? upsample_bilinear(grid, o->upsample)
                               : upsample_nearest(grid, o->upsample);
        }
        write_pgm(o->out, grid);
        manifest.add_output(o->out);
        manifest.write(o->out);
    });
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CLIP-ViT representation decomposition toolkit"};
    try {
        const json config = read_config_from_argv(argc, argv);

        app.require_subcommand(1);
        app.set_version_flag("--version", std::string(kVersion));

        auto common = std::make_shared<CommonOpts>();
        cfg_default(config, "threads", common->threads);
        cfg_default(config, "seed", common->seed);
        std::string config_path;
        app.add_option("--config", config_path, "JSON config supplying flag defaults");
        app.add_option("--threads", common->threads, "worker threads");
        app.add_option("--seed", common->seed, "seed for randomized baselines");

        struct Sub {
            const char* name;
            const char* help;
            void (*setup)(const json&, CLI::App*, const CommonOpts*);
        };
        const Sub subs[] = {
            {"decompose", "materialize the term ledger for images", setup_decompose},
            {"classify", "zero-shot classification", setup_classify},
            {"ablate", "mean- or zero-ablation studies", setup_ablate},
            {"textspan", "mine text bases for heads", setup_textspan},
            {"segment", "heatmap segmentation metrics", setup_segment},
            {"retrieve", "head-specific image retrieval", setup_retrieve},
            {"joint-heatmap", "head and token probe maps", setup_joint_heatmap},
            {"render-pgm", "render a heatmap JSON as PGM", setup_render_pgm},
        };
        for (const Sub& sub : subs) {
            CLI::App* cmd = app.add_subcommand(sub.name, sub.help);
            cmd->fallthrough();
            sub.setup(config, cmd, common.get());
        }

        app.parse(argc, argv);
        return 0;
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        std::cerr << json{{"error", e.what()}}.dump() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << json{{"error", e.what()}}.dump() << "\n";
        return 1;
    }
}
