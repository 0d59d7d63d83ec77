#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "clipdecomp/applications.hpp"
#include "clipdecomp/archive.hpp"
#include "clipdecomp/decomposition.hpp"
#include "clipdecomp/errors.hpp"
#include "clipdecomp/image_io.hpp"
#include "clipdecomp/model.hpp"
#include "clipdecomp/support.hpp"
#include "clipdecomp/tensor.hpp"
#include "clipdecomp/textspan.hpp"

namespace py = pybind11;
using namespace clipdecomp;

namespace {

py::array_t<float> to_array(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
    py::array_t<float> arr(shape);
    std::copy(t.data.begin(), t.data.end(), arr.mutable_data());
    return arr;
}

Tensor from_array(const py::array& a) {
    const auto arr = py::array_t<float, py::array::c_style | py::array::forcecast>::ensure(a);
    if (!arr) throw ShapeError("expected a numeric array");
    Tensor t;
    t.shape.assign(arr.shape(), arr.shape() + arr.ndim());
    t.data.assign(arr.data(), arr.data() + arr.size());
    return t;
}

BoolMask mask_from_array(const py::array& a) {
    const auto arr = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>::ensure(a);
    if (!arr || arr.ndim() != 2) throw ShapeError("mask must be a 2-D array");
    BoolMask mask;
    mask.height = static_cast<std::size_t>(arr.shape(0));
    mask.width = static_cast<std::size_t>(arr.shape(1));
    mask.data.resize(mask.numel());
    for (std::size_t i = 0; i < mask.numel(); ++i) mask.data[i] = arr.data()[i] ? 1 : 0;
    return mask;
}

py::array_t<bool> mask_to_array(const BoolMask& m) {
    py::array_t<bool> arr({static_cast<py::ssize_t>(m.height), static_cast<py::ssize_t>(m.width)});
    for (std::size_t i = 0; i < m.numel(); ++i) arr.mutable_data()[i] = m.data[i] != 0;
    return arr;
}

py::array_t<float> heatmap_grid(const Heatmap& h) {
    py::array_t<float> arr(
        {static_cast<py::ssize_t>(h.grid_height), static_cast<py::ssize_t>(h.grid_width)});
    std::copy(h.grid.begin(), h.grid.end(), arr.mutable_data());
    return arr;
}

Heatmap heatmap_from(const py::array& grid, const std::string& image_id,
                     const std::string& source_id) {
    const Tensor t = from_array(grid);
    if (t.ndim() != 2) throw ShapeError("heatmap grid must be 2-D, got " + t.shape_str());
    Heatmap h;
    h.grid_height = t.shape[0];
    h.grid_width = t.shape[1];
    h.grid = t.data;
    h.image_id = image_id;
    h.source_id = source_id;
    return h;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "CLIP-ViT representation decomposition core";
    m.attr("__version__") = kVersion;

    py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
    py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
    py::register_exception<clipdecomp::IndexError>(m, "LedgerIndexError", PyExc_IndexError);

    py::class_<ViTConfig>(m, "ViTConfig")
        .def_readonly("num_layers", &ViTConfig::num_layers)
        .def_readonly("num_heads", &ViTConfig::num_heads)
        .def_readonly("width", &ViTConfig::width)
        .def_readonly("output_dim", &ViTConfig::output_dim)
        .def_readonly("patch_size", &ViTConfig::patch_size)
        .def_readonly("image_height", &ViTConfig::image_height)
        .def_readonly("image_width", &ViTConfig::image_width)
        .def_readonly("ln_eps", &ViTConfig::ln_eps)
        .def_property_readonly("num_tokens", &ViTConfig::num_tokens)
        .def_property_readonly("grid_height", &ViTConfig::grid_height)
        .def_property_readonly("grid_width", &ViTConfig::grid_width);

    py::class_<ViTModel>(m, "ViTModel").def_readonly("config", &ViTModel::config);

    m.def("load_model", &load_model, py::arg("path"));

    m.def(
        "reference_forward",
        [](const ViTModel& model, const py::array& pixels) {
            ImageInput image;
            image.pixels = from_array(pixels);
            return to_array(reference_forward(model, image));
        },
        py::arg("model"), py::arg("pixels"));

    py::class_<DecomposedRepresentation>(m, "DecomposedRepresentation")
        .def_readonly("num_tokens", &DecomposedRepresentation::num_tokens)
        .def_readonly("num_layers", &DecomposedRepresentation::num_layers)
        .def_readonly("num_heads", &DecomposedRepresentation::num_heads)
        .def_readonly("output_dim", &DecomposedRepresentation::output_dim)
        .def_readonly("grid_height", &DecomposedRepresentation::grid_height)
        .def_readonly("grid_width", &DecomposedRepresentation::grid_width)
        .def_readonly("image_id", &DecomposedRepresentation::image_id)
        .def_readonly("model_hash", &DecomposedRepresentation::model_hash)
        .def_readonly("ln_mu", &DecomposedRepresentation::ln_mu)
        .def_readonly("ln_sigma", &DecomposedRepresentation::ln_sigma)
        .def_property_readonly(
            "init_term", [](const DecomposedRepresentation& d) { return to_array(d.init_term); })
        .def_property_readonly(
            "mlp_terms", [](const DecomposedRepresentation& d) { return to_array(d.mlp_terms); })
        .def_property_readonly(
            "msa_terms", [](const DecomposedRepresentation& d) { return to_array(d.msa_terms); });

    m.def(
        "decompose_image",
        [](const ViTModel& model, const py::array& pixels, const std::string& image_id) {
            ImageInput image;
            image.pixels = from_array(pixels);
            return decompose_image(model, image, image_id);
        },
        py::arg("model"), py::arg("pixels"), py::arg("image_id") = "");

    m.def("reconstruct", [](const DecomposedRepresentation& d) { return to_array(reconstruct(d)); },
          py::arg("d"));
    m.def(
        "head_contribution",
        [](const DecomposedRepresentation& d, std::size_t layer, std::size_t head) {
            return to_array(head_contribution(d, layer, head));
        },
        py::arg("d"), py::arg("layer"), py::arg("head"));
    m.def(
        "token_contribution",
        [](const DecomposedRepresentation& d, std::size_t token) {
            return to_array(token_contribution(d, token));
        },
        py::arg("d"), py::arg("token"));
    m.def("save_decomposition", &save_decomposition, py::arg("d"), py::arg("path"));
    m.def("load_decomposition", &load_decomposition, py::arg("path"));

    py::class_<MeanBank>(m, "MeanBank")
        .def(py::init<>())
        .def_readonly("source_count", &MeanBank::source_count)
        .def_readonly("source_ids", &MeanBank::source_ids)
        .def_property_readonly("init_term", [](const MeanBank& b) { return to_array(b.init_term); })
        .def_property_readonly("mlp_terms", [](const MeanBank& b) { return to_array(b.mlp_terms); })
        .def_property_readonly("msa_terms", [](const MeanBank& b) { return to_array(b.msa_terms); });

    m.def("build_mean_bank", &build_mean_bank, py::arg("decomps"));
    m.def("save_mean_bank", &save_mean_bank, py::arg("bank"), py::arg("path"));
    m.def("load_mean_bank", &load_mean_bank, py::arg("path"));

    py::enum_<AblationMode>(m, "AblationMode")
        .value("mean", AblationMode::mean)
        .value("zero", AblationMode::zero);

    py::class_<AblationSpec>(m, "AblationSpec")
        .def(py::init<>())
        .def_readwrite("all_mlps", &AblationSpec::all_mlps)
        .def_readwrite("msa_prefix_layers", &AblationSpec::msa_prefix_layers)
        .def_readwrite("heads", &AblationSpec::heads)
        .def_readwrite("class_token_rows", &AblationSpec::class_token_rows)
        .def_readwrite("mode", &AblationSpec::mode)
        .def("empty", &AblationSpec::empty);

    m.def(
        "apply_ablation",
        [](const DecomposedRepresentation& d, const AblationSpec& spec, const MeanBank& bank) {
            return to_array(apply_ablation(d, spec, bank));
        },
        py::arg("d"), py::arg("spec"), py::arg("bank") = MeanBank{});
    m.def("apply_ablation_ledger", &apply_ablation_ledger, py::arg("d"), py::arg("spec"),
          py::arg("bank") = MeanBank{});

    py::class_<ClassBank>(m, "ClassBank")
        .def(py::init([](const std::vector<std::string>& names, const py::array& embeddings) {
                 ClassBank bank;
                 bank.names = names;
                 bank.embeddings = from_array(embeddings);
                 bank.validate();
                 return bank;
             }),
             py::arg("names"), py::arg("embeddings"))
        .def_readonly("names", &ClassBank::names)
        .def_property_readonly("embeddings",
                               [](const ClassBank& b) { return to_array(b.embeddings); });

    m.def(
        "zero_shot_classify",
        [](const py::array& rep, const ClassBank& bank) {
            return zero_shot_classify(from_array(rep), bank);
        },
        py::arg("rep"), py::arg("classes"));

    py::class_<TextEmbeddingBank>(m, "TextEmbeddingBank")
        .def(py::init([](const std::vector<std::string>& descriptions, const py::array& embeddings,
                         const std::string& provenance) {
                 TextEmbeddingBank bank;
                 bank.descriptions = descriptions;
                 bank.embeddings = from_array(embeddings);
                 bank.provenance = provenance;
                 return bank;
             }),
             py::arg("descriptions"), py::arg("embeddings"), py::arg("provenance"))
        .def_readonly("descriptions", &TextEmbeddingBank::descriptions)
        .def_readonly("provenance", &TextEmbeddingBank::provenance)
        .def_property_readonly("embeddings",
                               [](const TextEmbeddingBank& b) { return to_array(b.embeddings); })
        .def("validate", &TextEmbeddingBank::validate);

    m.def("load_text_bank", &load_text_bank, py::arg("path"));
    m.def("save_text_bank", &save_text_bank, py::arg("bank"), py::arg("path"));

    py::class_<HeadBasis>(m, "HeadBasis")
        .def_readonly("layer", &HeadBasis::layer)
        .def_readonly("head", &HeadBasis::head)
        .def_readonly("selected", &HeadBasis::selected)
        .def_readonly("descriptions", &HeadBasis::descriptions)
        .def_readonly("step_variance", &HeadBasis::step_variance)
        .def_readonly("total_variance", &HeadBasis::total_variance)
        .def_readonly("truncated", &HeadBasis::truncated)
        .def_readonly("provenance", &HeadBasis::provenance)
        .def_property_readonly("components",
                               [](const HeadBasis& b) { return to_array(b.components); });

    m.def(
        "project_rows_to_span",
        [](const py::array& rows, const py::array& span_rows, double tol) {
            return to_array(project_rows_to_span(from_array(rows), from_array(span_rows), tol));
        },
        py::arg("rows"), py::arg("span_rows"), py::arg("tol") = 1e-6);
    m.def(
        "textspan",
        [](const py::array& c, const TextEmbeddingBank& bank, std::size_t m) {
            return textspan(from_array(c), bank, m);
        },
        py::arg("c"), py::arg("bank"), py::arg("m"));
    m.def(
        "explained_variance",
        [](const py::array& c, const HeadBasis& basis) {
            return explained_variance(from_array(c), basis);
        },
        py::arg("c"), py::arg("basis"));
    m.def(
        "project_contribution",
        [](const py::array& c_head, const HeadBasis& basis) {
            return to_array(project_contribution(from_array(c_head), basis));
        },
        py::arg("c_head"), py::arg("basis"));
    m.def("truncate_basis", &truncate_basis, py::arg("basis"), py::arg("m"));
    m.def("save_head_basis", &save_head_basis, py::arg("basis"), py::arg("path"));
    m.def("load_head_basis", &load_head_basis, py::arg("path"));

    py::class_<Heatmap>(m, "Heatmap")
        .def(py::init(&heatmap_from), py::arg("grid"), py::arg("image_id") = "",
             py::arg("source_id") = "")
        .def_readonly("grid_height", &Heatmap::grid_height)
        .def_readonly("grid_width", &Heatmap::grid_width)
        .def_readonly("image_id", &Heatmap::image_id)
        .def_readonly("source_id", &Heatmap::source_id)
        .def_property_readonly("grid", &heatmap_grid);

    py::class_<BoolMask>(m, "BoolMask")
        .def(py::init(&mask_from_array), py::arg("array"))
        .def_readonly("height", &BoolMask::height)
        .def_readonly("width", &BoolMask::width)
        .def_property_readonly("array", &mask_to_array);

    py::class_<SegmentationMetrics>(m, "SegmentationMetrics")
        .def_readonly("pixel_accuracy", &SegmentationMetrics::pixel_accuracy)
        .def_readonly("miou", &SegmentationMetrics::miou)
        .def_readonly("map", &SegmentationMetrics::map);

    py::class_<RetrievalResult>(m, "RetrievalResult")
        .def_readonly("indices", &RetrievalResult::indices)
        .def_readonly("ids", &RetrievalResult::ids)
        .def_readonly("scores", &RetrievalResult::scores);

    py::class_<GroupStat>(m, "GroupStat")
        .def_readonly("group", &GroupStat::group)
        .def_readonly("correct", &GroupStat::correct)
        .def_readonly("total", &GroupStat::total)
        .def_readonly("accuracy", &GroupStat::accuracy);

    py::class_<WorstGroupResult>(m, "WorstGroupResult")
        .def_readonly("worst", &WorstGroupResult::worst)
        .def_readonly("per_group", &WorstGroupResult::per_group);

    m.def(
        "token_heatmap",
        [](const DecomposedRepresentation& d, const py::array& text_dir) {
            return token_heatmap(d, from_array(text_dir));
        },
        py::arg("d"), py::arg("text_dir"));
    m.def(
        "joint_heatmap",
        [](const DecomposedRepresentation& d, std::size_t layer, std::size_t head,
           const py::array& text_dir) { return joint_heatmap(d, layer, head, from_array(text_dir)); },
        py::arg("d"), py::arg("layer"), py::arg("head"), py::arg("text_dir"));
    m.def("bias_normalize", &bias_normalize, py::arg("h"), py::arg("class_heatmaps"));
    m.def(
        "binarize",
        [](const Heatmap& h, std::optional<double> threshold) { return binarize(h, threshold); },
        py::arg("h"), py::arg("threshold") = std::optional<double>());
    m.def(
        "upsample_nearest",
        [](const py::array& grid, std::size_t factor) {
            return to_array(upsample_nearest(from_array(grid), factor));
        },
        py::arg("grid"), py::arg("factor"));
    m.def(
        "upsample_bilinear",
        [](const py::array& grid, std::size_t factor) {
            return to_array(upsample_bilinear(from_array(grid), factor));
        },
        py::arg("grid"), py::arg("factor"));
    m.def("average_precision", &average_precision, py::arg("scores"), py::arg("labels"));
    m.def("seg_metrics", &seg_metrics, py::arg("scores"), py::arg("mask"), py::arg("gt"),
          py::arg("patch_upsample"), py::arg("bilinear_scores") = false);
    m.def("retrieve_by_head", &retrieve_by_head, py::arg("query"), py::arg("gallery"),
          py::arg("layer"), py::arg("head"), py::arg("k"));
    m.def("worst_group_accuracy", &worst_group_accuracy, py::arg("predictions"), py::arg("labels"),
          py::arg("groups"));

    m.def(
        "read_ppm",
        [](const std::string& path, std::size_t height, std::size_t width) {
            return to_array(read_ppm(path, height, width).pixels);
        },
        py::arg("path"), py::arg("height"), py::arg("width"));
    m.def(
        "write_pgm",
        [](const std::string& path, const py::array& grid) { write_pgm(path, from_array(grid)); },
        py::arg("path"), py::arg("grid"));

    m.def(
        "load_archive",
        [](const std::string& path) {
            const Archive archive = load_archive(path);
            py::dict out;
            for (const auto& [name, entry] : archive) {
                std::vector<py::ssize_t> shape(entry.dims.begin(), entry.dims.end());
                if (entry.dtype == DType::f32) {
                    py::array_t<float> arr(shape);
                    const Tensor t = entry.to_tensor();
                    std::copy(t.data.begin(), t.data.end(), arr.mutable_data());
                    out[py::str(name)] = arr;
                } else {
                    py::array_t<double> arr(shape);
                    const std::vector<double> v = entry.to_f64();
                    std::copy(v.begin(), v.end(), arr.mutable_data());
                    out[py::str(name)] = arr;
                }
            }
            return out;
        },
        py::arg("path"));
    m.def(
        "save_archive",
        [](const std::string& path, const py::dict& entries) {
            Archive archive;
            for (const auto& item : entries) {
                const std::string name = py::cast<std::string>(item.first);
                const py::array arr = py::cast<py::array>(py::reinterpret_borrow<py::object>(item.second));
                if (arr.dtype().kind() == 'f' && arr.dtype().itemsize() == 8) {
                    const auto a64 =
                        py::array_t<double, py::array::c_style | py::array::forcecast>::ensure(arr);
                    std::vector<std::size_t> dims(a64.shape(), a64.shape() + a64.ndim());
                    archive[name] = ArchiveEntry::from_f64(
                        dims, std::vector<double>(a64.data(), a64.data() + a64.size()));
                } else {
                    archive[name] = ArchiveEntry::from_tensor(from_array(arr));
                }
            }
            save_archive(archive, path);
        },
        py::arg("path"), py::arg("entries"));

    m.def("fnv1a64_file", [](const std::string& path) { return hex64(fnv1a64_file(path)); },
          py::arg("path"));
}
