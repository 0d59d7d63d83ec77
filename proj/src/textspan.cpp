#include "clipdecomp/textspan.hpp"

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

std::vector<double> widen(const Tensor& t) {
    return std::vector<double>(t.data.begin(), t.data.end());
}

double row_dot(const std::vector<double>& m, std::size_t r1, const std::vector<double>& n,
               std::size_t r2, std::size_t d) {
    double acc = 0.0;
    for (std::size_t i = 0; i < d; ++i) acc += m[r1 * d + i] * n[r2 * d + i];
    return acc;
}

// Population variance, two-pass.
double variance_of(const std::vector<double>& v) {
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    return var / static_cast<double>(v.size());
}

// Modified Gram-Schmidt with a second pass, in f64; rows below tol of the
// largest input norm are dropped.
std::vector<std::vector<double>> orthonormal_rows_f64(const std::vector<double>& rows,
                                                      std::size_t k, std::size_t d, double tol) {
    double max_norm = 0.0;
    for (std::size_t r = 0; r < k; ++r) {
        max_norm = std::max(max_norm, std::sqrt(row_dot(rows, r, rows, r, d)));
    }
    std::vector<std::vector<double>> basis;
    if (max_norm == 0.0) return basis;
    const double threshold = std::max(tol, 1e-12) * max_norm;

    for (std::size_t r = 0; r < k && basis.size() < d; ++r) {
        std::vector<double> v(rows.begin() + r * d, rows.begin() + (r + 1) * d);
        for (int pass = 0; pass < 2; ++pass) {
            for (const auto& b : basis) {
                double proj = 0.0;
                for (std::size_t i = 0; i < d; ++i) proj += v[i] * b[i];
                for (std::size_t i = 0; i < d; ++i) v[i] -= proj * b[i];
            }
        }
        double nrm = 0.0;
        for (double x : v) nrm += x * x;
        nrm = std::sqrt(nrm);
        if (nrm < threshold) continue;
        for (double& x : v) x /= nrm;
        basis.push_back(std::move(v));
    }
    return basis;
}

}  // namespace

void TextEmbeddingBank::validate() const {
    if (embeddings.ndim() != 2) {
        throw ShapeError("text bank: embeddings must be 2-D, got " + embeddings.shape_str());
    }
    const std::size_t m = embeddings.shape[0];
    const std::size_t d = embeddings.shape[1];
    if (m < 1) throw ShapeError("text bank: need at least one candidate");
    if (descriptions.size() != m) {
        throw ShapeError("text bank: " + std::to_string(descriptions.size()) + " descriptions for " +
                         std::to_string(m) + " embedding rows");
    }
    for (std::size_t r = 0; r < m; ++r) {
        double sq = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double v = embeddings.data[r * d + i];
            sq += v * v;
        }
        if (sq == 0.0) {
            throw ShapeError("text bank: zero-norm embedding at row " + std::to_string(r));
        }
    }
    const bool known = std::any_of(std::begin(kBankProvenanceTags), std::end(kBankProvenanceTags),
                                   [&](const char* tag) { return provenance == tag; });
    if (!known) {
        throw FormatError("text bank: unknown provenance tag '" + provenance + "'");
    }
}

Tensor project_rows_to_span(const Tensor& rows, const Tensor& span_rows, double tol) {
    if (rows.ndim() != 2 || span_rows.ndim() != 2 || rows.shape[1] != span_rows.shape[1]) {
        throw ShapeError("projection: rows " + rows.shape_str() + " incompatible with span " +
                         span_rows.shape_str());
    }
    const std::size_t d = rows.shape[1];
    const auto basis =
        orthonormal_rows_f64(widen(span_rows), span_rows.shape[0], d, tol);

    Tensor out(rows.shape);
    std::vector<double> acc(d);
    for (std::size_t r = 0; r < rows.shape[0]; ++r) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (const auto& b : basis) {
            double proj = 0.0;
            for (std::size_t i = 0; i < d; ++i) {
                proj += static_cast<double>(rows.data[r * d + i]) * b[i];
            }
            for (std::size_t i = 0; i < d; ++i) acc[i] += proj * b[i];
        }
        for (std::size_t i = 0; i < d; ++i) out.data[r * d + i] = static_cast<float>(acc[i]);
    }
    return out;
}

HeadBasis textspan(const Tensor& c, const TextEmbeddingBank& bank, std::size_t m) {
    // Unlike the load-time check, zero rows are legal here: a candidate
    // orthogonal to the head span projects to zero and the retirement rule
    // drops it.
    if (bank.embeddings.ndim() != 2) {
        throw ShapeError("text bank: embeddings must be 2-D, got " + bank.embeddings.shape_str());
    }
    if (bank.descriptions.size() != bank.embeddings.shape[0]) {
        throw ShapeError("text bank: " + std::to_string(bank.descriptions.size()) +
                         " descriptions for " + std::to_string(bank.embeddings.shape[0]) +
                         " embedding rows");
    }
    if (c.ndim() != 2 || c.shape[1] != bank.embeddings.shape[1]) {
        throw ShapeError("head outputs " + c.shape_str() + " incompatible with bank " +
                         bank.embeddings.shape_str());
    }
    const std::size_t K = c.shape[0];
    const std::size_t d = c.shape[1];
    const std::size_t M = bank.embeddings.shape[0];
    if (K < 2) throw ShapeError("need at least 2 head outputs to rank by variance");
    if (m > M) {
        throw std::invalid_argument("requested " + std::to_string(m) + " selections from " +
                                    std::to_string(M) + " candidates");
    }

    std::vector<double> R = widen(bank.embeddings);  // residual candidates
    std::vector<double> C = widen(c);                // residual head outputs

    double initial_max = 0.0;
    for (std::size_t j = 0; j < M; ++j) {
        initial_max = std::max(initial_max, std::sqrt(row_dot(R, j, R, j, d)));
    }
    // An all-zero pool retires everything immediately.
    const double retire_below =
        initial_max > 0.0 ? 1e-8 * initial_max : std::numeric_limits<double>::infinity();

    HeadBasis basis;
    basis.provenance = bank.provenance;
    std::vector<std::vector<double>> components;

    std::vector<double> dots(K);
    for (std::size_t step = 0; step < m; ++step) {
        std::size_t best = M;
        double best_var = -1.0;
        double best_norm_sq = 0.0;
        for (std::size_t j = 0; j < M; ++j) {
            const double norm_sq = row_dot(R, j, R, j, d);
            if (std::sqrt(norm_sq) < retire_below) continue;
            for (std::size_t k = 0; k < K; ++k) dots[k] = row_dot(R, j, C, k, d);
            const double var = variance_of(dots);
            if (var > best_var) {
                best_var = var;
                best = j;
                best_norm_sq = norm_sq;
            }
        }
        if (best == M) {
            basis.truncated = true;
            break;
        }

        std::vector<double> u(R.begin() + best * d, R.begin() + (best + 1) * d);
        const double inv_norm = 1.0 / std::sqrt(best_norm_sq);
        for (double& x : u) x *= inv_norm;

        basis.selected.push_back(best);
        basis.descriptions.push_back(bank.descriptions[best]);
        basis.step_variance.push_back(best_var / best_norm_sq);
        components.push_back(u);

        // Deflate both pools along the chosen direction.
        for (std::size_t k = 0; k < K; ++k) {
            double proj = 0.0;
            for (std::size_t i = 0; i < d; ++i) proj += C[k * d + i] * u[i];
            for (std::size_t i = 0; i < d; ++i) C[k * d + i] -= proj * u[i];
        }
        for (std::size_t j = 0; j < M; ++j) {
            double proj = 0.0;
            for (std::size_t i = 0; i < d; ++i) proj += R[j * d + i] * u[i];
            for (std::size_t i = 0; i < d; ++i) R[j * d + i] -= proj * u[i];
        }
    }

    basis.components = Tensor({components.size(), d});
    for (std::size_t s = 0; s < components.size(); ++s) {
        for (std::size_t i = 0; i < d; ++i) {
            basis.components.data[s * d + i] = static_cast<float>(components[s][i]);
        }
    }

    // Total variance of the head outputs as given.
    std::vector<double> mean(d, 0.0);
    for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t i = 0; i < d; ++i) mean[i] += c.data[k * d + i];
    }
    for (double& x : mean) x /= static_cast<double>(K);
    double total = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t i = 0; i < d; ++i) {
            const double dev = c.data[k * d + i] - mean[i];
            total += dev * dev;
        }
    }
    basis.total_variance = total / static_cast<double>(K);
    return basis;
}

HeadBasis truncate_basis(const HeadBasis& basis, std::size_t m) {
    if (m >= basis.selected.size()) return basis;
    HeadBasis out;
    out.layer = basis.layer;
    out.head = basis.head;
    out.provenance = basis.provenance;
    out.total_variance = basis.total_variance;
    out.truncated = false;
    out.selected.assign(basis.selected.begin(), basis.selected.begin() + m);
    out.descriptions.assign(basis.descriptions.begin(), basis.descriptions.begin() + m);
    out.step_variance.assign(basis.step_variance.begin(), basis.step_variance.begin() + m);
    const std::size_t d = basis.components.shape[1];
    out.components = Tensor({m, d});
    std::copy(basis.components.data.begin(), basis.components.data.begin() + m * d,
              out.components.data.begin());
    return out;
}

double explained_variance(const Tensor& c, const HeadBasis& basis) {
    if (c.ndim() != 2) throw ShapeError("head outputs must be 2-D, got " + c.shape_str());
    const std::size_t K = c.shape[0];
    const std::size_t d = c.shape[1];
    if (K < 2) throw ShapeError("need at least 2 head outputs");
    if (basis.components.numel() == 0) return 0.0;
    if (basis.components.shape[1] != d) {
        throw ShapeError("basis components " + basis.components.shape_str() +
                         " incompatible with head outputs " + c.shape_str());
    }

    const auto ortho =
        orthonormal_rows_f64(widen(basis.components), basis.components.shape[0], d, 1e-10);

    std::vector<double> mean(d, 0.0);
    for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t i = 0; i < d; ++i) mean[i] += c.data[k * d + i];
    }
    for (double& x : mean) x /= static_cast<double>(K);

    double acc = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
        for (const auto& b : ortho) {
            double proj = 0.0;
            for (std::size_t i = 0; i < d; ++i) {
                proj += (static_cast<double>(c.data[k * d + i]) - mean[i]) * b[i];
            }
            acc += proj * proj;
        }
    }
    return acc / static_cast<double>(K);
}

Tensor project_contribution(const Tensor& c_head, const HeadBasis& basis) {
    if (basis.components.numel() == 0) {
        throw std::invalid_argument("cannot project onto an empty basis");
    }
    const std::size_t d = basis.components.shape[1];
    if (c_head.ndim() != 1 || c_head.shape[0] != d) {
        throw ShapeError("contribution " + c_head.shape_str() + " incompatible with basis " +
                         basis.components.shape_str());
    }
    const auto ortho =
        orthonormal_rows_f64(widen(basis.components), basis.components.shape[0], d, 1e-10);
    std::vector<double> acc(d, 0.0);
    for (const auto& b : ortho) {
        double proj = 0.0;
        for (std::size_t i = 0; i < d; ++i) proj += static_cast<double>(c_head.data[i]) * b[i];
        for (std::size_t i = 0; i < d; ++i) acc[i] += proj * b[i];
    }
    Tensor out({d});
    for (std::size_t i = 0; i < d; ++i) out.data[i] = static_cast<float>(acc[i]);
    return out;
}

TextEmbeddingBank load_text_bank(const std::string& jsonl_path) {
    std::ifstream f(jsonl_path);
    if (!f) throw FormatError(jsonl_path + ": cannot open");

    TextEmbeddingBank bank;
    std::string line;
    std::size_t index = 0;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::exception& e) {
            throw FormatError(jsonl_path + ":" + std::to_string(index + 1) + ": " + e.what());
        }
        try {
            if (rec.at("index").get<std::size_t>() != index) {
                throw FormatError(jsonl_path + ":" + std::to_string(index + 1) +
                                  ": index out of order");
            }
            bank.descriptions.push_back(rec.at("description").get<std::string>());
            const std::string prov = rec.at("provenance").get<std::string>();
            if (index == 0) {
                bank.provenance = prov;
            } else if (prov != bank.provenance) {
                throw FormatError(jsonl_path + ":" + std::to_string(index + 1) +
                                  ": mixed provenance tags in one bank");
            }
        } catch (const json::exception& e) {
            throw FormatError(jsonl_path + ":" + std::to_string(index + 1) + ": " + e.what());
        }
        ++index;
    }
    if (index == 0) throw FormatError(jsonl_path + ": empty bank");

    const Archive archive = load_archive(jsonl_path + ".nta");
    auto it = archive.find("embeddings");
    if (it == archive.end()) {
        throw FormatError(jsonl_path + ".nta: missing tensor 'embeddings'");
    }
    bank.embeddings = it->second.to_tensor();
    bank.validate();
    return bank;
}

void save_text_bank(const TextEmbeddingBank& bank, const std::string& jsonl_path) {
    bank.validate();
    std::ofstream f(jsonl_path, std::ios::trunc);
    if (!f) throw FormatError(jsonl_path + ": cannot open for writing");
    for (std::size_t i = 0; i < bank.descriptions.size(); ++i) {
        const json rec = {
            {"index", i},
            {"description", bank.descriptions[i]},
            {"provenance", bank.provenance},
        };
        f << rec.dump() << "\n";
    }
    Archive archive;
    archive["embeddings"] = ArchiveEntry::from_tensor(bank.embeddings);
    save_archive(archive, jsonl_path + ".nta");
}

void save_head_basis(const HeadBasis& basis, const std::string& json_path) {
    const json doc = {
        {"layer", basis.layer},
        {"head", basis.head},
        {"selected", basis.selected},
        {"descriptions", basis.descriptions},
        {"step_variance", basis.step_variance},
        {"total_variance", basis.total_variance},
        {"truncated", basis.truncated},
        {"provenance", basis.provenance},
    };
    std::ofstream f(json_path, std::ios::trunc);
    if (!f) throw FormatError(json_path + ": cannot open for writing");
    f << doc.dump(2) << "\n";

    Archive archive;
    archive["components"] = ArchiveEntry::from_tensor(basis.components);
    save_archive(archive, json_path + ".nta");
}

HeadBasis load_head_basis(const std::string& json_path) {
    std::ifstream f(json_path);
    if (!f) throw FormatError(json_path + ": cannot open");
    HeadBasis basis;
    try {
        const json doc = json::parse(f);
        basis.layer = doc.at("layer").get<std::size_t>();
        basis.head = doc.at("head").get<std::size_t>();
        basis.selected = doc.at("selected").get<std::vector<std::size_t>>();
        basis.descriptions = doc.at("descriptions").get<std::vector<std::string>>();
        basis.step_variance = doc.at("step_variance").get<std::vector<double>>();
        basis.total_variance = doc.at("total_variance").get<double>();
        basis.truncated = doc.at("truncated").get<bool>();
        basis.provenance = doc.value("provenance", "");
    } catch (const json::exception& e) {
        throw FormatError(json_path + ": " + e.what());
    }

    const Archive archive = load_archive(json_path + ".nta");
    auto it = archive.find("components");
    if (it == archive.end()) throw FormatError(json_path + ".nta: missing tensor 'components'");
    basis.components = it->second.to_tensor();
    if (basis.components.ndim() != 2 || basis.components.shape[0] != basis.selected.size()) {
        throw ShapeError(json_path + ": component count disagrees with selections");
    }
    return basis;
}

}  // namespace clipdecomp
