#include "clipdecomp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace clipdecomp {

namespace {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape_) : shape(std::move(shape_)) {
    data.assign(shape_product(shape), 0.0f);
}

Tensor::Tensor(std::vector<std::size_t> shape_, std::vector<float> values)
    : shape(std::move(shape_)), data(std::move(values)) {
    if (shape_product(shape) != data.size()) {
        throw ShapeError("tensor shape " + shape_str() + " does not match value count " +
                         std::to_string(data.size()));
    }
}

std::size_t Tensor::numel() const { return data.size(); }

std::size_t Tensor::dim(std::size_t i) const {
    if (i >= shape.size()) {
        throw ShapeError("dimension index " + std::to_string(i) + " out of range for shape " + shape_str());
    }
    return shape[i];
}

float& Tensor::at(std::size_t r, std::size_t c) {
    return data[r * shape[1] + c];
}

float Tensor::at(std::size_t r, std::size_t c) const {
    return data[r * shape[1] + c];
}

std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

std::string Tensor::shape_str() const { return clipdecomp::shape_str(shape); }

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2) {
        throw ShapeError("matmul needs 2-D operands, got " + a.shape_str() + " and " + b.shape_str());
    }
    const std::size_t m = a.shape[0], k = a.shape[1];
    const std::size_t k2 = b.shape[0], n = b.shape[1];
    if (k != k2) {
        throw ShapeError("matmul inner dimensions disagree: " + a.shape_str() + " x " + b.shape_str());
    }
    Tensor c({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const float* arow = a.data.data() + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t t = 0; t < k; ++t) {
                acc += static_cast<double>(arow[t]) * static_cast<double>(b.data[t * n + j]);
            }
            c.data[i * n + j] = static_cast<float>(acc);
        }
    }
    return c;
}

Tensor softmax_row(const Tensor& v) {
    if (v.numel() == 0) {
        throw ShapeError("softmax_row on empty input");
    }
    double maxv = -std::numeric_limits<double>::infinity();
    for (float x : v.data) maxv = std::max(maxv, static_cast<double>(x));
    std::vector<double> e(v.numel());
    double sum = 0.0;
    for (std::size_t i = 0; i < v.numel(); ++i) {
        e[i] = std::exp(static_cast<double>(v.data[i]) - maxv);
        sum += e[i];
    }
    Tensor out(v.shape);
    for (std::size_t i = 0; i < v.numel(); ++i) {
        out.data[i] = static_cast<float>(e[i] / sum);
    }
    return out;
}

float gelu_scalar(float x) {
    const double xd = x;
    const double k = 0.7978845608028654;  // sqrt(2/pi)
    const double inner = k * (xd + 0.044715 * xd * xd * xd);
    return static_cast<float>(0.5 * xd * (1.0 + std::tanh(inner)));
}

Tensor gelu(const Tensor& v) {
    Tensor out(v.shape);
    for (std::size_t i = 0; i < v.numel(); ++i) out.data[i] = gelu_scalar(v.data[i]);
    return out;
}

AffineLN layer_norm_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const std::size_t d = x.numel();
    if (d < 2) {
        throw ShapeError("layer_norm_affine needs at least 2 entries, got " + x.shape_str());
    }
    if (gamma.numel() != d || beta.numel() != d) {
        throw ShapeError("layer_norm_affine parameter shapes " + gamma.shape_str() + ", " +
                         beta.shape_str() + " do not match input " + x.shape_str());
    }
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) mean += x.data[i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        const double c = x.data[i] - mean;
        var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);

    AffineLN out;
    out.scale = Tensor(x.shape);
    out.bias = Tensor(x.shape);
    for (std::size_t i = 0; i < d; ++i) {
        const double a = gamma.data[i] * inv;
        out.scale.data[i] = static_cast<float>(a);
        out.bias.data[i] = static_cast<float>(beta.data[i] - mean * a);
    }
    return out;
}

Tensor orthonormal_basis(const Tensor& rows, double tol) {
    if (rows.ndim() != 2 || rows.shape[0] < 1) {
        throw ShapeError("orthonormal_basis needs a non-empty 2-D input, got " + rows.shape_str());
    }
    const std::size_t k = rows.shape[0], d = rows.shape[1];

    double max_norm = 0.0;
    for (std::size_t r = 0; r < k; ++r) {
        double n2 = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            const double v = rows.at(r, c);
            n2 += v * v;
        }
        max_norm = std::max(max_norm, std::sqrt(n2));
    }
    if (max_norm == 0.0) {
        return Tensor({0, d});
    }
    // Numerical floor: below ~1e-12 of the largest row a residual is rounding
    // noise even when the caller asked for tol = 0.
    const double thresh = std::max(tol, 1e-12) * max_norm;

    std::vector<std::vector<double>> basis;
    std::vector<double> v(d);
    for (std::size_t r = 0; r < k && basis.size() < std::min(k, d); ++r) {
        for (std::size_t c = 0; c < d; ++c) v[c] = rows.at(r, c);
        for (int pass = 0; pass < 2; ++pass) {
            for (const auto& b : basis) {
                double proj = 0.0;
                for (std::size_t c = 0; c < d; ++c) proj += v[c] * b[c];
                for (std::size_t c = 0; c < d; ++c) v[c] -= proj * b[c];
            }
        }
        double n2 = 0.0;
        for (std::size_t c = 0; c < d; ++c) n2 += v[c] * v[c];
        const double n = std::sqrt(n2);
        if (n >= thresh) {
            std::vector<double> b(d);
            for (std::size_t c = 0; c < d; ++c) b[c] = v[c] / n;
            basis.push_back(std::move(b));
        }
    }

    Tensor out({basis.size(), d});
    for (std::size_t r = 0; r < basis.size(); ++r) {
        for (std::size_t c = 0; c < d; ++c) out.at(r, c) = static_cast<float>(basis[r][c]);
    }
    return out;
}

double variance(const Tensor& v) {
    const std::size_t n = v.numel();
    if (n == 0) {
        throw ShapeError("variance of empty tensor");
    }
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += v.data[i];
    mean /= static_cast<double>(n);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double c = v.data[i] - mean;
        acc += c * c;
    }
    return acc / static_cast<double>(n);
}

double dot(const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel()) {
        throw ShapeError("dot size mismatch: " + a.shape_str() + " vs " + b.shape_str());
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        acc += static_cast<double>(a.data[i]) * static_cast<double>(b.data[i]);
    }
    return acc;
}

double norm2(const Tensor& v) { return std::sqrt(dot(v, v)); }

Tensor add(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("add shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
    }
    Tensor out(a.shape);
    for (std::size_t i = 0; i < a.numel(); ++i) {
        out.data[i] = static_cast<float>(static_cast<double>(a.data[i]) + static_cast<double>(b.data[i]));
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("sub shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
    }
    Tensor out(a.shape);
    for (std::size_t i = 0; i < a.numel(); ++i) {
        out.data[i] = static_cast<float>(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]));
    }
    return out;
}

Tensor scale(const Tensor& v, double s) {
    Tensor out(v.shape);
    for (std::size_t i = 0; i < v.numel(); ++i) {
        out.data[i] = static_cast<float>(static_cast<double>(v.data[i]) * s);
    }
    return out;
}

Tensor row(const Tensor& m, std::size_t r) {
    if (m.ndim() != 2 || r >= m.shape[0]) {
        throw IndexError("row " + std::to_string(r) + " out of range for " + m.shape_str());
    }
    Tensor out({m.shape[1]});
    const float* src = m.data.data() + r * m.shape[1];
    std::copy(src, src + m.shape[1], out.data.begin());
    return out;
}

void set_row(Tensor& m, std::size_t r, const Tensor& v) {
    if (m.ndim() != 2 || r >= m.shape[0] || v.numel() != m.shape[1]) {
        throw ShapeError("set_row: cannot place " + v.shape_str() + " at row " + std::to_string(r) +
                         " of " + m.shape_str());
    }
    std::copy(v.data.begin(), v.data.end(), m.data.begin() + r * m.shape[1]);
}

}  // namespace clipdecomp
