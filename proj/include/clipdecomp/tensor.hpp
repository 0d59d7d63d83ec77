#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "clipdecomp/errors.hpp"

namespace clipdecomp {

// Dense row-major array. Values are stored in f32; every kernel accumulates in
// f64 and reduces in a fixed index order, so results are bit-reproducible
// regardless of thread count.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape_);
    Tensor(std::vector<std::size_t> shape_, std::vector<float> values);

    std::size_t ndim() const { return shape.size(); }
    std::size_t numel() const;
    std::size_t dim(std::size_t i) const;

    // 2-D accessors; index math for higher ranks stays at the call site.
    float& at(std::size_t r, std::size_t c);
    float at(std::size_t r, std::size_t c) const;

    bool same_shape(const Tensor& other) const { return shape == other.shape; }
    std::string shape_str() const;
};

std::string shape_str(const std::vector<std::size_t>& shape);

// c[i][j] = sum_t a[i][t]*b[t][j], t ascending, f64 accumulation.
Tensor matmul(const Tensor& a, const Tensor& b);

// Stable softmax over a 1-D tensor (max subtraction; never overflows on finite input).
Tensor softmax_row(const Tensor& v);

// Elementwise tanh-approximation GELU.
Tensor gelu(const Tensor& v);

float gelu_scalar(float x);

// Layer norm rewritten as an elementwise affine map: LN(x) = scale*x + bias,
// with scale = gamma/sqrt(var+eps) and bias = beta - mean*scale. Population
// variance over the d entries.
struct AffineLN {
    Tensor scale;
    Tensor bias;
};
AffineLN layer_norm_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

// Orthonormal rows spanning the row space of the input (modified Gram-Schmidt
// with one re-orthogonalization pass). Rows whose residual norm falls below
// tol * (largest input row norm) are dropped; an all-zero input yields an
// empty (0 x d) basis. Deterministic for a fixed input.
Tensor orthonormal_basis(const Tensor& rows, double tol);

// Population variance (divide by k), f64 accumulation.
double variance(const Tensor& v);

// Small helpers shared across modules; all accumulate in f64.
double dot(const Tensor& a, const Tensor& b);
double norm2(const Tensor& v);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& v, double s);
Tensor row(const Tensor& m, std::size_t r);
void set_row(Tensor& m, std::size_t r, const Tensor& v);

}  // namespace clipdecomp
