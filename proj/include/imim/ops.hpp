#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "imim/tensor.hpp"

// Differentiable operations. Every function records a backward rule when
// graph recording is enabled and at least one input requires a gradient.
namespace imim::ops {

// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
// x[rows,in] * w[in,out] + bias[out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);
// 2-D transpose; materializes.
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// Adds a vector of length shape.back() to every row of x.
Tensor add_rowwise(const Tensor& x, const Tensor& row);

// Max-subtracted softmax along `axis` (negative counts from the back).
Tensor softmax(const Tensor& x, int axis = -1);
// Normalizes over the last axis; variance is biased, eps added to it.
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
// Exact (erf) GELU.
Tensor gelu(const Tensor& x);

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);

// out[i] = x[index[i]]
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index);
// out[index[i]] = x[i], zeros elsewhere. Indices must be distinct.
Tensor scatter_rows(const Tensor& x, std::span<const std::size_t> index, std::size_t n_rows);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// sum_i weight[i] * (pred[i] - target[i])^2 as a scalar; weight is a constant.
Tensor weighted_sse(const Tensor& pred, const Tensor& target, std::span<const double> weight);

}  // namespace imim::ops
