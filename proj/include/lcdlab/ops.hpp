#pragma once

#include <span>
#include <vector>

#include "lcdlab/tensor.hpp"

/// Differentiable tensor operations.
///
/// Every op validates shapes (throwing ShapeError naming the op and shapes)
/// and rejects non-finite outputs (NumericError). A graph node is recorded
/// when grad mode is on and any input requires grad.
///
/// Only `broadcast_add` and `broadcast_mul` broadcast. Their second operand
/// must either have the same rank as the first with some extents equal to 1,
/// or a lower rank matching the first operand's trailing extents.
namespace lcdlab::ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor add_scalar(const Tensor& a, float s);
Tensor broadcast_add(const Tensor& a, const Tensor& b);
Tensor broadcast_mul(const Tensor& a, const Tensor& b);

Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);
Tensor gelu(const Tensor& a);  // tanh approximation
Tensor silu(const Tensor& a);
Tensor softmax(const Tensor& a);  // over the last axis

/// Plain 2-D matrix product [M,K] x [K,N].
Tensor matmul(const Tensor& a, const Tensor& b);
/// x[..., in] * W[out, in]^T + b[out]; `bias` may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
/// Normalizes over the last axis; `gain` and `bias` ([D]) may be undefined.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps = 1e-6F);
/// softmax(q k^T / sqrt(dh)) v for q, k, v of shape [B, H, L, dh].
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor reshape(const Tensor& a, const Shape& shape);
Tensor permute(const Tensor& a, const std::vector<int>& dims);
Tensor transpose(const Tensor& a, int dim0, int dim1);
/// Slice [start, start + length) along `axis`.
Tensor narrow(const Tensor& a, int axis, std::int64_t start, std::int64_t length);
Tensor concat(const std::vector<Tensor>& parts, int axis);
/// Rows of `table` [N, D] selected by `indices` -> [len(indices), D].
Tensor embedding(const Tensor& table, std::span<const int> indices);

}  // namespace lcdlab::ops
