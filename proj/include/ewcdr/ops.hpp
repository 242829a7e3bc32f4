#pragma once

#include <cstddef>
#include <vector>

#include "ewcdr/autograd.hpp"

// Differentiable ops. Tensors follow the row convention of Tensor: the last
// axis is the feature/channel axis, the rest are flattened into rows. Images
// are NHWC.
namespace ewcdr::ag {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var reshape(const Var& a, Shape shape);

Var sum(const Var& a);
Var mean(const Var& a);

// x[..., K] * w[K, N] (+ b[N]) -> [..., N]
Var matmul(const Var& x, const Var& w);
Var linear(const Var& x, const Var& w, const Var& b);
// Per-class affine rows: rows [C, K+1] holds weight row and bias per class.
// x [B, K] -> [B, C]
Var linear_rows(const Var& x, const Var& rows);

Var gelu(const Var& x);
Var silu(const Var& x);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

// Prepends a class token to every image's patch tokens and adds positions.
// patches: [B*N, D], cls: [1, D], pos: [N+1, D] -> [B*(N+1), D]
Var assemble_tokens(const Var& patches, const Var& cls, const Var& pos, std::size_t batch);
// Row b*stride of x for every b -> [rows/stride, D]
Var take_strided_rows(const Var& x, std::size_t stride);

// Multi-head self-attention core on packed projections.
// qkv: [B*T, 3D] laid out as [q | k | v]; returns softmax(qk^T/sqrt(dh)) v as [B*T, D].
Var attention(const Var& qkv, std::size_t batch, std::size_t tokens, std::size_t heads);

// Mean softmax cross-entropy over rows; labels index columns.
Var softmax_cross_entropy(const Var& logits, const std::vector<int>& labels);
// Mean binary cross-entropy with logits over every element.
Var sigmoid_binary_cross_entropy(const Var& logits, const Tensor& targets);
// Mean of (pred - target)^2 over every element.
Var mean_squared_error(const Var& pred, const Tensor& target);

// 3x3 convolution, stride 1, zero padding 1. x: [B,H,W,C], w: [9*C, O], b: [O].
Var conv3x3(const Var& x, const Var& w, const Var& b);
Var avg_pool2(const Var& x);
Var upsample2(const Var& x);
Var concat_channels(const Var& a, const Var& b);
// h * (1 + scale) + shift, with scale/shift per image and channel.
// h: [B,H,W,C], scale_shift: [B, 2C] laid out as [scale | shift].
Var film(const Var& h, const Var& scale_shift);
// Rows of table [V, E] selected by ids -> [ids.size(), E]
Var embedding(const Var& table, const std::vector<int>& ids);

}  // namespace ewcdr::ag
