#ifndef STEER_OPS_HPP_
#define STEER_OPS_HPP_

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "steer/tensor.hpp"

// Differentiable operations. Tensors of rank > 2 are treated as a stack of
// rows over their last dimension wherever an op is row-wise.
namespace steer::ops {

// a[m x k] . b[k x p]
Tensor matmul(const Tensor& a, const Tensor& b);
// x[m x k] . w[k x p] + bias[p]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
// Adds row vector `row` to every row of x.
Tensor add_row(const Tensor& x, const Tensor& row);

// tanh-approximated GELU.
Tensor gelu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor square(const Tensor& x);

inline constexpr double kLayerNormEps = 1e-5;
// Population-variance layer norm over the last dimension.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);

// Row-wise softmax. mask[r*d+c] == true keeps entry c of row r; masked
// entries come out exactly zero. Throws InvalidMaskError on an all-masked row.
Tensor softmax(const Tensor& x, std::optional<std::span<const bool>> mask = {});
Tensor log_softmax(const Tensor& x);

struct AttentionOutput {
  Tensor out;  // [batch*tokens x d]
  // [batch x heads x tokens x tokens] weights, filled only when requested.
  std::vector<double> weights;
};

// Scaled dot-product attention core over `heads` equal slices of the model
// width. q, k, v are [batch*tokens x d] with tokens of one sample contiguous.
// When causal, token j attends to tokens 0..j only.
AttentionOutput attention(const Tensor& q, const Tensor& k, const Tensor& v,
                          std::size_t batch, std::size_t tokens,
                          std::size_t heads, bool causal,
                          bool keep_weights = false);

// out row r = x row index[r]; backward scatter-adds.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index);
// Stacks 2-d tensors with equal column counts.
Tensor concat_rows(std::span<const Tensor> parts);
// [a | b] for 2-d tensors with equal row counts.
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor reshape(const Tensor& x, const Shape& shape);

// out[r] = x[r, index[r]]
Tensor pick(const Tensor& x, std::span<const std::size_t> index);
// out[r] = -sum_c exp(logp[r,c]) * logp[r,c]
Tensor row_entropy(const Tensor& logp);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Elementwise clamp to [lo, hi]; gradient passes where lo <= x <= hi.
Tensor clamp(const Tensor& x, double lo, double hi);
// Same with per-element bounds taken from constant tensors.
Tensor clamp(const Tensor& x, const Tensor& lo, const Tensor& hi);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);

}  // namespace steer::ops

#endif  // STEER_OPS_HPP_
