#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "ppbench/tensor.hpp"

// Differentiable operations. All take and return Tensor handles; a result
// records a backward closure only when at least one input is tracked.
namespace ppb::ops {

// Elementwise binary ops. `b` must have the same shape as `a`, be a scalar,
// or have a shape equal to a trailing suffix of `a`'s shape (broadcast over
// the leading dims).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);

// Subgradient 0 at the kink for relu and abs.
Tensor relu(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_dim(const Tensor& a, std::size_t dim);

/// [m,k]x[k,n] -> [m,n], or batched [b,m,k]x[b,k,n] -> [b,m,n].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor eye(std::size_t n);

Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm);
Tensor transpose(const Tensor& a, std::size_t d0, std::size_t d1);
Tensor slice(const Tensor& a, std::size_t dim, std::size_t start, std::size_t length);

/// Cross-correlation. input [B,C,H,W], kernel [C',C,kh,kw], optional bias [C'].
/// Output spatial size floor((H + 2*padding - kh)/stride) + 1.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride,
              std::size_t padding);

/// Non-overlapping-or-strided max pooling over [B,C,H,W]; first maximum wins ties.
Tensor max_pool2d(const Tensor& input, std::size_t kernel, std::size_t stride);

struct SpatialMax {
  Tensor values;                    // [B,C]
  std::vector<std::size_t> argmax;  // B*C flat indices into H*W, lowest row-major index on ties
};
/// Global max over the spatial dims of [B,C,H,W].
SpatialMax spatial_max(const Tensor& input);

/// Inner product of every spatial unit of z [B,D,H,W] with every row of
/// protos [M,D]; result [B,M,H,W].
Tensor channel_inner_product(const Tensor& z, const Tensor& protos);

/// x / max(||x||_2, eps) along `dim`.
Tensor l2_normalize(const Tensor& a, std::size_t dim, double eps = 1e-8);
Tensor cosine_similarity(const Tensor& a, const Tensor& b, std::size_t dim, double eps = 1e-8);

Tensor softmax(const Tensor& a, std::size_t dim);
Tensor log_softmax(const Tensor& a, std::size_t dim);
/// Mean cross-entropy of logits [B,K] against integer labels.
Tensor cross_entropy_logits(const Tensor& logits, std::span<const int> labels);

/// Bilinear resize of [B,C,H,W] with half-pixel centres (align_corners = false),
/// source coordinates clamped at the border.
Tensor bilinear_resize(const Tensor& input, std::size_t out_h, std::size_t out_w);

/// Same values, cut from the graph.
Tensor detach(const Tensor& a);

/// Row-wise max of x [B,M] over the entries where mask[b*M + j] != 0 -> [B].
/// Every row must select at least one entry.
Tensor masked_max(const Tensor& x, std::span<const std::uint8_t> mask);

}  // namespace ppb::ops
