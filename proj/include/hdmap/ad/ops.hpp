#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "hdmap/ad/tensor.hpp"

namespace hdmap::ad {

// Linear algebra. 2-D tensors are row-major [rows, cols].
Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k] x [k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k] x [n,k]^T
/// x W + b. Accepts x as [k] (returns [n]) or [m,k] (returns [m,n]).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Elementwise.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor abs(const Tensor& x);
/// out[r, c] = x[r, c] * col_scale[c] + col_shift[c] for a [m,k] input.
Tensor affine_cols(const Tensor& x, std::span<const double> col_scale,
                   std::span<const double> col_shift);

// Reductions.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor minimum(const Tensor& a, const Tensor& b);  // scalars
Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);
/// Zero mean, unit variance per row (no gain or bias).
Tensor layer_norm_rows(const Tensor& x, double eps = 1e-5);
/// Mean over rows of -log_softmax(logits)[row, target[row]].
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

// Shape manipulation.
Tensor reshape(const Tensor& x, Shape shape);
Tensor flatten(const Tensor& x);
/// Concatenates along axis 0; trailing dimensions must agree.
Tensor concat0(std::span<const Tensor> parts);
/// Stacks equal-shape tensors along a new leading axis.
Tensor stack(std::span<const Tensor> parts);
Tensor concat_cols(const Tensor& a, const Tensor& b);  // [m,a] ++ [m,b]
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
/// [d] or [1,d] -> [n,d].
Tensor repeat_rows(const Tensor& x, std::size_t n);
/// [n,c] -> [n*k,c], each row repeated k times consecutively.
Tensor repeat_each_row(const Tensor& x, std::size_t k);
/// [k,c] -> [n*k,c], the whole block repeated n times.
Tensor tile_rows(const Tensor& x, std::size_t n);
/// [n*k,c] -> [n,c], mean of each consecutive group of k rows.
Tensor group_mean_rows(const Tensor& x, std::size_t k);

// Spatial.
/// Zero-padded same-size cross-correlation. x [c_in,H,W], kernel
/// [c_out,c_in,k,k] with odd k, optional bias [c_out].
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias = {});
/// Align-corners bilinear resize of [c,h,w] to [c,rows,cols].
Tensor bilinear_upsample(const Tensor& x, std::size_t rows, std::size_t cols);

// Losses.
/// Mean binary cross-entropy on logits, in the stable
/// max(z,0) - z*t + log(1 + exp(-|z|)) form. Targets must lie in [0,1].
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

// Gradient control.
/// Same values, no gradient path.
Tensor detach(const Tensor& x);
/// Forward value of x*(1-c) + detach(x)*c, which equals x; the backward
/// pass scales the incoming gradient by (1-c).
Tensor gradient_weaken(const Tensor& x, double c);

}  // namespace hdmap::ad
