#pragma once

#include <span>
#include <vector>

#include "sgma/tensor.hpp"

namespace sgma {

enum class Pointwise { sigmoid, relu };

// Elementwise arithmetic on equally shaped tensors.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

/// Sum of a list of equally shaped tensors, accumulated in list order.
Tensor add_n(std::span<const Tensor> terms);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Sum of elementwise products with a constant weight tensor; handy for probes.
Tensor weighted_sum(const Tensor& a, const Tensor& weights);

/// [N,K] x [K,M] -> [N,M]
Tensor matmul(const Tensor& a, const Tensor& b);

/// y = x W^T + b with W: [D_out, D_in]. `bias` may be undefined for a bias-free layer.
Tensor fully_connected(const Tensor& input, const Tensor& weight, const Tensor& bias);
Tensor fully_connected(const Tensor& input, const Tensor& weight);

Tensor apply_pointwise(Pointwise kind, const Tensor& input);
inline Tensor sigmoid(const Tensor& x) { return apply_pointwise(Pointwise::sigmoid, x); }
inline Tensor relu(const Tensor& x) { return apply_pointwise(Pointwise::relu, x); }

/// Cross-correlation of [N,C_in,H,W] with [C_out,C_in,kH,kW] (no bias).
Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding);
/// Adds bias[c] to every position of channel c of an [N,C,H,W] tensor.
Tensor add_channel_bias(const Tensor& input, const Tensor& bias);

/// 2x2 average downsampling with stride 2 (odd trailing rows/cols dropped).
Tensor avg_pool2(const Tensor& input);
/// [N,C,H,W] -> [N,C], mean over the spatial extent.
Tensor global_avg_pool(const Tensor& input);

/// Align-corners bilinear resampling of [N,C,H,W] to [N,C,out_h,out_w].
Tensor bilinear_resize(const Tensor& input, int out_h, int out_w);

/// Each row of [N,D] divided by max(||row||_2, eps).
Tensor l2_normalize(const Tensor& input, double eps = 1e-12);

Tensor reshape(const Tensor& input, Shape shape);

/// Mean squared error against a constant target of identical shape.
Tensor mse(const Tensor& prediction, const Tensor& target);

/// Mean binary cross-entropy of probabilities in (0,1) against constant targets.
Tensor binary_cross_entropy(const Tensor& probs, const Tensor& targets);

/// Mean over rows of -log softmax(logits)[label], max-subtracted for stability.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

/// y[n,d] = x[n,d] * scale[d] + offset[d]
Tensor column_affine(const Tensor& input, std::span<const double> scale, std::span<const double> offset);

/// Column slice [N,D] -> [N,end-begin].
Tensor slice_columns(const Tensor& input, std::size_t begin, std::size_t end);

}  // namespace sgma
