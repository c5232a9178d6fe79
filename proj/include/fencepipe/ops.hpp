#pragma once

#include "fencepipe/tensor.hpp"

namespace fencepipe {

enum class Padding { same, valid };
enum class Activation { none, relu };
enum class ProbabilityMap { sigmoid, softmax };

inline constexpr double kLogClamp = 1e-12;

/// 3x3 convolution over an [H, W, K] map with weights [3, 3, K, L] indexed
/// (row offset, column offset, in channel, out channel) and bias [L].
/// same: zero-filled border, output [H, W, L]; valid: output [H-2, W-2, L].
Tensor conv2d(const Tensor& input, const Tensor& weights, const Tensor& bias,
              Padding padding = Padding::same, Activation activation = Activation::relu);

/// Per-pixel channel mixing with weights [1, 1, K, L].
Tensor conv1x1(const Tensor& input, const Tensor& weights, const Tensor& bias);

/// 2x2 stride-2 max pooling. Ties route the gradient to the first window
/// cell in scan order.
Tensor maxpool2(const Tensor& input);

/// 2x2 stride-2 transposed convolution: each input pixel writes its own
/// 2x2 output block, out[2y+i, 2x+j, l] = sum_k w[i, j, k, l] * in[y, x, k] + b[l].
Tensor upconv2(const Tensor& input, const Tensor& weights, const Tensor& bias,
               Activation activation = Activation::none);

/// Channels of `a` followed by channels of `b`.
Tensor concat_channels(const Tensor& a, const Tensor& b);

/// Central [height, width] window of an [H, W, K] map.
Tensor center_crop(const Tensor& input, std::size_t height, std::size_t width);

/// input [N] times weights [N, M] plus bias [M].
Tensor dense(const Tensor& input, const Tensor& weights, const Tensor& bias,
             Activation activation = Activation::none);

Tensor flatten(const Tensor& input);
Tensor relu(const Tensor& input);
Tensor global_avg_pool(const Tensor& input);

/// Sigmoid elementwise, or softmax over the last dimension.
Tensor activate(const Tensor& input, ProbabilityMap kind);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor square(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// -sum(target * log(max(pred, 1e-12))).
Tensor cross_entropy_loss(const Tensor& pred, const Tensor& target);

/// Mean over elements of -(t log p + (1 - t) log(1 - p)), both logs clamped.
Tensor binary_cross_entropy(const Tensor& pred, const Tensor& target);

/// -(2 sum(p g) + smooth) / (sum(p) + sum(g) + smooth), in [-1, 0].
Tensor soft_dice_loss(const Tensor& pred, const Tensor& target, double smooth = 1.0);

/// mean((pred - target)^2).
Tensor mse_loss(const Tensor& pred, const Tensor& target);

}  // namespace fencepipe
