#pragma once

#include <cstdint>
#include <span>

#include "rdc/tape.hpp"

namespace rdc {

// Naming follows "conv IN-OUT": in_channels -> out_channels.
struct Conv2dSpec {
  std::int64_t in_channels = 1;
  std::int64_t out_channels = 1;
  std::int64_t kernel_size = 1;  // odd
  std::int64_t stride = 1;
  std::int64_t padding = 0;

  // Stride 1 with pad (k-1)/2: output extent equals input extent.
  static Conv2dSpec same(std::int64_t in, std::int64_t out, std::int64_t kernel) {
    return {in, out, kernel, 1, (kernel - 1) / 2};
  }

  void validate() const;
  // floor((in + 2*padding - kernel)/stride) + 1; throws ContractError if < 1.
  std::int64_t output_extent(std::int64_t in) const;
  Shape weight_shape() const { return {out_channels, in_channels, kernel_size, kernel_size}; }
  Shape bias_shape() const { return {out_channels}; }
  std::int64_t parameter_count() const {
    return out_channels * in_channels * kernel_size * kernel_size + out_channels;
  }

  bool operator==(const Conv2dSpec&) const = default;
};

struct LinearSpec {
  std::int64_t in_features = 1;
  std::int64_t out_features = 1;

  void validate() const;
  Shape weight_shape() const { return {out_features, in_features}; }
  Shape bias_shape() const { return {out_features}; }
  std::int64_t parameter_count() const { return out_features * in_features + out_features; }

  bool operator==(const LinearSpec&) const = default;
};

// Cross-correlation plus bias. input [N,C,H,W], weight [O,C,k,k], bias [O].
Var conv2d(Var input, Var weight, Var bias, const Conv2dSpec& spec);

// 2x2 window, stride 2. Backward routes to the first maximum in row-major
// window order.
Var maxpool2d(Var input);

// max(0, x); the gradient at exactly 0 is 0.
Var relu(Var input);

// input [N,F] -> input * weight^T + bias.
Var linear(Var input, Var weight, Var bias, const LinearSpec& spec);

// Batch-mean of -log softmax(logits)[label], max-subtracted. Returns shape [1].
Var softmax_cross_entropy(Var logits, std::span<const int> labels);

Var residual_add(Var image, Var residual);

// [N, ...] -> [N, prod(...)]
Var flatten(Var input);

Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var input, real factor);
Var sum(Var input);

// Half-pixel (align_corners = false) bilinear resize of square images
// [N,C,H,H] -> [N,C,target,target]. Returns an exact copy when target == H.
// Not differentiable; used on the data path only.
Tensor resize_bilinear(const Tensor& image, std::int64_t target);

}  // namespace rdc
