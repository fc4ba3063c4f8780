#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "tcyolo/autodiff.hpp"

namespace tcyolo {

// ---------------------------------------------------------------------------
// Extent arithmetic shared by convolution, pooling and shape inference.

/// Output extent of a sliding window: floor((h + 2p - f_eff) / s) + 1 with
/// f_eff = dilation * (f - 1) + 1. May be < 1 for invalid configurations.
constexpr Index window_output_extent(Index h, Index kernel, Index stride, Index padding,
                                     Index dilation = 1) {
  const Index effective = dilation * (kernel - 1) + 1;
  const Index span = h + 2 * padding - effective;
  if (span < 0) return 0;
  return span / stride + 1;
}

struct Conv2dOptions {
  Index stride = 1;
  Index padding = 0;
  Index dilation = 1;
};

enum class ActivationKind { identity, mish, leaky_relu, sigmoid, relu };

struct Activation {
  ActivationKind kind = ActivationKind::identity;
  double slope = 0.1;  // leaky_relu only
};

/// Parses "mish", "leaky_relu"/"leaky", "sigmoid", "relu", "identity"/"linear".
Activation parse_activation(std::string_view name);
std::string activation_name(const Activation& a);

enum class NormMode { train, infer };

struct BatchNormOptions {
  NormMode mode = NormMode::train;
  double epsilon = 1e-5;
  double momentum = 0.03;
};

// ---------------------------------------------------------------------------
// Scalar activation functions, usable outside the tape.

template <typename Scalar>
Scalar softplus(Scalar x);
template <typename Scalar>
Scalar apply_activation(const Activation& a, Scalar x);
template <typename Scalar>
Scalar activation_derivative(const Activation& a, Scalar x);

// ---------------------------------------------------------------------------
// Differentiable operators. All take and return tape values; none broadcast.

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& input, const Var<Scalar>& weight, const Var<Scalar>* bias,
                   const Conv2dOptions& options);

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& input, const Var<Scalar>& weight,
                   const Conv2dOptions& options) {
  return conv2d<Scalar>(input, weight, nullptr, options);
}

template <typename Scalar>
Var<Scalar> activation(const Var<Scalar>& input, const Activation& kind);

/// Per-channel normalization. In train mode `running_mean`/`running_var` are
/// updated by exponential moving average; in infer mode they are read.
template <typename Scalar>
Var<Scalar> batchnorm(const Var<Scalar>& input, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                      Tensor<Scalar>& running_mean, Tensor<Scalar>& running_var,
                      const BatchNormOptions& options);

/// Max pooling with implicit -inf padding; gradient goes to the first maximal
/// element in row-major window order.
template <typename Scalar>
Var<Scalar> maxpool2d(const Var<Scalar>& input, Index kernel, Index stride, Index padding);

template <typename Scalar>
Var<Scalar> global_avgpool(const Var<Scalar>& input);

template <typename Scalar>
Var<Scalar> resize_nearest(const Var<Scalar>& input, Index height, Index width);

template <typename Scalar>
Var<Scalar> concat_channels(std::span<const Var<Scalar>> inputs);

template <typename Scalar>
Var<Scalar> concat_channels(std::initializer_list<Var<Scalar>> inputs) {
  std::vector<Var<Scalar>> v(inputs);
  return concat_channels<Scalar>(std::span<const Var<Scalar>>(v));
}

template <typename Scalar>
Var<Scalar> slice_channels(const Var<Scalar>& input, Index begin, Index count);

/// Every second row/column starting at (row_offset, col_offset), each in {0,1}.
template <typename Scalar>
Var<Scalar> stride2_slice(const Var<Scalar>& input, Index row_offset, Index col_offset);

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b);

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar factor);

/// Elementwise product with a constant tensor of the same shape.
template <typename Scalar>
Var<Scalar> weighted_sum(const Var<Scalar>& a, const Tensor<Scalar>& weights);

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a);

}  // namespace tcyolo
