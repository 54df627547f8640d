// Copyright 2026 The FedDAT Simulator Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <vector>

#include "feddat/autodiff/tensor.hpp"

// Closed op set of the engine. Every op validates shapes, rejects non-finite
// outputs and records a backward closure when a tape is active and at least
// one input requires gradients. Matrix ops act on the last two dimensions with
// an optional leading batch dimension.
namespace feddat::ad {

/// [m,k]x[k,n], [B,m,k]x[k,n] or [B,m,k]x[B,k,n].
Tensor matmul(const Tensor& a, const Tensor& b);

/// Swaps the last two dimensions.
Tensor transpose(const Tensor& a);

/// Elementwise sum. `b` may also match a trailing suffix of `a`'s shape, in
/// which case it is broadcast over the leading dimensions.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
/// Elementwise product of equal shapes.
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

Tensor relu(const Tensor& a);
/// tanh approximation.
Tensor gelu(const Tensor& a);

/// Along the last dimension, with max subtraction.
Tensor softmax(const Tensor& z);
Tensor log_softmax(const Tensor& z);

inline constexpr double kLayerNormEps = 1e-5;
/// Normalizes each row of the last dimension, then applies gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = kLayerNormEps);

/// Gathers rows of a [V,d] table; result is [ids.size(), d].
Tensor embedding(const Tensor& table, std::span<const int> ids);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);
Tensor reshape(const Tensor& a, Shape shape);

/// Mean over one axis; the axis is removed from the shape.
Tensor mean(const Tensor& a, std::size_t axis);
/// Scalar mean / sum of all elements.
Tensor mean(const Tensor& a);
Tensor sum(const Tensor& a);

}  // namespace feddat::ad
