// Copyright 2026 The FedDAT Simulator Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "feddat/autodiff/tensor.hpp"

namespace feddat::ad {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool passed = false;
};

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` must be deterministic and return a scalar. Each coordinate's error is
/// |analytic - numeric| / max(|analytic|, |numeric|, floor); the floor keeps
/// near-zero gradients from turning roundoff into huge relative errors.
/// Parameter values are restored on return and their gradient buffers cleared.
GradCheckReport grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                           double eps = 1e-5, double tol = 1e-6, double floor = 1e-3);

}  // namespace feddat::ad
