// Copyright 2026 The FedDAT Simulator Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "feddat/model/model.hpp"

namespace feddat::fed {

enum class OptimizerKind { sgd, sgd_momentum };

std::string_view to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(std::string_view text);

/// SGD with optional heavy-ball momentum (v = mu v + g; p -= lr v).
/// Velocity buffers are keyed by parameter name.
class Sgd {
 public:
  Sgd(OptimizerKind kind, double lr, double momentum);

  /// Updates every tensor in `params` that carries a gradient, then clears it.
  void step(const model::ParamList& params);
  /// Drops the velocity of the named parameters.
  void reset(const model::ParamList& params);

  double lr() const { return lr_; }
  const std::map<std::string, std::vector<double>>& buffers() const { return velocity_; }
  std::map<std::string, std::vector<double>>& buffers() { return velocity_; }

 private:
  OptimizerKind kind_;
  double lr_;
  double momentum_;
  std::map<std::string, std::vector<double>> velocity_;
};

}  // namespace feddat::fed
