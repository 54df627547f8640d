// Copyright 2026 The FedDAT Simulator Authors
// SPDX-License-Identifier: Apache-2.0

#include "feddat/federation/optimizer.hpp"

#include <stdexcept>

#include <fmt/format.h>

namespace feddat::fed {

std::string_view to_string(OptimizerKind kind) {
  return kind == OptimizerKind::sgd ? "sgd" : "sgd_momentum";
}

OptimizerKind parse_optimizer(std::string_view text) {
  if (text == "sgd") return OptimizerKind::sgd;
  if (text == "sgd_momentum") return OptimizerKind::sgd_momentum;
  throw std::invalid_argument(fmt::format("unknown optimizer '{}'", text));
}

Sgd::Sgd(OptimizerKind kind, double lr, double momentum)
    : kind_(kind), lr_(lr), momentum_(momentum) {
  if (lr < 0.0) throw std::invalid_argument("optimizer: lr must be >= 0");
  if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("optimizer: momentum must be in [0, 1)");
}

void Sgd::step(const model::ParamList& params) {
  for (const auto& p : params) {
    model::Tensor t = p.tensor;
    if (!t.has_grad()) continue;
    auto g = t.grad();
    auto w = t.mutable_data();
    if (kind_ == OptimizerKind::sgd) {
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr_ * g[i];
    } else {
      auto& v = velocity_[p.name];
      if (v.empty()) v.assign(w.size(), 0.0);
      for (std::size_t i = 0; i < w.size(); ++i) {
        v[i] = momentum_ * v[i] + g[i];
        w[i] -= lr_ * v[i];
      }
    }
    t.clear_grad();
  }
}

void Sgd::reset(const model::ParamList& params) {
  for (const auto& p : params) velocity_.erase(p.name);
}

}  // namespace feddat::fed
