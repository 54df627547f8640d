// Copyright 2026 The FedDAT Simulator Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>

#include "feddat/autodiff/tensor.hpp"
#include "feddat/model/model.hpp"

namespace feddat::losses {

using ad::Tensor;

/// Mean negative log-likelihood of `labels` under softmax(logits).
/// `logits` is [C] (one label) or [B,C].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Batch-mean KL(softmax(p/T) || softmax(q/T)). The second argument is treated
/// as a detached teacher: no gradient ever reaches it.
Tensor kl_divergence(const Tensor& p_logits, const Tensor& q_logits, double temperature = 1.0);

enum class Coefficient { alpha, beta };

/// Distillation weights with an exponential ramp-up over communication rounds.
struct MkdWeights {
  double alpha_max = 1.0;
  double beta_max = 1.0;
  double ramp_fraction = 0.4;  // in (0, 1]
  double ramp_coefficient = 5.0;
  double temperature = 1.0;
  double alpha = 0.0;
  double beta = 0.0;

  void validate() const;
  /// Sets alpha and beta for a 1-based round.
  MkdWeights& at_round(std::size_t round, std::size_t total_rounds);
};

/// w_max * exp(-c (1 - t)^2), t = min(round - 1, T_r) / T_r, T_r = ceil(fraction * total).
double rampup_weight(std::size_t round, std::size_t total_rounds, const MkdWeights& weights,
                     Coefficient which);

enum class LossBranch { shared, dat };

struct LossBundle {
  Tensor total;     // differentiable objective
  double ce = 0.0;
  double kl = 0.0;  // 0 when the distillation weight is 0 (teacher not evaluated)
  double weight = 0.0;
  LossBranch branch = LossBranch::shared;
  Tensor logits;    // detached student logits
};

/// CE(z_s) + alpha * KL(z_s || z_teacher), teacher evaluated without recording.
/// Gradients reach only the shared adapter and the head.
LossBundle loss_shared(const model::Model& model, const model::Batch& batch, double alpha,
                       double temperature = 1.0, model::Branch teacher = model::Branch::dat);

/// CE(z_student) + beta * KL(z_student || z_s), with z_s computed from the
/// shared adapter as it is at call time and detached. Gradients reach only the
/// local adapter and the head.
LossBundle loss_dat(const model::Model& model, const model::Batch& batch, double beta,
                    double temperature = 1.0, model::Branch student = model::Branch::dat);

/// Plain CE objective for the baseline modes.
LossBundle loss_plain(const model::Model& model, const model::Batch& batch);

}  // namespace feddat::losses
