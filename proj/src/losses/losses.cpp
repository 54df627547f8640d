// Copyright 2026 The FedDAT Simulator Authors
// SPDX-License-Identifier: Apache-2.0

#include "feddat/losses/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

#include "feddat/autodiff/ops.hpp"

namespace feddat::losses {

namespace {

Tensor as_rows(const Tensor& logits) {
  if (logits.ndim() == 1) return ad::reshape(logits, {1, logits.dim(0)});
  if (logits.ndim() != 2) {
    throw ad::DimensionError("loss: logits must be [C] or [B,C], got " +
                             ad::shape_str(logits.shape()));
  }
  return logits;
}

Tensor tempered(const Tensor& logits, double temperature) {
  return temperature == 1.0 ? logits : ad::scale(logits, 1.0 / temperature);
}

LossBundle compose(Tensor ce, Tensor kl, double weight, LossBranch branch, const Tensor& logits) {
  LossBundle out;
  out.ce = ce.item();
  out.weight = weight;
  out.branch = branch;
  out.logits = logits.detach();
  if (kl.numel() == 1) {
    out.kl = kl.item();
    out.total = ad::add(ce, ad::scale(kl, weight));
  } else {
    out.total = ce;
  }
  return out;
}

Tensor teacher_logits(const model::Model& model, const model::Batch& batch, model::Branch branch) {
  ad::NoGradGuard no_grad;
  return model.forward(batch, branch);
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  Tensor rows = as_rows(logits);
  const std::size_t batch = rows.dim(0);
  const std::size_t classes = rows.dim(1);
  if (labels.size() != batch) {
    throw ad::DimensionError(
        fmt::format("cross_entropy: {} labels for a batch of {}", labels.size(), batch));
  }
  std::vector<double> onehot(batch * classes, 0.0);
  for (std::size_t i = 0; i < batch; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw std::out_of_range(
          fmt::format("cross_entropy: label {} outside answer pool of {}", labels[i], classes));
    }
    onehot[i * classes + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  Tensor picked = ad::mul(ad::log_softmax(rows), Tensor({batch, classes}, std::move(onehot)));
  return ad::scale(ad::sum(picked), -1.0 / static_cast<double>(batch));
}

Tensor kl_divergence(const Tensor& p_logits, const Tensor& q_logits, double temperature) {
  if (p_logits.shape() != q_logits.shape()) {
    throw ad::DimensionError("kl_divergence: shape mismatch " + ad::shape_str(p_logits.shape()) +
                             " vs " + ad::shape_str(q_logits.shape()));
  }
  if (!(temperature > 0.0)) throw std::invalid_argument("kl_divergence: temperature must be > 0");
  Tensor p = tempered(as_rows(p_logits), temperature);
  Tensor q = tempered(as_rows(q_logits.detach()), temperature);
  const std::size_t batch = p.dim(0);
  Tensor log_ratio = ad::sub(ad::log_softmax(p), ad::log_softmax(q));
  Tensor terms = ad::mul(ad::softmax(p), log_ratio);
  return ad::scale(ad::sum(terms), 1.0 / static_cast<double>(batch));
}

void MkdWeights::validate() const {
  if (alpha_max < 0.0 || beta_max < 0.0) throw std::invalid_argument("mkd: weights must be >= 0");
  if (!(ramp_fraction > 0.0 && ramp_fraction <= 1.0)) {
    throw std::invalid_argument("mkd: ramp_fraction must be in (0, 1]");
  }
  if (ramp_coefficient < 0.0) throw std::invalid_argument("mkd: ramp_coefficient must be >= 0");
  if (!(temperature > 0.0)) throw std::invalid_argument("mkd: temperature must be > 0");
}

MkdWeights& MkdWeights::at_round(std::size_t round, std::size_t total_rounds) {
  alpha = rampup_weight(round, total_rounds, *this, Coefficient::alpha);
  beta = rampup_weight(round, total_rounds, *this, Coefficient::beta);
  return *this;
}

double rampup_weight(std::size_t round, std::size_t total_rounds, const MkdWeights& weights,
                     Coefficient which) {
  if (round < 1 || round > total_rounds) {
    throw std::out_of_range(fmt::format("rampup_weight: round {} outside [1, {}]", round, total_rounds));
  }
  const double w_max = which == Coefficient::alpha ? weights.alpha_max : weights.beta_max;
  const auto ramp_rounds = static_cast<std::size_t>(
      std::ceil(weights.ramp_fraction * static_cast<double>(total_rounds)));
  if (ramp_rounds == 0) return w_max;
  const double t = static_cast<double>(std::min(round - 1, ramp_rounds)) /
                   static_cast<double>(ramp_rounds);
  if (t >= 1.0) return w_max;
  const double gap = 1.0 - t;
  return w_max * std::exp(-weights.ramp_coefficient * gap * gap);
}

LossBundle loss_shared(const model::Model& model, const model::Batch& batch, double alpha,
                       double temperature, model::Branch teacher) {
  Tensor z_s = model.forward(batch, model::Branch::shared);
  Tensor ce = cross_entropy(z_s, batch.labels);
  Tensor kl;
  if (alpha != 0.0) {
    kl = kl_divergence(z_s, teacher_logits(model, batch, teacher), temperature);
  }
  return compose(ce, kl, alpha, LossBranch::shared, z_s);
}

LossBundle loss_dat(const model::Model& model, const model::Batch& batch, double beta,
                    double temperature, model::Branch student) {
  Tensor z_dat = model.forward(batch, student);
  Tensor ce = cross_entropy(z_dat, batch.labels);
  Tensor kl;
  if (beta != 0.0) {
    kl = kl_divergence(z_dat, teacher_logits(model, batch, model::Branch::shared), temperature);
  }
  return compose(ce, kl, beta, LossBranch::dat, z_dat);
}

LossBundle loss_plain(const model::Model& model, const model::Batch& batch) {
  Tensor z = model.forward(batch, model.default_branch());
  return compose(cross_entropy(z, batch.labels), Tensor(), 0.0, LossBranch::shared, z);
}

}  // namespace feddat::losses
