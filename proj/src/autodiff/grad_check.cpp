// Copyright 2026 The FedDAT Simulator Authors
// SPDX-License-Identifier: Apache-2.0

#include "feddat/autodiff/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace feddat::ad {

GradCheckReport grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                           double eps, double tol, double floor) {
  for (Tensor& p : params) p.clear_grad();

  {
    Tape tape;
    Tape::Scope scope(&tape);
    Tensor loss = f();
    tape.backward(loss);
  }

  std::vector<std::vector<double>> analytic;
  for (const Tensor& p : params) {
    if (p.has_grad()) {
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      analytic.emplace_back(p.numel(), 0.0);
    }
  }

  GradCheckReport report;
  NoGradGuard no_grad;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto values = params[pi].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = f().item();
      values[i] = saved - eps;
      const double down = f().item();
      values[i] = saved;

      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[pi][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      const double err = std::abs(a - numeric) / denom;
      ++report.coordinates;
      if (err > report.max_rel_error || report.coordinates == 1) {
        report.max_rel_error = err;
        report.worst_param = pi;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  for (Tensor& p : params) p.clear_grad();
  report.passed = report.max_rel_error <= tol;
  return report;
}

}  // namespace feddat::ad
