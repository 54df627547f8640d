// Copyright 2026 The FedDAT Simulator Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

namespace oracle {

struct StepCheck {
  double max_abs_diff = 0.0;  // library vs straight-line, over A_s, A_c, frozen copy, head
  double moved = 0.0;         // largest change of any shared-adapter scalar
  double alpha = 0.0, beta = 0.0;
  double expected_alpha = 0.0, expected_beta = 0.0;
};

/// One client_update step (T=1, batch=2) on a tiny two-layer model, compared
/// with dual_adapter_step. `oracle_lr_scale` perturbs only the oracle.
StepCheck run_step_check(std::uint64_t seed, double oracle_lr_scale = 1.0);

}  // namespace oracle
