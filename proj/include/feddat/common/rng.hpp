// Copyright 2026 The FedDAT Simulator Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace feddat {

using Rng = std::mt19937_64;

/// Independent generator for a named sub-stream of a run seed, e.g.
/// stream(seed, "client", k, round). Streams never depend on scheduling.
Rng stream(std::uint64_t seed, std::string_view name, std::uint64_t a = 0, std::uint64_t b = 0);

/// Derived integer seed for components that take a plain seed.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view name, std::uint64_t a = 0);

double uniform(Rng& rng, double lo, double hi);
double normal(Rng& rng, double mean = 0.0, double stddev = 1.0);

}  // namespace feddat
