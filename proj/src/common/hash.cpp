// Copyright 2026 The FedDAT Simulator Authors
// SPDX-License-Identifier: Apache-2.0

#include "feddat/common/hash.hpp"

#include <bit>
#include <cstring>

#include <fmt/format.h>

namespace feddat {

namespace {
constexpr std::uint64_t kPrime = 0x100000001b3ULL;
}

Fnv1a& Fnv1a::update(std::span<const std::uint8_t> bytes) {
  for (std::uint8_t b : bytes) {
    state_ ^= b;
    state_ *= kPrime;
  }
  return *this;
}

Fnv1a& Fnv1a::update(std::string_view text) {
  return update(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

Fnv1a& Fnv1a::update_u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    state_ ^= (v >> (8 * i)) & 0xffU;
    state_ *= kPrime;
  }
  return *this;
}

Fnv1a& Fnv1a::update(std::span<const double> values) {
  for (double v : values) update_u64(std::bit_cast<std::uint64_t>(v));
  return *this;
}

std::uint64_t fnv1a(std::string_view text) { return Fnv1a().update(text).digest(); }

std::string hex64(std::uint64_t v) { return fmt::format("{:016x}", v); }

}  // namespace feddat
