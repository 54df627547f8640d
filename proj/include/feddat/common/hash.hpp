// Copyright 2026 The FedDAT Simulator Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace feddat {

/// 64-bit FNV-1a. Stable across platforms, used for content and config hashes.
class Fnv1a {
 public:
  Fnv1a& update(std::span<const std::uint8_t> bytes);
  Fnv1a& update(std::string_view text);
  Fnv1a& update(std::span<const double> values);
  Fnv1a& update_u64(std::uint64_t v);
  std::uint64_t digest() const { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::uint64_t fnv1a(std::string_view text);
std::string hex64(std::uint64_t v);

}  // namespace feddat
