// Copyright 2026 The FedDAT Simulator Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include "json.hpp"

#include "feddat/model/model.hpp"

namespace feddat::model {

class ArchiveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Flat named-tensor container used for checkpoints and federation messages.
///
/// Layout (all integers little-endian):
///   8 bytes  magic "FDATARC1"
///   u64      manifest length, then that many bytes of UTF-8 JSON
///   u64      tensor count
///   per tensor: u32 name length, name bytes, u32 rank, u64 dims[rank],
///               f64 payload (row-major, little-endian)
///   u64      FNV-1a of every preceding byte
struct TensorArchive {
  nlohmann::json manifest = nlohmann::json::object();
  ParamList tensors;

  const Tensor& get(std::string_view name) const;
  bool contains(std::string_view name) const;
};

std::vector<std::uint8_t> encode(const TensorArchive& archive);
/// Throws ArchiveError on truncation, bad magic, checksum mismatch or bad manifest JSON.
TensorArchive decode(std::span<const std::uint8_t> bytes);

void write_archive(const std::filesystem::path& path, const TensorArchive& archive);
TensorArchive read_archive(const std::filesystem::path& path);

}  // namespace feddat::model
