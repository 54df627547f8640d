// Copyright 2026 The FedDAT Simulator Authors
// SPDX-License-Identifier: Apache-2.0

#include "feddat/model/archive.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <fmt/format.h>

#include "feddat/common/hash.hpp"

namespace feddat::model {

namespace {

constexpr char kMagic[8] = {'F', 'D', 'A', 'T', 'A', 'R', 'C', '1'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename T>
  void le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      out_.push_back(static_cast<std::uint8_t>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
    }
  }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  std::vector<std::uint8_t>& buffer() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  std::span<const std::uint8_t> take(std::size_t n) {
    if (n > in_.size() - pos_) throw ArchiveError("archive: truncated");
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  template <typename T>
  T le() {
    auto s = take(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(s[i]) << (8 * i);
    return static_cast<T>(v);
  }
  double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }
  std::size_t position() const { return pos_; }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace

const Tensor& TensorArchive::get(std::string_view name) const {
  auto it = std::find_if(tensors.begin(), tensors.end(),
                         [&](const NamedTensor& t) { return t.name == name; });
  if (it == tensors.end()) throw ArchiveError(fmt::format("archive: no tensor named '{}'", name));
  return it->tensor;
}

bool TensorArchive::contains(std::string_view name) const {
  return std::any_of(tensors.begin(), tensors.end(),
                     [&](const NamedTensor& t) { return t.name == name; });
}

std::vector<std::uint8_t> encode(const TensorArchive& archive) {
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  const std::string manifest = archive.manifest.dump();
  w.le<std::uint64_t>(manifest.size());
  w.bytes(manifest.data(), manifest.size());
  w.le<std::uint64_t>(archive.tensors.size());
  for (const auto& t : archive.tensors) {
    w.le<std::uint32_t>(static_cast<std::uint32_t>(t.name.size()));
    w.bytes(t.name.data(), t.name.size());
    w.le<std::uint32_t>(static_cast<std::uint32_t>(t.tensor.ndim()));
    for (std::size_t d : t.tensor.shape()) w.le<std::uint64_t>(d);
    for (double v : t.tensor.data()) w.f64(v);
  }
  const std::uint64_t checksum = Fnv1a().update(std::span<const std::uint8_t>(w.buffer())).digest();
  w.le<std::uint64_t>(checksum);
  return std::move(w.buffer());
}

TensorArchive decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < sizeof(kMagic) + 8 ||
      std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw ArchiveError("archive: bad magic");
  }
  const std::size_t body = bytes.size() - 8;
  Reader tail(bytes.subspan(body));
  const std::uint64_t expected = tail.le<std::uint64_t>();
  if (Fnv1a().update(bytes.first(body)).digest() != expected) {
    throw ArchiveError("archive: checksum mismatch (file corrupted)");
  }

  Reader r(bytes.first(body));
  r.take(sizeof(kMagic));
  TensorArchive out;
  const auto manifest_len = r.le<std::uint64_t>();
  auto manifest = r.take(manifest_len);
  try {
    out.manifest = nlohmann::json::parse(manifest.begin(), manifest.end());
  } catch (const nlohmann::json::exception& e) {
    throw ArchiveError(fmt::format("archive: manifest is not valid JSON: {}", e.what()));
  }
  const auto count = r.le<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = r.le<std::uint32_t>();
    auto name = r.take(name_len);
    const auto rank = r.le<std::uint32_t>();
    ad::Shape shape(rank);
    for (auto& d : shape) d = r.le<std::uint64_t>();
    std::vector<double> values(ad::numel_of(shape));
    for (double& v : values) v = r.f64();
    out.tensors.push_back(
        {std::string(name.begin(), name.end()), Tensor(std::move(shape), std::move(values))});
  }
  if (r.position() != body) throw ArchiveError("archive: trailing bytes");
  return out;
}

void write_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  const auto bytes = encode(archive);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw ArchiveError(fmt::format("cannot write '{}'", tmp.string()));
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw ArchiveError(fmt::format("short write to '{}'", tmp.string()));
  }
  std::filesystem::rename(tmp, path);
}

TensorArchive read_archive(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ArchiveError(fmt::format("cannot open '{}'", path.string()));
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
  return decode(bytes);
}

}  // namespace feddat::model
