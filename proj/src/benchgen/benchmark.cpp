// Copyright 2026 The FedDAT Simulator Authors
// SPDX-License-Identifier: Apache-2.0

#include "feddat/benchgen/benchmark.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <stdexcept>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "feddat/common/hash.hpp"
#include "feddat/common/rng.hpp"

namespace feddat::bench {

namespace {

constexpr char kFileMagic[8] = {'F', 'D', 'A', 'T', 'D', 'S', '0', '1'};

bool has_feature_shift(Regime r) { return r == Regime::feature_shift || r == Regime::mixed; }
bool has_answer_shift(Regime r) { return r == Regime::answer_shift || r == Regime::mixed; }

std::size_t identify_answers(const BenchmarkSpec& s) {
  return s.n_attributes * s.classes_per_attribute;
}

int compare_answer(const BenchmarkSpec& s, int a, int b) {
  const int base = static_cast<int>(identify_answers(s));
  return base + (a >= b ? 1 : 0);
}

int parity_answer(const BenchmarkSpec& s, int a) {
  return static_cast<int>(identify_answers(s)) + 2 + (a % 2);
}

std::size_t pick(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

ClientTransform identity_transform(std::size_t d) {
  ClientTransform t;
  t.rotation.assign(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) t.rotation[i * d + i] = 1.0;
  t.offset.assign(d, 0.0);
  return t;
}

// Q = U R(theta) U^T with U Haar-ish orthogonal and R block-diagonal plane rotations.
ClientTransform random_transform(const BenchmarkSpec& s, std::size_t source) {
  const std::size_t d = s.d_vision;
  if (s.shift_strength == 0.0) return identity_transform(d);
  Rng rng = stream(s.seed, "transform", source);
  Eigen::MatrixXd g(d, d);
  for (std::size_t c = 0; c < d; ++c) {
    for (std::size_t r = 0; r < d; ++r) g(r, c) = normal(rng);
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd u = qr.householderQ();
  Eigen::MatrixXd rot = Eigen::MatrixXd::Identity(d, d);
  for (std::size_t p = 0; p + 1 < d; p += 2) {
    const double theta = s.shift_strength * s.max_rotation * uniform(rng, 0.5, 1.0);
    rot(p, p) = std::cos(theta);
    rot(p, p + 1) = -std::sin(theta);
    rot(p + 1, p) = std::sin(theta);
    rot(p + 1, p + 1) = std::cos(theta);
  }
  Eigen::MatrixXd q = u * rot * u.transpose();
  ClientTransform t;
  t.rotation.resize(d * d);
  for (std::size_t r = 0; r < d; ++r) {
    for (std::size_t c = 0; c < d; ++c) t.rotation[r * d + c] = q(r, c);
  }
  t.offset.resize(d);
  for (double& b : t.offset) b = s.shift_strength * normal(rng, 0.0, s.offset_scale);
  return t;
}

TaskFamily family_for(const BenchmarkSpec& s, std::size_t source) {
  if (s.regime != Regime::task_shift) return TaskFamily::identify;
  switch (source % 3) {
    case 0: return TaskFamily::identify;
    case 1: return TaskFamily::compare;
    default: return TaskFamily::parity;
  }
}

std::vector<int> pool_for(const BenchmarkSpec& s, std::size_t source, TaskFamily family) {
  std::vector<int> pool;
  const int base = static_cast<int>(identify_answers(s));
  switch (family) {
    case TaskFamily::compare: return {base, base + 1};
    case TaskFamily::parity: return {base + 2, base + 3};
    case TaskFamily::identify: break;
  }
  pool.resize(identify_answers(s));
  std::iota(pool.begin(), pool.end(), 0);
  if (!has_answer_shift(s.regime)) return pool;
  // Pools of differing size: one attribute's worth of classes per step.
  Rng rng = stream(s.seed, "answer_pool", source);
  std::shuffle(pool.begin(), pool.end(), rng);
  const std::size_t size = s.classes_per_attribute * (1 + source % s.n_attributes);
  pool.resize(size);
  return pool;
}

std::vector<double> transformed(const ClientTransform& t, const std::vector<double>& v) {
  const std::size_t d = v.size();
  std::vector<double> out(t.offset);
  for (std::size_t r = 0; r < d; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < d; ++c) acc += t.rotation[r * d + c] * v[c];
    out[r] += acc;
  }
  return out;
}

VqaTriple sample(const BenchmarkSpec& s, const Benchmark& bench, const ClientData& client,
                 Rng& rng, std::uint64_t latent_id) {
  const std::size_t n_attr = s.n_attributes;
  std::vector<int> local_of(s.global_answer_count(), -1);
  for (std::size_t i = 0; i < client.answer_pool.size(); ++i) {
    local_of[static_cast<std::size_t>(client.answer_pool[i])] = static_cast<int>(i);
  }
  VqaTriple out;
  out.latent_id = latent_id;
  std::vector<int> classes(n_attr);
  // Rejection keeps the answer inside the client pool.
  for (;;) {
    for (auto& c : classes) c = static_cast<int>(pick(rng, s.classes_per_attribute));
    const auto j = static_cast<int>(pick(rng, n_attr));
    int answer = 0;
    switch (client.family) {
      case TaskFamily::identify:
        out.question = {kIdentifyToken, kFirstAttributeToken + j, kPadToken};
        answer = j * static_cast<int>(s.classes_per_attribute) + classes[static_cast<std::size_t>(j)];
        break;
      case TaskFamily::parity:
        out.question = {kParityToken, kFirstAttributeToken + j, kPadToken};
        answer = parity_answer(s, classes[static_cast<std::size_t>(j)]);
        break;
      case TaskFamily::compare:
        out.question = {kCompareToken, kFirstAttributeToken + j, kPadToken};
        answer = compare_answer(s, classes[static_cast<std::size_t>(j)],
                                static_cast<int>(s.classes_per_attribute / 2));
        break;
    }
    if (local_of[static_cast<std::size_t>(answer)] < 0) continue;
    out.global_answer = answer;
    out.answer = local_of[static_cast<std::size_t>(answer)];
    break;
  }
  std::vector<double> v(s.d_vision, 0.0);
  for (std::size_t j = 0; j < n_attr; ++j) {
    const auto& proto = bench.prototypes[j][static_cast<std::size_t>(classes[j])];
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += proto[i];
  }
  for (double& x : v) x += normal(rng, 0.0, s.noise);
  out.vision = transformed(client.transform, v);
  return out;
}

template <typename T>
void put(std::ostream& os, T v) {
  std::uint64_t bits;
  if constexpr (std::is_same_v<T, double>) {
    bits = std::bit_cast<std::uint64_t>(v);
  } else {
    bits = static_cast<std::uint64_t>(v);
  }
  char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
  os.write(buf, sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::filesystem::path& path) {
  unsigned char buf[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(T))) {
    throw std::runtime_error(fmt::format("'{}': truncated dataset file", path.string()));
  }
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  if constexpr (std::is_same_v<T, double>) {
    return std::bit_cast<double>(bits);
  } else {
    return static_cast<T>(bits);
  }
}

}  // namespace

std::string_view to_string(Regime regime) {
  switch (regime) {
    case Regime::feature_shift: return "feature_shift";
    case Regime::answer_shift: return "answer_shift";
    case Regime::task_shift: return "task_shift";
    case Regime::mixed: return "mixed";
  }
  return "?";
}

Regime parse_regime(std::string_view text) {
  for (Regime r : {Regime::feature_shift, Regime::answer_shift, Regime::task_shift, Regime::mixed}) {
    if (to_string(r) == text) return r;
  }
  throw std::invalid_argument(fmt::format("unknown regime '{}'", text));
}

std::string_view to_string(TaskFamily family) {
  switch (family) {
    case TaskFamily::identify: return "identify";
    case TaskFamily::compare: return "compare";
    case TaskFamily::parity: return "parity";
  }
  return "?";
}

std::size_t BenchmarkSpec::global_answer_count() const { return identify_answers(*this) + 4; }

void BenchmarkSpec::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("benchmark: " + msg); };
  if (clients < 1) fail("clients must be >= 1");
  if (subsets_per_source < 1) fail("subsets_per_source must be >= 1");
  if (train_per_client < 1 || test_per_client < 1) fail("train/test sizes must be >= 1");
  if (train_per_client % subsets_per_source != 0 || test_per_client % subsets_per_source != 0) {
    fail(fmt::format("{}/{} samples per source do not split into {} equal subsets",
                     train_per_client, test_per_client, subsets_per_source));
  }
  if (n_attributes < 2) fail("n_attributes must be >= 2");
  if (classes_per_attribute < 2) fail("classes_per_attribute must be >= 2");
  if (d_vision < 2) fail("d_vision must be >= 2");
  if (n_attributes * classes_per_attribute > d_vision) {
    fail(fmt::format("{} attribute prototypes are not separable in d_vision={}",
                     n_attributes * classes_per_attribute, d_vision));
  }
  if (!(prototype_scale > 0.0)) fail("prototype_scale must be > 0");
  if (noise < 0.0) fail("noise must be >= 0");
  if (shift_strength < 0.0) fail("shift_strength must be >= 0");
  if (offset_scale < 0.0) fail("offset_scale must be >= 0");
}

nlohmann::json BenchmarkSpec::to_json() const {
  return {{"regime", std::string(to_string(regime))},
          {"clients", clients},
          {"subsets_per_source", subsets_per_source},
          {"train_per_client", train_per_client},
          {"test_per_client", test_per_client},
          {"n_attributes", n_attributes},
          {"classes_per_attribute", classes_per_attribute},
          {"d_vision", d_vision},
          {"prototype_scale", prototype_scale},
          {"noise", noise},
          {"shift_strength", shift_strength},
          {"max_rotation", max_rotation},
          {"offset_scale", offset_scale},
          {"seed", seed}};
}

BenchmarkSpec BenchmarkSpec::from_json(const nlohmann::json& j) {
  BenchmarkSpec s;
  for (const auto& [key, value] : j.items()) {
    if (key == "regime") s.regime = parse_regime(value.get<std::string>());
    else if (key == "clients") s.clients = value.get<std::size_t>();
    else if (key == "subsets_per_source") s.subsets_per_source = value.get<std::size_t>();
    else if (key == "train_per_client") s.train_per_client = value.get<std::size_t>();
    else if (key == "test_per_client") s.test_per_client = value.get<std::size_t>();
    else if (key == "n_attributes") s.n_attributes = value.get<std::size_t>();
    else if (key == "classes_per_attribute") s.classes_per_attribute = value.get<std::size_t>();
    else if (key == "d_vision") s.d_vision = value.get<std::size_t>();
    else if (key == "prototype_scale") s.prototype_scale = value.get<double>();
    else if (key == "noise") s.noise = value.get<double>();
    else if (key == "shift_strength") s.shift_strength = value.get<double>();
    else if (key == "max_rotation") s.max_rotation = value.get<double>();
    else if (key == "offset_scale") s.offset_scale = value.get<double>();
    else if (key == "seed") s.seed = value.get<std::uint64_t>();
    else throw std::invalid_argument(fmt::format("benchmark: unknown key '{}'", key));
  }
  return s;
}

std::uint64_t BenchmarkSpec::hash() const { return fnv1a(to_json().dump()); }

BenchmarkSpec BenchmarkSpec::iid_clone() const {
  BenchmarkSpec out = *this;
  out.regime = Regime::feature_shift;
  out.shift_strength = 0.0;
  return out;
}

Benchmark generate(const BenchmarkSpec& spec) {
  spec.validate();
  Benchmark bench;
  bench.spec = spec;
  Rng proto_rng = stream(spec.seed, "datagen.prototypes");
  bench.prototypes.resize(spec.n_attributes);
  for (auto& attribute : bench.prototypes) {
    attribute.resize(spec.classes_per_attribute);
    for (auto& proto : attribute) {
      proto.resize(spec.d_vision);
      for (double& x : proto) x = normal(proto_rng, 0.0, spec.prototype_scale);
    }
  }

  for (std::size_t source = 0; source < spec.clients; ++source) {
    ClientData proto;
    proto.source = source;
    proto.family = family_for(spec, source);
    proto.answer_pool = pool_for(spec, source, proto.family);
    proto.transform = has_feature_shift(spec.regime) ? random_transform(spec, source)
                                                     : identity_transform(spec.d_vision);
    for (std::size_t subset = 0; subset < spec.subsets_per_source; ++subset) {
      ClientData client = proto;
      client.id = source * spec.subsets_per_source + subset;
      client.subset = subset;
      Rng rng = stream(spec.seed, "datagen.samples", client.id);
      const std::uint64_t id_base = static_cast<std::uint64_t>(client.id) << 32;
      std::uint64_t next = 0;
      for (std::size_t i = 0; i < spec.train_per_client / spec.subsets_per_source; ++i) {
        client.train.push_back(sample(spec, bench, client, rng, id_base | next++));
      }
      for (std::size_t i = 0; i < spec.test_per_client / spec.subsets_per_source; ++i) {
        client.test.push_back(sample(spec, bench, client, rng, id_base | next++));
      }
      bench.clients.push_back(std::move(client));
    }
  }
  return bench;
}

double heterogeneity_index(std::span<const ClientData> clients) {
  if (clients.size() < 2) throw std::invalid_argument("heterogeneity_index: need >= 2 clients");
  std::size_t answers = 0;
  for (const auto& c : clients) {
    for (const auto& t : c.train) answers = std::max(answers, static_cast<std::size_t>(t.global_answer) + 1);
  }
  std::vector<std::vector<double>> marginals;
  std::vector<std::vector<double>> means;
  for (const auto& c : clients) {
    if (c.train.empty()) throw std::invalid_argument("heterogeneity_index: empty client");
    std::vector<double> m(answers, 0.0);
    std::vector<double> mu(c.train.front().vision.size(), 0.0);
    for (const auto& t : c.train) {
      m[static_cast<std::size_t>(t.global_answer)] += 1.0;
      for (std::size_t i = 0; i < mu.size(); ++i) mu[i] += t.vision[i];
    }
    const auto n = static_cast<double>(c.train.size());
    for (double& x : m) x /= n;
    for (double& x : mu) x /= n;
    marginals.push_back(std::move(m));
    means.push_back(std::move(mu));
  }
  auto kl_to_mix = [](const std::vector<double>& p, const std::vector<double>& q) {
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (p[i] > 0.0) acc += p[i] * std::log(p[i] / (0.5 * (p[i] + q[i])));
    }
    return acc;
  };
  double label = 0.0;
  double feature = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < clients.size(); ++a) {
    for (std::size_t b = a + 1; b < clients.size(); ++b) {
      label += 0.5 * (kl_to_mix(marginals[a], marginals[b]) + kl_to_mix(marginals[b], marginals[a]));
      double sq = 0.0;
      for (std::size_t i = 0; i < means[a].size(); ++i) {
        const double diff = means[a][i] - means[b][i];
        sq += diff * diff;
      }
      feature += std::sqrt(sq);
      ++pairs;
    }
  }
  return (label + feature) / static_cast<double>(pairs);
}

model::Batch make_batch(std::span<const VqaTriple> data, std::span<const std::size_t> indices,
                        std::size_t n_vision_tokens) {
  if (indices.empty()) throw std::invalid_argument("make_batch: empty selection");
  const std::size_t d = data[indices.front()].vision.size();
  if (n_vision_tokens == 0 || d % n_vision_tokens != 0) {
    throw ad::DimensionError(
        fmt::format("make_batch: d_vision={} not divisible into {} tokens", d, n_vision_tokens));
  }
  model::Batch batch;
  std::vector<double> vision;
  vision.reserve(indices.size() * d);
  for (std::size_t idx : indices) {
    const VqaTriple& t = data[idx];
    vision.insert(vision.end(), t.vision.begin(), t.vision.end());
    batch.question.insert(batch.question.end(), t.question.begin(), t.question.end());
    batch.labels.push_back(t.answer);
  }
  batch.vision = ad::Tensor({indices.size(), n_vision_tokens, d / n_vision_tokens}, std::move(vision));
  return batch;
}

model::Batch make_batch(std::span<const VqaTriple> data, std::size_t n_vision_tokens) {
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return make_batch(data, all, n_vision_tokens);
}

void write_client_file(const std::filesystem::path& path, const ClientData& client,
                       const BenchmarkSpec& spec) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
  os.write(kFileMagic, sizeof(kFileMagic));
  put<std::uint64_t>(os, spec.hash());
  put<std::uint64_t>(os, client.id);
  put<std::uint64_t>(os, client.source);
  put<std::uint64_t>(os, client.subset);
  put<std::uint64_t>(os, static_cast<std::uint64_t>(client.family));
  put<std::uint64_t>(os, client.num_classes());
  put<std::uint64_t>(os, client.train.size());
  put<std::uint64_t>(os, client.test.size());
  put<std::uint64_t>(os, spec.d_vision);
  put<std::uint64_t>(os, kQuestionLength);
  for (int a : client.answer_pool) put<std::int32_t>(os, a);
  for (double x : client.transform.rotation) put<double>(os, x);
  for (double x : client.transform.offset) put<double>(os, x);
  auto record = [&](const VqaTriple& t) {
    put<std::uint64_t>(os, t.latent_id);
    for (double x : t.vision) put<double>(os, x);
    for (int q : t.question) put<std::int32_t>(os, q);
    put<std::int32_t>(os, t.answer);
    put<std::int32_t>(os, t.global_answer);
  };
  for (const auto& t : client.train) record(t);
  for (const auto& t : client.test) record(t);
  if (!os) throw std::runtime_error(fmt::format("short write to '{}'", path.string()));
}

ClientData read_client_file(const std::filesystem::path& path, std::uint64_t* spec_hash) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error(fmt::format("cannot open '{}'", path.string()));
  char magic[sizeof(kFileMagic)];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kFileMagic, sizeof(magic)) != 0) {
    throw std::runtime_error(fmt::format("'{}': not a dataset file", path.string()));
  }
  const auto hash = get<std::uint64_t>(is, path);
  if (spec_hash != nullptr) *spec_hash = hash;
  ClientData c;
  c.id = get<std::uint64_t>(is, path);
  c.source = get<std::uint64_t>(is, path);
  c.subset = get<std::uint64_t>(is, path);
  c.family = static_cast<TaskFamily>(get<std::uint64_t>(is, path));
  const auto classes = get<std::uint64_t>(is, path);
  const auto n_train = get<std::uint64_t>(is, path);
  const auto n_test = get<std::uint64_t>(is, path);
  const auto d = get<std::uint64_t>(is, path);
  const auto q_len = get<std::uint64_t>(is, path);
  c.answer_pool.resize(classes);
  for (int& a : c.answer_pool) a = get<std::int32_t>(is, path);
  c.transform.rotation.resize(d * d);
  for (double& x : c.transform.rotation) x = get<double>(is, path);
  c.transform.offset.resize(d);
  for (double& x : c.transform.offset) x = get<double>(is, path);
  auto record = [&] {
    VqaTriple t;
    t.latent_id = get<std::uint64_t>(is, path);
    t.vision.resize(d);
    for (double& x : t.vision) x = get<double>(is, path);
    t.question.resize(q_len);
    for (int& q : t.question) q = get<std::int32_t>(is, path);
    t.answer = get<std::int32_t>(is, path);
    t.global_answer = get<std::int32_t>(is, path);
    return t;
  };
  for (std::uint64_t i = 0; i < n_train; ++i) c.train.push_back(record());
  for (std::uint64_t i = 0; i < n_test; ++i) c.test.push_back(record());
  if (is.peek() != std::char_traits<char>::eof()) {
    throw std::runtime_error(fmt::format("'{}': trailing bytes", path.string()));
  }
  return c;
}

void write_client_jsonl(const std::filesystem::path& path, const ClientData& client) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
  auto emit = [&](const VqaTriple& t, std::string_view split) {
    nlohmann::json row = {{"client", client.id},
                          {"split", split},
                          {"latent_id", t.latent_id},
                          {"v", t.vision},
                          {"q", t.question},
                          {"a", t.answer},
                          {"global_answer", t.global_answer}};
    os << row.dump() << '\n';
  };
  for (const auto& t : client.train) emit(t, "train");
  for (const auto& t : client.test) emit(t, "test");
}

}  // namespace feddat::bench
