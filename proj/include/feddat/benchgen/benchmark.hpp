// Copyright 2026 The FedDAT Simulator Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "feddat/model/model.hpp"

namespace feddat::bench {

/// Which marginal differs across clients.
enum class Regime {
  feature_shift,  // per-client orthogonal map + offset on the vision vector
  answer_shift,   // per-client answer pools of different sizes, relabeled
  task_shift,     // per-client question family
  mixed,          // feature_shift and answer_shift together
};

std::string_view to_string(Regime regime);
Regime parse_regime(std::string_view text);

enum class TaskFamily { identify, compare, parity };

std::string_view to_string(TaskFamily family);

// Question vocabulary.
inline constexpr int kPadToken = 0;
inline constexpr int kIdentifyToken = 1;
inline constexpr int kCompareToken = 2;
inline constexpr int kParityToken = 3;
inline constexpr int kFirstAttributeToken = 4;
inline constexpr std::size_t kQuestionLength = 3;

struct BenchmarkSpec {
  Regime regime = Regime::feature_shift;
  std::size_t clients = 5;  // heterogeneity sources
  std::size_t subsets_per_source = 1;
  /// Samples per heterogeneity source, split evenly over its subsets.
  std::size_t train_per_client = 400;
  std::size_t test_per_client = 200;
  std::size_t n_attributes = 3;
  std::size_t classes_per_attribute = 4;
  std::size_t d_vision = 16;
  double prototype_scale = 1.0;
  double noise = 0.3;
  /// Scales every per-client feature transform; 0 makes all clients identical in distribution.
  double shift_strength = 1.0;
  double max_rotation = 1.5707963267948966;  // radians per rotation plane at full strength
  double offset_scale = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t total_clients() const { return clients * subsets_per_source; }
  std::size_t vocab_size() const { return kFirstAttributeToken + n_attributes; }
  std::size_t global_answer_count() const;
  nlohmann::json to_json() const;
  static BenchmarkSpec from_json(const nlohmann::json& j);
  std::uint64_t hash() const;
  /// Same spec with every client drawn from one distribution: feature_shift
  /// regime at zero strength (identity transforms, full answer pools).
  BenchmarkSpec iid_clone() const;
};

struct VqaTriple {
  std::uint64_t latent_id = 0;
  std::vector<double> vision;  // d_vision
  std::vector<int> question;   // kQuestionLength tokens
  int answer = 0;              // index into the client answer pool
  int global_answer = 0;       // id in the shared answer space
};

struct ClientTransform {
  std::vector<double> rotation;  // d x d row-major, orthogonal
  std::vector<double> offset;    // d
};

struct ClientData {
  std::size_t id = 0;
  std::size_t source = 0;
  std::size_t subset = 0;
  TaskFamily family = TaskFamily::identify;
  std::vector<int> answer_pool;  // global answer id of each local label
  ClientTransform transform;
  std::vector<VqaTriple> train;
  std::vector<VqaTriple> test;

  std::size_t num_classes() const { return answer_pool.size(); }
};

struct Benchmark {
  BenchmarkSpec spec;
  /// prototypes[attribute][class] is a d_vision vector.
  std::vector<std::vector<std::vector<double>>> prototypes;
  std::vector<ClientData> clients;
};

/// Pure function of the spec.
Benchmark generate(const BenchmarkSpec& spec);

/// Mean pairwise Jensen-Shannon divergence between client label marginals
/// (over the shared answer space, nats, at most ln 2) plus mean pairwise
/// Euclidean distance between client vision means. Uses train splits.
double heterogeneity_index(std::span<const ClientData> clients);

/// Packs the selected samples into a model batch.
model::Batch make_batch(std::span<const VqaTriple> data, std::span<const std::size_t> indices,
                        std::size_t n_vision_tokens);
model::Batch make_batch(std::span<const VqaTriple> data, std::size_t n_vision_tokens);

/// Binary dump: header (magic, spec hash, client id, C^k, N_train, N_test,
/// d_vision, question length), answer pool, then fixed-width records.
void write_client_file(const std::filesystem::path& path, const ClientData& client,
                       const BenchmarkSpec& spec);
ClientData read_client_file(const std::filesystem::path& path, std::uint64_t* spec_hash = nullptr);
/// One JSON object per sample.
void write_client_jsonl(const std::filesystem::path& path, const ClientData& client);

}  // namespace feddat::bench
