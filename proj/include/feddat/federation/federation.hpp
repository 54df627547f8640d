// Copyright 2026 The FedDAT Simulator Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "feddat/benchgen/benchmark.hpp"
#include "feddat/federation/optimizer.hpp"
#include "feddat/losses/losses.hpp"
#include "feddat/model/model.hpp"

namespace feddat::fed {

enum class AggregationMode { weighted, uniform };

std::string_view to_string(AggregationMode mode);
AggregationMode parse_aggregation(std::string_view text);

/// Training-time variants of the dual-adapter objective.
enum class DatVariant {
  full,              // teacher = frozen copy + local adapter
  no_frozen_branch,  // teacher = local adapter alone
  no_local_branch,   // teacher = frozen copy alone, no local adapter step
  no_mkd,            // alpha = beta = 0
};

std::string_view to_string(DatVariant variant);
DatVariant parse_dat_variant(std::string_view text);

struct TrainConfig {
  std::size_t rounds = 20;
  std::size_t local_steps = 10;
  std::size_t batch_size = 16;
  double lr = 0.05;
  OptimizerKind optimizer = OptimizerKind::sgd;
  double momentum = 0.9;
  model::BackboneConfig backbone;
  model::PeftConfig peft;
  AggregationMode aggregation = AggregationMode::weighted;
  losses::MkdWeights mkd;
  DatVariant variant = DatVariant::full;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  /// Branch used for evaluation and for plain training in baseline modes.
  model::Branch inference_branch() const;
};

/// Per-client statistics from one round of local training.
struct ClientRoundStats {
  double accuracy = 0.0;  // on the sampled training batches, shared branch
  double ce = 0.0;
  double kl_s = 0.0;
  double kl_dat = 0.0;
  double alpha = 0.0;
  double beta = 0.0;
};

struct ClientState {
  std::size_t id = 0;
  const bench::ClientData* data = nullptr;
  std::unique_ptr<model::Model> model;
  Sgd optimizer;

  ClientState(std::size_t id, const bench::ClientData& data, const TrainConfig& cfg);
};

struct ClientUpdateResult {
  model::ParamList upload;  // detached communicated parameters
  ClientRoundStats stats;
};

/// Copies received global parameters into the client model and, in feddat
/// mode, refreshes the frozen copy from them.
void install_global(ClientState& client, const model::ParamList& global);

/// Installs `global` as the client's communicated parameters and runs T local
/// steps. In feddat mode the frozen copy is refreshed from `global` first.
/// Returns the updated communicated parameters.
ClientUpdateResult client_update(ClientState& client, const model::ParamList& global,
                                 std::size_t round, const TrainConfig& cfg);

struct Upload {
  model::ParamList params;
  std::size_t num_samples = 0;
};

/// Weighted: sum N_k w_k / sum N_k. Uniform: (1/K) sum w_k.
model::ParamList aggregate(std::span<const Upload> uploads, AggregationMode mode);

enum class Direction { up, down };

struct LedgerEntry {
  std::size_t round = 0;
  Direction direction = Direction::up;
  std::size_t client = 0;
  std::size_t scalars = 0;
  std::size_t bytes = 0;
  std::uint64_t hash = 0;
};

/// Audit log of every serialized message.
class CommLedger {
 public:
  /// When set, raw message bytes are retained for inspection.
  explicit CommLedger(bool keep_payloads = false) : keep_payloads_(keep_payloads) {}

  void record(std::size_t round, Direction direction, std::size_t client, std::size_t scalars,
              std::span<const std::uint8_t> payload);
  const std::vector<LedgerEntry>& entries() const { return entries_; }
  const std::vector<std::vector<std::uint8_t>>& payloads() const { return payloads_; }
  std::size_t total_scalars(Direction direction) const;
  std::size_t round_scalars(std::size_t round, Direction direction) const;
  nlohmann::json to_json() const;
  static CommLedger from_json(const nlohmann::json& j);

 private:
  bool keep_payloads_;
  std::vector<LedgerEntry> entries_;
  std::vector<std::vector<std::uint8_t>> payloads_;
};

struct ServerState {
  model::ParamList global;
  std::size_t round = 0;  // rounds completed
  std::size_t total_rounds = 0;
  AggregationMode aggregation = AggregationMode::weighted;
  std::uint64_t seed = 0;

  /// Draws the initial global parameters from the "server" stream.
  static ServerState init(const TrainConfig& cfg);
};

/// One communication round: broadcast, parallel client updates on up to
/// `workers` threads, aggregation in client-id order. Any client failure
/// aborts the round before the global parameters change.
std::vector<ClientRoundStats> server_round(ServerState& server, std::span<ClientState> clients,
                                           const TrainConfig& cfg, CommLedger& ledger,
                                           std::size_t workers);

/// One round of purely local training for every client (no messages).
std::vector<ClientRoundStats> local_round(std::span<ClientState> clients, std::size_t round,
                                          const TrainConfig& cfg, std::size_t workers);

/// R rounds of local training for every client; nothing is communicated.
void local_only_run(std::span<ClientState> clients, const TrainConfig& cfg, std::size_t workers);

struct Evaluation {
  double accuracy = 0.0;
  double ce = 0.0;
};

/// Argmax accuracy (ties go to the lowest index) and mean CE.
Evaluation evaluate(const model::Model& model, std::span<const bench::VqaTriple> data,
                    model::Branch branch);

/// Index of the largest entry; ties resolve to the lowest index.
std::size_t argmax(std::span<const double> row);

}  // namespace feddat::fed
