// Copyright 2026 The FedDAT Simulator Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "feddat/benchgen/benchmark.hpp"
#include "feddat/federation/federation.hpp"
#include "feddat/model/archive.hpp"

namespace feddat::exp {

inline constexpr std::string_view kMetricsHeader =
    "round,client,split,accuracy,ce,kl_s,kl_dat,alpha,beta,uplink_scalars";
inline constexpr std::string_view kCheckpointFormat = "feddat-checkpoint/1";

/// Everything that defines a set of runs.
struct RunConfig {
  bench::BenchmarkSpec benchmark;
  fed::TrainConfig train;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  bool federated = true;  // false: local finetuning only, nothing communicated
  std::size_t workers = 0;  // 0: one per client
  std::string out = "runs/default";
  std::vector<std::size_t> sweep_counts{5, 10, 25};
  /// Scale R with K in sweeps (K / base clients). Off keeps R fixed.
  bool sweep_scale_rounds = false;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
  nlohmann::json to_json() const;
  /// Rejects unknown keys.
  static RunConfig from_json(const nlohmann::json& j);
  /// Hash of every field that can change results (excludes `out` and `workers`).
  std::uint64_t hash() const;
  std::size_t resolved_workers() const;
};

RunConfig load_config(const std::filesystem::path& path);

struct RoundMetrics {
  std::size_t round = 0;
  std::size_t client = 0;
  std::string split;
  double accuracy = 0.0;
  double ce = 0.0;
  double kl_s = 0.0;
  double kl_dat = 0.0;
  double alpha = 0.0;
  double beta = 0.0;
  std::size_t uplink_scalars = 0;
};

std::string format_row(const RoundMetrics& m);

/// One seed of one configuration: clients, server and metrics. Rounds can be
/// stepped individually and the whole state checkpointed between rounds.
class Simulation {
 public:
  Simulation(const RunConfig& config, const bench::Benchmark& benchmark, std::uint64_t seed);

  void run_round();
  std::size_t round() const { return round_; }
  bool done() const { return round_ >= train_.rounds; }

  /// Test-split accuracy per client under the given branch (current state).
  std::vector<double> client_accuracies(model::Branch branch) const;
  std::vector<double> client_accuracies() const;

  const std::vector<RoundMetrics>& metrics() const { return metrics_; }
  std::string metrics_csv() const;
  const fed::CommLedger& ledger() const { return ledger_; }
  fed::CommLedger& ledger() { return ledger_; }
  std::vector<fed::ClientState>& clients() { return clients_; }
  const fed::ServerState& server() const { return server_; }
  const fed::TrainConfig& train_config() const { return train_; }

  void save_checkpoint(const std::filesystem::path& path, const RunConfig& config) const;
  /// Restores round, metrics, ledger and every tensor. The simulation must be
  /// built from the same config.
  void load_checkpoint(const model::TensorArchive& archive);

 private:
  const bench::Benchmark* benchmark_;
  fed::TrainConfig train_;
  bool federated_;
  std::size_t workers_;
  fed::ServerState server_;
  std::vector<fed::ClientState> clients_;
  fed::CommLedger ledger_;
  std::vector<RoundMetrics> metrics_;
  std::size_t round_ = 0;
};

struct SeedResult {
  std::uint64_t seed = 0;
  std::vector<double> client_accuracy;
  double average = 0.0;
  std::size_t uplink_scalars = 0;
};

struct ExperimentResult {
  std::vector<SeedResult> seeds;
  std::vector<double> client_mean, client_std;
  double average_mean = 0.0;
  double average_std = 0.0;
  bool complete = true;  // false when stopped early
};

struct RunOptions {
  /// Simulates an interruption: every seed stops after this round without a summary.
  std::optional<std::size_t> stop_after_round;
  /// Continue from per-seed checkpoints found under the output directory.
  bool resume = false;
  /// Write metrics, ledgers, checkpoints and summary under config.out.
  bool write_outputs = true;
};

/// Runs every seed, writing <out>/config.json, <out>/seed_<s>/{metrics.csv,
/// ledger.json,checkpoint.fdat} and <out>/summary.json.
ExperimentResult run_experiment(const RunConfig& config, const RunOptions& options = {});

/// Continues the run that wrote `checkpoint`. Refuses checkpoints from a
/// different format version or whose config hash does not match.
ExperimentResult resume_experiment(const std::filesystem::path& checkpoint);

/// Rows of label plus K per-client accuracies and their average, as seed means.
struct Table {
  std::vector<std::string> columns;
  std::vector<std::string> labels;
  std::vector<std::vector<double>> values;

  std::string to_csv() const;
  std::string to_markdown() const;
  const std::vector<double>& row(std::string_view label) const;
};

enum class AblationMode {
  full_feddat,
  no_frozen_branch,
  no_local_branch,
  no_mkd,
  infer_dat,
  infer_local,
  infer_shared,
};

std::string_view to_string(AblationMode mode);

struct AblationResult {
  Table accuracy;  // 7 rows x (K + 1)
  /// Metrics of each training variant, first seed.
  std::vector<std::pair<AblationMode, std::vector<RoundMetrics>>> metrics;
};

/// Four trainings (full and three variants) and three inference branches of
/// the full model, on identical seeds and data.
AblationResult ablation_suite(const RunConfig& config);

/// {head_only, adapter} x {local, federated}: rows clf-L, Adapter-L, clf, Adapter.
/// Columns are the K client accuracies, the average, and total uplink scalars.
Table motivational_grid(const RunConfig& config);

/// For each K in config.sweep_counts, feddat and adapter runs. Columns:
/// clients, rounds, average accuracy, total uplink scalars.
Table scalability_sweep(const RunConfig& config);

double mean(const std::vector<double>& v);
/// Sample standard deviation; 0 for fewer than two values.
double stddev(const std::vector<double>& v);

}  // namespace feddat::exp
