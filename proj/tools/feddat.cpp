// Copyright 2026 The FedDAT Simulator Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line entry point: run | ablate | motiv | sweep | resume | gen-data.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "feddat/common/hash.hpp"
#include "feddat/experiments/experiments.hpp"

namespace {

namespace fs = std::filesystem;
using feddat::exp::RunConfig;

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mode;
  std::optional<std::size_t> rounds;
  std::optional<std::size_t> clients;
  std::optional<std::string> out;
  std::optional<std::size_t> workers;
  bool dry_run = false;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "JSON run configuration (defaults apply to absent keys)");
    app->add_option("--seed", seed, "Run a single seed");
    app->add_option("--mode", mode, "PEFT mode: adapter, feddat, lora, prompt, bias, head_only, full");
    app->add_option("--rounds", rounds, "Communication rounds R");
    app->add_option("--clients", clients, "Heterogeneity sources (clients per subset)");
    app->add_option("--out", out, "Output directory");
    app->add_option("--workers", workers, "Client threads per round (0 = one per client)");
    app->add_flag("--dry-run", dry_run, "Print the resolved configuration and counts, then exit");
  }

  RunConfig resolve() const {
    RunConfig c;
    try {
      if (!config.empty()) c = feddat::exp::load_config(config);
      if (seed) c.seeds = {*seed};
      if (mode) c.train.peft.mode = feddat::model::parse_peft_mode(*mode);
      if (rounds) c.train.rounds = *rounds;
      if (clients) c.benchmark.clients = *clients;
      if (out) c.out = *out;
      if (workers) c.workers = *workers;
      c.validate();
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
    return c;
  }
};

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
  os << text;
}

void dry_run(const RunConfig& c) {
  const auto per_client = feddat::model::communicated_count(c.train.backbone, c.train.peft);
  const std::size_t k = c.benchmark.total_clients();
  fmt::print("{}\n", c.to_json().dump(2));
  fmt::print("config_hash: {}\n", feddat::hex64(c.hash()));
  fmt::print("clients: {}\n", k);
  fmt::print("communicated scalars per client per round: {}\n", per_client);
  fmt::print("uplink scalars per round: {}\n", c.federated ? per_client * k : 0);
  fmt::print("uplink scalars per run: {}\n", c.federated ? per_client * k * c.train.rounds : 0);
}

void emit_table(const RunConfig& c, const feddat::exp::Table& table, const std::string& stem) {
  fs::create_directories(c.out);
  write_file(fs::path(c.out) / (stem + ".csv"), table.to_csv());
  write_file(fs::path(c.out) / (stem + ".md"), table.to_markdown());
  fmt::print("{}", table.to_markdown());
  fmt::print("wrote {}\n", (fs::path(c.out) / (stem + ".csv")).string());
}

int cmd_run(const Overrides& o, std::optional<std::size_t> stop_after, bool local) {
  RunConfig c = o.resolve();
  if (local) c.federated = false;
  if (o.dry_run) {
    dry_run(c);
    return EXIT_SUCCESS;
  }
  feddat::exp::RunOptions options;
  options.stop_after_round = stop_after;
  const auto result = feddat::exp::run_experiment(c, options);
  if (!result.complete) {
    fmt::print("stopped after round {}; checkpoints under {}\n", *stop_after, c.out);
    return EXIT_SUCCESS;
  }
  fmt::print("client-average accuracy: {:.4f} +/- {:.4f} over {} seed(s)\n", result.average_mean,
             result.average_std, result.seeds.size());
  fmt::print("wrote {}\n", (fs::path(c.out) / "summary.json").string());
  return EXIT_SUCCESS;
}

int cmd_ablate(const Overrides& o) {
  const RunConfig c = o.resolve();
  if (o.dry_run) {
    dry_run(c);
    return EXIT_SUCCESS;
  }
  emit_table(c, feddat::exp::ablation_suite(c).accuracy, "ablation");
  return EXIT_SUCCESS;
}

int cmd_motiv(const Overrides& o) {
  const RunConfig c = o.resolve();
  if (c.benchmark.regime != feddat::bench::Regime::feature_shift) {
    throw ConfigError(fmt::format("motiv requires benchmark.regime feature_shift, got '{}'",
                                  feddat::bench::to_string(c.benchmark.regime)));
  }
  if (o.dry_run) {
    dry_run(c);
    return EXIT_SUCCESS;
  }
  emit_table(c, feddat::exp::motivational_grid(c), "motivational");
  return EXIT_SUCCESS;
}

int cmd_sweep(const Overrides& o) {
  const RunConfig c = o.resolve();
  for (std::size_t k : c.sweep_counts) {
    if (k % c.benchmark.clients != 0) {
      throw ConfigError(fmt::format("sweep count {} does not split {} sources evenly", k, c.benchmark.clients));
    }
  }
  if (o.dry_run) {
    dry_run(c);
    return EXIT_SUCCESS;
  }
  emit_table(c, feddat::exp::scalability_sweep(c), "sweep");
  return EXIT_SUCCESS;
}

int cmd_gen_data(const Overrides& o) {
  const RunConfig c = o.resolve();
  if (o.dry_run) {
    dry_run(c);
    return EXIT_SUCCESS;
  }
  const auto bench = feddat::bench::generate(c.benchmark);
  const fs::path dir = fs::path(c.out) / "data";
  fs::create_directories(dir);
  for (const auto& client : bench.clients) {
    feddat::bench::write_client_file(dir / fmt::format("client{}.bin", client.id), client, c.benchmark);
    feddat::bench::write_client_jsonl(dir / fmt::format("client{}.jsonl", client.id), client);
    fmt::print("client {}: C={} train={} test={}\n", client.id, client.num_classes(),
               client.train.size(), client.test.size());
  }
  fmt::print("heterogeneity_index: {:.6f}\n",
             bench.clients.size() >= 2 ? feddat::bench::heterogeneity_index(bench.clients) : 0.0);
  fmt::print("wrote {}\n", dir.string());
  return EXIT_SUCCESS;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated dual-adapter teacher simulator"};
  app.require_subcommand(1);

  Overrides run_o, ablate_o, motiv_o, sweep_o, gen_o;
  std::optional<std::size_t> stop_after;
  bool local = false;
  auto* run = app.add_subcommand("run", "Train every seed and write metrics and a summary");
  run_o.attach(run);
  run->add_option("--stop-after-round", stop_after, "Stop every seed after this round (resumable)");
  run->add_flag("--local", local, "Local finetuning only; nothing is communicated");
  auto* ablate = app.add_subcommand("ablate", "Seven-row ablation table");
  ablate_o.attach(ablate);
  auto* motiv = app.add_subcommand("motiv", "Classifier vs adapter, local vs federated");
  motiv_o.attach(motiv);
  auto* sweep = app.add_subcommand("sweep", "Accuracy and communication against client count");
  sweep_o.attach(sweep);
  auto* gen = app.add_subcommand("gen-data", "Write the benchmark as binary and JSONL files");
  gen_o.attach(gen);
  std::string checkpoint;
  auto* resume = app.add_subcommand("resume", "Continue a run from a checkpoint");
  resume->add_option("checkpoint", checkpoint, "seed_<s>/checkpoint.fdat of the run")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(run_o, stop_after, local);
    if (*ablate) return cmd_ablate(ablate_o);
    if (*motiv) return cmd_motiv(motiv_o);
    if (*sweep) return cmd_sweep(sweep_o);
    if (*gen) return cmd_gen_data(gen_o);
    if (*resume) {
      const auto result = feddat::exp::resume_experiment(checkpoint);
      fmt::print("client-average accuracy: {:.4f} +/- {:.4f} over {} seed(s)\n", result.average_mean,
                 result.average_std, result.seeds.size());
      return EXIT_SUCCESS;
    }
  } catch (const ConfigError& e) {
    fmt::print(stderr, "feddat: invalid configuration: {}\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    fmt::print(stderr, "feddat: {}\n", e.what());
    return kExitRuntime;
  }
  return EXIT_SUCCESS;
}
