// Copyright 2026 The FedDAT Simulator Authors
// SPDX-License-Identifier: Apache-2.0

#include "feddat/experiments/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <fmt/format.h>

#include "feddat/common/hash.hpp"
#include "feddat/model/archive.hpp"

namespace feddat::exp {

namespace fs = std::filesystem;
using model::Branch;
using model::PeftMode;

namespace {

void write_text(const fs::path& path, std::string_view text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error(fmt::format("cannot write '{}'", tmp.string()));
    os << text;
    if (!os) throw std::runtime_error(fmt::format("short write to '{}'", tmp.string()));
  }
  fs::rename(tmp, path);
}

nlohmann::json metrics_to_json(const std::vector<RoundMetrics>& rows) {
  auto out = nlohmann::json::array();
  for (const auto& m : rows) {
    out.push_back({m.round, m.client, m.split, m.accuracy, m.ce, m.kl_s, m.kl_dat, m.alpha, m.beta,
                   m.uplink_scalars});
  }
  return out;
}

std::vector<RoundMetrics> metrics_from_json(const nlohmann::json& j) {
  std::vector<RoundMetrics> rows;
  for (const auto& r : j) {
    RoundMetrics m;
    m.round = r.at(0).get<std::size_t>();
    m.client = r.at(1).get<std::size_t>();
    m.split = r.at(2).get<std::string>();
    m.accuracy = r.at(3).get<double>();
    m.ce = r.at(4).get<double>();
    m.kl_s = r.at(5).get<double>();
    m.kl_dat = r.at(6).get<double>();
    m.alpha = r.at(7).get<double>();
    m.beta = r.at(8).get<double>();
    m.uplink_scalars = r.at(9).get<std::size_t>();
    rows.push_back(std::move(m));
  }
  return rows;
}

fs::path seed_dir(const RunConfig& config, std::uint64_t seed) {
  return fs::path(config.out) / fmt::format("seed_{}", seed);
}

SeedResult summarize_seed(std::uint64_t seed, std::vector<double> acc, std::size_t uplink) {
  SeedResult r;
  r.seed = seed;
  r.average = mean(acc);
  r.client_accuracy = std::move(acc);
  r.uplink_scalars = uplink;
  return r;
}

std::vector<double> column_mean(const std::vector<std::vector<double>>& rows) {
  std::vector<double> out(rows.front().size(), 0.0);
  for (std::size_t c = 0; c < out.size(); ++c) {
    std::vector<double> col;
    for (const auto& r : rows) col.push_back(r[c]);
    out[c] = mean(col);
  }
  return out;
}

std::vector<double> with_average(std::vector<double> acc) {
  const double avg = mean(acc);
  acc.push_back(avg);
  return acc;
}

std::vector<std::string> client_columns(std::size_t k) {
  std::vector<std::string> cols;
  for (std::size_t i = 0; i < k; ++i) cols.push_back(fmt::format("client{}", i));
  cols.push_back("average");
  return cols;
}

}  // namespace

double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double stddev(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double acc = 0.0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

// --- config ----------------------------------------------------------------

void RunConfig::validate() const {
  benchmark.validate();
  train.validate();
  auto fail = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };
  if (seeds.empty()) fail("seeds must not be empty");
  const auto& bb = train.backbone;
  if (bb.n_vision_tokens * bb.vision_token_dim != benchmark.d_vision) {
    fail(fmt::format("backbone.n_vision_tokens * backbone.vision_token_dim = {} but benchmark.d_vision = {}",
                     bb.n_vision_tokens * bb.vision_token_dim, benchmark.d_vision));
  }
  if (bb.n_text_tokens != bench::kQuestionLength) {
    fail(fmt::format("backbone.n_text_tokens must be {}", bench::kQuestionLength));
  }
  if (bb.vocab_size < benchmark.vocab_size()) {
    fail(fmt::format("backbone.vocab_size must be >= {}", benchmark.vocab_size()));
  }
  const std::size_t per_client = benchmark.train_per_client / benchmark.subsets_per_source;
  if (per_client < train.batch_size) {
    fail(fmt::format("train.batch_size {} exceeds {} training samples per client", train.batch_size,
                     per_client));
  }
  for (std::size_t k : sweep_counts) {
    if (k == 0) fail("sweep_counts must be positive");
  }
}

nlohmann::json RunConfig::to_json() const {
  return {{"benchmark", benchmark.to_json()},
          {"train", train.to_json()},
          {"seeds", seeds},
          {"federated", federated},
          {"workers", workers},
          {"out", out},
          {"sweep_counts", sweep_counts},
          {"sweep_scale_rounds", sweep_scale_rounds}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("config: top level must be an object");
  RunConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "benchmark") c.benchmark = bench::BenchmarkSpec::from_json(v);
    else if (key == "train") c.train = fed::TrainConfig::from_json(v);
    else if (key == "seeds") c.seeds = v.get<std::vector<std::uint64_t>>();
    else if (key == "federated") c.federated = v.get<bool>();
    else if (key == "workers") c.workers = v.get<std::size_t>();
    else if (key == "out") c.out = v.get<std::string>();
    else if (key == "sweep_counts") c.sweep_counts = v.get<std::vector<std::size_t>>();
    else if (key == "sweep_scale_rounds") c.sweep_scale_rounds = v.get<bool>();
    else throw std::invalid_argument(fmt::format("unknown key '{}'", key));
  }
  return c;
}

std::uint64_t RunConfig::hash() const {
  nlohmann::json j = to_json();
  j.erase("out");
  j.erase("workers");
  return fnv1a(j.dump());
}

std::size_t RunConfig::resolved_workers() const {
  return workers == 0 ? benchmark.total_clients() : workers;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error(fmt::format("cannot open config '{}'", path.string()));
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(fmt::format("'{}': {}", path.string(), e.what()));
  }
  return RunConfig::from_json(j);
}

// --- simulation ------------------------------------------------------------

std::string format_row(const RoundMetrics& m) {
  return fmt::format("{},{},{},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f},{}", m.round, m.client,
                     m.split, m.accuracy, m.ce, m.kl_s, m.kl_dat, m.alpha, m.beta, m.uplink_scalars);
}

Simulation::Simulation(const RunConfig& config, const bench::Benchmark& benchmark, std::uint64_t seed)
    : benchmark_(&benchmark),
      train_(config.train),
      federated_(config.federated),
      workers_(config.resolved_workers()) {
  train_.seed = seed;
  server_ = fed::ServerState::init(train_);
  clients_.reserve(benchmark.clients.size());
  for (const auto& data : benchmark.clients) clients_.emplace_back(data.id, data, train_);
  if (!federated_) {
    // Local runs start from the same initial parameters a server would send.
    for (auto& c : clients_) fed::install_global(c, server_.global);
  }
}

void Simulation::run_round() {
  if (done()) throw std::logic_error("run_round: all rounds completed");
  const std::size_t r = round_ + 1;
  std::vector<fed::ClientRoundStats> stats;
  std::vector<std::size_t> uplink(clients_.size(), 0);
  if (federated_) {
    stats = fed::server_round(server_, clients_, train_, ledger_, workers_);
    for (const auto& e : ledger_.entries()) {
      if (e.round == r && e.direction == fed::Direction::up) {
        for (std::size_t i = 0; i < clients_.size(); ++i) {
          if (clients_[i].id == e.client) uplink[i] = e.scalars;
        }
      }
    }
    for (auto& c : clients_) fed::install_global(c, server_.global);
  } else {
    stats = fed::local_round(clients_, r, train_, workers_);
  }
  const Branch branch = train_.inference_branch();
  for (std::size_t i = 0; i < clients_.size(); ++i) {
    const auto& s = stats[i];
    RoundMetrics row{r, clients_[i].id, "train", s.accuracy, s.ce, s.kl_s, s.kl_dat, s.alpha, s.beta, uplink[i]};
    metrics_.push_back(row);
    const auto eval = fed::evaluate(*clients_[i].model, clients_[i].data->test, branch);
    metrics_.push_back({r, clients_[i].id, "test", eval.accuracy, eval.ce, 0.0, 0.0, s.alpha, s.beta, uplink[i]});
  }
  round_ = r;
}

std::vector<double> Simulation::client_accuracies(Branch branch) const {
  std::vector<double> out;
  for (const auto& c : clients_) out.push_back(fed::evaluate(*c.model, c.data->test, branch).accuracy);
  return out;
}

std::vector<double> Simulation::client_accuracies() const {
  return client_accuracies(train_.inference_branch());
}

std::string Simulation::metrics_csv() const {
  std::string out(kMetricsHeader);
  out += '\n';
  for (const auto& m : metrics_) {
    out += format_row(m);
    out += '\n';
  }
  return out;
}

void Simulation::save_checkpoint(const fs::path& path, const RunConfig& config) const {
  model::TensorArchive archive;
  archive.manifest = {{"format", kCheckpointFormat},
                      {"config", config.to_json()},
                      {"config_hash", hex64(config.hash())},
                      {"seed", train_.seed},
                      {"round", round_},
                      {"metrics", metrics_to_json(metrics_)},
                      {"ledger", ledger_.to_json()}};
  for (const auto& p : server_.global) archive.tensors.push_back({"server/" + p.name, p.tensor});
  for (const auto& c : clients_) {
    const std::string prefix = fmt::format("client{}/", c.id);
    for (const auto& p : c.model->state()) archive.tensors.push_back({prefix + p.name, p.tensor});
    for (const auto& [name, v] : c.optimizer.buffers()) {
      archive.tensors.push_back({prefix + "opt/" + name, ad::Tensor({v.size()}, v)});
    }
  }
  model::write_archive(path, archive);
}

void Simulation::load_checkpoint(const model::TensorArchive& archive) {
  const auto& m = archive.manifest;
  if (m.at("seed").get<std::uint64_t>() != train_.seed) {
    throw std::runtime_error("checkpoint: seed does not match");
  }
  const auto round = m.at("round").get<std::size_t>();
  if (round > train_.rounds) throw std::runtime_error("checkpoint: round beyond configured total");
  for (auto& p : server_.global) p.tensor.assign(archive.get("server/" + p.name));
  for (auto& c : clients_) {
    const std::string prefix = fmt::format("client{}/", c.id);
    for (auto& p : c.model->state()) {
      ad::Tensor t = p.tensor;
      t.assign(archive.get(prefix + p.name));
    }
    auto& buffers = c.optimizer.buffers();
    buffers.clear();
    const std::string opt = prefix + "opt/";
    for (const auto& t : archive.tensors) {
      if (t.name.rfind(opt, 0) == 0) {
        auto values = t.tensor.data();
        buffers[t.name.substr(opt.size())] = std::vector<double>(values.begin(), values.end());
      }
    }
  }
  server_.round = round;
  round_ = round;
  metrics_ = metrics_from_json(m.at("metrics"));
  ledger_ = fed::CommLedger::from_json(m.at("ledger"));
}

// --- experiment driver -----------------------------------------------------

namespace {

void check_checkpoint(const model::TensorArchive& archive, const RunConfig& config) {
  const auto& m = archive.manifest;
  if (!m.is_object() || m.value("format", "") != kCheckpointFormat) {
    throw std::runtime_error(fmt::format("checkpoint: unsupported format (expected '{}')", kCheckpointFormat));
  }
  if (m.value("config_hash", "") != hex64(config.hash())) {
    throw std::runtime_error("checkpoint: config hash mismatch; refusing to resume");
  }
}

void write_summary(const RunConfig& config, const ExperimentResult& result) {
  nlohmann::json seeds = nlohmann::json::array();
  for (const auto& s : result.seeds) {
    seeds.push_back({{"seed", s.seed},
                     {"client_accuracy", s.client_accuracy},
                     {"average", s.average},
                     {"uplink_scalars", s.uplink_scalars}});
  }
  nlohmann::json summary = {{"config_hash", hex64(config.hash())},
                            {"mode", std::string(model::to_string(config.train.peft.mode))},
                            {"federated", config.federated},
                            {"seeds", seeds},
                            {"client_mean", result.client_mean},
                            {"client_std", result.client_std},
                            {"average_mean", result.average_mean},
                            {"average_std", result.average_std}};
  write_text(fs::path(config.out) / "summary.json", summary.dump(2) + "\n");
}

}  // namespace

ExperimentResult run_experiment(const RunConfig& config, const RunOptions& options) {
  config.validate();
  const bench::Benchmark bench = bench::generate(config.benchmark);
  if (options.write_outputs) {
    fs::create_directories(config.out);
    write_text(fs::path(config.out) / "config.json", config.to_json().dump(2) + "\n");
  }
  ExperimentResult result;
  for (std::uint64_t seed : config.seeds) {
    Simulation sim(config, bench, seed);
    const fs::path dir = seed_dir(config, seed);
    const fs::path ckpt = dir / "checkpoint.fdat";
    if (options.resume && fs::exists(ckpt)) {
      const auto archive = model::read_archive(ckpt);
      check_checkpoint(archive, config);
      sim.load_checkpoint(archive);
    }
    if (options.write_outputs) fs::create_directories(dir);
    bool stopped = false;
    while (!sim.done()) {
      if (options.stop_after_round && sim.round() >= *options.stop_after_round) {
        stopped = true;
        break;
      }
      sim.run_round();
      if (options.write_outputs) sim.save_checkpoint(ckpt, config);
    }
    if (options.write_outputs) {
      write_text(dir / "metrics.csv", sim.metrics_csv());
      write_text(dir / "ledger.json", sim.ledger().to_json().dump(1) + "\n");
    }
    if (stopped) {
      result.complete = false;
      continue;
    }
    std::vector<double> acc;
    for (const auto& m : sim.metrics()) {
      if (m.split == "test" && m.round == sim.round()) acc.push_back(m.accuracy);
    }
    result.seeds.push_back(
        summarize_seed(seed, std::move(acc), sim.ledger().total_scalars(fed::Direction::up)));
  }
  if (!result.complete) return result;

  const std::size_t k = result.seeds.front().client_accuracy.size();
  for (std::size_t i = 0; i < k; ++i) {
    std::vector<double> col;
    for (const auto& s : result.seeds) col.push_back(s.client_accuracy[i]);
    result.client_mean.push_back(mean(col));
    result.client_std.push_back(stddev(col));
  }
  std::vector<double> averages;
  for (const auto& s : result.seeds) averages.push_back(s.average);
  result.average_mean = mean(averages);
  result.average_std = stddev(averages);
  if (options.write_outputs) write_summary(config, result);
  return result;
}

ExperimentResult resume_experiment(const fs::path& checkpoint) {
  const auto archive = model::read_archive(checkpoint);
  const auto& m = archive.manifest;
  if (!m.is_object() || m.value("format", "") != kCheckpointFormat || !m.contains("config")) {
    throw std::runtime_error(fmt::format("'{}': not a checkpoint of format '{}'", checkpoint.string(),
                                         kCheckpointFormat));
  }
  RunConfig config = RunConfig::from_json(m.at("config"));
  check_checkpoint(archive, config);
  config.out = fs::absolute(checkpoint).parent_path().parent_path().string();
  RunOptions options;
  options.resume = true;
  return run_experiment(config, options);
}

// --- tables ----------------------------------------------------------------

std::string Table::to_csv() const {
  std::string out = "row";
  for (const auto& c : columns) out += "," + c;
  out += '\n';
  for (std::size_t r = 0; r < labels.size(); ++r) {
    out += labels[r];
    for (double v : values[r]) out += fmt::format(",{:.6f}", v);
    out += '\n';
  }
  return out;
}

std::string Table::to_markdown() const {
  std::string out = "| row |";
  std::string rule = "|---|";
  for (const auto& c : columns) {
    out += fmt::format(" {} |", c);
    rule += "---:|";
  }
  out += "\n" + rule + "\n";
  for (std::size_t r = 0; r < labels.size(); ++r) {
    out += fmt::format("| {} |", labels[r]);
    for (double v : values[r]) {
      out += std::floor(v) == v && std::fabs(v) >= 1.0 ? fmt::format(" {:.0f} |", v) : fmt::format(" {:.4f} |", v);
    }
    out += '\n';
  }
  return out;
}

const std::vector<double>& Table::row(std::string_view label) const {
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] == label) return values[r];
  }
  throw std::out_of_range(fmt::format("table has no row '{}'", label));
}

std::string_view to_string(AblationMode mode) {
  switch (mode) {
    case AblationMode::full_feddat: return "full_feddat";
    case AblationMode::no_frozen_branch: return "no_frozen_branch";
    case AblationMode::no_local_branch: return "no_local_branch";
    case AblationMode::no_mkd: return "no_mkd";
    case AblationMode::infer_dat: return "infer_dat";
    case AblationMode::infer_local: return "infer_local";
    case AblationMode::infer_shared: return "infer_shared";
  }
  return "?";
}

AblationResult ablation_suite(const RunConfig& config) {
  config.validate();
  if (config.train.peft.mode != PeftMode::feddat || !config.federated) {
    throw std::invalid_argument("ablation: requires federated mode feddat");
  }
  const bench::Benchmark bench = bench::generate(config.benchmark);
  constexpr AblationMode kRows[] = {AblationMode::full_feddat,  AblationMode::no_frozen_branch,
                                    AblationMode::no_local_branch, AblationMode::no_mkd,
                                    AblationMode::infer_dat,    AblationMode::infer_local,
                                    AblationMode::infer_shared};
  std::vector<std::vector<std::vector<double>>> per_row(std::size(kRows));
  AblationResult result;
  const std::pair<AblationMode, fed::DatVariant> trainings[] = {
      {AblationMode::full_feddat, fed::DatVariant::full},
      {AblationMode::no_frozen_branch, fed::DatVariant::no_frozen_branch},
      {AblationMode::no_local_branch, fed::DatVariant::no_local_branch},
      {AblationMode::no_mkd, fed::DatVariant::no_mkd}};
  for (std::uint64_t seed : config.seeds) {
    for (const auto& [mode, variant] : trainings) {
      RunConfig c = config;
      c.train.variant = variant;
      Simulation sim(c, bench, seed);
      while (!sim.done()) sim.run_round();
      per_row[static_cast<std::size_t>(mode)].push_back(with_average(sim.client_accuracies(Branch::shared)));
      if (mode == AblationMode::full_feddat) {
        per_row[static_cast<std::size_t>(AblationMode::infer_dat)].push_back(
            with_average(sim.client_accuracies(Branch::dat)));
        per_row[static_cast<std::size_t>(AblationMode::infer_local)].push_back(
            with_average(sim.client_accuracies(Branch::local)));
        per_row[static_cast<std::size_t>(AblationMode::infer_shared)].push_back(
            with_average(sim.client_accuracies(Branch::shared)));
      }
      if (seed == config.seeds.front()) result.metrics.emplace_back(mode, sim.metrics());
    }
  }
  result.accuracy.columns = client_columns(bench.clients.size());
  for (AblationMode mode : kRows) {
    result.accuracy.labels.emplace_back(to_string(mode));
    result.accuracy.values.push_back(column_mean(per_row[static_cast<std::size_t>(mode)]));
  }
  return result;
}

Table motivational_grid(const RunConfig& config) {
  config.validate();
  if (config.benchmark.regime != bench::Regime::feature_shift) {
    throw std::invalid_argument(fmt::format("motiv: requires benchmark.regime feature_shift, got '{}'",
                                            bench::to_string(config.benchmark.regime)));
  }
  const bench::Benchmark bench = bench::generate(config.benchmark);
  struct Cell {
    const char* label;
    PeftMode mode;
    bool federated;
  };
  constexpr Cell kCells[] = {{"clf-L", PeftMode::head_only, false},
                             {"Adapter-L", PeftMode::adapter, false},
                             {"clf", PeftMode::head_only, true},
                             {"Adapter", PeftMode::adapter, true}};
  Table table;
  table.columns = client_columns(bench.clients.size());
  table.columns.push_back("uplink_scalars");
  for (const auto& cell : kCells) {
    RunConfig c = config;
    c.train.peft.mode = cell.mode;
    c.train.variant = fed::DatVariant::full;
    c.federated = cell.federated;
    std::vector<std::vector<double>> rows;
    std::vector<double> uplinks;
    for (std::uint64_t seed : c.seeds) {
      Simulation sim(c, bench, seed);
      while (!sim.done()) sim.run_round();
      rows.push_back(with_average(sim.client_accuracies()));
      uplinks.push_back(static_cast<double>(sim.ledger().total_scalars(fed::Direction::up)));
    }
    auto row = column_mean(rows);
    row.push_back(mean(uplinks));
    table.labels.emplace_back(cell.label);
    table.values.push_back(std::move(row));
  }
  return table;
}

Table scalability_sweep(const RunConfig& config) {
  config.validate();
  const std::size_t sources = config.benchmark.clients;
  Table table;
  table.columns = {"clients", "rounds", "average", "uplink_scalars"};
  for (std::size_t k : config.sweep_counts) {
    if (k % sources != 0) {
      throw std::invalid_argument(
          fmt::format("sweep: {} clients do not split {} heterogeneity sources evenly", k, sources));
    }
    RunConfig c = config;
    c.benchmark.subsets_per_source = k / sources;
    if (config.sweep_scale_rounds) c.train.rounds = config.train.rounds * k / sources;
    c.validate();
    const bench::Benchmark bench = bench::generate(c.benchmark);
    for (PeftMode mode : {PeftMode::feddat, PeftMode::adapter}) {
      c.train.peft.mode = mode;
      c.train.variant = fed::DatVariant::full;
      std::vector<double> averages;
      std::vector<double> uplinks;
      for (std::uint64_t seed : c.seeds) {
        Simulation sim(c, bench, seed);
        while (!sim.done()) sim.run_round();
        const auto acc = sim.client_accuracies();
        for (double a : acc) {
          if (std::isnan(a)) throw std::runtime_error("sweep: NaN accuracy");
        }
        averages.push_back(mean(acc));
        uplinks.push_back(static_cast<double>(sim.ledger().total_scalars(fed::Direction::up)));
      }
      table.labels.push_back(fmt::format("{}@K={}", model::to_string(mode), k));
      table.values.push_back({static_cast<double>(k), static_cast<double>(c.train.rounds),
                              mean(averages), mean(uplinks)});
    }
  }
  return table;
}

}  // namespace feddat::exp
