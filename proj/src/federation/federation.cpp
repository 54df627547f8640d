// Copyright 2026 The FedDAT Simulator Authors
// SPDX-License-Identifier: Apache-2.0

#include "feddat/federation/federation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <thread>

#include <fmt/format.h>

#include "feddat/autodiff/ops.hpp"
#include "feddat/common/hash.hpp"
#include "feddat/common/rng.hpp"
#include "feddat/model/archive.hpp"

namespace feddat::fed {

using model::Branch;
using model::ParamList;
using model::PeftMode;

namespace {

ParamList concat(ParamList a, const ParamList& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

ParamList trainable(const ParamList& params) {
  ParamList out;
  for (const auto& p : params) {
    if (p.tensor.requires_grad()) out.push_back(p);
  }
  return out;
}

void clear_grads(const model::Model& m) {
  for (auto& p : m.state()) {
    ad::Tensor t = p.tensor;
    t.clear_grad();
  }
}

std::vector<std::size_t> sample_batch(Rng& rng, std::size_t n, std::size_t batch) {
  // Partial Fisher-Yates: `batch` distinct indices.
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < batch; ++i) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(i, n - 1)(rng);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(batch);
  return idx;
}

double batch_accuracy(const ad::Tensor& logits, std::span<const int> labels) {
  const std::size_t classes = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (static_cast<int>(argmax(logits.data().subspan(i * classes, classes))) == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

losses::LossBundle optimize(ClientState& c, const ParamList& params,
                            const std::function<losses::LossBundle()>& objective) {
  ad::Tape tape;
  ad::Tape::Scope scope(&tape);
  losses::LossBundle bundle = objective();
  if (!std::isfinite(bundle.total.item())) {
    throw ad::NumericError(fmt::format("loss is {}", bundle.total.item()));
  }
  tape.backward(bundle.total);
  c.optimizer.step(params);
  clear_grads(*c.model);
  return bundle;
}

void encode_into(std::vector<std::uint8_t>& out, const ParamList& params, std::string_view kind,
                 std::size_t round, std::size_t client) {
  model::TensorArchive archive;
  archive.manifest = {{"kind", kind}, {"round", round}, {"client", client}};
  archive.tensors = params;
  out = model::encode(archive);
}

template <typename Fn>
void run_clients(std::size_t count, std::size_t workers, Fn&& fn) {
  std::vector<std::exception_ptr> errors(count);
  auto guarded = [&](std::size_t i) {
    try {
      fn(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(count, 1));
  if (workers == 1) {
    for (std::size_t i = 0; i < count; ++i) guarded(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < count; i = next++) guarded(i);
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

std::string_view to_string(AggregationMode mode) {
  return mode == AggregationMode::weighted ? "weighted" : "uniform";
}

AggregationMode parse_aggregation(std::string_view text) {
  if (text == "weighted") return AggregationMode::weighted;
  if (text == "uniform") return AggregationMode::uniform;
  throw std::invalid_argument(fmt::format("unknown aggregation '{}'", text));
}

std::string_view to_string(DatVariant variant) {
  switch (variant) {
    case DatVariant::full: return "full";
    case DatVariant::no_frozen_branch: return "no_frozen_branch";
    case DatVariant::no_local_branch: return "no_local_branch";
    case DatVariant::no_mkd: return "no_mkd";
  }
  return "?";
}

DatVariant parse_dat_variant(std::string_view text) {
  for (DatVariant v : {DatVariant::full, DatVariant::no_frozen_branch, DatVariant::no_local_branch,
                       DatVariant::no_mkd}) {
    if (to_string(v) == text) return v;
  }
  throw std::invalid_argument(fmt::format("unknown feddat variant '{}'", text));
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("train: " + msg); };
  if (rounds < 1) fail("rounds must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(lr >= 0.0) || !std::isfinite(lr)) fail("lr must be a finite value >= 0");
  if (optimizer == OptimizerKind::sgd_momentum && !(momentum >= 0.0 && momentum < 1.0)) {
    fail("momentum must be in [0, 1)");
  }
  backbone.validate();
  peft.validate(backbone);
  mkd.validate();
  if (variant != DatVariant::full && peft.mode != PeftMode::feddat) {
    fail(fmt::format("variant '{}' requires mode feddat", to_string(variant)));
  }
}

nlohmann::json TrainConfig::to_json() const {
  return {{"rounds", rounds},
          {"local_steps", local_steps},
          {"batch_size", batch_size},
          {"lr", lr},
          {"optimizer", std::string(fed::to_string(optimizer))},
          {"momentum", momentum},
          {"aggregation", std::string(fed::to_string(aggregation))},
          {"variant", std::string(fed::to_string(variant))},
          {"seed", seed},
          {"backbone",
           {{"d_model", backbone.d_model},
            {"n_layers", backbone.n_layers},
            {"n_heads", backbone.n_heads},
            {"d_ffn", backbone.d_ffn},
            {"n_vision_tokens", backbone.n_vision_tokens},
            {"vision_token_dim", backbone.vision_token_dim},
            {"n_text_tokens", backbone.n_text_tokens},
            {"vocab_size", backbone.vocab_size},
            {"use_positions", backbone.use_positions},
            {"seed", backbone.seed}}},
          {"peft",
           {{"mode", std::string(model::to_string(peft.mode))},
            {"adapter_r", peft.adapter_r},
            {"lora_r", peft.lora_r},
            {"lora_query", peft.lora_query},
            {"lora_value", peft.lora_value},
            {"n_prompt_tokens", peft.n_prompt_tokens},
            {"activation", std::string(model::to_string(peft.activation))}}},
          {"mkd",
           {{"alpha_max", mkd.alpha_max},
            {"beta_max", mkd.beta_max},
            {"ramp_fraction", mkd.ramp_fraction},
            {"ramp_coefficient", mkd.ramp_coefficient},
            {"temperature", mkd.temperature}}}};
}

namespace {

[[noreturn]] void unknown_key(std::string_view section, std::string_view key) {
  throw std::invalid_argument(fmt::format("unknown key '{}{}'", section, key));
}

}  // namespace

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "rounds") c.rounds = v.get<std::size_t>();
    else if (key == "local_steps") c.local_steps = v.get<std::size_t>();
    else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
    else if (key == "lr") c.lr = v.get<double>();
    else if (key == "optimizer") c.optimizer = parse_optimizer(v.get<std::string>());
    else if (key == "momentum") c.momentum = v.get<double>();
    else if (key == "aggregation") c.aggregation = parse_aggregation(v.get<std::string>());
    else if (key == "variant") c.variant = parse_dat_variant(v.get<std::string>());
    else if (key == "seed") c.seed = v.get<std::uint64_t>();
    else if (key == "backbone") {
      for (const auto& [k, b] : v.items()) {
        auto& bb = c.backbone;
        if (k == "d_model") bb.d_model = b.get<std::size_t>();
        else if (k == "n_layers") bb.n_layers = b.get<std::size_t>();
        else if (k == "n_heads") bb.n_heads = b.get<std::size_t>();
        else if (k == "d_ffn") bb.d_ffn = b.get<std::size_t>();
        else if (k == "n_vision_tokens") bb.n_vision_tokens = b.get<std::size_t>();
        else if (k == "vision_token_dim") bb.vision_token_dim = b.get<std::size_t>();
        else if (k == "n_text_tokens") bb.n_text_tokens = b.get<std::size_t>();
        else if (k == "vocab_size") bb.vocab_size = b.get<std::size_t>();
        else if (k == "use_positions") bb.use_positions = b.get<bool>();
        else if (k == "seed") bb.seed = b.get<std::uint64_t>();
        else unknown_key("backbone.", k);
      }
    } else if (key == "peft") {
      for (const auto& [k, p] : v.items()) {
        auto& pc = c.peft;
        if (k == "mode") pc.mode = model::parse_peft_mode(p.get<std::string>());
        else if (k == "adapter_r") pc.adapter_r = p.get<std::size_t>();
        else if (k == "lora_r") pc.lora_r = p.get<std::size_t>();
        else if (k == "lora_query") pc.lora_query = p.get<bool>();
        else if (k == "lora_value") pc.lora_value = p.get<bool>();
        else if (k == "n_prompt_tokens") pc.n_prompt_tokens = p.get<std::size_t>();
        else if (k == "activation") pc.activation = model::parse_activation(p.get<std::string>());
        else unknown_key("peft.", k);
      }
    } else if (key == "mkd") {
      for (const auto& [k, m] : v.items()) {
        auto& w = c.mkd;
        if (k == "alpha_max") w.alpha_max = m.get<double>();
        else if (k == "beta_max") w.beta_max = m.get<double>();
        else if (k == "ramp_fraction") w.ramp_fraction = m.get<double>();
        else if (k == "ramp_coefficient") w.ramp_coefficient = m.get<double>();
        else if (k == "temperature") w.temperature = m.get<double>();
        else unknown_key("mkd.", k);
      }
    } else {
      unknown_key("", key);
    }
  }
  return c;
}

Branch TrainConfig::inference_branch() const {
  return peft.uses_adapters() ? Branch::shared : Branch::base;
}

ClientState::ClientState(std::size_t client_id, const bench::ClientData& client_data,
                         const TrainConfig& cfg)
    : id(client_id), data(&client_data), optimizer(cfg.optimizer, cfg.lr, cfg.momentum) {
  if (client_data.train.size() < cfg.batch_size) {
    throw std::invalid_argument(fmt::format("client {}: {} training samples < batch size {}",
                                            client_id, client_data.train.size(), cfg.batch_size));
  }
  Rng rng = stream(cfg.seed, "client.init", client_id);
  model = std::make_unique<model::Model>(cfg.backbone, cfg.peft, client_data.num_classes(), rng);
}

void install_global(ClientState& client, const ParamList& global) {
  model::copy_values(global, client.model->communicated());
  if (client.model->peft_config().mode == PeftMode::feddat) client.model->freeze_shared_copy();
}

ClientUpdateResult client_update(ClientState& client, const ParamList& global, std::size_t round,
                                 const TrainConfig& cfg) {
  model::Model& m = *client.model;
  install_global(client, global);
  client.optimizer.reset(m.communicated());

  losses::MkdWeights w = cfg.mkd;
  if (cfg.variant == DatVariant::no_mkd) {
    w.alpha = w.beta = 0.0;
  } else {
    w.at_round(round, cfg.rounds);
  }
  const bool feddat = m.peft_config().mode == PeftMode::feddat;
  const Branch teacher = cfg.variant == DatVariant::no_frozen_branch  ? Branch::local
                         : cfg.variant == DatVariant::no_local_branch ? Branch::frozen
                                                                      : Branch::dat;
  const ParamList head = m.head().named();
  const ParamList step1 = feddat ? concat(m.shared()->named("shared"), head) : trainable(m.state());
  const ParamList step2 = feddat ? concat(m.dat()->local.named("dat.local"), head) : ParamList{};

  const auto& train = client.data->train;
  const std::size_t bv = cfg.backbone.n_vision_tokens;
  Rng rng = stream(cfg.seed, "client.batch", client.id, round);
  ClientUpdateResult result;
  result.stats.alpha = feddat ? w.alpha : 0.0;
  result.stats.beta = feddat ? w.beta : 0.0;
  for (std::size_t t = 0; t < cfg.local_steps; ++t) {
    const auto idx = sample_batch(rng, train.size(), cfg.batch_size);
    const model::Batch batch = bench::make_batch(train, idx, bv);
    try {
      if (feddat) {
        auto s = optimize(client, step1, [&] {
          return losses::loss_shared(m, batch, w.alpha, w.temperature, teacher);
        });
        result.stats.ce += s.ce;
        result.stats.kl_s += s.kl;
        result.stats.accuracy += batch_accuracy(s.logits, batch.labels);
        if (cfg.variant != DatVariant::no_local_branch) {
          const Branch student = cfg.variant == DatVariant::no_frozen_branch ? Branch::local : Branch::dat;
          auto d = optimize(client, step2, [&] {
            return losses::loss_dat(m, batch, w.beta, w.temperature, student);
          });
          result.stats.kl_dat += d.kl;
        }
      } else {
        auto s = optimize(client, step1, [&] { return losses::loss_plain(m, batch); });
        result.stats.ce += s.ce;
        result.stats.accuracy += batch_accuracy(s.logits, batch.labels);
      }
    } catch (const ad::NumericError& e) {
      throw ad::NumericError(fmt::format("client {} round {} step {}: non-finite value ({})",
                                         client.id, round, t + 1, e.what()));
    }
  }
  if (cfg.local_steps > 0) {
    const auto steps = static_cast<double>(cfg.local_steps);
    result.stats.accuracy /= steps;
    result.stats.ce /= steps;
    result.stats.kl_s /= steps;
    result.stats.kl_dat /= steps;
  }
  result.upload = model::snapshot(m.communicated());
  return result;
}

ParamList aggregate(std::span<const Upload> uploads, AggregationMode mode) {
  if (uploads.empty()) throw std::invalid_argument("aggregate: no uploads");
  const ParamList& first = uploads.front().params;
  for (const auto& u : uploads) {
    if (u.params.size() != first.size()) throw ad::DimensionError("aggregate: parameter count mismatch");
    for (std::size_t i = 0; i < first.size(); ++i) {
      if (u.params[i].name != first[i].name || u.params[i].tensor.shape() != first[i].tensor.shape()) {
        throw ad::DimensionError(fmt::format("aggregate: upload '{}' does not match '{}'",
                                             u.params[i].name, first[i].name));
      }
    }
  }
  double total = 0.0;
  for (const auto& u : uploads) total += static_cast<double>(u.num_samples);
  if (mode == AggregationMode::weighted && total == 0.0) {
    throw std::invalid_argument("aggregate: total sample count is 0");
  }
  // Accumulated as offsets from the first upload, so identical uploads and a
  // single upload reproduce the input bit-exactly.
  ParamList out = model::snapshot(first);
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto acc = out[i].tensor.mutable_data();
    const auto base = first[i].tensor.data();
    std::vector<double> delta(acc.size(), 0.0);
    for (const auto& u : uploads) {
      const double coeff = mode == AggregationMode::weighted
                               ? static_cast<double>(u.num_samples) / total
                               : 1.0 / static_cast<double>(uploads.size());
      auto w = u.params[i].tensor.data();
      for (std::size_t j = 0; j < acc.size(); ++j) delta[j] += coeff * (w[j] - base[j]);
    }
    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] = base[j] + delta[j];
  }
  return out;
}

void CommLedger::record(std::size_t round, Direction direction, std::size_t client,
                        std::size_t scalars, std::span<const std::uint8_t> payload) {
  entries_.push_back({round, direction, client, scalars, payload.size(), Fnv1a().update(payload).digest()});
  if (keep_payloads_) payloads_.emplace_back(payload.begin(), payload.end());
}

std::size_t CommLedger::total_scalars(Direction direction) const {
  std::size_t total = 0;
  for (const auto& e : entries_) {
    if (e.direction == direction) total += e.scalars;
  }
  return total;
}

std::size_t CommLedger::round_scalars(std::size_t round, Direction direction) const {
  std::size_t total = 0;
  for (const auto& e : entries_) {
    if (e.round == round && e.direction == direction) total += e.scalars;
  }
  return total;
}

nlohmann::json CommLedger::to_json() const {
  auto rows = nlohmann::json::array();
  for (const auto& e : entries_) {
    rows.push_back({{"round", e.round},
                    {"direction", e.direction == Direction::up ? "up" : "down"},
                    {"client", e.client},
                    {"scalars", e.scalars},
                    {"bytes", e.bytes},
                    {"hash", hex64(e.hash)}});
  }
  return rows;
}

CommLedger CommLedger::from_json(const nlohmann::json& j) {
  CommLedger ledger;
  for (const auto& row : j) {
    LedgerEntry e;
    e.round = row.at("round").get<std::size_t>();
    e.direction = row.at("direction").get<std::string>() == "up" ? Direction::up : Direction::down;
    e.client = row.at("client").get<std::size_t>();
    e.scalars = row.at("scalars").get<std::size_t>();
    e.bytes = row.at("bytes").get<std::size_t>();
    e.hash = std::stoull(row.at("hash").get<std::string>(), nullptr, 16);
    ledger.entries_.push_back(e);
  }
  return ledger;
}

ServerState ServerState::init(const TrainConfig& cfg) {
  Rng rng = stream(cfg.seed, "server");
  model::Model prototype(cfg.backbone, cfg.peft, 1, rng);
  ServerState s;
  s.global = model::snapshot(prototype.communicated());
  s.total_rounds = cfg.rounds;
  s.aggregation = cfg.aggregation;
  s.seed = cfg.seed;
  return s;
}

std::vector<ClientRoundStats> server_round(ServerState& server, std::span<ClientState> clients,
                                           const TrainConfig& cfg, CommLedger& ledger,
                                           std::size_t workers) {
  if (clients.empty()) throw std::invalid_argument("server_round: no clients");
  if (server.round >= server.total_rounds) throw std::logic_error("server_round: all rounds done");
  const std::size_t round = server.round + 1;
  const std::size_t k = clients.size();
  std::vector<std::vector<std::uint8_t>> down(k);
  std::vector<std::vector<std::uint8_t>> up(k);
  std::vector<ClientRoundStats> stats(k);
  std::vector<Upload> uploads(k);

  for (std::size_t i = 0; i < k; ++i) {
    encode_into(down[i], server.global, "broadcast", round, clients[i].id);
  }
  run_clients(k, workers, [&](std::size_t i) {
    // The client only sees what arrives over the wire.
    const ParamList received = model::decode(down[i]).tensors;
    auto result = client_update(clients[i], received, round, cfg);
    encode_into(up[i], result.upload, "upload", round, clients[i].id);
    stats[i] = result.stats;
  });
  for (std::size_t i = 0; i < k; ++i) {
    uploads[i].params = model::decode(up[i]).tensors;
    uploads[i].num_samples = clients[i].data->train.size();
  }
  ParamList next = aggregate(uploads, server.aggregation);

  for (std::size_t i = 0; i < k; ++i) {
    ledger.record(round, Direction::down, clients[i].id, model::scalar_count(server.global), down[i]);
  }
  for (std::size_t i = 0; i < k; ++i) {
    ledger.record(round, Direction::up, clients[i].id, model::scalar_count(uploads[i].params), up[i]);
  }
  server.global = std::move(next);
  server.round = round;
  return stats;
}

std::vector<ClientRoundStats> local_round(std::span<ClientState> clients, std::size_t round,
                                          const TrainConfig& cfg, std::size_t workers) {
  std::vector<ClientRoundStats> stats(clients.size());
  run_clients(clients.size(), workers, [&](std::size_t i) {
    const ParamList own = model::snapshot(clients[i].model->communicated());
    stats[i] = client_update(clients[i], own, round, cfg).stats;
  });
  return stats;
}

void local_only_run(std::span<ClientState> clients, const TrainConfig& cfg, std::size_t workers) {
  const ServerState start = ServerState::init(cfg);
  for (auto& c : clients) install_global(c, start.global);
  for (std::size_t r = 1; r <= cfg.rounds; ++r) local_round(clients, r, cfg, workers);
}

std::size_t argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i) {
    if (row[i] > row[best]) best = i;
  }
  return best;
}

Evaluation evaluate(const model::Model& m, std::span<const bench::VqaTriple> data, Branch branch) {
  if (data.empty()) return {};
  ad::NoGradGuard no_grad;
  constexpr std::size_t kChunk = 256;
  const std::size_t classes = m.num_classes();
  std::size_t correct = 0;
  double ce = 0.0;
  for (std::size_t start = 0; start < data.size(); start += kChunk) {
    const auto part = data.subspan(start, std::min(kChunk, data.size() - start));
    const model::Batch batch = bench::make_batch(part, m.backbone_config().n_vision_tokens);
    const ad::Tensor logits = m.forward(batch, branch);
    const ad::Tensor lsm = ad::log_softmax(logits);
    for (std::size_t i = 0; i < part.size(); ++i) {
      const auto label = static_cast<std::size_t>(batch.labels[i]);
      if (label >= classes) throw std::out_of_range("evaluate: label outside answer pool");
      if (argmax(logits.data().subspan(i * classes, classes)) == label) ++correct;
      ce -= lsm.at(i * classes + label);
    }
  }
  const auto n = static_cast<double>(data.size());
  return {static_cast<double>(correct) / n, ce / n};
}

}  // namespace feddat::fed
