// Copyright 2026 The FedDAT Simulator Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "feddat/experiments/experiments.hpp"

namespace {

using namespace feddat::exp;
namespace fs = std::filesystem;

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, sep);) out.push_back(item);
  return out;
}

RunConfig tiny(const std::string& name) {
  RunConfig c;
  c.benchmark.clients = 3;
  c.benchmark.train_per_client = 48;
  c.benchmark.test_per_client = 24;
  c.train.rounds = 3;
  c.train.local_steps = 2;
  c.train.batch_size = 8;
  c.seeds = {0, 1};
  c.out = (fs::temp_directory_path() / "feddat_exp_test" / name).string();
  fs::remove_all(c.out);
  return c;
}

TEST(Metrics, CsvHasOneTestRowPerClientPerRound) {
  const RunConfig c = tiny("schema");
  const auto result = run_experiment(c);
  ASSERT_EQ(result.seeds.size(), 2u);
  const auto lines = split(slurp(fs::path(c.out) / "seed_0" / "metrics.csv"), '\n');
  ASSERT_FALSE(lines.empty());
  EXPECT_EQ(lines[0], kMetricsHeader);
  const std::size_t k = 3, r = c.train.rounds;
  std::map<std::string, std::set<std::pair<std::size_t, std::size_t>>> seen;
  std::size_t last_round = 0;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto f = split(lines[i], ',');
    ASSERT_EQ(f.size(), 10u) << lines[i];
    const std::size_t round = std::stoul(f[0]);
    EXPECT_GE(round, last_round);
    last_round = round;
    EXPECT_TRUE(seen[f[2]].insert({round, std::stoul(f[1])}).second) << "duplicate row " << lines[i];
    const double acc = std::stod(f[3]);
    EXPECT_GE(acc, 0.0);
    EXPECT_LE(acc, 1.0);
    if (f[2] == "test") {
      EXPECT_EQ(std::stod(f[5]), 0.0);
      EXPECT_EQ(std::stod(f[6]), 0.0);
    }
  }
  EXPECT_EQ(seen["test"].size(), r * k);
  EXPECT_EQ(seen["train"].size(), r * k);
  for (std::size_t round = 1; round <= r; ++round) {
    for (std::size_t client = 0; client < k; ++client) EXPECT_EQ(seen["test"].count({round, client}), 1u);
  }
  const auto summary = nlohmann::json::parse(slurp(fs::path(c.out) / "summary.json"));
  EXPECT_EQ(summary["seeds"].size(), 2u);
  EXPECT_NEAR(summary["average_mean"].get<double>(), result.average_mean, 1e-12);
}

TEST(Determinism, ReplayAndWorkerCountAreByteIdentical) {
  RunConfig a = tiny("replay_a"), b = tiny("replay_b"), w = tiny("replay_w");
  a.workers = 1;
  b.workers = 1;
  w.workers = 3;
  run_experiment(a);
  run_experiment(b);
  run_experiment(w);
  for (const char* file : {"metrics.csv", "ledger.json"}) {
    for (const char* seed : {"seed_0", "seed_1"}) {
      const auto ref = slurp(fs::path(a.out) / seed / file);
      EXPECT_FALSE(ref.empty());
      EXPECT_EQ(ref, slurp(fs::path(b.out) / seed / file)) << file;
      EXPECT_EQ(ref, slurp(fs::path(w.out) / seed / file)) << file;
    }
  }
}

TEST(Determinism, ResumeEqualsStraightThrough) {
  const RunConfig straight = tiny("straight");
  run_experiment(straight);
  const RunConfig split_run = tiny("split");
  RunOptions stop;
  stop.stop_after_round = 1;
  const auto partial = run_experiment(split_run, stop);
  EXPECT_FALSE(partial.complete);
  const auto resumed = resume_experiment(fs::path(split_run.out) / "seed_0" / "checkpoint.fdat");
  EXPECT_TRUE(resumed.complete);
  for (const char* seed : {"seed_0", "seed_1"}) {
    for (const char* file : {"metrics.csv", "ledger.json"}) {
      EXPECT_EQ(slurp(fs::path(straight.out) / seed / file), slurp(fs::path(split_run.out) / seed / file))
          << seed << "/" << file;
    }
  }
  EXPECT_EQ(slurp(fs::path(straight.out) / "summary.json"), slurp(fs::path(split_run.out) / "summary.json"));
}

TEST(Determinism, ResumeRejectsAChangedConfig) {
  RunConfig c = tiny("changed");
  RunOptions stop;
  stop.stop_after_round = 1;
  run_experiment(c, stop);
  c.train.lr = 0.01;
  RunOptions resume;
  resume.resume = true;
  EXPECT_ANY_THROW(run_experiment(c, resume));
}

TEST(Stats, MeanAndSampleStd) {
  EXPECT_EQ(stddev({0.7}), 0.0);
  EXPECT_NEAR(stddev({1.0, 3.0}), std::sqrt(2.0), 1e-15);
  EXPECT_EQ(mean({1.0, 2.0, 6.0}), 3.0);
}

TEST(Evaluation, ArgmaxIgnoresLogitShiftAndUntrainedHeadIsChance) {
  const std::vector<double> row{0.3, -1.0, 2.5, 2.4};
  std::vector<double> shifted = row;
  for (double& x : shifted) x += 1e3;
  EXPECT_EQ(feddat::fed::argmax(row), feddat::fed::argmax(shifted));

  // A zero head gives equal logits, so every prediction is answer 0.
  RunConfig c = tiny("chance");
  const auto bench = feddat::bench::generate(c.benchmark);
  Simulation sim(c, bench, 0);
  auto& model = *sim.clients()[0].model;
  for (auto p : model.head().named()) {
    for (double& x : p.tensor.mutable_data()) x = 0.0;
  }
  const auto& test = bench.clients[0].test;
  double zeros = 0.0;
  for (const auto& t : test) zeros += t.answer == 0 ? 1.0 : 0.0;
  const auto eval = feddat::fed::evaluate(model, test, feddat::model::Branch::shared);
  EXPECT_NEAR(eval.accuracy, zeros / static_cast<double>(test.size()), 1e-15);
  EXPECT_NEAR(eval.ce, std::log(static_cast<double>(model.num_classes())), 1e-12);
}

TEST(Harness, AblationTableShape) {
  RunConfig c = tiny("ablation");
  c.seeds = {0};
  const auto result = ablation_suite(c);
  ASSERT_EQ(result.accuracy.labels.size(), 7u);
  EXPECT_EQ(result.accuracy.columns.size(), 3u + 1u);
  for (const auto& v : result.accuracy.values) EXPECT_EQ(v.size(), 4u);
  EXPECT_EQ(result.accuracy.labels[0], "full_feddat");
  // The three inference rows reuse the full model, whose shared-branch
  // accuracy is the full_feddat row.
  EXPECT_EQ(result.accuracy.row("infer_shared"), result.accuracy.row("full_feddat"));
  bool saw_no_mkd = false;
  for (const auto& [mode, rows] : result.metrics) {
    if (mode != AblationMode::no_mkd) continue;
    saw_no_mkd = true;
    for (const auto& m : rows) {
      EXPECT_EQ(m.kl_s, 0.0);
      EXPECT_EQ(m.kl_dat, 0.0);
      EXPECT_EQ(m.alpha, 0.0);
    }
  }
  EXPECT_TRUE(saw_no_mkd);
  EXPECT_NE(result.accuracy.to_markdown().find("| no_local_branch |"), std::string::npos);
  c.train.peft.mode = feddat::model::PeftMode::adapter;
  EXPECT_ANY_THROW(ablation_suite(c));
}

TEST(Harness, MotivationalGridShape) {
  RunConfig c = tiny("motiv");
  c.seeds = {0};
  const Table t = motivational_grid(c);
  EXPECT_EQ(t.labels, (std::vector<std::string>{"clf-L", "Adapter-L", "clf", "Adapter"}));
  EXPECT_EQ(t.columns.size(), 3u + 2u);
  // The classifier head is never communicated, so federating it changes nothing.
  EXPECT_EQ(t.row("clf"), t.row("clf-L"));
  EXPECT_EQ(t.row("clf").back(), 0.0);
  EXPECT_EQ(t.row("Adapter-L").back(), 0.0);
  EXPECT_GT(t.row("Adapter").back(), 0.0);
  c.benchmark.regime = feddat::bench::Regime::answer_shift;
  EXPECT_ANY_THROW(motivational_grid(c));
}

TEST(Harness, SweepUplinkScalesWithClientCount) {
  RunConfig c = tiny("sweep");
  c.seeds = {0};
  c.train.rounds = 2;
  c.sweep_counts = {3, 6};
  const Table t = scalability_sweep(c);
  ASSERT_EQ(t.labels.size(), 4u);
  const auto per_client = feddat::model::communicated_count(c.train.backbone, c.train.peft);
  for (const auto& row : t.values) {
    EXPECT_EQ(row[3], static_cast<double>(per_client * 2 * static_cast<std::size_t>(row[0])));
  }
  c.sweep_counts = {4};
  EXPECT_ANY_THROW(scalability_sweep(c));
  EXPECT_EQ(t.to_csv().rfind("row,clients,rounds,average,uplink_scalars\n", 0), 0u);
}

TEST(Config, JsonRoundTripAndValidation) {
  RunConfig c = tiny("cfg");
  c.train.lr = 0.02;
  const auto back = RunConfig::from_json(c.to_json());
  EXPECT_EQ(back.hash(), c.hash());
  RunConfig moved = c;
  moved.out = "elsewhere";
  moved.workers = 7;
  EXPECT_EQ(moved.hash(), c.hash());
  auto j = c.to_json();
  j["train"]["bogus"] = true;
  EXPECT_ANY_THROW(RunConfig::from_json(j));
  RunConfig bad = c;
  bad.train.backbone.vision_token_dim = 3;  // 4 x 3 != 16
  EXPECT_ANY_THROW(bad.validate());
  bad = c;
  bad.train.batch_size = 100;
  EXPECT_ANY_THROW(bad.validate());
}

}  // namespace
