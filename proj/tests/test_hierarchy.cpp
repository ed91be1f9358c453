// Copyright 2026 The FedDQC Simulator Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


#include <gtest/gtest.h>

#include <limits>
#include <set>

#include "support.hpp"

namespace feddqc {
namespace {

using test::arch;

std::vector<std::string> ids(std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back("s" + std::to_string(i));
  return out;
}

std::vector<std::size_t> sizes_of(const std::vector<std::vector<std::string>>& blocks) {
  std::vector<std::size_t> out;
  for (const auto& b : blocks) out.push_back(b.size());
  return out;
}

TEST(SplitHierarchies, EqualBlocksWithRemainderLast) {
  EXPECT_EQ(sizes_of(split_hierarchies(ids(9), 1, 3)), (std::vector<std::size_t>{3, 3, 3}));
  EXPECT_EQ(sizes_of(split_hierarchies(ids(10), 2, 3)), (std::vector<std::size_t>{5, 5}));
  EXPECT_EQ(sizes_of(split_hierarchies(ids(11), 1, 3)), (std::vector<std::size_t>{3, 3, 5}));
  EXPECT_EQ(sizes_of(split_hierarchies(ids(7), 3, 3)), (std::vector<std::size_t>{7}));
  const auto b = split_hierarchies(ids(9), 1, 3);
  EXPECT_EQ(b[0], (std::vector<std::string>{"s0", "s1", "s2"}));
}

TEST(SplitHierarchies, FewerSamplesThanBlocksGivesSingletons) {
  EXPECT_EQ(sizes_of(split_hierarchies(ids(2), 1, 4)), (std::vector<std::size_t>{1, 1}));
}

TEST(SplitHierarchies, RejectsBadStageAndEmptyInput) {
  EXPECT_THROW(split_hierarchies(ids(3), 0, 3), PreconditionError);
  EXPECT_THROW(split_hierarchies(ids(3), 4, 3), PreconditionError);
  EXPECT_THROW(split_hierarchies(std::vector<std::string>{}, 1, 3), PreconditionError);
}

TEST(OrderedBlocks, AscendAndRandomVariants) {
  SelectionResult sel;
  sel.kept = ids(6);
  const auto asc = ordered_blocks(sel, 1, 3, Ordering::kAscend, 0);
  EXPECT_EQ(asc.front(), (std::vector<std::string>{"s4", "s5"}));
  const auto r1 = ordered_blocks(sel, 1, 3, Ordering::kRandom, 7);
  EXPECT_EQ(r1, ordered_blocks(sel, 1, 3, Ordering::kRandom, 7));
  std::multiset<std::string> all;
  for (const auto& b : r1) all.insert(b.begin(), b.end());
  EXPECT_EQ(all, std::multiset<std::string>(sel.kept.begin(), sel.kept.end()));
}

struct SmallFed {
  Vocab v = task_vocab();
  PromptTemplate tmpl{v};
  std::vector<std::vector<Example>> clients;
  ModelParams theta;
  FedConfig cfg;
  HierarchyPlan plan;

  explicit SmallFed(std::size_t n = 90) {
    CorruptionSpec cs;
    cs.seed = 1;
    const auto ds = corrupt(generate_task_corpus(TaskKind::kReverse, n, v, 1), cs, v);
    PartitionSpec ps;
    ps.n_clients = 3;
    for (const auto& p : partition(ds, ps)) clients.push_back(p.examples());
    theta = init_params(arch(v.size(), 4, 6, 8), 2);
    cfg.rounds = 6;
    cfg.clients_per_round = 3;
    cfg.local.steps = 2;
    cfg.local.batch_size = 8;
    cfg.seed = 3;
    plan.hierarchies = 3;
  }
};

std::set<std::string> block0_ids(const std::vector<ManifestEntry>& m) {
  std::set<std::string> out;
  for (const auto& e : m) {
    if (e.block_index == 0) out.insert(e.sample_id);
  }
  return out;
}

TEST(RunFedDqc, NoSampleIsTrainedTwiceAndTrainedDataLeavesLaterStages) {
  SmallFed f;
  const auto res = run_feddqc(f.theta, f.clients, f.cfg, f.plan, f.tmpl);
  ASSERT_EQ(res.manifests.size(), 3u);
  std::set<std::string> trained;
  for (const auto& m : res.manifests) {
    for (const auto& e : m) EXPECT_FALSE(trained.count(e.sample_id)) << e.sample_id << " scored after training";
    for (const auto& id : block0_ids(m)) EXPECT_TRUE(trained.insert(id).second);
  }
  std::size_t recorded = 0;
  for (const auto& t : res.state.trained) recorded += t.size();
  EXPECT_EQ(recorded, trained.size());
  // lambda = -inf keeps everything, so every sample is trained exactly once.
  EXPECT_EQ(trained.size(), 90u);
}

TEST(RunFedDqc, BlocksFollowScoreOrder) {
  SmallFed f;
  const auto res = run_feddqc(f.theta, f.clients, f.cfg, f.plan, f.tmpl);
  for (const auto& m : res.manifests) {
    for (std::size_t c = 0; c < f.clients.size(); ++c) {
      double worst_in_first = std::numeric_limits<double>::infinity();
      double best_after = -std::numeric_limits<double>::infinity();
      for (const auto& e : m) {
        if (e.client != c) continue;
        if (e.block_index == 0) worst_in_first = std::min(worst_in_first, e.score);
        if (e.block_index > 0) best_after = std::max(best_after, e.score);
      }
      EXPECT_GE(worst_in_first, best_after);
    }
  }
}

TEST(RunFedDqc, RunsExactlyTheConfiguredRounds) {
  SmallFed f;
  const auto res = run_feddqc(f.theta, f.clients, f.cfg, f.plan, f.tmpl);
  ASSERT_EQ(res.logs.size(), f.cfg.rounds);
  for (std::size_t r = 0; r < res.logs.size(); ++r) {
    EXPECT_EQ(res.logs[r].round, r);
    EXPECT_EQ(res.logs[r].hierarchy, r / 2 + 1);
  }
  EXPECT_EQ(res.stage_models.size(), 3u);
  EXPECT_EQ(res.stage_models[0], f.theta);
}

TEST(RunFedDqc, SingleHierarchyWithoutFilteringIsPlainFederatedTraining) {
  SmallFed f;
  f.plan.hierarchies = 1;
  for (auto ordering : {Ordering::kDescend, Ordering::kRandom}) {
    f.plan.ordering = ordering;
    const auto a = run_feddqc(f.theta, f.clients, f.cfg, f.plan, f.tmpl);
    ServerOptimizer server(f.cfg.server);
    const auto b = run_rounds(f.theta, f.clients, f.cfg, 0, f.cfg.rounds, server, f.tmpl);
    EXPECT_EQ(a.params, b.params);
  }
}

TEST(RunFedDqc, QuantileModeTrainsTheKeepFraction) {
  SmallFed f;
  f.plan.threshold_mode = ThresholdMode::kQuantile;
  f.plan.keep_fraction = 0.5;
  const auto res = run_feddqc(f.theta, f.clients, f.cfg, f.plan, f.tmpl);
  std::size_t trained = 0;
  for (const auto& t : res.state.trained) trained += t.size();
  EXPECT_EQ(trained, 45u);
}

TEST(RunFedDqc, EmptySelectionEverywhereAborts) {
  SmallFed f;
  f.plan.lambda = std::numeric_limits<double>::infinity();
  EXPECT_THROW(run_feddqc(f.theta, f.clients, f.cfg, f.plan, f.tmpl), ConfigError);
}

TEST(RunFedDqc, ClientWithNothingKeptSitsOut) {
  SmallFed f;
  f.clients[1].clear();
  const auto res = run_feddqc(f.theta, f.clients, f.cfg, f.plan, f.tmpl);
  for (const auto& log : res.logs) {
    for (auto c : log.participants) EXPECT_NE(c, 1u);
  }
}

TEST(RunFedDqc, RoundsMustSplitEvenly) {
  SmallFed f;
  f.cfg.rounds = 7;
  EXPECT_THROW(run_feddqc(f.theta, f.clients, f.cfg, f.plan, f.tmpl), ConfigError);
}

TEST(ScoringStage, FirstBlockOfAWarmModelIsMostlyClean) {
  const auto cfg = test::config_from(R"({"corpus": {"train": {"kv_lookup": 600}, "eval": {"kv_lookup": 20}}})");
  const auto data = prepare_data(cfg);
  const auto theta = pretrain_model(cfg, data);
  std::vector<std::vector<Example>> clients;
  for (const auto& p : data.clients) clients.push_back(p.examples());
  HierarchyState state;
  state.trained.resize(clients.size());
  const auto stage = scoring_stage(theta, clients, state, cfg.plan, data.tmpl);
  std::size_t clean = 0, total = 0;
  for (std::size_t c = 0; c < clients.size(); ++c) {
    if (stage.selections[c].kept.empty()) continue;
    const auto blocks = split_hierarchies(stage.selections[c], 1, cfg.plan.hierarchies);
    for (const auto& id : blocks.front()) {
      clean += data.train.find(id)->label()->is_clean();
      ++total;
    }
  }
  ASSERT_GT(total, 0u);
  EXPECT_GT(double(clean) / double(total), 0.5);
}

}  // namespace
}  // namespace feddqc
