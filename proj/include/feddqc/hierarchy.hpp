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

// Quality-aware hierarchical federated training.
//
// For hierarchy k = 1..K each client re-scores its untrained data with the
// current global model, keeps samples scoring >= lambda, sorts them best
// first and cuts them into K-k+1 equal blocks. Only the first block is
// trained during the R/K rounds of hierarchy k; it is then marked trained
// and the remaining data is scored again at the next hierarchy.

#pragma once

#include <chrono>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "feddqc/common.hpp"
#include "feddqc/corpus.hpp"
#include "feddqc/federation.hpp"
#include "feddqc/model.hpp"
#include "feddqc/scoring.hpp"

namespace feddqc {

enum class Ordering { kDescend, kAscend, kRandom };

inline std::string to_string(Ordering o) {
  switch (o) {
    case Ordering::kDescend: return "descend";
    case Ordering::kAscend: return "ascend";
    case Ordering::kRandom: return "random";
  }
  return "?";
}

inline Ordering parse_ordering(const std::string& s) {
  if (s == "descend") return Ordering::kDescend;
  if (s == "ascend") return Ordering::kAscend;
  if (s == "random") return Ordering::kRandom;
  throw ConfigError("unknown ordering '" + s + "'");
}

enum class ThresholdMode {
  kRaw,       // lambda is a fixed oriented-score threshold
  kQuantile,  // lambda is re-derived each hierarchy to keep `keep_fraction` overall
};

struct HierarchyPlan {
  std::size_t hierarchies = 3;  // K
  double lambda = -std::numeric_limits<double>::infinity();
  ThresholdMode threshold_mode = ThresholdMode::kRaw;
  double keep_fraction = 1.0;
  Ordering ordering = Ordering::kDescend;
  std::uint64_t order_seed = 0;
  Metric metric = Metric::kIra;
  ScoringConfig scoring;

  void validate(std::size_t rounds) const {
    if (hierarchies < 1) throw ConfigError("hierarchy.K must be >= 1");
    if (rounds % hierarchies != 0) {
      throw ConfigError("federation.rounds (" + std::to_string(rounds) + ") not divisible by hierarchy.K (" +
                        std::to_string(hierarchies) + ")");
    }
    if (threshold_mode == ThresholdMode::kQuantile && !(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
      throw ConfigError("hierarchy.keep_fraction must be in (0,1]");
    }
  }
};

/// Splits a best-first kept list into (K-k+1) contiguous blocks of
/// floor(n/(K-k+1)); the remainder joins the last block. With fewer kept
/// samples than blocks, each sample forms its own block.
inline std::vector<std::vector<std::string>> split_hierarchies(const std::vector<std::string>& kept,
                                                               std::size_t k, std::size_t K) {
  require(k >= 1 && k <= K, "split_hierarchies: need 1 <= k <= K");
  require(!kept.empty(), "split_hierarchies: kept list must be nonempty");
  const std::size_t blocks = K - k + 1;
  std::vector<std::vector<std::string>> out;
  if (kept.size() < blocks) {
    for (const auto& id : kept) out.push_back({id});
    return out;
  }
  const std::size_t size = kept.size() / blocks;
  for (std::size_t b = 0; b < blocks; ++b) {
    const auto lo = kept.begin() + static_cast<std::ptrdiff_t>(b * size);
    const auto hi = b + 1 == blocks ? kept.end() : lo + static_cast<std::ptrdiff_t>(size);
    out.emplace_back(lo, hi);
  }
  return out;
}

inline std::vector<std::vector<std::string>> split_hierarchies(const SelectionResult& sel, std::size_t k,
                                                               std::size_t K) {
  return split_hierarchies(sel.kept, k, K);
}

/// Applies the ordering variant: descend splits the sorted list as is,
/// ascend trains the lowest block first, random shuffles before splitting.
inline std::vector<std::vector<std::string>> ordered_blocks(const SelectionResult& sel, std::size_t k,
                                                            std::size_t K, Ordering ordering,
                                                            std::uint64_t seed) {
  switch (ordering) {
    case Ordering::kDescend:
      return split_hierarchies(sel.kept, k, K);
    case Ordering::kAscend: {
      auto b = split_hierarchies(sel.kept, k, K);
      std::reverse(b.begin(), b.end());
      return b;
    }
    case Ordering::kRandom: {
      auto kept = sel.kept;
      Rng rng(seed);
      shuffle_in_place(kept, rng);
      return split_hierarchies(kept, k, K);
    }
  }
  return {};
}

/// Ids only; the orchestrator never holds sample content.
struct HierarchyState {
  std::vector<std::unordered_set<std::string>> trained;  // per client
  std::vector<std::vector<std::string>> current;         // H_nk per client
  std::size_t k = 0;
};

struct ManifestEntry {
  std::size_t client = 0;
  std::string sample_id;
  double score = 0.0;  // oriented score (higher is better)
  int block_index = -1;  // 0 = trained this hierarchy; -1 = dropped
  bool kept = false;
};

inline json manifest_entry_to_json(const ManifestEntry& e) {
  return json{{"client", e.client}, {"sample_id", e.sample_id}, {"score", e.score},
              {"block_index", e.block_index}, {"kept", e.kept}};
}

struct StageResult {
  std::vector<SelectionResult> selections;          // per client
  std::vector<std::vector<ScoreRecord>> records;    // per client, remaining data
  double threshold = 0.0;
  double scoring_ms = 0.0;
};

/// Client-local view of remaining (untrained) data.
inline std::vector<Example> remaining_data(const std::vector<Example>& data,
                                           const std::unordered_set<std::string>& trained) {
  std::vector<Example> out;
  for (const auto& ex : data) {
    if (!trained.count(ex.id)) out.push_back(ex);
  }
  return out;
}

/// Scoring stage: each client scores its untrained data with `theta` and
/// filters by the global threshold. In quantile mode the threshold is set
/// from the pooled scores (values only) so that the total kept across
/// hierarchies tracks keep_fraction of all data.
inline StageResult scoring_stage(const ModelParams& theta, std::span<const std::vector<Example>> clients,
                                 const HierarchyState& state, const HierarchyPlan& plan,
                                 const PromptTemplate& tmpl) {
  const auto t0 = std::chrono::steady_clock::now();
  StageResult out;
  const std::string tag = model_tag(theta);
  out.records.resize(clients.size());
  for (std::size_t c = 0; c < clients.size(); ++c) {
    const auto rem = remaining_data(clients[c], state.trained.at(c));
    out.records[c] = score_dataset(theta, rem, plan.metric, plan.scoring, tmpl, tag);
  }
  out.scoring_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

  out.threshold = plan.lambda;
  if (plan.threshold_mode == ThresholdMode::kQuantile) {
    std::size_t total = 0, trained = 0;
    for (std::size_t c = 0; c < clients.size(); ++c) {
      total += clients[c].size();
      trained += state.trained[c].size();
    }
    const auto target = static_cast<std::size_t>(std::llround(plan.keep_fraction * double(total)));
    std::vector<double> pooled;
    for (const auto& recs : out.records) {
      for (const auto& r : recs) pooled.push_back(selection_value(r, plan.scoring.prefer_high_ppl));
    }
    out.threshold = threshold_for_count(std::move(pooled), target > trained ? target - trained : 0);
  }

  out.selections.resize(clients.size());
  for (std::size_t c = 0; c < clients.size(); ++c) {
    if (out.records[c].empty()) {
      out.selections[c].threshold = out.threshold;
      out.selections[c].empty_warning = true;
      continue;
    }
    out.selections[c] = select(out.records[c], out.threshold, plan.scoring.prefer_high_ppl);
  }
  return out;
}

struct FedDqcResult {
  ModelParams params;
  std::vector<RoundLog> logs;
  std::vector<std::vector<ManifestEntry>> manifests;  // per hierarchy
  std::vector<double> thresholds;                     // per hierarchy
  std::vector<ModelParams> stage_models;              // global model used at each scoring stage
  HierarchyState state;
  double scoring_ms = 0.0;
  double train_ms = 0.0;
};

/// Full FedDQC run over R rounds split evenly across K hierarchies.
inline FedDqcResult run_feddqc(const ModelParams& initial, std::span<const std::vector<Example>> clients,
                               const FedConfig& cfg, const HierarchyPlan& plan, const PromptTemplate& tmpl,
                               const RoundObserver& observer = {}) {
  plan.validate(cfg.rounds);
  cfg.validate(clients.size());
  const std::size_t K = plan.hierarchies;
  const std::size_t per = cfg.rounds / K;

  FedDqcResult res{initial, {}, {}, {}, {}, {}, 0.0, 0.0};
  res.state.trained.resize(clients.size());
  res.state.current.resize(clients.size());
  ServerOptimizer server(cfg.server);

  for (std::size_t k = 1; k <= K; ++k) {
    res.state.k = k;
    res.stage_models.push_back(res.params);
    auto stage = scoring_stage(res.params, clients, res.state, plan, tmpl);
    res.scoring_ms += stage.scoring_ms;
    res.thresholds.push_back(stage.threshold);

    std::vector<ManifestEntry> manifest;
    std::vector<std::vector<Example>> blocks(clients.size());
    std::size_t total_block = 0;
    for (std::size_t c = 0; c < clients.size(); ++c) {
      const auto& sel = stage.selections[c];
      std::unordered_map<std::string, double> score_of;
      for (const auto& r : stage.records[c]) score_of[r.sample_id] = selection_value(r, plan.scoring.prefer_high_ppl);
      std::unordered_map<std::string, int> block_of;
      res.state.current[c].clear();
      if (sel.kept.empty()) {
        spdlog::warn("hierarchy {}: client {} kept no samples and sits out", k, c);
      } else {
        const auto bl = ordered_blocks(sel, k, K, plan.ordering, derive_seed(plan.order_seed, k, c));
        for (std::size_t b = 0; b < bl.size(); ++b) {
          for (const auto& id : bl[b]) block_of[id] = static_cast<int>(b);
        }
        res.state.current[c] = bl.front();
      }
      // Client-side materialisation of H_nk in dataset order.
      std::unordered_set<std::string> in_block(res.state.current[c].begin(), res.state.current[c].end());
      for (const auto& ex : clients[c]) {
        if (in_block.count(ex.id)) blocks[c].push_back(ex);
      }
      total_block += blocks[c].size();
      for (const auto& r : stage.records[c]) {
        auto it = block_of.find(r.sample_id);
        manifest.push_back({c, r.sample_id, score_of[r.sample_id], it == block_of.end() ? -1 : it->second,
                            it != block_of.end()});
      }
    }
    res.manifests.push_back(std::move(manifest));
    if (total_block == 0) {
      throw ConfigError("hierarchy " + std::to_string(k) + ": every client selection is empty");
    }

    auto run = run_rounds(res.params, blocks, cfg, per * (k - 1), per * k, server, tmpl, observer);
    for (auto& log : run.logs) {
      log.hierarchy = k;
      res.train_ms += log.train_ms;
    }
    if (!run.logs.empty()) run.logs.front().scoring_ms = stage.scoring_ms;
    res.params = std::move(run.params);
    res.logs.insert(res.logs.end(), run.logs.begin(), run.logs.end());
    for (std::size_t c = 0; c < clients.size(); ++c) {
      res.state.trained[c].insert(res.state.current[c].begin(), res.state.current[c].end());
    }
  }
  return res;
}

}  // namespace feddqc
