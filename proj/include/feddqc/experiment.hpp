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

// Experiment configuration and the end-to-end pipeline:
// generate -> corrupt -> partition -> pretrain -> train/score -> evaluate.
//
// Every stage seed is derive_seed(master_seed, "<stage>"). Metric files
// carry no wall-clock values; timings go to timing.json.

#pragma once

#include <chrono>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "feddqc/common.hpp"
#include "feddqc/corpus.hpp"
#include "feddqc/corruption.hpp"
#include "feddqc/dynamics.hpp"
#include "feddqc/evaluation.hpp"
#include "feddqc/federation.hpp"
#include "feddqc/hierarchy.hpp"
#include "feddqc/io.hpp"
#include "feddqc/model.hpp"
#include "feddqc/partition.hpp"
#include "feddqc/scoring.hpp"

namespace feddqc {

enum class RunMode { kFedAvgFull, kFedAvgOracle, kMetricSelect, kFedDqc };

inline std::string to_string(RunMode m) {
  switch (m) {
    case RunMode::kFedAvgFull: return "fedavg_full";
    case RunMode::kFedAvgOracle: return "fedavg_oracle";
    case RunMode::kMetricSelect: return "metric_select";
    case RunMode::kFedDqc: return "feddqc";
  }
  return "?";
}

inline RunMode parse_run_mode(const std::string& s) {
  for (auto m : {RunMode::kFedAvgFull, RunMode::kFedAvgOracle, RunMode::kMetricSelect, RunMode::kFedDqc}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("mode: unknown value '" + s + "'");
}

/// Desk-scale grid: N=5, m=2, t=10, R=30, K=3.
inline FedConfig default_fed_config() {
  FedConfig f;
  f.local.batch_size = 64;
  f.lr_initial = 3e-3;
  return f;
}

inline HierarchyPlan default_hierarchy_plan() {
  HierarchyPlan p;
  p.threshold_mode = ThresholdMode::kQuantile;  // kept counts match metric_select
  return p;
}

struct ExperimentConfig {
  std::uint64_t seed = 1;
  RunMode mode = RunMode::kFedDqc;
  std::filesystem::path output_dir;
  std::size_t threads = 1;

  std::size_t embed_dim = 16;
  std::size_t context_window = 6;
  std::size_t hidden_dim = 64;
  std::string prompt_template{kDefaultTemplate};

  // Corpus: generated per task unless `dataset` names a JSONL file.
  std::map<TaskKind, std::size_t> train_tasks{{TaskKind::kKvLookup, 2000}};
  std::map<TaskKind, std::size_t> eval_tasks{{TaskKind::kKvLookup, 200}};
  std::optional<std::filesystem::path> dataset;
  std::optional<std::uint64_t> eval_seed;
  std::size_t distractors = tasks::kMaxDistractors;  // kv_lookup filler letters, train and eval

  std::map<TaskKind, std::size_t> pretrain_tasks{{TaskKind::kKvLookup, 400}};
  std::size_t pretrain_steps = 200;
  std::size_t pretrain_batch = 16;
  double pretrain_lr = 1e-2;
  bool pretrain_response_lm = true;    // also fit bare responses, so unconditional losses mean something
  std::size_t pretrain_distractors = 0;  // warm start only sees canonical requests

  CorruptionSpec corruption;  // seed is overwritten from the master seed
  PartitionSpec partition;
  FedConfig fed = default_fed_config();
  HierarchyPlan plan = default_hierarchy_plan();
  double keep_fraction = 0.5;  // metric_select top-q, and quantile-mode FedDQC
  std::size_t eval_max_len = 8;
  bool datamap = true;
  bool similarity = true;
  std::size_t nuggets_probes = 8;
  std::size_t datainf_validation = 32;

  /// Cross-field checks; messages name the offending field path.
  void validate() const {
    if (embed_dim < 1) throw ConfigError("model.embed_dim: must be >= 1");
    if (context_window < 1) throw ConfigError("model.context_window: must be >= 1");
    if (hidden_dim < 1) throw ConfigError("model.hidden_dim: must be >= 1");
    if (!dataset && train_tasks.empty()) throw ConfigError("corpus.train: at least one task required");
    if (eval_tasks.empty()) throw ConfigError("corpus.eval: at least one task required");
    if (dataset && !std::filesystem::exists(*dataset)) {
      throw ConfigError("corpus.dataset: file '" + dataset->string() + "' does not exist");
    }
    try {
      corruption.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("corruption: ") + e.what());
    }
    try {
      partition.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("partition: ") + e.what());
    }
    if (fed.clients_per_round > partition.n_clients) {
      throw ConfigError("federation.clients_per_round: " + std::to_string(fed.clients_per_round) +
                        " exceeds partition.n_clients " + std::to_string(partition.n_clients));
    }
    fed.validate(partition.n_clients);
    if (plan.hierarchies < 1) throw ConfigError("hierarchy.K: must be >= 1");
    if (fed.rounds % plan.hierarchies != 0) {
      throw ConfigError("hierarchy.K: federation.rounds (" + std::to_string(fed.rounds) +
                        ") is not divisible by K (" + std::to_string(plan.hierarchies) + ")");
    }
    if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
      throw ConfigError("selection.keep_fraction: must be in (0,1]");
    }
    if (eval_max_len < 1) throw ConfigError("eval.max_len: must be >= 1");
    for (auto [name, v] : {std::pair{"corpus.distractors", distractors}, {"pretrain.distractors", pretrain_distractors}}) {
      if (v > tasks::kMaxDistractors) {
        throw ConfigError(std::string(name) + ": must be <= " + std::to_string(tasks::kMaxDistractors));
      }
    }
    if (pretrain_steps > 0 && pretrain_tasks.empty()) {
      throw ConfigError("pretrain.tasks: required when pretrain.steps > 0");
    }
  }

  Architecture architecture(std::size_t vocab_size) const {
    return Architecture{vocab_size, embed_dim, context_window, hidden_dim};
  }

  json eval_spec() const {
    json tasks = json::object();
    for (auto& [t, n] : eval_tasks) tasks[to_string(t)] = n;
    return json{{"tasks", tasks}, {"max_len", eval_max_len},
                {"seed", eval_seed.value_or(derive_seed(seed, "eval"))}};
  }
};

// ---------------------------------------------------------------------------
// Config parsing

namespace detail {

class ConfigNode {
 public:
  ConfigNode(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  std::string where(const std::string& key = {}) const {
    if (key.empty()) return path_.empty() ? "<root>" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

  bool has(const std::string& key) const {
    used_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }

  template <class T>
  T get(const std::string& key, T fallback) const {
    if (!has(key)) return fallback;
    return as<T>(key);
  }

  template <class T>
  T as(const std::string& key) const {
    used_.insert(key);
    const json& v = j_.at(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(where(key) + ": expected true/false");
    } else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) {
      if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
        throw ConfigError(where(key) + ": expected a nonnegative integer");
      }
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(where(key) + ": expected an integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(where(key) + ": expected a number");
    } else {
      if (!v.is_string()) throw ConfigError(where(key) + ": expected a string");
    }
    return v.get<T>();
  }

  ConfigNode child(const std::string& key) const {
    used_.insert(key);
    static const json empty = json::object();
    if (!j_.contains(key) || j_.at(key).is_null()) return ConfigNode(empty, where(key));
    return ConfigNode(j_.at(key), where(key));
  }

  const json& raw(const std::string& key) const {
    used_.insert(key);
    return j_.at(key);
  }

  /// Rejects keys that were never looked at.
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!used_.count(it.key())) throw ConfigError(where(it.key()) + ": unknown key");
    }
  }

 private:
  const json& j_;
  std::string path_;
  mutable std::set<std::string> used_;
};

inline std::map<TaskKind, std::size_t> parse_task_counts(const ConfigNode& parent, const std::string& key,
                                                         std::map<TaskKind, std::size_t> fallback) {
  if (!parent.has(key)) return fallback;
  const json& v = parent.raw(key);
  if (!v.is_object()) throw ConfigError(parent.where(key) + ": expected {task: count}");
  std::map<TaskKind, std::size_t> out;
  for (auto it = v.begin(); it != v.end(); ++it) {
    TaskKind t;
    try {
      t = parse_task(it.key());
    } catch (const ConfigError&) {
      throw ConfigError(parent.where(key) + "." + it.key() + ": unknown task");
    }
    if (!it.value().is_number_integer() || it.value().get<long long>() < 1) {
      throw ConfigError(parent.where(key) + "." + it.key() + ": expected a positive integer");
    }
    out[t] = it.value().get<std::size_t>();
  }
  return out;
}

template <class Fn>
auto field(const std::string& path, Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

}  // namespace detail

/// Parses a config tree. `base_dir` resolves relative file paths.
inline ExperimentConfig parse_experiment_config(const json& root_json,
                                                const std::filesystem::path& base_dir = {}) {
  using detail::ConfigNode;
  using detail::field;
  ExperimentConfig c;
  ConfigNode root(root_json, "");
  c.seed = root.get<std::uint64_t>("seed", c.seed);
  if (root.has("mode")) c.mode = field("mode", [&] { return parse_run_mode(root.as<std::string>("mode")); });
  if (root.has("output_dir")) c.output_dir = base_dir / root.as<std::string>("output_dir");
  c.threads = root.get<std::size_t>("threads", c.threads);

  {
    auto n = root.child("model");
    c.embed_dim = n.get<std::size_t>("embed_dim", c.embed_dim);
    c.context_window = n.get<std::size_t>("context_window", c.context_window);
    c.hidden_dim = n.get<std::size_t>("hidden_dim", c.hidden_dim);
    c.prompt_template = n.get<std::string>("template", c.prompt_template);
    field("model.template", [&] { return parse_template(c.prompt_template); });
    n.finish();
  }
  {
    auto n = root.child("corpus");
    c.train_tasks = detail::parse_task_counts(n, "train", c.train_tasks);
    c.eval_tasks = detail::parse_task_counts(n, "eval", c.eval_tasks);
    c.distractors = n.get<std::size_t>("distractors", c.distractors);
    if (n.has("dataset")) c.dataset = base_dir / n.as<std::string>("dataset");
    if (n.has("eval_seed")) c.eval_seed = n.as<std::uint64_t>("eval_seed");
    n.finish();
  }
  {
    auto n = root.child("pretrain");
    c.pretrain_tasks = detail::parse_task_counts(n, "tasks", c.pretrain_tasks);
    c.pretrain_steps = n.get<std::size_t>("steps", c.pretrain_steps);
    c.pretrain_batch = n.get<std::size_t>("batch_size", c.pretrain_batch);
    c.pretrain_lr = n.get<double>("lr", c.pretrain_lr);
    c.pretrain_response_lm = n.get<bool>("response_lm", c.pretrain_response_lm);
    c.pretrain_distractors = n.get<std::size_t>("distractors", c.pretrain_distractors);
    n.finish();
  }
  {
    auto n = root.child("corruption");
    if (n.has("kind")) {
      c.corruption.kind = field("corruption.kind", [&] { return parse_corruption_kind(n.as<std::string>("kind")); });
    }
    c.corruption.ratio = n.get<double>("ratio", c.corruption.ratio);
    c.corruption.intensity = n.get<double>("intensity", c.corruption.intensity);
    n.finish();
  }
  {
    auto n = root.child("partition");
    c.partition.n_clients = n.get<std::size_t>("n_clients", c.partition.n_clients);
    if (n.has("mode")) {
      c.partition.mode = field("partition.mode", [&] { return parse_partition_mode(n.as<std::string>("mode")); });
    }
    c.partition.alpha = n.get<double>("alpha", c.partition.alpha);
    c.partition.skew = n.get<double>("skew", c.partition.skew);
    n.finish();
  }
  {
    auto n = root.child("federation");
    c.fed.rounds = n.get<std::size_t>("rounds", c.fed.rounds);
    c.fed.clients_per_round = n.get<std::size_t>("clients_per_round", c.fed.clients_per_round);
    c.fed.local.steps = n.get<std::size_t>("local_steps", c.fed.local.steps);
    c.fed.local.batch_size = n.get<std::size_t>("batch_size", c.fed.local.batch_size);
    c.fed.lr_initial = n.get<double>("lr_initial", c.fed.lr_initial);
    c.fed.lr_final = n.get<double>("lr_final", c.fed.lr_final);
    if (n.has("optimizer")) {
      const auto o = n.as<std::string>("optimizer");
      if (o == "sgd") {
        c.fed.local.optimizer.kind = OptimizerKind::kSgd;
      } else if (o == "adamw") {
        c.fed.local.optimizer.kind = OptimizerKind::kAdamW;
      } else {
        throw ConfigError("federation.optimizer: expected 'sgd' or 'adamw'");
      }
    }
    c.fed.local.optimizer.weight_decay = n.get<double>("weight_decay", c.fed.local.optimizer.weight_decay);
    auto s = n.child("server");
    if (s.has("kind")) {
      c.fed.server.kind = field("federation.server.kind", [&] { return parse_server_kind(s.as<std::string>("kind")); });
    }
    c.fed.server.beta = s.get<double>("beta", c.fed.server.beta);
    c.fed.server.beta1 = s.get<double>("beta1", c.fed.server.beta1);
    c.fed.server.beta2 = s.get<double>("beta2", c.fed.server.beta2);
    c.fed.server.tau = s.get<double>("tau", c.fed.server.tau);
    if (s.has("eta")) c.fed.server.eta = s.as<double>("eta");
    s.finish();
    n.finish();
  }
  {
    auto n = root.child("hierarchy");
    c.plan.hierarchies = n.get<std::size_t>("K", c.plan.hierarchies);
    if (n.has("lambda")) {
      // An explicit lambda means a raw threshold unless a mode says otherwise.
      c.plan.lambda = n.as<double>("lambda");
      c.plan.threshold_mode = ThresholdMode::kRaw;
    }
    if (n.has("threshold_mode")) {
      const auto m = n.as<std::string>("threshold_mode");
      if (m == "raw") {
        c.plan.threshold_mode = ThresholdMode::kRaw;
      } else if (m == "quantile") {
        c.plan.threshold_mode = ThresholdMode::kQuantile;
      } else {
        throw ConfigError("hierarchy.threshold_mode: expected 'raw' or 'quantile'");
      }
    }
    if (n.has("ordering")) {
      c.plan.ordering = field("hierarchy.ordering", [&] { return parse_ordering(n.as<std::string>("ordering")); });
    }
    n.finish();
  }
  {
    auto n = root.child("scoring");
    if (n.has("metric")) {
      c.plan.metric = field("scoring.metric", [&] { return parse_metric(n.as<std::string>("metric")); });
    }
    if (n.has("reduction")) {
      c.plan.scoring.reduction =
          field("scoring.reduction", [&] { return parse_reduction(n.as<std::string>("reduction")); });
    }
    c.plan.scoring.damping = n.get<double>("damping", c.plan.scoring.damping);
    c.plan.scoring.prefer_high_ppl = n.get<bool>("prefer_high_ppl", c.plan.scoring.prefer_high_ppl);
    c.nuggets_probes = n.get<std::size_t>("nuggets_probes", c.nuggets_probes);
    c.datainf_validation = n.get<std::size_t>("datainf_validation", c.datainf_validation);
    n.finish();
  }
  {
    auto n = root.child("selection");
    c.keep_fraction = n.get<double>("keep_fraction", c.keep_fraction);
    n.finish();
  }
  {
    auto n = root.child("eval");
    c.eval_max_len = n.get<std::size_t>("max_len", c.eval_max_len);
    n.finish();
  }
  {
    auto n = root.child("dynamics");
    c.datamap = n.get<bool>("datamap", c.datamap);
    c.similarity = n.get<bool>("similarity", c.similarity);
    n.finish();
  }
  root.finish();
  c.plan.keep_fraction = c.keep_fraction;
  c.validate();
  return c;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_experiment_config(j, path.parent_path());
}

// ---------------------------------------------------------------------------
// Pipeline stages

struct PreparedData {
  Vocab vocab;
  PromptTemplate tmpl;
  Dataset clean;     // training corpus before corruption
  Dataset train;     // corpus actually used (corrupted unless oracle)
  Dataset eval;
  Dataset pretrain;
  std::vector<std::size_t> owner;
  std::vector<Dataset> clients;
};

inline Dataset generate_corpus(const std::map<TaskKind, std::size_t>& tasks, const Vocab& vocab,
                               std::uint64_t seed, const std::string& prefix,
                               std::size_t distractors = tasks::kMaxDistractors) {
  Dataset out(prefix, {});
  for (auto& [t, n] : tasks) {
    for (const auto& s : generate_task_corpus(t, n, vocab, seed, prefix + "-" + to_string(t), distractors)) {
      out.push_back(s);
    }
  }
  return out;
}

/// Generate (or load), corrupt and partition.
inline PreparedData prepare_data(const ExperimentConfig& cfg, bool stop_after_generate = false) {
  Vocab vocab = task_vocab();
  PromptTemplate tmpl(cfg.prompt_template, vocab);
  Dataset clean = cfg.dataset ? load_dataset(*cfg.dataset, vocab)
                              : generate_corpus(cfg.train_tasks, vocab, derive_seed(cfg.seed, "corpus"), "train",
                                                cfg.distractors);
  Dataset eval = generate_corpus(cfg.eval_tasks, vocab, cfg.eval_seed.value_or(derive_seed(cfg.seed, "eval")), "eval",
                                 cfg.distractors);
  Dataset pre = cfg.pretrain_tasks.empty()
                    ? Dataset("pretrain", {})
                    : generate_corpus(cfg.pretrain_tasks, vocab, derive_seed(cfg.seed, "pretrain_corpus"), "pre",
                                      cfg.pretrain_distractors);
  PreparedData d{vocab, tmpl, clean, clean, eval, pre, {}, {}};
  if (stop_after_generate) return d;
  if (cfg.mode != RunMode::kFedAvgOracle && cfg.corruption.ratio > 0.0) {
    auto spec = cfg.corruption;
    spec.seed = derive_seed(cfg.seed, "corrupt");
    d.train = corrupt(clean, spec, vocab);
  } else {
    std::vector<Sample> labeled;
    for (const auto& s : clean) labeled.push_back(s.label() ? s : s.with_label(QualityLabel::clean()));
    d.train = Dataset(clean.name(), std::move(labeled));
  }
  auto pspec = cfg.partition;
  pspec.seed = derive_seed(cfg.seed, "partition");
  // The oracle run keeps the corrupted run's client assignment so the two
  // differ only in data quality.
  if (cfg.mode == RunMode::kFedAvgOracle && pspec.mode == PartitionMode::kQualitySkew && cfg.corruption.ratio > 0.0) {
    auto spec = cfg.corruption;
    spec.seed = derive_seed(cfg.seed, "corrupt");
    d.owner = assign_clients(corrupt(clean, spec, vocab), pspec);
  } else {
    d.owner = assign_clients(d.train, pspec);
  }
  d.clients = split_by_owner(d.train, d.owner, pspec.n_clients);
  return d;
}

/// Centralized warm start on the clean pretraining corpus.
inline ModelParams pretrain_model(const ExperimentConfig& cfg, const PreparedData& d) {
  auto theta = init_params(cfg.architecture(d.vocab.size()), derive_seed(cfg.seed, "init"));
  if (cfg.pretrain_steps == 0 || d.pretrain.empty()) return theta;
  LocalUpdateConfig lc;
  lc.steps = cfg.pretrain_steps;
  lc.batch_size = cfg.pretrain_batch;
  lc.optimizer = OptimizerConfig{};  // warm start is always AdamW
  std::vector<const Example*> order;
  const auto ex = d.pretrain.examples();
  for (const auto& e : ex) order.push_back(&e);
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->id < b->id; });
  std::vector<Encoded> seqs;
  for (const auto* e : order) {
    seqs.push_back(d.tmpl.encode(*e));
    if (cfg.pretrain_response_lm) seqs.push_back(d.tmpl.encode_response_only(*e));
  }
  return train_sequences(theta, seqs, lc, cfg.pretrain_lr, derive_seed(cfg.seed, "pretrain")).params;
}

inline ScoringConfig scoring_config_for(const ExperimentConfig& cfg, const PreparedData& d) {
  ScoringConfig sc = cfg.plan.scoring;
  if (cfg.plan.metric == Metric::kNuggets) {
    sc.probes = generate_corpus(cfg.eval_tasks, d.vocab, derive_seed(cfg.seed, "probes"), "probe").examples();
    if (sc.probes.size() > cfg.nuggets_probes) sc.probes.resize(cfg.nuggets_probes);
  }
  if (cfg.plan.metric == Metric::kDataInf) {
    sc.validation = generate_corpus(cfg.eval_tasks, d.vocab, derive_seed(cfg.seed, "validation"), "val").examples();
    if (sc.validation.size() > cfg.datainf_validation) sc.validation.resize(cfg.datainf_validation);
  }
  return sc;
}

struct ExperimentResult {
  ExperimentConfig config;
  EvalReport eval;
  std::optional<SelectionQuality> selection;         // over everything trained
  std::vector<SelectionQuality> hierarchy_selection;  // FedDQC, per hierarchy block
  std::vector<double> stage_auc;                     // FedDQC, score AUC per scoring stage
  std::optional<double> pretrained_auc_stage2;       // pre-training model on stage-2 remaining data
  std::vector<std::vector<double>> similarity;
  std::vector<DataMapRow> data_map;
  std::vector<RoundLog> logs;
  std::vector<double> thresholds;
  std::size_t trained_samples = 0;
  double scoring_ms = 0.0;
  double train_ms = 0.0;
  double pretrain_ms = 0.0;
  ModelParams final_params;
};

namespace detail {

inline double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

inline std::vector<bool> clean_flags(std::span<const std::string> ids, const Dataset& labeled) {
  std::vector<bool> out;
  for (const auto& id : ids) out.push_back(labeled.find(id)->label()->is_clean());
  return out;
}

}  // namespace detail

/// AUC of oriented scores against the clean label; nullopt if one class is absent.
inline std::optional<double> score_auc(std::span<const ScoreRecord> recs, const Dataset& labeled,
                                       bool prefer_high_ppl) {
  std::vector<double> s;
  std::vector<bool> pos;
  for (const auto& r : recs) {
    s.push_back(selection_value(r, prefer_high_ppl));
    pos.push_back(labeled.find(r.sample_id)->label()->is_clean());
  }
  const auto np = static_cast<std::size_t>(std::count(pos.begin(), pos.end(), true));
  if (np == 0 || np == pos.size()) return std::nullopt;
  return roc_auc(s, pos);
}

/// Runs the configured mode end to end. Artifacts are written only when
/// `cfg.output_dir` is set.
inline ExperimentResult run_pipeline(const ExperimentConfig& cfg, const PreparedData& d) {
  cfg.validate();
  set_threads(cfg.threads);
  ExperimentResult res;
  res.config = cfg;

  auto t0 = std::chrono::steady_clock::now();
  const ModelParams theta0 = pretrain_model(cfg, d);
  res.pretrain_ms = detail::ms_since(t0);

  std::vector<std::vector<Example>> client_data;
  for (const auto& c : d.clients) client_data.push_back(c.examples());

  FedConfig fed = cfg.fed;
  fed.seed = derive_seed(cfg.seed, "federation");
  const auto all_examples = d.train.examples();
  std::vector<std::string> all_ids;
  for (const auto& s : d.train) all_ids.push_back(s.id());

  DynamicsTrace trace(all_ids);
  RoundObserver observer;
  if (cfg.datamap) {
    observer = [&](std::size_t, const ModelParams& g) { trace.record(g, all_examples, d.tmpl); };
  }

  std::vector<std::vector<Example>> trained_data(d.clients.size());  // for the similarity probe
  std::vector<std::string> trained_ids;

  if (cfg.mode == RunMode::kFedDqc) {
    HierarchyPlan plan = cfg.plan;
    plan.order_seed = derive_seed(cfg.seed, "ordering");
    plan.scoring = scoring_config_for(cfg, d);
    auto out = run_feddqc(theta0, client_data, fed, plan, d.tmpl, observer);
    res.final_params = std::move(out.params);
    res.logs = std::move(out.logs);
    res.scoring_ms = out.scoring_ms;
    res.train_ms = out.train_ms;
    res.thresholds = out.thresholds;
    for (std::size_t k = 0; k < out.manifests.size(); ++k) {
      std::vector<std::string> block_ids;
      std::vector<ScoreRecord> recs;
      for (const auto& e : out.manifests[k]) {
        if (e.block_index == 0) block_ids.push_back(e.sample_id);
        // Manifest scores are already oriented; LOSS-typed records keep them as is.
        recs.push_back(ScoreRecord{e.sample_id, Metric::kIra, e.score, plan.scoring.reduction, "manifest"});
      }
      res.hierarchy_selection.push_back(selection_quality(block_ids, d.train));
      if (auto auc = score_auc(recs, d.train, false)) res.stage_auc.push_back(*auc);
      if (cfg.output_dir.empty()) continue;
      std::vector<json> lines;
      for (const auto& e : out.manifests[k]) lines.push_back(manifest_entry_to_json(e));
      std::filesystem::create_directories(cfg.output_dir);
      write_file_atomic(cfg.output_dir / ("selection_h" + std::to_string(k + 1) + ".jsonl"), to_jsonl(lines));
    }
    // Re-scoring diagnostic: the pre-training model on the data remaining at stage 2.
    if (out.manifests.size() >= 2) {
      std::vector<Example> remaining;
      for (const auto& e : out.manifests[1]) remaining.push_back(d.train.find(e.sample_id)->example());
      const auto recs = score_dataset(theta0, remaining, plan.metric, plan.scoring, d.tmpl, model_tag(theta0));
      res.pretrained_auc_stage2 = score_auc(recs, d.train, plan.scoring.prefer_high_ppl);
    }
    for (std::size_t c = 0; c < d.clients.size(); ++c) {
      for (const auto& ex : client_data[c]) {
        if (out.state.trained[c].count(ex.id)) {
          trained_data[c].push_back(ex);
          trained_ids.push_back(ex.id);
        }
      }
    }
  } else {
    std::vector<std::vector<Example>> train_sets = client_data;
    if (cfg.mode == RunMode::kMetricSelect) {
      // Score once with the warm-started model, keep the global top fraction.
      t0 = std::chrono::steady_clock::now();
      const auto sc = scoring_config_for(cfg, d);
      const auto tag = model_tag(theta0);
      std::vector<std::vector<ScoreRecord>> recs;
      std::vector<double> pooled;
      for (const auto& cd : client_data) {
        recs.push_back(score_dataset(theta0, cd, cfg.plan.metric, sc, d.tmpl, tag));
        for (const auto& r : recs.back()) pooled.push_back(selection_value(r, sc.prefer_high_ppl));
      }
      const auto target = static_cast<std::size_t>(std::llround(cfg.keep_fraction * double(d.train.size())));
      const double lambda = threshold_for_count(pooled, target);
      // Ties at the threshold are broken globally by id to hit the count exactly.
      std::vector<std::pair<double, std::string>> ranked;
      for (const auto& rc : recs) {
        for (const auto& r : rc) ranked.push_back({selection_value(r, sc.prefer_high_ppl), r.sample_id});
      }
      std::sort(ranked.begin(), ranked.end(), [](auto& a, auto& b) {
        return a.first != b.first ? a.first > b.first : a.second < b.second;
      });
      std::unordered_set<std::string> keep;
      for (std::size_t i = 0; i < std::min(target, ranked.size()); ++i) keep.insert(ranked[i].second);
      res.scoring_ms = detail::ms_since(t0);
      res.thresholds.push_back(lambda);
      for (auto& ts : train_sets) {
        std::erase_if(ts, [&](const Example& ex) { return !keep.count(ex.id); });
      }
      if (!cfg.output_dir.empty()) {
        std::vector<json> lines;
        for (std::size_t c = 0; c < recs.size(); ++c) {
          for (const auto& r : recs[c]) {
            const bool k = keep.count(r.sample_id) > 0;
            lines.push_back(manifest_entry_to_json(
                {c, r.sample_id, selection_value(r, sc.prefer_high_ppl), k ? 0 : -1, k}));
          }
        }
        std::filesystem::create_directories(cfg.output_dir);
        write_file_atomic(cfg.output_dir / "selection.jsonl", to_jsonl(lines));
      }
    }
    ServerOptimizer server(fed.server);
    auto out = run_rounds(theta0, train_sets, fed, 0, fed.rounds, server, d.tmpl, observer);
    res.final_params = std::move(out.params);
    res.logs = std::move(out.logs);
    for (const auto& l : res.logs) res.train_ms += l.train_ms;
    trained_data = train_sets;
    for (const auto& ts : train_sets) {
      for (const auto& ex : ts) trained_ids.push_back(ex.id);
    }
  }

  res.trained_samples = trained_ids.size();
  res.selection = selection_quality(trained_ids, d.train);
  res.eval = exact_match(res.final_params, d.eval, d.tmpl, cfg.eval_max_len);
  if (cfg.datamap && trace.checkpoints() >= 2) res.data_map = finalize_map(trace);

  if (cfg.similarity && d.clients.size() >= 2) {
    // Every client takes one local update from the final global model; the
    // similarity is between the resulting client deltas.
    std::vector<std::vector<double>> deltas(d.clients.size());
    parallel_for(d.clients.size(), [&](std::size_t c) {
      const auto& data = trained_data[c].empty() ? client_data[c] : trained_data[c];
      const auto local = local_update(res.final_params, data, fed.local, fed.lr_initial,
                                      derive_seed(derive_seed(cfg.seed, "similarity"), c), d.tmpl);
      deltas[c].resize(local.params.size());
      for (std::size_t i = 0; i < deltas[c].size(); ++i) deltas[c][i] = local.params[i] - res.final_params[i];
    });
    res.similarity = model_similarity(deltas);
  }
  return res;
}

inline ExperimentResult run_pipeline(const ExperimentConfig& cfg) { return run_pipeline(cfg, prepare_data(cfg)); }

inline json config_summary(const ExperimentConfig& c) {
  return json{{"seed", c.seed},
              {"mode", to_string(c.mode)},
              {"metric", to_string(c.plan.metric)},
              {"ordering", to_string(c.plan.ordering)},
              {"K", c.plan.hierarchies},
              {"rounds", c.fed.rounds},
              {"n_clients", c.partition.n_clients},
              {"clients_per_round", c.fed.clients_per_round},
              {"corruption", to_string(c.corruption.kind)},
              {"corruption_ratio", c.corruption.ratio},
              {"partition", to_string(c.partition.mode)},
              {"keep_fraction", c.keep_fraction}};
}

/// Metric report (no timings).
inline json report_json(const ExperimentResult& r) {
  json j;
  j["config"] = config_summary(r.config);
  j["eval_spec"] = r.config.eval_spec();
  j["eval"] = eval_report_to_json(r.eval);
  j["trained_samples"] = r.trained_samples;
  if (r.selection) j["selection"] = selection_quality_to_json(*r.selection);
  json hs = json::array();
  for (const auto& q : r.hierarchy_selection) hs.push_back(selection_quality_to_json(q));
  j["hierarchy_selection"] = hs;
  j["stage_auc"] = r.stage_auc;
  j["pretrained_auc_stage2"] = r.pretrained_auc_stage2 ? json(*r.pretrained_auc_stage2) : json(nullptr);
  json th = json::array();
  for (double t : r.thresholds) th.push_back(std::isfinite(t) ? json(t) : json(t > 0 ? "inf" : "-inf"));
  j["thresholds"] = th;
  if (!r.similarity.empty()) {
    std::vector<double> row_means;
    for (std::size_t i = 0; i < r.similarity.size(); ++i) row_means.push_back(mean_off_diagonal(r.similarity, i));
    j["similarity"] = json{{"matrix", r.similarity}, {"row_mean", row_means}, {"mean_pairwise", mean_pairwise(r.similarity)}};
  }
  j["final_model_tag"] = model_tag(r.final_params);
  return j;
}

inline json timing_json(const ExperimentResult& r) {
  json rounds = json::array();
  for (const auto& l : r.logs) rounds.push_back(round_timing_to_json(l));
  return json{{"pretrain_ms", r.pretrain_ms},
              {"scoring_ms", r.scoring_ms},
              {"train_ms", r.train_ms},
              {"scoring_fraction", r.train_ms > 0 ? r.scoring_ms / r.train_ms : 0.0},
              {"rounds", rounds}};
}

inline constexpr const char* kPartialMarker = "PARTIAL";

/// Pipeline plus artifacts. A PARTIAL marker exists while the run is in
/// flight and is left behind, with the error, if it aborts.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  namespace fs = std::filesystem;
  const bool write = !cfg.output_dir.empty();
  if (write) {
    fs::create_directories(cfg.output_dir);
    write_file_atomic(cfg.output_dir / kPartialMarker, "running\n");
  }
  std::optional<PreparedData> prepared;
  ExperimentResult r;
  try {
    prepared = prepare_data(cfg);
    r = run_pipeline(cfg, *prepared);
  } catch (const std::exception& e) {
    if (write) write_file_atomic(cfg.output_dir / kPartialMarker, std::string("aborted: ") + e.what() + "\n");
    throw;
  }
  if (!write) return r;

  const auto& d = *prepared;
  const auto& out = cfg.output_dir;
  std::string vocab_txt;
  for (std::size_t i = 0; i < d.vocab.size(); ++i) vocab_txt += d.vocab.symbol(static_cast<TokenId>(i)) + "\n";
  write_file_atomic(out / "vocab.txt", vocab_txt);
  write_file_atomic(out / "dataset.jsonl", serialize_dataset(d.train, d.vocab));
  write_file_atomic(out / "eval.jsonl", serialize_dataset(d.eval, d.vocab));
  write_file_atomic(out / "partition.jsonl", serialize_manifest(d.train, d.owner));
  std::vector<json> rounds;
  for (const auto& l : r.logs) rounds.push_back(round_log_to_json(l));
  write_file_atomic(out / "rounds.jsonl", to_jsonl(rounds));
  if (!r.data_map.empty()) write_file_atomic(out / "datamap.csv", serialize_data_map(r.data_map, d.train));
  write_file_atomic(out / "report.json", report_json(r).dump(2) + "\n");
  write_file_atomic(out / "timing.json", timing_json(r).dump(2) + "\n");
  write_file_atomic(out / "model.bin", serialize_params(r.final_params));
  fs::remove(out / kPartialMarker);
  return r;
}

// ---------------------------------------------------------------------------
// Run comparison

/// One CSV row per run directory. Runs must share the eval spec.
inline std::string compare_runs(const std::vector<std::filesystem::path>& dirs) {
  if (dirs.empty()) throw ConfigError("compare: no run directories given");
  std::vector<json> reports, timings;
  for (const auto& dir : dirs) {
    if (std::filesystem::exists(dir / kPartialMarker)) {
      throw ConfigError("compare: run '" + dir.string() + "' is partial");
    }
    try {
      reports.push_back(json::parse(read_file(dir / "report.json")));
      timings.push_back(json::parse(read_file(dir / "timing.json")));
    } catch (const json::parse_error& e) {
      throw ConfigError("compare: " + dir.string() + ": " + e.what());
    }
  }
  const json& spec0 = reports.front().at("eval_spec");
  for (std::size_t i = 1; i < reports.size(); ++i) {
    const json& s = reports[i].at("eval_spec");
    if (s != spec0) {
      throw ConfigError("compare: eval spec of '" + dirs[i].string() + "' differs from '" + dirs[0].string() +
                        "': " + json::diff(spec0, s).dump());
    }
  }
  std::string csv = "run,mode,metric,ordering,seed,accuracy,quality_ratio,trained_samples,scoring_ms,train_ms,scoring_fraction\n";
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    const auto& c = r.at("config");
    const double q = r.contains("selection") ? r["selection"].at("quality_ratio").get<double>() : 0.0;
    csv += dirs[i].filename().string() + "," + c.at("mode").get<std::string>() + "," +
           c.at("metric").get<std::string>() + "," + c.at("ordering").get<std::string>() + "," +
           std::to_string(c.at("seed").get<std::uint64_t>()) + "," +
           format_double(r.at("eval").at("exact_match").get<double>()) + "," + format_double(q) + "," +
           std::to_string(r.at("trained_samples").get<std::size_t>()) + "," +
           format_double(timings[i].at("scoring_ms").get<double>()) + "," +
           format_double(timings[i].at("train_ms").get<double>()) + "," +
           format_double(timings[i].at("scoring_fraction").get<double>()) + "\n";
  }
  return csv;
}

}  // namespace feddqc
