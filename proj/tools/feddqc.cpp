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

// Command-line front end. Exit codes: 0 ok, 2 config error, 3 numeric fault.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "feddqc/experiment.hpp"

namespace fs = std::filesystem;
using namespace feddqc;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::size_t> threads;
  bool quiet = false;
};

void add_common(CLI::App* sub, Common& c, bool need_out) {
  sub->add_option("--config", c.config, "experiment config (JSON)")->check(CLI::ExistingFile);
  sub->add_option("--seed", c.seed, "master seed override");
  auto* o = sub->add_option("--out", c.out, "output directory");
  if (need_out) o->required();
  sub->add_option("--threads", c.threads, "worker threads")->check(CLI::PositiveNumber);
  sub->add_flag("-q,--quiet", c.quiet, "warnings and errors only");
}

ExperimentConfig load(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? parse_experiment_config(json::object()) : load_experiment_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out.empty()) cfg.output_dir = c.out;
  if (c.threads) cfg.threads = *c.threads;
  cfg.validate();
  set_threads(cfg.threads);
  return cfg;
}

void write_vocab(const PreparedData& d, const fs::path& out) {
  std::string txt;
  for (std::size_t i = 0; i < d.vocab.size(); ++i) txt += d.vocab.symbol(static_cast<TokenId>(i)) + "\n";
  write_file_atomic(out / "vocab.txt", txt);
}

/// Warm start, or a saved model when --model is given.
ModelParams model_for(const ExperimentConfig& cfg, const PreparedData& d, const std::string& model_path) {
  if (model_path.empty()) return pretrain_model(cfg, d);
  auto theta = load_params(model_path);
  if (theta.arch().vocab_size != d.vocab.size()) {
    throw ConfigError("--model: vocab size " + std::to_string(theta.arch().vocab_size) + " does not match " +
                      std::to_string(d.vocab.size()));
  }
  return theta;
}

void print_summary(const ExperimentResult& r) {
  std::printf("mode=%s metric=%s ordering=%s accuracy=%.4f", to_string(r.config.mode).c_str(),
              to_string(r.config.plan.metric).c_str(), to_string(r.config.plan.ordering).c_str(),
              r.eval.exact_match);
  if (r.selection) std::printf(" quality_ratio=%.4f", r.selection->quality_ratio);
  std::printf(" trained=%zu scoring_ms=%.1f train_ms=%.1f\n", r.trained_samples, r.scoring_ms, r.train_ms);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated instruction-tuning simulator with quality-aware data selection"};
  app.require_subcommand(1);
  Common c;
  std::string model_path, judgments_path;
  char ours = 'A';
  std::vector<std::string> run_dirs;

  auto* gen = app.add_subcommand("generate", "write the clean training corpus, eval set and vocab");
  auto* cor = app.add_subcommand("corrupt", "write the corrupted training corpus with quality labels");
  auto* par = app.add_subcommand("partition", "write the corrupted corpus and its client manifest");
  auto* sco = app.add_subcommand("score", "score the training corpus with the warm-start (or --model) model");
  auto* trn = app.add_subcommand("train", "run the configured baseline mode end to end");
  auto* fdq = app.add_subcommand("feddqc", "run hierarchical quality-aware training end to end");
  auto* evl = app.add_subcommand("eval", "exact-match evaluation of a saved model, plus optional win rate");
  auto* dmp = app.add_subcommand("datamap", "train with per-round checkpoints and emit the data map");
  auto* cmp = app.add_subcommand("compare", "one comparison row per finished run directory");

  for (auto* s : {gen, cor, par, sco, trn, fdq, dmp}) add_common(s, c, true);
  add_common(evl, c, false);
  sco->add_option("--model", model_path, "saved model to score with")->check(CLI::ExistingFile);
  evl->add_option("--model", model_path, "saved model")->required()->check(CLI::ExistingFile);
  evl->add_option("--judgments", judgments_path, "pairwise judgments (JSONL)")->check(CLI::ExistingFile);
  evl->add_option("--ours", ours, "which side of each judgment is ours")->check(CLI::IsMember({'A', 'B'}));
  cmp->add_option("runs", run_dirs, "run directories")->required()->check(CLI::ExistingDirectory);
  cmp->add_option("--out", c.out, "write the table here as well");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }
  if (c.quiet) spdlog::set_level(spdlog::level::warn);

  try {
    if (cmp->parsed()) {
      std::vector<fs::path> dirs(run_dirs.begin(), run_dirs.end());
      const auto table = compare_runs(dirs);
      std::cout << table;
      if (!c.out.empty()) write_file_atomic(fs::path(c.out) / "compare.csv", table);
      return 0;
    }

    auto cfg = load(c);
    const fs::path out = cfg.output_dir;

    if (gen->parsed()) {
      const auto d = prepare_data(cfg, /*stop_after_generate=*/true);
      write_vocab(d, out);
      write_file_atomic(out / "dataset_clean.jsonl", serialize_dataset(d.clean, d.vocab));
      write_file_atomic(out / "eval.jsonl", serialize_dataset(d.eval, d.vocab));
      spdlog::info("generated {} training and {} eval samples", d.clean.size(), d.eval.size());
    } else if (cor->parsed() || par->parsed()) {
      const auto d = prepare_data(cfg);
      write_vocab(d, out);
      write_file_atomic(out / "dataset.jsonl", serialize_dataset(d.train, d.vocab));
      if (par->parsed()) {
        write_file_atomic(out / "partition.jsonl", serialize_manifest(d.train, d.owner));
        for (std::size_t i = 0; i < d.clients.size(); ++i) {
          spdlog::info("client {}: {} samples", i, d.clients[i].size());
        }
      }
    } else if (sco->parsed()) {
      const auto d = prepare_data(cfg);
      const auto theta = model_for(cfg, d, model_path);
      const auto sc = scoring_config_for(cfg, d);
      const auto recs = score_dataset(theta, d.train.examples(), cfg.plan.metric, sc, d.tmpl, model_tag(theta));
      write_file_atomic(out / "scores.jsonl", serialize_scores(recs));
      if (auto auc = score_auc(recs, d.train, sc.prefer_high_ppl)) {
        std::printf("metric=%s n=%zu auc=%.4f\n", to_string(cfg.plan.metric).c_str(), recs.size(), *auc);
      }
    } else if (trn->parsed() || fdq->parsed() || dmp->parsed()) {
      if (fdq->parsed()) cfg.mode = RunMode::kFedDqc;
      if (trn->parsed() && cfg.mode == RunMode::kFedDqc) {
        throw ConfigError("mode: 'train' runs a baseline mode; use the feddqc subcommand for feddqc");
      }
      if (dmp->parsed()) cfg.datamap = true;
      print_summary(run_experiment(cfg));
    } else if (evl->parsed()) {
      const auto d = prepare_data(cfg, /*stop_after_generate=*/true);
      const auto theta = model_for(cfg, d, model_path);
      const auto report = exact_match(theta, d.eval, d.tmpl, cfg.eval_max_len);
      json j = eval_report_to_json(report);
      j["eval_spec"] = cfg.eval_spec();
      if (!judgments_path.empty()) {
        const auto js = parse_judgments(read_file(judgments_path), ours, judgments_path);
        j["win_rate"] = win_rate(js);
      }
      std::cout << j.dump(2) << "\n";
      if (!out.empty()) write_file_atomic(out / "eval_report.json", j.dump(2) + "\n");
    }
    return 0;
  } catch (const NumericFault& e) {
    spdlog::error("numeric fault: {}", e.what());
    return kExitNumeric;
  } catch (const ConfigError& e) {
    spdlog::error("config error: {}", e.what());
    return kExitConfig;
  } catch (const UndefinedScore& e) {
    spdlog::error("{}", e.what());
    return kExitConfig;
  } catch (const PreconditionError& e) {
    spdlog::error("{}", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
}
