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

// Task accuracy, selection quality, win rate and ROC-AUC.

#pragma once

#include <map>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "feddqc/common.hpp"
#include "feddqc/corpus.hpp"
#include "feddqc/dynamics.hpp"
#include "feddqc/io.hpp"
#include "feddqc/model.hpp"

namespace feddqc {

/// Argmax decoding after the prompt until EOS or max_len tokens. Ties go to
/// the lowest token index. EOS is not included in the output.
inline std::vector<TokenId> greedy_decode(const ModelParams& theta, const PromptTemplate& tmpl,
                                          std::span<const TokenId> instruction, std::size_t max_len) {
  require(max_len >= 1, "greedy_decode: max_len must be >= 1");
  detail::Workspace ws(theta.arch());
  auto tokens = tmpl.prompt(instruction);
  const std::size_t V = theta.arch().vocab_size;
  for (auto t : tokens) {
    if (t >= V) throw ConfigError("token id " + std::to_string(t) + " outside model vocab");
  }
  std::vector<TokenId> out;
  for (std::size_t step = 0; step < max_len; ++step) {
    tokens.push_back(Vocab::kPad);
    detail::forward_position(theta, tokens, tokens.size() - 1, ws);
    TokenId best = 0;
    for (std::size_t v = 1; v < V; ++v) {
      if (ws.logits[v] > ws.logits[best]) best = static_cast<TokenId>(v);
    }
    if (best == Vocab::kEos) break;
    tokens.back() = best;
    out.push_back(best);
  }
  return out;
}

struct TaskAccuracy {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const { return total ? double(correct) / double(total) : 0.0; }
};

struct EvalReport {
  double exact_match = 0.0;
  std::size_t n_eval = 0;
  std::size_t correct = 0;
  std::map<std::string, TaskAccuracy> per_task;
};

/// Fraction of samples whose greedy decode equals the reference response.
inline EvalReport exact_match(const ModelParams& theta, const Dataset& eval, const PromptTemplate& tmpl,
                              std::size_t max_len = 8) {
  if (eval.empty()) throw PreconditionError("exact_match: eval set must be nonempty");
  theta.check_finite();
  std::vector<char> hit(eval.size(), 0);
  parallel_for(eval.size(), [&](std::size_t i) {
    const auto& s = eval[i];
    hit[i] = greedy_decode(theta, tmpl, s.instruction(), max_len) == s.response();
  });
  EvalReport r;
  r.n_eval = eval.size();
  for (std::size_t i = 0; i < eval.size(); ++i) {
    auto& t = r.per_task[eval[i].category()];
    ++t.total;
    if (hit[i]) {
      ++t.correct;
      ++r.correct;
    }
  }
  r.exact_match = double(r.correct) / double(r.n_eval);
  return r;
}

inline json eval_report_to_json(const EvalReport& r) {
  json tasks = json::object();
  for (const auto& [name, t] : r.per_task) {
    tasks[name] = json{{"correct", t.correct}, {"total", t.total}, {"accuracy", t.accuracy()}};
  }
  return json{{"exact_match", r.exact_match}, {"n_eval", r.n_eval}, {"correct", r.correct}, {"per_task", tasks}};
}

struct SelectionQuality {
  std::size_t kept = 0;
  std::size_t clean_kept = 0;
  std::size_t clean_total = 0;
  double quality_ratio = 0.0;  // clean_kept / kept (equals precision)
  double precision = 0.0;
  double recall = 0.0;         // clean_kept / clean_total
};

/// Scores a kept-id set against ground-truth labels of `labeled`.
inline SelectionQuality selection_quality(std::span<const std::string> kept, const Dataset& labeled) {
  SelectionQuality q;
  for (const auto& s : labeled) {
    if (!s.label()) throw ConfigError("selection_quality: sample '" + s.id() + "' has no quality label");
    if (s.label()->is_clean()) ++q.clean_total;
  }
  std::unordered_set<std::string> seen;
  for (const auto& id : kept) {
    if (!seen.insert(id).second) continue;
    const Sample* s = labeled.find(id);
    if (!s) throw ConfigError("selection_quality: kept id '" + id + "' not in labeled dataset");
    ++q.kept;
    if (s->label()->is_clean()) ++q.clean_kept;
  }
  q.quality_ratio = q.kept ? double(q.clean_kept) / double(q.kept) : 0.0;
  q.precision = q.quality_ratio;
  q.recall = q.clean_total ? double(q.clean_kept) / double(q.clean_total) : 0.0;
  return q;
}

inline json selection_quality_to_json(const SelectionQuality& q) {
  return json{{"kept", q.kept},         {"clean_kept", q.clean_kept}, {"clean_total", q.clean_total},
              {"quality_ratio", q.quality_ratio}, {"precision", q.precision}, {"recall", q.recall}};
}

enum class Judgment { kWin, kLose, kTie };

/// wins / (wins + losses); ties excluded.
inline double win_rate(std::span<const Judgment> js) {
  std::size_t w = 0, l = 0;
  for (auto j : js) {
    if (j == Judgment::kWin) ++w;
    if (j == Judgment::kLose) ++l;
  }
  if (w + l == 0) throw UndefinedScore("win rate undefined: no non-tie judgments");
  return double(w) / double(w + l);
}

/// Judgment lines {pair_id, verdict in {A, B, tie}}; `ours` names our side.
inline std::vector<Judgment> parse_judgments(std::string_view text, char ours,
                                             const std::string& source = "<judgments>") {
  if (ours != 'A' && ours != 'B') throw ConfigError("ours must be 'A' or 'B'");
  std::vector<Judgment> out;
  for (auto& [line_no, j] : parse_jsonl(text, source)) {
    if (!j.contains("pair_id") || !j.contains("verdict")) {
      throw ConfigError(source + " line " + std::to_string(line_no) + ": missing pair_id or verdict");
    }
    const auto v = j.at("verdict").get<std::string>();
    if (v == "tie") {
      out.push_back(Judgment::kTie);
    } else if (v == "A" || v == "B") {
      out.push_back(v[0] == ours ? Judgment::kWin : Judgment::kLose);
    } else {
      throw ConfigError(source + " line " + std::to_string(line_no) + ": bad verdict '" + v + "'");
    }
  }
  return out;
}

/// Probability that a random positive outscores a random negative
/// (ties count one half).
inline double roc_auc(std::span<const double> scores, const std::vector<bool>& positive) {
  require(scores.size() == positive.size(), "roc_auc: length mismatch");
  std::size_t np = 0;
  for (bool p : positive) np += p;
  const std::size_t nn = positive.size() - np;
  if (np == 0 || nn == 0) throw UndefinedScore("roc_auc needs both classes");
  const auto ranks = average_ranks(scores);
  double sum = 0.0;
  for (std::size_t i = 0; i < ranks.size(); ++i) {
    if (positive[i]) sum += ranks[i];
  }
  return (sum - double(np) * double(np + 1) / 2.0) / (double(np) * double(nn));
}

}  // namespace feddqc
