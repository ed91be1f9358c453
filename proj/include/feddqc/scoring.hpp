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

// Per-sample data-quality metrics and threshold selection.
//
// Every function here takes `Example` (never `Sample`), so ground-truth
// quality labels are unreachable from scoring code.

#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "feddqc/common.hpp"
#include "feddqc/corpus.hpp"
#include "feddqc/io.hpp"
#include "feddqc/model.hpp"

namespace feddqc {

enum class Metric { kIra, kPpl, kLoss, kIfd, kNuggets, kDataInf };

inline std::string to_string(Metric m) {
  switch (m) {
    case Metric::kIra: return "IRA";
    case Metric::kPpl: return "PPL";
    case Metric::kLoss: return "LOSS";
    case Metric::kIfd: return "IFD";
    case Metric::kNuggets: return "NUGGETS";
    case Metric::kDataInf: return "DATAINF";
  }
  return "?";
}

inline Metric parse_metric(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  for (auto m : {Metric::kIra, Metric::kPpl, Metric::kLoss, Metric::kIfd, Metric::kNuggets,
                 Metric::kDataInf}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown metric '" + s + "'");
}

struct ScoreRecord {
  std::string sample_id;
  Metric metric = Metric::kIra;
  double value = 0.0;  // raw metric value (PPL is a perplexity, LOSS a loss)
  Reduction reduction = Reduction::kSum;
  std::string model_tag;

  bool operator==(const ScoreRecord&) const = default;
};

struct ScoringConfig {
  Reduction reduction = Reduction::kSum;
  std::vector<Example> probes;      // NUGGETS
  std::vector<Example> validation;  // DATAINF
  double damping = 0.01;
  /// Select high-perplexity data instead of low (PPL orientation flag).
  bool prefer_high_ppl = false;
};

// ---------------------------------------------------------------------------
// Single-sample metrics

/// L(a; theta) - L((a, q); theta).
inline double ira(const ModelParams& theta, const Example& ex, const PromptTemplate& tmpl,
                  Reduction reduction = Reduction::kSum) {
  const auto u = unconditional_loss(theta, ex, tmpl);
  const auto c = conditional_loss(theta, ex, tmpl);
  return reduce(u, reduction) - reduce(c, reduction);
}

/// exp(mean conditional NLL); +inf on overflow.
inline double ppl(const ModelParams& theta, const Example& ex, const PromptTemplate& tmpl) {
  const double mean = conditional_loss(theta, ex, tmpl).mean();
  const double v = std::exp(mean);
  if (std::isinf(v)) spdlog::warn("perplexity overflow for sample {}", ex.id);
  return v;
}

/// s(A|Q) / s(A) with token-mean losses.
inline double ifd(const ModelParams& theta, const Example& ex, const PromptTemplate& tmpl) {
  const double uncond = unconditional_loss(theta, ex, tmpl).mean();
  if (!(uncond > 0.0)) throw UndefinedScore("IFD undefined for " + ex.id + ": zero unconditional loss");
  return conditional_loss(theta, ex, tmpl).mean() / uncond;
}

/// One-shot encoding: the candidate's full encoded text (BOS ... EOS)
/// followed by the probe's prompt and response. The loss span is the probe
/// response.
inline Encoded one_shot_encoding(const Example& candidate, const Example& probe,
                                 const PromptTemplate& tmpl) {
  Encoded e = tmpl.encode(candidate);
  const Encoded p = tmpl.encode(probe);
  const std::size_t shift = e.tokens.size() - 1;  // probe BOS dropped
  e.tokens.insert(e.tokens.end(), p.tokens.begin() + 1, p.tokens.end());
  e.span_begin = p.span_begin + shift;
  e.span_end = p.span_end + shift;
  return e;
}

/// Mean over probes of zero-shot minus one-shot probe response loss.
inline double nuggets(const ModelParams& theta, const Example& candidate,
                      std::span<const Example> probes, const PromptTemplate& tmpl,
                      Reduction reduction = Reduction::kSum) {
  if (probes.empty()) throw ConfigError("NUGGETS needs a nonempty probe set");
  theta.check_finite();
  double acc = 0.0;
  for (const auto& probe : probes) {
    const double zero = reduce(encoded_loss(theta, tmpl.encode(probe)), reduction);
    const double one = reduce(encoded_loss(theta, one_shot_encoding(candidate, probe, tmpl)), reduction);
    acc += zero - one;
  }
  return acc / double(probes.size());
}

/// Mean conditional-loss gradient over a validation set.
inline std::vector<double> validation_gradient(const ModelParams& theta,
                                               std::span<const Example> validation,
                                               const PromptTemplate& tmpl) {
  require(!validation.empty(), "validation set must be nonempty");
  return grad(theta, validation, tmpl).gradient;
}

/// Damped-identity influence: grad_val . grad_sample / damping. Higher means
/// a descent step on the sample lowers validation loss more.
inline double datainf_from_val_grad(const ModelParams& theta, const Example& ex,
                                    std::span<const double> val_grad, double damping,
                                    const PromptTemplate& tmpl) {
  if (!(damping > 0.0)) throw ConfigError("DataInf damping must be > 0");
  const auto g = grad(theta, std::span<const Example>(&ex, 1), tmpl).gradient;
  double dot = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) dot += val_grad[i] * g[i];
  return dot / damping;
}

inline double datainf_influence(const ModelParams& theta, const Example& ex,
                                std::span<const Example> validation, double damping,
                                const PromptTemplate& tmpl) {
  const auto vg = validation_gradient(theta, validation, tmpl);
  return datainf_from_val_grad(theta, ex, vg, damping, tmpl);
}

// ---------------------------------------------------------------------------
// Dataset scoring

/// Scores every example in order. Identical (instruction, response) pairs
/// are evaluated once; results are assembled in input order.
inline std::vector<ScoreRecord> score_dataset(const ModelParams& theta, std::span<const Example> data,
                                              Metric metric, const ScoringConfig& cfg,
                                              const PromptTemplate& tmpl, const std::string& model_tag) {
  if (model_tag.empty()) throw ConfigError("score_dataset: model_tag must be nonempty");
  std::vector<ScoreRecord> out(data.size());
  if (data.empty()) return out;
  theta.check_finite();
  if (metric == Metric::kNuggets && cfg.probes.empty()) throw ConfigError("NUGGETS needs probes");
  if (metric == Metric::kDataInf && cfg.validation.empty()) {
    throw ConfigError("DATAINF needs a validation set");
  }

  // Group by content so duplicates share one evaluation.
  using Key = std::pair<std::vector<TokenId>, std::vector<TokenId>>;
  std::map<Key, std::size_t> slot_of;
  std::vector<std::size_t> slot(data.size());
  std::vector<std::size_t> rep;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto [it, fresh] = slot_of.emplace(Key{data[i].instruction, data[i].response}, rep.size());
    if (fresh) rep.push_back(i);
    slot[i] = it->second;
  }

  std::vector<double> val_grad;
  std::vector<double> zero_shot;
  if (metric == Metric::kDataInf) val_grad = validation_gradient(theta, cfg.validation, tmpl);
  if (metric == Metric::kNuggets) {
    for (const auto& p : cfg.probes) {
      zero_shot.push_back(reduce(encoded_loss(theta, tmpl.encode(p)), cfg.reduction));
    }
  }

  // The response-only loss depends on the response alone; share it too.
  std::map<std::vector<TokenId>, std::size_t> resp_slot_of;
  std::vector<std::size_t> resp_slot(rep.size());
  std::vector<std::size_t> resp_rep;
  std::vector<LossBreakdown> uncond_cache;
  if (metric == Metric::kIra || metric == Metric::kIfd) {
    for (std::size_t u = 0; u < rep.size(); ++u) {
      auto [it, fresh] = resp_slot_of.emplace(data[rep[u]].response, resp_rep.size());
      if (fresh) resp_rep.push_back(rep[u]);
      resp_slot[u] = it->second;
    }
    uncond_cache.resize(resp_rep.size());
    parallel_for(resp_rep.size(), [&](std::size_t r) {
      detail::Workspace ws(theta.arch());
      uncond_cache[r] = detail::unconditional_loss_unchecked(theta, data[resp_rep[r]], tmpl, ws);
    });
  }

  std::vector<double> values(rep.size());
  parallel_for(rep.size(), [&](std::size_t u) {
    const Example& ex = data[rep[u]];
    detail::Workspace ws(theta.arch());
    auto cond = [&] { return detail::conditional_loss_unchecked(theta, ex, tmpl, ws); };
    auto uncond = [&] { return uncond_cache[resp_slot[u]]; };
    double v = 0.0;
    switch (metric) {
      case Metric::kIra:
        v = reduce(uncond(), cfg.reduction) - reduce(cond(), cfg.reduction);
        break;
      case Metric::kPpl:
        v = std::exp(cond().mean());
        if (std::isinf(v)) spdlog::warn("perplexity overflow for sample {}", ex.id);
        break;
      case Metric::kLoss:
        v = reduce(cond(), cfg.reduction);
        break;
      case Metric::kIfd: {
        const double u_mean = uncond().mean();
        if (!(u_mean > 0.0)) throw UndefinedScore("IFD undefined for " + ex.id + ": zero unconditional loss");
        v = cond().mean() / u_mean;
        break;
      }
      case Metric::kNuggets: {
        double acc = 0.0;
        for (std::size_t k = 0; k < cfg.probes.size(); ++k) {
          const auto enc = one_shot_encoding(ex, cfg.probes[k], tmpl);
          detail::check_tokens(theta, enc);
          acc += zero_shot[k] - reduce(detail::sequence_loss(theta, enc, ws), cfg.reduction);
        }
        v = acc / double(cfg.probes.size());
        break;
      }
      case Metric::kDataInf:
        v = datainf_from_val_grad(theta, ex, val_grad, cfg.damping, tmpl);
        break;
    }
    values[u] = v;
  });

  for (std::size_t i = 0; i < data.size(); ++i) {
    out[i] = ScoreRecord{data[i].id, metric, values[slot[i]], cfg.reduction, model_tag};
  }
  return out;
}

// ---------------------------------------------------------------------------
// Selection

/// Orientation so that higher is always better. PPL and LOSS are negated
/// (low perplexity/loss preferred) unless `prefer_high_ppl` flips PPL.
inline double selection_value(const ScoreRecord& r, bool prefer_high_ppl = false) {
  switch (r.metric) {
    case Metric::kPpl: return prefer_high_ppl ? r.value : -r.value;
    case Metric::kLoss: return -r.value;
    default: return r.value;
  }
}

struct SelectionResult {
  std::vector<std::string> kept;     // descending score, ties by id
  std::vector<double> kept_scores;   // oriented scores aligned with `kept`
  std::vector<std::string> dropped;  // ascending id order
  double threshold = 0.0;
  bool empty_warning = false;
};

namespace detail {

struct Ranked {
  double score;
  const std::string* id;
};

inline std::vector<Ranked> rank(std::span<const ScoreRecord> records, bool prefer_high_ppl) {
  std::vector<Ranked> r;
  r.reserve(records.size());
  for (const auto& rec : records) {
    const double s = selection_value(rec, prefer_high_ppl);
    if (std::isnan(s)) throw NumericFault("NaN score for sample " + rec.sample_id);
    r.push_back({s, &rec.sample_id});
  }
  std::sort(r.begin(), r.end(), [](const Ranked& a, const Ranked& b) {
    if (a.score != b.score) return a.score > b.score;
    return *a.id < *b.id;
  });
  return r;
}

}  // namespace detail

/// Keeps records whose oriented score is >= threshold.
inline SelectionResult select(std::span<const ScoreRecord> records, double threshold,
                              bool prefer_high_ppl = false) {
  require(!records.empty(), "select: records must be nonempty");
  SelectionResult out;
  out.threshold = threshold;
  for (const auto& r : detail::rank(records, prefer_high_ppl)) {
    if (r.score >= threshold) {
      out.kept.push_back(*r.id);
      out.kept_scores.push_back(r.score);
    } else {
      out.dropped.push_back(*r.id);
    }
  }
  std::sort(out.dropped.begin(), out.dropped.end());
  if (out.kept.empty()) {
    out.empty_warning = true;
    spdlog::warn("selection at threshold {} kept no samples", threshold);
  }
  return out;
}

/// Keeps exactly the `count` best records (ties by id).
inline SelectionResult select_top(std::span<const ScoreRecord> records, std::size_t count,
                                  bool prefer_high_ppl = false) {
  require(!records.empty(), "select_top: records must be nonempty");
  SelectionResult out;
  const auto ranked = detail::rank(records, prefer_high_ppl);
  count = std::min(count, ranked.size());
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    if (i < count) {
      out.kept.push_back(*ranked[i].id);
      out.kept_scores.push_back(ranked[i].score);
    } else {
      out.dropped.push_back(*ranked[i].id);
    }
  }
  std::sort(out.dropped.begin(), out.dropped.end());
  out.threshold = count ? ranked[count - 1].score : std::numeric_limits<double>::infinity();
  out.empty_warning = out.kept.empty();
  return out;
}

/// The oriented score of the `count`-th best record over a pooled score set,
/// i.e. the raw threshold that keeps (at least) `count` records.
inline double threshold_for_count(std::vector<double> oriented_scores, std::size_t count) {
  if (count == 0) return std::numeric_limits<double>::infinity();
  if (count >= oriented_scores.size()) return -std::numeric_limits<double>::infinity();
  std::nth_element(oriented_scores.begin(), oriented_scores.begin() + (count - 1), oriented_scores.end(),
                   std::greater<>());
  return oriented_scores[count - 1];
}

// ---------------------------------------------------------------------------
// Score dumps: {sample_id, metric, value, model_tag, reduction} per line.

inline json score_to_json(const ScoreRecord& r) {
  json j;
  j["sample_id"] = r.sample_id;
  j["metric"] = to_string(r.metric);
  j["value"] = r.value;
  j["model_tag"] = r.model_tag;
  j["reduction"] = to_string(r.reduction);
  return j;
}

inline std::string serialize_scores(std::span<const ScoreRecord> records) {
  std::string out;
  for (const auto& r : records) {
    out += score_to_json(r).dump();
    out += '\n';
  }
  return out;
}

inline std::vector<ScoreRecord> parse_scores(std::string_view text, const std::string& source = "<scores>") {
  std::vector<ScoreRecord> out;
  for (auto& [line_no, j] : parse_jsonl(text, source)) {
    try {
      out.push_back({j.at("sample_id").get<std::string>(), parse_metric(j.at("metric").get<std::string>()),
                     j.at("value").is_null() ? std::numeric_limits<double>::infinity()
                                             : j.at("value").get<double>(),
                     parse_reduction(j.at("reduction").get<std::string>()),
                     j.at("model_tag").get<std::string>()});
    } catch (const json::exception& e) {
      throw ConfigError(source + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace feddqc
