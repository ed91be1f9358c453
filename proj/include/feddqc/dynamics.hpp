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

// Training dynamics: data-map traces, model similarity, gradient norms.

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "feddqc/common.hpp"
#include "feddqc/corpus.hpp"
#include "feddqc/io.hpp"
#include "feddqc/model.hpp"

namespace feddqc {

/// Per-sample geometric-mean response-token probability exp(-mean loss).
inline std::vector<double> record_checkpoint(const ModelParams& theta, std::span<const Example> data,
                                             const PromptTemplate& tmpl) {
  theta.check_finite();
  // Identical pairs share one evaluation.
  std::map<std::pair<std::vector<TokenId>, std::vector<TokenId>>, std::size_t> slot_of;
  std::vector<std::size_t> slot(data.size()), rep;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto [it, fresh] = slot_of.emplace(std::pair{data[i].instruction, data[i].response}, rep.size());
    if (fresh) rep.push_back(i);
    slot[i] = it->second;
  }
  std::vector<double> u(rep.size());
  parallel_for(rep.size(), [&](std::size_t k) {
    detail::Workspace ws(theta.arch());
    u[k] = std::exp(-detail::conditional_loss_unchecked(theta, data[rep[k]], tmpl, ws).mean());
  });
  std::vector<double> p(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) p[i] = u[slot[i]];
  return p;
}

/// Checkpoint-major probability history for a fixed sample list.
class DynamicsTrace {
 public:
  DynamicsTrace() = default;
  explicit DynamicsTrace(std::vector<std::string> ids) : ids_(std::move(ids)) {}

  void append(std::vector<double> snapshot) {
    if (snapshot.size() != ids_.size()) {
      throw PreconditionError("DynamicsTrace: snapshot has " + std::to_string(snapshot.size()) +
                              " entries, expected " + std::to_string(ids_.size()));
    }
    checkpoints_.push_back(std::move(snapshot));
  }

  void record(const ModelParams& theta, std::span<const Example> data, const PromptTemplate& tmpl) {
    append(record_checkpoint(theta, data, tmpl));
  }

  const std::vector<std::string>& ids() const { return ids_; }
  std::size_t checkpoints() const { return checkpoints_.size(); }
  const std::vector<double>& checkpoint(std::size_t c) const { return checkpoints_.at(c); }

  std::vector<double> sample_trace(std::size_t i) const {
    std::vector<double> t;
    for (const auto& c : checkpoints_) t.push_back(c.at(i));
    return t;
  }

 private:
  std::vector<std::string> ids_;
  std::vector<std::vector<double>> checkpoints_;
};

struct DataMapRow {
  std::string sample_id;
  double confidence = 0.0;
  double variability = 0.0;  // population standard deviation
};

inline std::pair<double, double> mean_and_population_std(std::span<const double> xs) {
  const double n = double(xs.size());
  const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / n)};
}

inline std::vector<DataMapRow> finalize_map(const DynamicsTrace& trace) {
  if (trace.checkpoints() < 2) {
    throw ConfigError("data map needs at least 2 checkpoints, got " + std::to_string(trace.checkpoints()));
  }
  std::vector<DataMapRow> rows;
  for (std::size_t i = 0; i < trace.ids().size(); ++i) {
    const auto t = trace.sample_trace(i);
    const auto [mean, sd] = mean_and_population_std(t);
    rows.push_back({trace.ids()[i], mean, sd});
  }
  return rows;
}

/// CSV: sample_id,confidence,variability,quality_label
inline std::string serialize_data_map(const std::vector<DataMapRow>& rows, const Dataset& labels) {
  std::string out = "sample_id,confidence,variability,quality_label\n";
  for (const auto& r : rows) {
    const auto* s = labels.find(r.sample_id);
    std::string label = s && s->label() ? s->label()->str() : "";
    out += r.sample_id + "," + format_double(r.confidence) + "," + format_double(r.variability) + "," + label + "\n";
  }
  return out;
}

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), "cosine_similarity: length mismatch");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (!(aa > 0.0) || !(bb > 0.0)) throw UndefinedScore("cosine similarity undefined for a zero-norm vector");
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

/// Symmetric cosine-similarity matrix with unit diagonal.
inline std::vector<std::vector<double>> model_similarity(const std::vector<std::vector<double>>& models) {
  require(models.size() >= 2, "model_similarity: need at least 2 models");
  for (const auto& m : models) require(m.size() == models.front().size(), "model_similarity: length mismatch");
  const std::size_t n = models.size();
  std::vector<std::vector<double>> s(n, std::vector<double>(n, 1.0));
  for (std::size_t i = 0; i < n; ++i) {
    double norm = 0.0;
    for (double x : models[i]) norm += x * x;
    if (!(norm > 0.0)) throw UndefinedScore("model " + std::to_string(i) + " has zero norm");
    for (std::size_t j = i + 1; j < n; ++j) s[i][j] = s[j][i] = cosine_similarity(models[i], models[j]);
  }
  return s;
}

inline std::vector<std::vector<double>> model_similarity(const std::vector<ModelParams>& models) {
  std::vector<std::vector<double>> v;
  for (const auto& m : models) v.emplace_back(m.values().begin(), m.values().end());
  return model_similarity(v);
}

/// Mean of the off-diagonal entries of row i.
inline double mean_off_diagonal(const std::vector<std::vector<double>>& s, std::size_t i) {
  double acc = 0.0;
  for (std::size_t j = 0; j < s.size(); ++j) {
    if (j != i) acc += s[i][j];
  }
  return acc / double(s.size() - 1);
}

inline double mean_pairwise(const std::vector<std::vector<double>>& s) {
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = i + 1; j < s.size(); ++j, ++n) acc += s[i][j];
  }
  return n ? acc / double(n) : 1.0;
}

/// L2 norm of each sample's conditional-loss gradient.
inline std::vector<double> gradient_norms(const ModelParams& theta, std::span<const Example> data,
                                          const PromptTemplate& tmpl) {
  std::vector<double> out(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    const auto g = grad(theta, data.subspan(i, 1), tmpl).gradient;
    double ss = 0.0;
    for (double x : g) ss += x * x;
    out[i] = std::sqrt(ss);
  });
  return out;
}

/// Average ranks (1-based), ties share their mean rank.
inline std::vector<double> average_ranks(std::span<const double> xs) {
  std::vector<std::size_t> idx(xs.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return xs[a] < xs[b]; });
  std::vector<double> r(xs.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && xs[idx[j + 1]] == xs[idx[i]]) ++j;
    const double avg = 0.5 * double(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

inline double pearson(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size() && x.size() >= 2, "pearson: need two equal-length series of length >= 2");
  const double n = double(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) throw UndefinedScore("correlation undefined for a constant series");
  return sxy / std::sqrt(sxx * syy);
}

inline double spearman(std::span<const double> x, std::span<const double> y) {
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  return pearson(rx, ry);
}

}  // namespace feddqc
