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

// Synchronous FL round engine: client sampling, local updates, weighted
// aggregation and the adaptive server optimizers.

#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "feddqc/common.hpp"
#include "feddqc/corpus.hpp"
#include "feddqc/io.hpp"
#include "feddqc/model.hpp"

namespace feddqc {

enum class ServerKind { kFedAvg, kFedAvgM, kFedAdagrad, kFedYogi, kFedAdam };

inline std::string to_string(ServerKind k) {
  switch (k) {
    case ServerKind::kFedAvg: return "fedavg";
    case ServerKind::kFedAvgM: return "fedavgm";
    case ServerKind::kFedAdagrad: return "fedadagrad";
    case ServerKind::kFedYogi: return "fedyogi";
    case ServerKind::kFedAdam: return "fedadam";
  }
  return "?";
}

inline ServerKind parse_server_kind(const std::string& s) {
  for (auto k : {ServerKind::kFedAvg, ServerKind::kFedAvgM, ServerKind::kFedAdagrad, ServerKind::kFedYogi,
                 ServerKind::kFedAdam}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown server strategy '" + s + "'");
}

struct ServerStrategy {
  ServerKind kind = ServerKind::kFedAvg;
  double beta = 0.9;   // FedAvgM momentum
  double beta1 = 0.9;  // Yogi/Adam first moment
  double beta2 = 0.99;
  double tau = 1e-3;
  std::optional<double> eta;  // server step size; defaults to the round's client lr
};

struct FedConfig {
  std::size_t rounds = 30;
  std::size_t clients_per_round = 2;
  LocalUpdateConfig local;
  double lr_initial = 1e-2;
  double lr_final = 1e-4;
  ServerStrategy server;
  std::uint64_t seed = 0;

  void validate(std::size_t n_clients) const {
    if (rounds < 1) throw ConfigError("federation.rounds must be >= 1");
    if (clients_per_round < 1 || clients_per_round > n_clients) {
      throw ConfigError("federation.clients_per_round must be in [1, n_clients]");
    }
    if (local.steps < 1) throw ConfigError("federation.local_steps must be >= 1");
    if (local.batch_size < 1) throw ConfigError("federation.batch_size must be >= 1");
    if (!(lr_initial > 0.0) || !(lr_final > 0.0)) throw ConfigError("learning-rate endpoints must be > 0");
  }
};

/// Cosine schedule over the round index: lr(0) = initial, lr(R) = final.
inline double cosine_lr(std::size_t round, std::size_t total_rounds, double lr_initial, double lr_final) {
  if (total_rounds == 0) return lr_initial;
  const double t = double(round) / double(total_rounds);
  return lr_final + 0.5 * (lr_initial - lr_final) * (1.0 + std::cos(std::numbers::pi * t));
}

/// m of N clients uniformly without replacement, ascending.
inline std::vector<std::size_t> sample_clients(std::size_t n, std::size_t m, std::size_t round, std::uint64_t seed) {
  require(m <= n, "sample_clients: m must be <= N");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(derive_seed(seed, "sample_clients"), round));
  for (std::size_t i = 0; i < m; ++i) std::swap(idx[i], idx[i + uniform_index(rng, n - i)]);
  idx.resize(m);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Normalised weights w_n = size_n / sum(size).
inline std::vector<double> aggregation_weights(std::span<const std::size_t> sizes) {
  const double total = std::accumulate(sizes.begin(), sizes.end(), 0.0,
                                       [](double a, std::size_t s) { return a + double(s); });
  if (!(total > 0.0)) throw ProtocolError("aggregation needs positive total client size");
  std::vector<double> w;
  for (auto s : sizes) w.push_back(double(s) / total);
  return w;
}

/// Server-side aggregation with persisted optimizer state.
///
/// FedAvg returns the weighted mean of client models. The adaptive
/// strategies treat delta = sum_n w_n (theta_n - theta) as a pseudo-gradient:
///   FedAvgM:    v <- beta v + delta;                   theta += v
///   FedAdagrad: v <- v + delta^2;                      theta += eta delta / (sqrt(v) + tau)
///   FedYogi:    m <- b1 m + (1-b1) delta;
///               v <- v - (1-b2) delta^2 sign(v - delta^2); theta += eta m / (sqrt(v) + tau)
///   FedAdam:    m <- b1 m + (1-b1) delta;
///               v <- b2 v + (1-b2) delta^2;             theta += eta m / (sqrt(v) + tau)
class ServerOptimizer {
 public:
  explicit ServerOptimizer(ServerStrategy s = {}) : s_(s) {}

  const ServerStrategy& strategy() const { return s_; }

  /// Number of doubles of internal state (zero for FedAvg).
  std::size_t state_size() const { return m_.size() + v_.size(); }

  ModelParams aggregate(const ModelParams& global, std::span<const ModelParams> clients,
                        std::span<const std::size_t> sizes, double round_lr) {
    if (clients.empty()) throw ProtocolError("aggregate: no client models");
    if (clients.size() != sizes.size()) throw ProtocolError("aggregate: one size per client model required");
    for (std::size_t c = 0; c < clients.size(); ++c) {
      if (clients[c].size() != global.size() || !(clients[c].arch() == global.arch())) {
        throw ProtocolError("aggregate: client " + std::to_string(c) + " has " +
                            std::to_string(clients[c].size()) + " parameters, expected " +
                            std::to_string(global.size()));
      }
    }
    const auto w = aggregation_weights(sizes);
    const std::size_t n = global.size();
    ModelParams out = global;

    if (s_.kind == ServerKind::kFedAvg) {
      for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t c = 0; c < clients.size(); ++c) acc += w[c] * clients[c][i];
        out[i] = acc;
      }
      return out;
    }

    std::vector<double> delta(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t c = 0; c < clients.size(); ++c) acc += w[c] * (clients[c][i] - global[i]);
      delta[i] = acc;
    }
    const double eta = s_.eta.value_or(round_lr);
    switch (s_.kind) {
      case ServerKind::kFedAvgM:
        if (v_.empty()) v_.assign(n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
          v_[i] = s_.beta * v_[i] + delta[i];
          out[i] = global[i] + v_[i];
        }
        break;
      case ServerKind::kFedAdagrad:
        if (v_.empty()) v_.assign(n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
          v_[i] += delta[i] * delta[i];
          out[i] = global[i] + eta * delta[i] / (std::sqrt(v_[i]) + s_.tau);
        }
        break;
      case ServerKind::kFedYogi:
      case ServerKind::kFedAdam:
        if (v_.empty()) {
          v_.assign(n, 0.0);
          m_.assign(n, 0.0);
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double d2 = delta[i] * delta[i];
          m_[i] = s_.beta1 * m_[i] + (1.0 - s_.beta1) * delta[i];
          if (s_.kind == ServerKind::kFedYogi) {
            const double sgn = (v_[i] - d2) > 0 ? 1.0 : ((v_[i] - d2) < 0 ? -1.0 : 0.0);
            v_[i] -= (1.0 - s_.beta2) * d2 * sgn;
          } else {
            v_[i] = s_.beta2 * v_[i] + (1.0 - s_.beta2) * d2;
          }
          out[i] = global[i] + eta * m_[i] / (std::sqrt(v_[i]) + s_.tau);
        }
        break;
      case ServerKind::kFedAvg:
        break;
    }
    out.check_finite();
    return out;
  }

 private:
  ServerStrategy s_;
  std::vector<double> m_;
  std::vector<double> v_;
};

/// Short content hash of a parameter vector, used as the model tag.
inline std::string model_tag(const ModelParams& p) {
  const auto bytes = serialize_params(p);
  char buf[20];
  std::snprintf(buf, sizeof buf, "g%016llx", static_cast<unsigned long long>(fnv1a(bytes)));
  return buf;
}

struct RoundLog {
  std::size_t round = 0;
  std::vector<std::size_t> participants;  // clients that trained this round
  std::vector<std::size_t> sizes;
  std::vector<double> weights;
  std::vector<double> losses;
  double lr = 0.0;
  double train_ms = 0.0;
  double scoring_ms = 0.0;
  std::string model_tag;  // tag of the global model after aggregation
  std::size_t hierarchy = 0;  // 1-based FedDQC hierarchy, 0 for plain runs
};

/// Metric fields only (no wall-clock), so reruns compare byte for byte.
inline json round_log_to_json(const RoundLog& l) {
  return json{{"round", l.round},       {"hierarchy", l.hierarchy}, {"participants", l.participants},
              {"sizes", l.sizes},       {"weights", l.weights},     {"losses", l.losses},
              {"lr", l.lr},             {"model_tag", l.model_tag}};
}

inline json round_timing_to_json(const RoundLog& l) {
  return json{{"round", l.round}, {"train_ms", l.train_ms}, {"scoring_ms", l.scoring_ms}};
}

using RoundObserver = std::function<void(std::size_t round, const ModelParams& global)>;

struct RunResult {
  ModelParams params;
  std::vector<RoundLog> logs;
};

inline std::uint64_t local_seed(std::uint64_t fed_seed, std::size_t round, std::size_t client) {
  return derive_seed(derive_seed(fed_seed, "local"), round, client);
}

/// Executes rounds [round_begin, round_end): sample, broadcast, local
/// update, aggregate. Clients with no data this round are skipped.
inline RunResult run_rounds(const ModelParams& initial, std::span<const std::vector<Example>> clients,
                            const FedConfig& cfg, std::size_t round_begin, std::size_t round_end,
                            ServerOptimizer& server, const PromptTemplate& tmpl,
                            const RoundObserver& observer = {}) {
  require(round_begin < round_end, "run_rounds: round range must be nonempty");
  cfg.validate(clients.size());
  RunResult res{initial, {}};
  for (std::size_t r = round_begin; r < round_end; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    RoundLog log;
    log.round = r;
    log.lr = cosine_lr(r, cfg.rounds, cfg.lr_initial, cfg.lr_final);
    for (auto c : sample_clients(clients.size(), cfg.clients_per_round, r, cfg.seed)) {
      if (!clients[c].empty()) log.participants.push_back(c);
    }
    std::vector<ModelParams> locals(log.participants.size());
    log.losses.assign(log.participants.size(), 0.0);
    try {
      parallel_for(log.participants.size(), [&](std::size_t k) {
        const auto c = log.participants[k];
        auto lr = local_update(res.params, clients[c], cfg.local, log.lr, local_seed(cfg.seed, r, c), tmpl);
        locals[k] = std::move(lr.params);
        log.losses[k] = lr.mean_loss;
      });
    } catch (const NumericFault& e) {
      throw NumericFault("round " + std::to_string(r) + ": " + e.what());
    }
    for (auto c : log.participants) log.sizes.push_back(clients[c].size());
    if (!log.participants.empty()) {
      log.weights = aggregation_weights(log.sizes);
      res.params = server.aggregate(res.params, locals, log.sizes, log.lr);
    } else {
      spdlog::warn("round {}: no sampled client has data; global model unchanged", r);
    }
    log.train_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    log.model_tag = model_tag(res.params);
    res.logs.push_back(std::move(log));
    if (observer) observer(r, res.params);
  }
  return res;
}

}  // namespace feddqc
