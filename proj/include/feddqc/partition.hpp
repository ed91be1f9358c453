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

#pragma once

#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "feddqc/common.hpp"
#include "feddqc/corpus.hpp"
#include "feddqc/io.hpp"

namespace feddqc {

enum class PartitionMode { kIid, kDirichlet, kQualitySkew };

inline std::string to_string(PartitionMode m) {
  switch (m) {
    case PartitionMode::kIid: return "iid";
    case PartitionMode::kDirichlet: return "dirichlet";
    case PartitionMode::kQualitySkew: return "quality_skew";
  }
  return "?";
}

inline PartitionMode parse_partition_mode(const std::string& s) {
  if (s == "iid") return PartitionMode::kIid;
  if (s == "dirichlet") return PartitionMode::kDirichlet;
  if (s == "quality_skew") return PartitionMode::kQualitySkew;
  throw ConfigError("unknown partition mode '" + s + "'");
}

struct PartitionSpec {
  std::size_t n_clients = 5;
  PartitionMode mode = PartitionMode::kIid;
  double alpha = 1.0;  // Dirichlet concentration
  double skew = 1.0;   // quality_skew: P(corrupted sample -> last client)
  std::uint64_t seed = 0;

  void validate() const {
    if (n_clients < 1) throw ConfigError("n_clients must be >= 1");
    if (mode == PartitionMode::kDirichlet && !(alpha > 0.0)) throw ConfigError("dirichlet alpha must be > 0");
    if (mode == PartitionMode::kQualitySkew && !(skew >= 0.0 && skew <= 1.0)) {
      throw ConfigError("quality skew must be in [0,1]");
    }
  }
};

/// Category used for Dirichlet splits: the stored task family, or the
/// leading instruction token when none is stored.
inline std::string category_key(const Sample& s) {
  if (!s.category().empty()) return s.category();
  if (!s.instruction().empty()) return "#" + std::to_string(s.instruction().front());
  return "";
}

namespace detail {

inline std::vector<double> sample_dirichlet(Rng& rng, std::size_t k, double alpha) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<double> p(k);
  double sum = 0.0;
  for (auto& x : p) {
    x = gamma(rng);
    sum += x;
  }
  if (!(sum > 0.0)) {
    // Tiny alpha can underflow every draw; put all mass on one client.
    std::fill(p.begin(), p.end(), 0.0);
    p[uniform_index(rng, k)] = 1.0;
    return p;
  }
  for (auto& x : p) x /= sum;
  return p;
}

/// Splits n items into counts proportional to p (largest remainder).
inline std::vector<std::size_t> proportional_counts(std::size_t n, const std::vector<double>& p) {
  std::vector<std::size_t> c(p.size());
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t used = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double exact = p[i] * double(n);
    c[i] = static_cast<std::size_t>(std::floor(exact));
    used += c[i];
    rem.push_back({exact - double(c[i]), i});
  }
  std::sort(rem.begin(), rem.end(), [](auto& a, auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
  for (std::size_t i = 0; used < n; ++i, ++used) ++c[rem[i % rem.size()].second];
  return c;
}

}  // namespace detail

/// Assigns every sample to one client; returns client index per sample.
inline std::vector<std::size_t> assign_clients(const Dataset& ds, const PartitionSpec& spec) {
  spec.validate();
  const std::size_t N = spec.n_clients;
  if (ds.size() < N) {
    throw ConfigError("dataset of " + std::to_string(ds.size()) + " samples is smaller than " +
                      std::to_string(N) + " clients");
  }
  Rng rng(derive_seed(spec.seed, "partition"));
  std::vector<std::size_t> owner(ds.size(), 0);
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);

  switch (spec.mode) {
    case PartitionMode::kIid:
      shuffle_in_place(order, rng);
      for (std::size_t i = 0; i < order.size(); ++i) owner[order[i]] = i % N;
      break;
    case PartitionMode::kDirichlet: {
      std::map<std::string, std::vector<std::size_t>> by_cat;
      for (std::size_t i = 0; i < ds.size(); ++i) by_cat[category_key(ds[i])].push_back(i);
      constexpr int kMaxAttempts = 100;
      for (int attempt = 0;; ++attempt) {
        std::vector<std::size_t> sizes(N, 0);
        for (auto& [cat, members] : by_cat) {
          auto shuffled = members;
          shuffle_in_place(shuffled, rng);
          const auto counts = detail::proportional_counts(shuffled.size(), detail::sample_dirichlet(rng, N, spec.alpha));
          std::size_t pos = 0;
          for (std::size_t c = 0; c < N; ++c) {
            for (std::size_t k = 0; k < counts[c]; ++k) owner[shuffled[pos++]] = c;
            sizes[c] += counts[c];
          }
        }
        if (std::all_of(sizes.begin(), sizes.end(), [](auto s) { return s > 0; })) break;
        if (attempt + 1 == kMaxAttempts) {
          // Give each empty client one sample from the largest client.
          for (std::size_t c = 0; c < N; ++c) {
            if (sizes[c] > 0) continue;
            const auto big = static_cast<std::size_t>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
            for (std::size_t i = 0; i < owner.size(); ++i) {
              if (owner[i] == big) {
                owner[i] = c;
                --sizes[big];
                ++sizes[c];
                break;
              }
            }
          }
          break;
        }
      }
      break;
    }
    case PartitionMode::kQualitySkew: {
      shuffle_in_place(order, rng);
      std::size_t rr = 0;
      for (auto i : order) {
        const auto& label = ds[i].label();
        const bool corrupted = label && !label->is_clean();
        if (N > 1 && corrupted && uniform_unit(rng) < spec.skew) {
          owner[i] = N - 1;
        } else {
          owner[i] = rr++ % N;
        }
      }
      break;
    }
  }
  return owner;
}

inline std::vector<Dataset> split_by_owner(const Dataset& ds, const std::vector<std::size_t>& owner,
                                           std::size_t n_clients) {
  std::vector<std::vector<Sample>> parts(n_clients);
  for (std::size_t i = 0; i < ds.size(); ++i) parts.at(owner[i]).push_back(ds[i]);
  std::vector<Dataset> out;
  for (std::size_t c = 0; c < n_clients; ++c) {
    out.emplace_back(ds.name() + "-client" + std::to_string(c), std::move(parts[c]));
  }
  return out;
}

/// Disjoint client datasets whose union is `ds`.
inline std::vector<Dataset> partition(const Dataset& ds, const PartitionSpec& spec) {
  return split_by_owner(ds, assign_clients(ds, spec), spec.n_clients);
}

/// Manifest lines {sample_id, client_index} in dataset order.
inline std::string serialize_manifest(const Dataset& ds, const std::vector<std::size_t>& owner) {
  std::string out;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out += json{{"sample_id", ds[i].id()}, {"client_index", owner[i]}}.dump();
    out += '\n';
  }
  return out;
}

inline std::vector<std::size_t> parse_manifest(std::string_view text, const Dataset& ds, std::size_t n_clients) {
  std::map<std::string, std::size_t> owner_of;
  for (auto& [line_no, j] : parse_jsonl(text, "<manifest>")) {
    const auto id = j.at("sample_id").get<std::string>();
    const auto c = j.at("client_index").get<std::size_t>();
    if (c >= n_clients) throw ConfigError("manifest line " + std::to_string(line_no) + ": client out of range");
    if (!owner_of.emplace(id, c).second) throw ConfigError("manifest assigns '" + id + "' twice");
  }
  std::vector<std::size_t> owner(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto it = owner_of.find(ds[i].id());
    if (it == owner_of.end()) throw ConfigError("manifest lacks sample '" + ds[i].id() + "'");
    owner[i] = it->second;
  }
  return owner;
}

}  // namespace feddqc
