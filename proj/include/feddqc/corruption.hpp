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

// Synthetic low-quality data. Only responses are ever modified.

#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <numeric>
#include <vector>

#include "feddqc/common.hpp"
#include "feddqc/corpus.hpp"

namespace feddqc {

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::kSwap;
  double ratio = 0.5;      // fraction of samples corrupted
  double intensity = 0.5;  // fraction of response tokens touched (token-level kinds)
  std::uint64_t seed = 0;

  void validate() const {
    if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("corruption ratio must be in [0,1]");
    if (!(intensity > 0.0 && intensity <= 1.0)) throw ConfigError("corruption intensity must be in (0,1]");
  }
};

namespace detail {

/// Random non-special token, optionally different from `avoid`.
inline TokenId random_regular_token(Rng& rng, const Vocab& vocab, std::optional<TokenId> avoid = {}) {
  const std::size_t regular = vocab.size() - Vocab::kNumSpecials;
  if (regular == 0) throw ConfigError("vocab has no regular symbols to corrupt with");
  if (avoid && regular == 1) return *avoid;
  while (true) {
    const auto t = static_cast<TokenId>(Vocab::kNumSpecials + uniform_index(rng, regular));
    if (!avoid || t != *avoid) return t;
  }
}

/// k distinct positions out of n, ascending.
inline std::vector<std::size_t> pick_positions(Rng& rng, std::size_t n, std::size_t k) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + uniform_index(rng, n - i)]);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline std::size_t touched_count(double intensity, std::size_t len) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(intensity * double(len))));
}

inline std::vector<TokenId> corrupt_tokens(CorruptionKind kind, const std::vector<TokenId>& res,
                                           double intensity, Rng& rng, const Vocab& vocab) {
  const std::size_t l = res.size();
  std::vector<TokenId> out;
  switch (kind) {
    case CorruptionKind::kDelete: {
      // Clamp so at least one token survives.
      const std::size_t k = std::min(touched_count(intensity, l), l - 1);
      auto drop = pick_positions(rng, l, k);
      std::size_t d = 0;
      for (std::size_t i = 0; i < l; ++i) {
        if (d < drop.size() && drop[d] == i) {
          ++d;
          continue;
        }
        out.push_back(res[i]);
      }
      break;
    }
    case CorruptionKind::kCut: {
      const auto keep = static_cast<std::size_t>(std::ceil((1.0 - intensity) * double(l) - 1e-12));
      out.assign(res.begin(), res.begin() + std::clamp<std::size_t>(keep, 1, l));
      break;
    }
    case CorruptionKind::kSubstitute: {
      out = res;
      for (auto pos : pick_positions(rng, l, std::min(touched_count(intensity, l), l))) {
        out[pos] = random_regular_token(rng, vocab, res[pos]);
      }
      break;
    }
    case CorruptionKind::kNoisy: {
      out = res;
      const std::size_t k = touched_count(intensity, l);
      for (std::size_t i = 0; i < k; ++i) {
        const auto pos = uniform_index(rng, out.size() + 1);
        out.insert(out.begin() + static_cast<std::ptrdiff_t>(pos), random_regular_token(rng, vocab));
      }
      break;
    }
    default:
      throw ConfigError("corrupt_tokens: not a token-level kind");
  }
  return out;
}

/// Uniform derangement by rejection, then a repair pass so that, where
/// possible, no position receives a response equal to its own.
inline std::vector<std::size_t> content_derangement(const std::vector<const std::vector<TokenId>*>& responses,
                                                    Rng& rng) {
  const std::size_t m = responses.size();
  std::vector<std::size_t> perm(m);
  while (true) {
    std::iota(perm.begin(), perm.end(), 0);
    shuffle_in_place(perm, rng);
    bool fixed = false;
    for (std::size_t i = 0; i < m && !fixed; ++i) fixed = perm[i] == i;
    if (!fixed) break;
  }
  auto same = [&](std::size_t i, std::size_t src) { return *responses[i] == *responses[src]; };
  for (std::size_t i = 0; i < m; ++i) {
    if (!same(i, perm[i])) continue;
    const std::size_t start = uniform_index(rng, m);
    for (std::size_t off = 0; off < m; ++off) {
      const std::size_t j = (start + off) % m;
      if (j == i) continue;
      if (perm[j] != i && perm[i] != j && !same(i, perm[j]) && !same(j, perm[i])) {
        std::swap(perm[i], perm[j]);
        break;
      }
    }
  }
  return perm;
}

}  // namespace detail

/// Corrupts exactly round(ratio * n) samples chosen by seed. Corrupted
/// samples carry `corrupted:<kind>` and a source id; the rest become clean.
inline Dataset corrupt(const Dataset& ds, const CorruptionSpec& spec, const Vocab& vocab) {
  spec.validate();
  const std::size_t n = ds.size();
  const auto count = static_cast<std::size_t>(std::llround(spec.ratio * double(n)));
  Rng rng(derive_seed(spec.seed, "corrupt"));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  shuffle_in_place(order, rng);
  std::vector<std::size_t> chosen(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count));
  std::sort(chosen.begin(), chosen.end());

  std::vector<CorruptionKind> kind_of(count, spec.kind);
  if (spec.kind == CorruptionKind::kMixture) {
    constexpr CorruptionKind kinds[] = {CorruptionKind::kSwap, CorruptionKind::kDelete, CorruptionKind::kCut,
                                        CorruptionKind::kSubstitute, CorruptionKind::kNoisy};
    for (auto& k : kind_of) k = kinds[uniform_index(rng, 5)];
    // A lone swap has no partner; it is substituted instead.
    if (std::count(kind_of.begin(), kind_of.end(), CorruptionKind::kSwap) == 1) {
      *std::find(kind_of.begin(), kind_of.end(), CorruptionKind::kSwap) = CorruptionKind::kSubstitute;
    }
  }

  std::vector<std::size_t> swap_group;
  for (std::size_t c = 0; c < count; ++c) {
    if (kind_of[c] == CorruptionKind::kSwap) swap_group.push_back(c);
  }
  if (spec.kind == CorruptionKind::kSwap && swap_group.size() < 2) {
    throw ConfigError("swap corruption needs at least 2 corrupted samples, got " +
                      std::to_string(swap_group.size()));
  }

  std::vector<std::vector<TokenId>> new_response(count);
  std::vector<std::string> source(count);
  if (!swap_group.empty()) {
    std::vector<const std::vector<TokenId>*> responses;
    for (auto c : swap_group) responses.push_back(&ds[chosen[c]].response());
    const auto perm = detail::content_derangement(responses, rng);
    for (std::size_t i = 0; i < swap_group.size(); ++i) {
      const auto donor = chosen[swap_group[perm[i]]];
      new_response[swap_group[i]] = ds[donor].response();
      source[swap_group[i]] = ds[donor].id();
    }
  }
  for (std::size_t c = 0; c < count; ++c) {
    if (kind_of[c] == CorruptionKind::kSwap) continue;
    new_response[c] = detail::corrupt_tokens(kind_of[c], ds[chosen[c]].response(), spec.intensity, rng, vocab);
    source[c] = ds[chosen[c]].id();
  }

  std::vector<Sample> out;
  out.reserve(n);
  std::size_t c = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Sample& s = ds[i];
    if (c < count && chosen[c] == i) {
      Example ex{s.id(), s.instruction(), std::move(new_response[c])};
      out.emplace_back(std::move(ex), QualityLabel::corrupted(kind_of[c]), source[c], s.category(), s.extra());
      ++c;
    } else {
      out.push_back(s.with_label(QualityLabel::clean()));
    }
  }
  return Dataset(ds.name(), std::move(out));
}

}  // namespace feddqc
