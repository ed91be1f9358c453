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

// Helpers shared by the unit and acceptance tests, including independent
// oracles that do not call into the library's forward pass.

#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "feddqc/experiment.hpp"

namespace feddqc::test {

/// Template with no literal words, so an empty instruction leaves no trace.
inline constexpr std::string_view kBareTemplate = "{instruction} {response}";

inline Architecture arch(std::size_t V, std::size_t de, std::size_t w, std::size_t dh) {
  return Architecture{V, de, w, dh};
}

/// Parameters with O(scale) entries everywhere, biases included.
inline ModelParams random_params(const Architecture& a, std::uint64_t seed, double scale = 0.8) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  auto p = ModelParams::zeros(a);
  for (auto& x : p.values()) x = u(gen);
  return p;
}

/// Specials plus the given regular symbols.
inline Vocab small_vocab(std::initializer_list<std::string> regular) { return Vocab::from_regular(regular); }

/// Brute-force negative log-likelihood of tokens[begin, end), straight from
/// the model definition: explicit loops, naive softmax, no shared code.
inline std::vector<double> brute_force_nll(const ModelParams& p, const std::vector<TokenId>& tokens,
                                           std::size_t begin, std::size_t end) {
  const auto& a = p.arch();
  const std::size_t V = a.vocab_size, de = a.embed_dim, dh = a.hidden_dim, w = a.context_window;
  const std::size_t nE = V * de, nW1 = dh * 2 * de, nb1 = dh, nW2 = V * dh;
  auto E = [&](std::size_t tok, std::size_t k) { return p[tok * de + k]; };
  auto W1 = [&](std::size_t r, std::size_t c) { return p[nE + r * 2 * de + c]; };
  auto b1 = [&](std::size_t r) { return p[nE + nW1 + r]; };
  auto W2 = [&](std::size_t v, std::size_t c) { return p[nE + nW1 + nb1 + v * dh + c]; };
  auto b2 = [&](std::size_t v) { return p[nE + nW1 + nb1 + nW2 + v]; };

  std::vector<double> out;
  for (std::size_t j = begin; j < end; ++j) {
    const std::size_t lo = j >= w ? j - w : 0;
    std::vector<double> x(2 * de, 0.0);
    for (std::size_t k = 0; k < de; ++k) {
      double s = 0.0;
      for (std::size_t i = lo; i < j; ++i) s += E(tokens[i], k);
      x[k] = s / double(j - lo);
      x[de + k] = E(tokens[j - 1], k);
    }
    std::vector<double> h(dh);
    for (std::size_t r = 0; r < dh; ++r) {
      double s = b1(r);
      for (std::size_t c = 0; c < 2 * de; ++c) s += W1(r, c) * x[c];
      h[r] = std::tanh(s);
    }
    std::vector<double> expz(V);
    double z = 0.0;
    for (std::size_t v = 0; v < V; ++v) {
      double s = b2(v);
      for (std::size_t c = 0; c < dh; ++c) s += W2(v, c) * h[c];
      expz[v] = std::exp(s);
      z += expz[v];
    }
    out.push_back(-std::log(expz[tokens[j]] / z));
  }
  return out;
}

/// Scratch directory removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("feddqc-" + tag + "-" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

inline ExperimentConfig config_from(const std::string& text) { return parse_experiment_config(json::parse(text)); }

inline std::vector<std::string> ids_of(const Dataset& ds) {
  std::vector<std::string> out;
  for (const auto& s : ds) out.push_back(s.id());
  return out;
}

/// Splits on `sep`, dropping a trailing empty field.
inline std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (ch == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace feddqc::test
