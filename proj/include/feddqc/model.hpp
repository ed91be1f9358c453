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

// Tiny next-token language model with hand-written backprop.
//
// For target position j the context is the last `context_window` tokens
// before j. The feature vector is [mean embedding of the context ; embedding
// of token j-1], fed through one tanh layer and a softmax over the vocab:
//
//   x = [mean_{i in ctx} E[t_i] ; E[t_{j-1}]]
//   h = tanh(W1 x + b1)
//   p = softmax(W2 h + b2)
//
// Parameter layout in the flat vector: E (V x de), W1 (dh x 2de), b1 (dh),
// W2 (V x dh), b2 (V). Matrices are row-major.

#pragma once

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "feddqc/common.hpp"
#include "feddqc/corpus.hpp"
#include "feddqc/io.hpp"

namespace feddqc {

struct Architecture {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 0;
  std::size_t context_window = 0;
  std::size_t hidden_dim = 0;

  std::size_t feature_dim() const { return 2 * embed_dim; }

  std::size_t param_count() const {
    return vocab_size * embed_dim + hidden_dim * feature_dim() + hidden_dim +
           vocab_size * hidden_dim + vocab_size;
  }

  void validate() const {
    if (vocab_size < 1 || embed_dim < 1 || context_window < 1 || hidden_dim < 1) {
      throw ConfigError("architecture dims must all be >= 1");
    }
  }

  bool operator==(const Architecture&) const = default;
};

class ModelParams {
 public:
  ModelParams() = default;
  ModelParams(Architecture arch, std::vector<double> values) : arch_(arch), values_(std::move(values)) {
    if (values_.size() != arch_.param_count()) {
      throw ProtocolError("parameter vector has " + std::to_string(values_.size()) +
                          " entries, architecture needs " + std::to_string(arch_.param_count()));
    }
  }

  static ModelParams zeros(Architecture arch) {
    return ModelParams(arch, std::vector<double>(arch.param_count(), 0.0));
  }

  const Architecture& arch() const { return arch_; }
  std::size_t size() const { return values_.size(); }
  std::span<const double> values() const { return values_; }
  std::span<double> values() { return values_; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }

  // Block offsets.
  std::size_t off_embed() const { return 0; }
  std::size_t off_w1() const { return arch_.vocab_size * arch_.embed_dim; }
  std::size_t off_b1() const { return off_w1() + arch_.hidden_dim * arch_.feature_dim(); }
  std::size_t off_w2() const { return off_b1() + arch_.hidden_dim; }
  std::size_t off_b2() const { return off_w2() + arch_.vocab_size * arch_.hidden_dim; }

  /// Throws NumericFault naming the first non-finite entry.
  void check_finite() const {
    for (std::size_t i = 0; i < values_.size(); ++i) {
      if (!std::isfinite(values_[i])) {
        throw NumericFault("non-finite parameter at index " + std::to_string(i));
      }
    }
  }

  bool operator==(const ModelParams&) const = default;

 private:
  Architecture arch_;
  std::vector<double> values_;
};

/// Small uniform init, scaled by fan-in; output bias is zero.
inline ModelParams init_params(const Architecture& arch, std::uint64_t seed) {
  arch.validate();
  auto p = ModelParams::zeros(arch);
  Rng rng(derive_seed(seed, "init_params"));
  auto fill = [&](std::size_t off, std::size_t n, double scale) {
    for (std::size_t i = 0; i < n; ++i) p[off + i] = scale * (2.0 * uniform_unit(rng) - 1.0);
  };
  fill(p.off_embed(), arch.vocab_size * arch.embed_dim, 0.5);
  fill(p.off_w1(), arch.hidden_dim * arch.feature_dim(), 1.0 / std::sqrt(double(arch.feature_dim())));
  fill(p.off_w2(), arch.vocab_size * arch.hidden_dim, 1.0 / std::sqrt(double(arch.hidden_dim)));
  return p;
}

struct LossBreakdown {
  double total = 0.0;
  std::vector<double> per_token;
  std::size_t token_count = 0;

  double mean() const { return token_count ? total / double(token_count) : 0.0; }
};

enum class Reduction { kSum, kMean };

inline std::string to_string(Reduction r) { return r == Reduction::kSum ? "sum" : "mean"; }
inline Reduction parse_reduction(const std::string& s) {
  if (s == "sum") return Reduction::kSum;
  if (s == "mean") return Reduction::kMean;
  throw ConfigError("unknown reduction '" + s + "'");
}

inline double reduce(const LossBreakdown& l, Reduction r) {
  return r == Reduction::kSum ? l.total : l.mean();
}

namespace detail {

/// Scratch buffers for one forward/backward position.
struct Workspace {
  std::vector<double> x, h, logits, dz, dh, dx;
  explicit Workspace(const Architecture& a)
      : x(a.feature_dim()), h(a.hidden_dim), logits(a.vocab_size), dz(a.vocab_size),
        dh(a.hidden_dim), dx(a.feature_dim()) {}
};

inline std::size_t context_begin(std::size_t j, std::size_t window) {
  return j > window ? j - window : 0;
}

/// Fills ws.x, ws.h, ws.logits and returns log-sum-exp of the logits.
inline double forward_position(const ModelParams& p, std::span<const TokenId> tokens, std::size_t j,
                               Workspace& ws) {
  const auto& a = p.arch();
  const std::size_t de = a.embed_dim, dh = a.hidden_dim, V = a.vocab_size, df = a.feature_dim();
  const double* E = p.values().data() + p.off_embed();
  const double* W1 = p.values().data() + p.off_w1();
  const double* b1 = p.values().data() + p.off_b1();
  const double* W2 = p.values().data() + p.off_w2();
  const double* b2 = p.values().data() + p.off_b2();

  const std::size_t lo = context_begin(j, a.context_window);
  const double inv = 1.0 / double(j - lo);
  std::fill(ws.x.begin(), ws.x.end(), 0.0);
  for (std::size_t i = lo; i < j; ++i) {
    const double* e = E + std::size_t(tokens[i]) * de;
    for (std::size_t k = 0; k < de; ++k) ws.x[k] += e[k];
  }
  for (std::size_t k = 0; k < de; ++k) ws.x[k] *= inv;
  const double* last = E + std::size_t(tokens[j - 1]) * de;
  for (std::size_t k = 0; k < de; ++k) ws.x[de + k] = last[k];

  for (std::size_t r = 0; r < dh; ++r) {
    const double* row = W1 + r * df;
    double s = b1[r];
    for (std::size_t c = 0; c < df; ++c) s += row[c] * ws.x[c];
    ws.h[r] = std::tanh(s);
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t v = 0; v < V; ++v) {
    const double* row = W2 + v * dh;
    double s = b2[v];
    for (std::size_t c = 0; c < dh; ++c) s += row[c] * ws.h[c];
    ws.logits[v] = s;
    mx = std::max(mx, s);
  }
  double z = 0.0;
  for (std::size_t v = 0; v < V; ++v) z += std::exp(ws.logits[v] - mx);
  return mx + std::log(z);
}

/// Negative log-likelihood of tokens[span_begin, span_end) given prefixes.
inline LossBreakdown sequence_loss(const ModelParams& p, const Encoded& enc, Workspace& ws) {
  LossBreakdown out;
  out.per_token.reserve(enc.span_length());
  for (std::size_t j = enc.span_begin; j < enc.span_end; ++j) {
    const double lse = forward_position(p, enc.tokens, j, ws);
    const double nll = lse - ws.logits[enc.tokens[j]];
    if (!std::isfinite(nll)) throw NumericFault("non-finite loss at position " + std::to_string(j));
    out.per_token.push_back(std::max(0.0, nll));
    out.total += out.per_token.back();
  }
  out.token_count = out.per_token.size();
  return out;
}

/// Adds scale * d(total NLL)/d(theta) into `grad`; returns the total NLL.
inline double sequence_loss_grad(const ModelParams& p, const Encoded& enc, double scale,
                                 std::span<double> grad, Workspace& ws) {
  const auto& a = p.arch();
  const std::size_t de = a.embed_dim, dh = a.hidden_dim, V = a.vocab_size, df = a.feature_dim();
  const double* W1 = p.values().data() + p.off_w1();
  const double* W2 = p.values().data() + p.off_w2();
  double* gE = grad.data() + p.off_embed();
  double* gW1 = grad.data() + p.off_w1();
  double* gb1 = grad.data() + p.off_b1();
  double* gW2 = grad.data() + p.off_w2();
  double* gb2 = grad.data() + p.off_b2();

  double total = 0.0;
  for (std::size_t j = enc.span_begin; j < enc.span_end; ++j) {
    const double lse = forward_position(p, enc.tokens, j, ws);
    const TokenId target = enc.tokens[j];
    const double nll = lse - ws.logits[target];
    if (!std::isfinite(nll)) throw NumericFault("non-finite loss at position " + std::to_string(j));
    total += std::max(0.0, nll);

    for (std::size_t v = 0; v < V; ++v) ws.dz[v] = scale * std::exp(ws.logits[v] - lse);
    ws.dz[target] -= scale;

    std::fill(ws.dh.begin(), ws.dh.end(), 0.0);
    for (std::size_t v = 0; v < V; ++v) {
      const double g = ws.dz[v];
      gb2[v] += g;
      double* grow = gW2 + v * dh;
      const double* row = W2 + v * dh;
      for (std::size_t c = 0; c < dh; ++c) {
        grow[c] += g * ws.h[c];
        ws.dh[c] += g * row[c];
      }
    }
    std::fill(ws.dx.begin(), ws.dx.end(), 0.0);
    for (std::size_t r = 0; r < dh; ++r) {
      const double da = ws.dh[r] * (1.0 - ws.h[r] * ws.h[r]);
      gb1[r] += da;
      double* grow = gW1 + r * df;
      const double* row = W1 + r * df;
      for (std::size_t c = 0; c < df; ++c) {
        grow[c] += da * ws.x[c];
        ws.dx[c] += da * row[c];
      }
    }
    const std::size_t lo = context_begin(j, a.context_window);
    const double inv = 1.0 / double(j - lo);
    for (std::size_t i = lo; i < j; ++i) {
      double* ge = gE + std::size_t(enc.tokens[i]) * de;
      for (std::size_t k = 0; k < de; ++k) ge[k] += ws.dx[k] * inv;
    }
    double* glast = gE + std::size_t(enc.tokens[j - 1]) * de;
    for (std::size_t k = 0; k < de; ++k) glast[k] += ws.dx[de + k];
  }
  return total;
}

inline void check_tokens(const ModelParams& p, const Encoded& enc) {
  for (auto t : enc.tokens) {
    if (t >= p.arch().vocab_size) {
      throw ConfigError("token id " + std::to_string(t) + " outside model vocab of size " +
                        std::to_string(p.arch().vocab_size));
    }
  }
}

inline LossBreakdown conditional_loss_unchecked(const ModelParams& theta, const Example& ex,
                                                const PromptTemplate& tmpl, Workspace& ws) {
  const auto enc = tmpl.encode(ex);
  check_tokens(theta, enc);
  return sequence_loss(theta, enc, ws);
}

inline LossBreakdown unconditional_loss_unchecked(const ModelParams& theta, const Example& ex,
                                                  const PromptTemplate& tmpl, Workspace& ws) {
  const auto enc = tmpl.encode_response_only(ex);
  check_tokens(theta, enc);
  return sequence_loss(theta, enc, ws);
}

}  // namespace detail

/// Loss of the response span given the full prompt.
inline LossBreakdown conditional_loss(const ModelParams& theta, const Example& ex,
                                      const PromptTemplate& tmpl) {
  theta.check_finite();
  const auto enc = tmpl.encode(ex);
  detail::check_tokens(theta, enc);
  detail::Workspace ws(theta.arch());
  return detail::sequence_loss(theta, enc, ws);
}

/// Loss of the response span given only BOS.
inline LossBreakdown unconditional_loss(const ModelParams& theta, const Example& ex,
                                        const PromptTemplate& tmpl) {
  theta.check_finite();
  const auto enc = tmpl.encode_response_only(ex);
  detail::check_tokens(theta, enc);
  detail::Workspace ws(theta.arch());
  return detail::sequence_loss(theta, enc, ws);
}

/// Loss of an arbitrary pre-encoded sequence.
inline LossBreakdown encoded_loss(const ModelParams& theta, const Encoded& enc) {
  detail::check_tokens(theta, enc);
  detail::Workspace ws(theta.arch());
  return detail::sequence_loss(theta, enc, ws);
}

/// Next-token distribution after `context` (probabilities, sum to 1).
inline std::vector<double> next_token_probs(const ModelParams& theta, std::span<const TokenId> context) {
  require(!context.empty(), "next_token_probs: empty context");
  detail::Workspace ws(theta.arch());
  std::vector<TokenId> tokens(context.begin(), context.end());
  tokens.push_back(Vocab::kPad);
  const double lse = detail::forward_position(theta, tokens, context.size(), ws);
  std::vector<double> p(ws.logits.size());
  for (std::size_t v = 0; v < p.size(); ++v) p[v] = std::exp(ws.logits[v] - lse);
  return p;
}

struct GradResult {
  std::vector<double> gradient;
  double mean_loss = 0.0;
};

/// Gradient of the mean (over the batch) of per-sample conditional totals.
inline GradResult grad(const ModelParams& theta, std::span<const Example> batch,
                       const PromptTemplate& tmpl) {
  require(!batch.empty(), "grad: batch must be nonempty");
  GradResult r;
  r.gradient.assign(theta.size(), 0.0);
  detail::Workspace ws(theta.arch());
  const double scale = 1.0 / double(batch.size());
  double total = 0.0;
  for (const auto& ex : batch) {
    const auto enc = tmpl.encode(ex);
    detail::check_tokens(theta, enc);
    total += detail::sequence_loss_grad(theta, enc, scale, r.gradient, ws);
  }
  r.mean_loss = total * scale;
  for (std::size_t i = 0; i < r.gradient.size(); ++i) {
    if (!std::isfinite(r.gradient[i])) {
      throw NumericFault("non-finite gradient at index " + std::to_string(i));
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Local optimisation

enum class OptimizerKind { kSgd, kAdamW };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdamW;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct LocalUpdateConfig {
  std::size_t steps = 10;
  std::size_t batch_size = 16;
  OptimizerConfig optimizer;
};

struct LocalResult {
  ModelParams params;
  double mean_loss = 0.0;  // mean of the per-step batch losses
};

/// Runs `steps` optimiser steps over pre-encoded sequences (loss on each
/// sequence's span). Batches follow a seeded shuffle of `encoded` in the
/// given order. The optimiser state starts fresh on every call.
inline LocalResult train_sequences(const ModelParams& theta, std::span<const Encoded> encoded,
                                   const LocalUpdateConfig& cfg, double lr, std::uint64_t seed) {
  require(cfg.steps >= 1, "local_update: steps must be >= 1");
  require(!encoded.empty(), "local_update: data must be nonempty");
  require(cfg.batch_size >= 1, "local_update: batch_size must be >= 1");
  theta.check_finite();
  for (const auto& e : encoded) detail::check_tokens(theta, e);

  Rng rng(derive_seed(seed, "local_update"));
  std::vector<std::size_t> perm(encoded.size());
  std::iota(perm.begin(), perm.end(), 0);
  shuffle_in_place(perm, rng);
  std::size_t cursor = 0;

  LocalResult out{theta, 0.0};
  auto& w = out.params;
  const std::size_t n = w.size();
  const std::size_t bs = std::min(cfg.batch_size, encoded.size());
  std::vector<double> g(n), m, v;
  const bool adam = cfg.optimizer.kind == OptimizerKind::kAdamW;
  if (adam) {
    m.assign(n, 0.0);
    v.assign(n, 0.0);
  }
  detail::Workspace ws(w.arch());
  double loss_sum = 0.0;

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    std::fill(g.begin(), g.end(), 0.0);
    double batch_loss = 0.0;
    const double scale = 1.0 / double(bs);
    for (std::size_t b = 0; b < bs; ++b) {
      if (cursor == perm.size()) {
        shuffle_in_place(perm, rng);
        cursor = 0;
      }
      batch_loss += detail::sequence_loss_grad(w, encoded[perm[cursor++]], scale, g, ws);
    }
    loss_sum += batch_loss * scale;

    if (adam) {
      const auto& oc = cfg.optimizer;
      const double c1 = 1.0 - std::pow(oc.beta1, double(step));
      const double c2 = 1.0 - std::pow(oc.beta2, double(step));
      for (std::size_t i = 0; i < n; ++i) {
        m[i] = oc.beta1 * m[i] + (1.0 - oc.beta1) * g[i];
        v[i] = oc.beta2 * v[i] + (1.0 - oc.beta2) * g[i] * g[i];
        const double upd = (m[i] / c1) / (std::sqrt(v[i] / c2) + oc.eps) + oc.weight_decay * w[i];
        w[i] -= lr * upd;
      }
    } else {
      for (std::size_t i = 0; i < n; ++i) w[i] -= lr * g[i];
    }
  }
  w.check_finite();
  out.mean_loss = loss_sum / double(cfg.steps);
  return out;
}

/// Runs `steps` optimiser steps from `theta` over `data`.
///
/// Mini-batches are drawn from a seeded shuffle of `data` sorted by id, so
/// the result depends on the set of examples and not on their order.
inline LocalResult local_update(const ModelParams& theta, std::span<const Example> data,
                                const LocalUpdateConfig& cfg, double lr, std::uint64_t seed,
                                const PromptTemplate& tmpl) {
  require(!data.empty(), "local_update: data must be nonempty");
  std::vector<const Example*> order(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) order[i] = &data[i];
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->id < b->id; });
  std::vector<Encoded> encoded(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) encoded[i] = tmpl.encode(*order[i]);
  return train_sequences(theta, encoded, cfg, lr, seed);
}

// ---------------------------------------------------------------------------
// Snapshots: "FDQCPARM", u32 version, u32 reserved, u64 V, de, w, dh, count,
// then `count` little-endian IEEE-754 doubles.

namespace detail {

inline void put_u64(std::string& out, std::uint64_t x) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xFF));
}
inline void put_u32(std::string& out, std::uint32_t x) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xFF));
}
inline std::uint64_t get_le(std::string_view in, std::size_t pos, int bytes) {
  std::uint64_t x = 0;
  for (int i = 0; i < bytes; ++i) x |= std::uint64_t(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return x;
}

}  // namespace detail

inline constexpr std::string_view kSnapshotMagic = "FDQCPARM";
inline constexpr std::uint32_t kSnapshotVersion = 1;
inline constexpr std::size_t kSnapshotHeaderBytes = 8 + 4 + 4 + 5 * 8;

inline std::string serialize_params(const ModelParams& p) {
  std::string out(kSnapshotMagic);
  detail::put_u32(out, kSnapshotVersion);
  detail::put_u32(out, 0);
  const auto& a = p.arch();
  for (auto x : {a.vocab_size, a.embed_dim, a.context_window, a.hidden_dim, p.size()}) {
    detail::put_u64(out, x);
  }
  for (double d : p.values()) detail::put_u64(out, std::bit_cast<std::uint64_t>(d));
  return out;
}

inline ModelParams deserialize_params(std::string_view in) {
  if (in.size() < kSnapshotHeaderBytes || in.substr(0, 8) != kSnapshotMagic) {
    throw ConfigError("not a parameter snapshot");
  }
  if (detail::get_le(in, 8, 4) != kSnapshotVersion) throw ConfigError("unsupported snapshot version");
  Architecture a;
  a.vocab_size = detail::get_le(in, 16, 8);
  a.embed_dim = detail::get_le(in, 24, 8);
  a.context_window = detail::get_le(in, 32, 8);
  a.hidden_dim = detail::get_le(in, 40, 8);
  const std::size_t count = detail::get_le(in, 48, 8);
  a.validate();
  if (count != a.param_count() || in.size() != kSnapshotHeaderBytes + 8 * count) {
    throw ConfigError("snapshot size does not match its header");
  }
  std::vector<double> values(count);
  for (std::size_t i = 0; i < count; ++i) {
    values[i] = std::bit_cast<double>(detail::get_le(in, kSnapshotHeaderBytes + 8 * i, 8));
  }
  return ModelParams(a, std::move(values));
}

inline void save_params(const ModelParams& p, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_params(p));
}

inline ModelParams load_params(const std::filesystem::path& path) {
  return deserialize_params(read_file(path));
}

}  // namespace feddqc
