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


#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "support.hpp"

namespace feddqc {
namespace {

using test::arch;
using test::kBareTemplate;

TEST(InitParams, DeterministicAndSeedSensitive) {
  const auto a = arch(16, 4, 8, 8);
  EXPECT_EQ(init_params(a, 3), init_params(a, 3));
  EXPECT_NE(init_params(a, 3), init_params(a, 4));
}

TEST(InitParams, ParameterCountMatchesClosedForm) {
  const auto a = arch(16, 4, 8, 8);
  // E: 16*4, W1: 8*(2*4), b1: 8, W2: 16*8, b2: 16
  EXPECT_EQ(init_params(a, 1).size(), 64u + 64u + 8u + 128u + 16u);
}

TEST(InitParams, OutputBiasIsZero) {
  const auto p = init_params(arch(16, 4, 8, 8), 9);
  for (std::size_t v = 0; v < 16; ++v) EXPECT_EQ(p[p.off_b2() + v], 0.0);
}

TEST(Loss, UniformModelCostsLogVPerToken) {
  const auto v = test::small_vocab({"A", "B", "C", "D", "E", "F", "G", "H", "I", "J", "K", "L"});
  ASSERT_EQ(v.size(), 16u);
  const PromptTemplate tmpl(v);
  const auto p = ModelParams::zeros(arch(16, 4, 8, 8));
  const Example ex{"s", {v.id("A"), v.id("B")}, {v.id("C")}};
  EXPECT_NEAR(conditional_loss(p, ex, tmpl).total, 2.0 * std::log(16.0), 1e-12);
  EXPECT_EQ(unconditional_loss(p, ex, tmpl).total, conditional_loss(p, ex, tmpl).total);
}

TEST(Loss, PerTokenProbabilitiesAreInUnitInterval) {
  const auto v = task_vocab();
  const PromptTemplate tmpl(v);
  const auto p = test::random_params(arch(v.size(), 8, 6, 16), 5, 2.0);
  for (const auto& s : generate_task_corpus(TaskKind::kReverse, 40, v, 1)) {
    const auto l = conditional_loss(p, s.example(), tmpl);
    EXPECT_EQ(l.token_count, l.per_token.size());
    EXPECT_NEAR(l.total, std::accumulate(l.per_token.begin(), l.per_token.end(), 0.0), 1e-9);
    for (double x : l.per_token) {
      EXPECT_GT(std::exp(-x), 0.0);
      EXPECT_LE(std::exp(-x), 1.0);
    }
  }
}

TEST(Loss, SoftmaxRowsSumToOne) {
  const auto p = test::random_params(arch(10, 3, 4, 5), 2, 1.5);
  const std::vector<TokenId> ctx{1, 5, 7, 2};
  const auto probs = next_token_probs(p, ctx);
  EXPECT_NEAR(std::accumulate(probs.begin(), probs.end(), 0.0), 1.0, 1e-9);
}

TEST(Loss, MatchesBruteForceOracleOnTinyVocab) {
  // V=4: the vocabulary is just the specials; token ids are used as symbols.
  const auto v = Vocab::from_regular({});
  ASSERT_EQ(v.size(), 4u);
  const PromptTemplate tmpl(kBareTemplate, v);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto p = test::random_params(arch(4, 3, 2, 5), seed, 1.5);
    const Example ex{"s", {}, {TokenId(seed % 4)}};
    const auto enc = tmpl.encode(ex);
    ASSERT_EQ(enc.tokens.size(), 3u);
    const auto oracle = test::brute_force_nll(p, enc.tokens, enc.span_begin, enc.span_end);
    const auto c = conditional_loss(p, ex, tmpl);
    const auto u = unconditional_loss(p, ex, tmpl);
    ASSERT_EQ(c.per_token.size(), oracle.size());
    for (std::size_t j = 0; j < oracle.size(); ++j) {
      EXPECT_NEAR(c.per_token[j], oracle[j], 1e-9);
      EXPECT_NEAR(u.per_token[j], oracle[j], 1e-9);
    }
    // A length-3 conditional sequence with a real instruction token.
    const Example ex2{"t", {TokenId((seed + 1) % 4)}, {TokenId(seed % 4)}};
    const auto e2 = tmpl.encode(ex2);
    const auto o2 = test::brute_force_nll(p, e2.tokens, e2.span_begin, e2.span_end);
    const auto c2 = conditional_loss(p, ex2, tmpl);
    for (std::size_t j = 0; j < o2.size(); ++j) EXPECT_NEAR(c2.per_token[j], o2[j], 1e-9);
  }
}

TEST(Loss, WindowTruncationMatchesOracle) {
  const auto v = task_vocab();
  const PromptTemplate tmpl(v);
  const auto p = test::random_params(arch(v.size(), 4, 3, 6), 8, 1.0);
  const auto s = generate_task_corpus(TaskKind::kReverse, 1, v, 4)[0];
  const auto enc = tmpl.encode(s.example());
  const auto oracle = test::brute_force_nll(p, enc.tokens, enc.span_begin, enc.span_end);
  const auto c = conditional_loss(p, s.example(), tmpl);
  for (std::size_t j = 0; j < oracle.size(); ++j) EXPECT_NEAR(c.per_token[j], oracle[j], 1e-9);
}

TEST(Loss, EmptyInstructionMakesBothLossesEqual) {
  const auto v = task_vocab();
  const PromptTemplate tmpl(kBareTemplate, v);
  const auto p = test::random_params(arch(v.size(), 6, 6, 8), 1);
  const Example ex{"s", {}, v.tokenize("v3 v9")};
  EXPECT_EQ(conditional_loss(p, ex, tmpl).total, unconditional_loss(p, ex, tmpl).total);
}

TEST(Loss, NonFiniteParameterIsANumericFault) {
  const auto v = task_vocab();
  const PromptTemplate tmpl(v);
  auto p = init_params(arch(v.size(), 4, 4, 4), 1);
  p[17] = std::nan("");
  const Example ex{"s", v.tokenize("GET k1"), v.tokenize("v1 v2")};
  try {
    conditional_loss(p, ex, tmpl);
    FAIL();
  } catch (const NumericFault& e) {
    EXPECT_NE(std::string(e.what()).find("17"), std::string::npos);
  }
}

std::vector<Example> some_examples(const Vocab& v, std::size_t n, std::uint64_t seed) {
  return generate_task_corpus(TaskKind::kReverse, n, v, seed).examples();
}

void expect_gradient_matches_finite_differences(const Architecture& a, std::uint64_t seed) {
  const auto v = task_vocab();
  Architecture full = a;
  full.vocab_size = v.size();
  const PromptTemplate tmpl(v);
  auto p = test::random_params(full, seed, 0.6);
  const auto batch = some_examples(v, 4, seed);
  const auto g = grad(p, batch, tmpl).gradient;
  auto loss_at = [&](const ModelParams& q) {
    double s = 0.0;
    for (const auto& ex : batch) s += conditional_loss(q, ex, tmpl).total;
    return s / double(batch.size());
  };
  std::mt19937_64 gen(seed);
  const double h = 1e-5;
  for (int k = 0; k < 20; ++k) {
    // Half of the probes land on embeddings of tokens actually used.
    std::size_t i = std::uniform_int_distribution<std::size_t>(0, p.size() - 1)(gen);
    if (k % 2 == 0) {
      const auto tok = tmpl.encode(batch[k % batch.size()]).tokens[1];
      i = tok * full.embed_dim + k % full.embed_dim;
    }
    auto plus = p, minus = p;
    plus[i] += h;
    minus[i] -= h;
    const double fd = (loss_at(plus) - loss_at(minus)) / (2 * h);
    EXPECT_LT(std::abs(g[i] - fd) / std::max(1.0, std::abs(g[i])), 1e-4) << "coordinate " << i;
  }
}

TEST(Grad, FiniteDifferencesSmall) { expect_gradient_matches_finite_differences(arch(0, 3, 2, 4), 1); }
TEST(Grad, FiniteDifferencesMedium) { expect_gradient_matches_finite_differences(arch(0, 8, 6, 16), 2); }
TEST(Grad, FiniteDifferencesWide) { expect_gradient_matches_finite_differences(arch(0, 16, 12, 32), 3); }

TEST(Grad, EmptyBatchIsAPreconditionError) {
  const auto v = task_vocab();
  const auto p = init_params(arch(v.size(), 4, 4, 4), 1);
  EXPECT_THROW(grad(p, std::span<const Example>{}, PromptTemplate(v)), PreconditionError);
}

TEST(Grad, DuplicatingTheBatchLeavesTheMeanGradient) {
  const auto v = task_vocab();
  const PromptTemplate tmpl(v);
  const auto p = test::random_params(arch(v.size(), 4, 4, 8), 3);
  auto batch = some_examples(v, 5, 3);
  const auto g1 = grad(p, batch, tmpl).gradient;
  auto doubled = batch;
  doubled.insert(doubled.end(), batch.begin(), batch.end());
  const auto g2 = grad(p, doubled, tmpl).gradient;
  for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_NEAR(g1[i], g2[i], 1e-12);
}

TEST(Grad, PermutingTheBatchLeavesTheGradient) {
  const auto v = task_vocab();
  const PromptTemplate tmpl(v);
  const auto p = test::random_params(arch(v.size(), 4, 4, 8), 4);
  auto batch = some_examples(v, 6, 4);
  const auto g1 = grad(p, batch, tmpl);
  std::reverse(batch.begin(), batch.end());
  const auto g2 = grad(p, batch, tmpl);
  EXPECT_NEAR(g1.mean_loss, g2.mean_loss, 1e-12);
  for (std::size_t i = 0; i < g1.gradient.size(); ++i) EXPECT_NEAR(g1.gradient[i], g2.gradient[i], 1e-12);
}

TEST(LocalUpdate, ZeroLearningRateIsIdentity) {
  const auto v = task_vocab();
  const PromptTemplate tmpl(v);
  const auto p = init_params(arch(v.size(), 4, 4, 8), 1);
  const auto data = some_examples(v, 8, 1);
  LocalUpdateConfig cfg;
  cfg.steps = 3;
  EXPECT_EQ(local_update(p, data, cfg, 0.0, 7, tmpl).params, p);
  cfg.optimizer.kind = OptimizerKind::kSgd;
  EXPECT_EQ(local_update(p, data, cfg, 0.0, 7, tmpl).params, p);
}

TEST(LocalUpdate, OneSgdStepIsAGradientStep) {
  const auto v = task_vocab();
  const PromptTemplate tmpl(v);
  const auto p = init_params(arch(v.size(), 4, 4, 8), 2);
  const auto data = some_examples(v, 6, 2);
  LocalUpdateConfig cfg;
  cfg.steps = 1;
  cfg.batch_size = data.size();
  cfg.optimizer.kind = OptimizerKind::kSgd;
  const double lr = 0.3;
  const auto out = local_update(p, data, cfg, lr, 5, tmpl).params;
  const auto g = grad(p, data, tmpl).gradient;
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(out[i], p[i] - lr * g[i], 1e-12);
}

TEST(LocalUpdate, InputIsNotMutatedAndReplayIsExact) {
  const auto v = task_vocab();
  const PromptTemplate tmpl(v);
  const auto p = init_params(arch(v.size(), 4, 4, 8), 3);
  const auto copy = p;
  const auto data = some_examples(v, 10, 3);
  LocalUpdateConfig cfg;
  const auto a = local_update(p, data, cfg, 1e-2, 9, tmpl);
  const auto b = local_update(p, data, cfg, 1e-2, 9, tmpl);
  EXPECT_EQ(p, copy);
  EXPECT_EQ(a.params, b.params);
  auto shuffled = data;
  std::reverse(shuffled.begin(), shuffled.end());
  EXPECT_EQ(local_update(p, shuffled, cfg, 1e-2, 9, tmpl).params, a.params);
}

TEST(LocalUpdate, TrainingReducesLossOnModularAdd) {
  const auto v = task_vocab();
  const PromptTemplate tmpl(v);
  const auto data = generate_task_corpus(TaskKind::kModularAdd, 20, v, 4).examples();
  auto p = init_params(arch(v.size(), 16, 6, 64), 4);
  auto mean_loss = [&](const ModelParams& q) {
    double s = 0.0;
    for (const auto& ex : data) s += conditional_loss(q, ex, tmpl).total;
    return s / double(data.size());
  };
  LocalUpdateConfig cfg;
  cfg.steps = 10;
  cfg.batch_size = 8;
  std::vector<double> trace{mean_loss(p)};
  for (int w = 0; w < 5; ++w) {
    p = local_update(p, data, cfg, 1e-2, 100 + w, tmpl).params;
    trace.push_back(mean_loss(p));
  }
  for (std::size_t i = 1; i < trace.size(); ++i) EXPECT_LT(trace[i], trace[i - 1]) << "window " << i;
}

TEST(LocalUpdate, RejectsZeroStepsAndEmptyData) {
  const auto v = task_vocab();
  const PromptTemplate tmpl(v);
  const auto p = init_params(arch(v.size(), 4, 4, 4), 1);
  LocalUpdateConfig cfg;
  cfg.steps = 0;
  EXPECT_THROW(local_update(p, some_examples(v, 2, 1), cfg, 0.1, 1, tmpl), PreconditionError);
  cfg.steps = 1;
  EXPECT_THROW(local_update(p, std::span<const Example>{}, cfg, 0.1, 1, tmpl), PreconditionError);
}

TEST(Snapshot, RoundTripAndLayout) {
  const auto p = test::random_params(arch(9, 3, 4, 5), 2);
  const auto bytes = serialize_params(p);
  EXPECT_EQ(bytes.size(), kSnapshotHeaderBytes + 8 * p.size());
  EXPECT_EQ(bytes.substr(0, 8), "FDQCPARM");
  EXPECT_EQ(deserialize_params(bytes), p);
  EXPECT_THROW(deserialize_params(bytes.substr(0, bytes.size() - 1)), ConfigError);
  EXPECT_THROW(deserialize_params("garbage"), ConfigError);
}

TEST(Params, LengthMismatchIsAProtocolError) {
  EXPECT_THROW(ModelParams(arch(4, 2, 2, 2), std::vector<double>(3)), ProtocolError);
}

}  // namespace
}  // namespace feddqc
