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

#include <map>
#include <set>

#include "support.hpp"

namespace feddqc {
namespace {

using test::kBareTemplate;

std::vector<TokenId> toks(const Vocab& v, const std::string& s) { return v.tokenize(s); }

TEST(Vocab, SpecialsComeFirstInFixedOrder) {
  const auto v = task_vocab();
  EXPECT_EQ(v.symbol(Vocab::kPad), "PAD");
  EXPECT_EQ(v.symbol(Vocab::kBos), "BOS");
  EXPECT_EQ(v.symbol(Vocab::kSep), "SEP");
  EXPECT_EQ(v.symbol(Vocab::kEos), "EOS");
  EXPECT_LE(v.size(), 512u);
  EXPECT_EQ(task_vocab(), v);  // indices stable across calls
}

TEST(Vocab, RejectsDuplicatesAndBadSymbols) {
  EXPECT_THROW(Vocab::from_regular({"A", "A"}), ConfigError);
  EXPECT_THROW(Vocab::from_regular({"SEP"}), ConfigError);
  EXPECT_THROW(Vocab::from_regular({"A B"}), ConfigError);
  EXPECT_THROW(Vocab::from_all({"BOS", "PAD", "SEP", "EOS"}), ConfigError);
}

TEST(Vocab, FileRoundTrip) {
  test::TempDir dir("vocab");
  const auto v = task_vocab();
  save_vocab(v, dir.path / "vocab.txt");
  EXPECT_EQ(load_vocab(dir.path / "vocab.txt"), v);
}

TEST(Vocab, TokenizeIsInjectiveOnTaskAlphabets) {
  const auto v = task_vocab();
  for (auto t : {TaskKind::kKvLookup, TaskKind::kModularAdd, TaskKind::kReverse, TaskKind::kCopy}) {
    std::string all;
    for (const auto& s : tasks::alphabet(t)) all += s + " ";
    const auto ids = v.tokenize(all);
    EXPECT_EQ(v.tokenize(v.detokenize(ids)), ids);
    EXPECT_EQ(std::set<TokenId>(ids.begin(), ids.end()).size(), ids.size());
  }
  EXPECT_THROW(v.tokenize("NOT_A_SYMBOL"), ConfigError);
}

TEST(Tasks, ModularAddReference) {
  const auto v = task_vocab();
  EXPECT_EQ(reference_response(TaskKind::kModularAdd, v, toks(v, "ADD 3 4 MOD 10")), toks(v, "7"));
  EXPECT_EQ(reference_response(TaskKind::kModularAdd, v, toks(v, "ADD 7 8 MOD 10")), toks(v, "5"));
}

TEST(Tasks, CopyIsIdentityAndReverseReverses) {
  const auto v = task_vocab();
  EXPECT_EQ(reference_response(TaskKind::kCopy, v, toks(v, "X Y Z")), toks(v, "X Y Z"));
  EXPECT_EQ(reference_response(TaskKind::kReverse, v, toks(v, "REV X Y Z")), toks(v, "Z Y X"));
}

TEST(Tasks, GeneratedResponsesFollowTheTaskDefinition) {
  const auto v = task_vocab();
  for (auto t : {TaskKind::kKvLookup, TaskKind::kModularAdd, TaskKind::kReverse, TaskKind::kCopy}) {
    const auto ds = generate_task_corpus(t, 300, v, 11);
    ASSERT_EQ(ds.size(), 300u);
    for (const auto& s : ds) {
      ASSERT_TRUE(s.label() && s.label()->is_clean());
      ASSERT_GE(s.response().size(), 1u);
      EXPECT_EQ(reference_response(t, v, s.instruction()), s.response()) << s.id();
    }
  }
}

TEST(Tasks, InstructionToResponseIsAFunction) {
  const auto v = task_vocab();
  for (auto t : {TaskKind::kKvLookup, TaskKind::kModularAdd, TaskKind::kReverse}) {
    std::map<std::vector<TokenId>, std::vector<TokenId>> seen;
    for (const auto& s : generate_task_corpus(t, 2000, v, 5)) {
      auto [it, fresh] = seen.emplace(s.instruction(), s.response());
      if (!fresh) {
        EXPECT_EQ(it->second, s.response());
      }
    }
  }
}

TEST(Tasks, GenerationIsDeterministic) {
  const auto v = task_vocab();
  const auto a = generate_task_corpus(TaskKind::kKvLookup, 1000, v, 7);
  const auto b = generate_task_corpus(TaskKind::kKvLookup, 1000, v, 7);
  EXPECT_EQ(serialize_dataset(a, v), serialize_dataset(b, v));
  const auto c = generate_task_corpus(TaskKind::kKvLookup, 1000, v, 8);
  EXPECT_NE(serialize_dataset(a, v), serialize_dataset(c, v));
}

TEST(Tasks, VocabTooSmallIsAConfigError) {
  const auto v = test::small_vocab({"ADD", "MOD", "1"});
  EXPECT_THROW(generate_task_corpus(TaskKind::kModularAdd, 5, v, 1), ConfigError);
}

TEST(Tasks, KvTableIsBalancedPerSlot) {
  for (int slot = 0; slot < tasks::kKvResponseLength; ++slot) {
    std::map<int, int> count;
    for (int k = 0; k < tasks::kKvKeys; ++k) ++count[tasks::kv_value(k, slot)];
    ASSERT_EQ(count.size(), std::size_t(tasks::kKvValues));
    for (auto& [value, n] : count) EXPECT_EQ(n, tasks::kKvKeys / tasks::kKvValues) << "value " << value;
  }
}

TEST(Tasks, KvDistractorsPrecedeTheRequest) {
  const auto v = task_vocab();
  for (const auto& s : generate_task_corpus(TaskKind::kKvLookup, 200, v, 3, {}, 0)) {
    ASSERT_EQ(s.instruction().size(), 2u);
    EXPECT_EQ(v.symbol(s.instruction()[0]), "GET");
  }
  std::set<std::size_t> lengths;
  for (const auto& s : generate_task_corpus(TaskKind::kKvLookup, 200, v, 3)) lengths.insert(s.instruction().size());
  EXPECT_EQ(lengths, (std::set<std::size_t>{2, 3, 4}));
  EXPECT_THROW(generate_task_corpus(TaskKind::kKvLookup, 10, v, 3, {}, tasks::kMaxDistractors + 1), ConfigError);
}

TEST(Template, EmptyInstructionEncoding) {
  const auto v = test::small_vocab({"A", "Q"});
  const PromptTemplate tmpl(v);
  const auto e = tmpl.encode(Example{"s", {}, {v.id("A")}});
  EXPECT_EQ(e.tokens, (std::vector<TokenId>{Vocab::kBos, Vocab::kSep, v.id("A"), Vocab::kEos}));
  EXPECT_EQ(e.span_begin, 2u);
  EXPECT_EQ(e.span_end, 4u);
}

TEST(Template, SpanCountsResponseAndEos) {
  const auto v = test::small_vocab({"A", "Q"});
  const PromptTemplate tmpl(v);
  const Example ex{"s", {v.id("Q")}, {v.id("A")}};
  EXPECT_EQ(tmpl.encode(ex).span_length(), ex.response.size() + 1);
  const auto u = tmpl.encode_response_only(ex);
  EXPECT_EQ(u.tokens, (std::vector<TokenId>{Vocab::kBos, v.id("A"), Vocab::kEos}));
}

TEST(Template, DecodeInvertsEncode) {
  const auto v = task_vocab();
  for (auto t : {std::string(kDefaultTemplate), std::string(kBareTemplate)}) {
    const PromptTemplate tmpl(t, v);
    for (const auto& s : generate_task_corpus(TaskKind::kReverse, 50, v, 2)) {
      const auto [q, a] = tmpl.decode(tmpl.encode(s.example()));
      EXPECT_EQ(q, s.instruction());
      EXPECT_EQ(a, s.response());
    }
  }
}

TEST(Template, MalformedTemplatesAreRejected) {
  const auto v = task_vocab();
  EXPECT_THROW(PromptTemplate("{instruction} SEP", v), ConfigError);
  EXPECT_THROW(PromptTemplate("{response} {instruction}", v), ConfigError);
  EXPECT_THROW(PromptTemplate("{instruction} {instruction} {response}", v), ConfigError);
  EXPECT_THROW(PromptTemplate("{instruction} {response} SEP", v), ConfigError);
  EXPECT_THROW(PromptTemplate("{instruction} UNKNOWN_WORD {response}", v), ConfigError);
}

TEST(DatasetFile, SaveLoadRoundTripKeepsUnknownFields) {
  const auto v = test::small_vocab({"A", "B", "C"});
  Dataset ds("d", {});
  ds.push_back(Sample(Example{"s1", {v.id("A")}, {v.id("B")}}, QualityLabel::clean(), std::nullopt, "cat"));
  ds.push_back(Sample(Example{"s2", {}, {v.id("C"), v.id("A")}}, QualityLabel::corrupted(CorruptionKind::kSwap),
                      std::string("s1"), "", json{{"note", "kept"}, {"weight", 3}}));
  ds.push_back(Sample(Example{"s3", {v.id("B"), v.id("C")}, {v.id("A")}}));
  test::TempDir dir("ds");
  save_dataset(ds, dir.path / "d.jsonl", v);
  const auto back = load_dataset(dir.path / "d.jsonl", v);
  EXPECT_EQ(back, ds);
  EXPECT_EQ(back.find("s2")->extra().at("note"), "kept");
}

TEST(DatasetFile, MissingResponseNamesTheLine) {
  const auto v = test::small_vocab({"A"});
  const std::string text = "{\"id\":\"a\",\"instruction\":\"A\",\"response\":\"A\"}\n{\"id\":\"b\",\"instruction\":\"A\"}\n";
  try {
    parse_dataset(text, v, "d");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("response"), std::string::npos) << e.what();
  }
}

TEST(DatasetFile, DuplicateIdIsNamed) {
  const auto v = test::small_vocab({"A"});
  const std::string rec = "{\"id\":\"s1\",\"instruction\":\"A\",\"response\":\"A\"}\n";
  try {
    parse_dataset(rec + rec, v, "d");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("s1"), std::string::npos) << e.what();
  }
}

TEST(DatasetFile, EmptyResponseIsRejected) {
  const auto v = test::small_vocab({"A"});
  EXPECT_THROW(parse_dataset("{\"id\":\"a\",\"instruction\":\"A\",\"response\":\"\"}\n", v, "d"), ConfigError);
}

}  // namespace
}  // namespace feddqc
