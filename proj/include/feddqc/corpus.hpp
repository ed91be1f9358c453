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

// Sample data model, word-level vocabulary, prompt templates and the
// synthetic verifiable task generators.

#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "feddqc/common.hpp"
#include "feddqc/io.hpp"

namespace feddqc {

using TokenId = std::uint32_t;

// ---------------------------------------------------------------------------
// Vocabulary

class Vocab {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kSep = 2;
  static constexpr TokenId kEos = 3;
  static constexpr std::size_t kNumSpecials = 4;

  static const std::vector<std::string>& special_symbols() {
    static const std::vector<std::string> s = {"PAD", "BOS", "SEP", "EOS"};
    return s;
  }

  /// `symbols` excludes the specials; they are prepended in fixed order.
  static Vocab from_regular(const std::vector<std::string>& symbols) {
    std::vector<std::string> all = special_symbols();
    all.insert(all.end(), symbols.begin(), symbols.end());
    return from_all(std::move(all));
  }

  /// `symbols` must start with PAD, BOS, SEP, EOS.
  static Vocab from_all(std::vector<std::string> symbols) {
    const auto& sp = special_symbols();
    if (symbols.size() < sp.size() || !std::equal(sp.begin(), sp.end(), symbols.begin())) {
      throw ConfigError("vocab must begin with specials PAD, BOS, SEP, EOS");
    }
    Vocab v;
    for (std::size_t i = 0; i < symbols.size(); ++i) {
      if (symbols[i].empty() || symbols[i].find_first_of(" \t\n\r") != std::string::npos) {
        throw ConfigError("vocab symbol " + std::to_string(i) + " is empty or has whitespace");
      }
      if (!v.index_.emplace(symbols[i], static_cast<TokenId>(i)).second) {
        throw ConfigError("duplicate vocab symbol '" + symbols[i] + "'");
      }
    }
    v.symbols_ = std::move(symbols);
    return v;
  }

  std::size_t size() const { return symbols_.size(); }
  const std::vector<std::string>& symbols() const { return symbols_; }
  const std::string& symbol(TokenId id) const { return symbols_.at(id); }
  bool contains(const std::string& s) const { return index_.count(s) != 0; }
  bool is_special(TokenId id) const { return id < kNumSpecials; }

  std::optional<TokenId> find(const std::string& s) const {
    auto it = index_.find(s);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  TokenId id(const std::string& s) const {
    auto it = index_.find(s);
    if (it == index_.end()) throw ConfigError("symbol '" + s + "' not in vocab");
    return it->second;
  }

  std::vector<TokenId> tokenize(std::string_view text) const {
    std::vector<TokenId> out;
    std::size_t pos = 0;
    while (pos < text.size()) {
      const auto b = text.find_first_not_of(" \t", pos);
      if (b == std::string_view::npos) break;
      auto e = text.find_first_of(" \t", b);
      if (e == std::string_view::npos) e = text.size();
      out.push_back(id(std::string(text.substr(b, e - b))));
      pos = e;
    }
    return out;
  }

  std::string detokenize(std::span<const TokenId> ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) out += ' ';
      out += symbol(ids[i]);
    }
    return out;
  }

  bool operator==(const Vocab& o) const { return symbols_ == o.symbols_; }

 private:
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, TokenId> index_;
};

inline Vocab load_vocab(const std::filesystem::path& path) {
  std::vector<std::string> symbols;
  std::istringstream in(read_file(path));
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    symbols.push_back(line);
  }
  return Vocab::from_all(std::move(symbols));
}

inline void save_vocab(const Vocab& vocab, const std::filesystem::path& path) {
  std::string out;
  for (const auto& s : vocab.symbols()) out += s + "\n";
  write_file_atomic(path, out);
}

// ---------------------------------------------------------------------------
// Samples

/// The label-free view of a sample. Everything that scores or trains takes
/// this type, so ground-truth quality labels cannot leak into selection.
struct Example {
  std::string id;
  std::vector<TokenId> instruction;
  std::vector<TokenId> response;

  bool operator==(const Example&) const = default;
};

enum class CorruptionKind { kSwap, kDelete, kCut, kSubstitute, kNoisy, kMixture };

inline std::string to_string(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::kSwap: return "swap";
    case CorruptionKind::kDelete: return "delete";
    case CorruptionKind::kCut: return "cut";
    case CorruptionKind::kSubstitute: return "substitute";
    case CorruptionKind::kNoisy: return "noisy";
    case CorruptionKind::kMixture: return "mixture";
  }
  return "?";
}

inline CorruptionKind parse_corruption_kind(const std::string& s) {
  for (auto k : {CorruptionKind::kSwap, CorruptionKind::kDelete, CorruptionKind::kCut,
                 CorruptionKind::kSubstitute, CorruptionKind::kNoisy, CorruptionKind::kMixture}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown corruption kind '" + s + "'");
}

class QualityLabel {
 public:
  static QualityLabel clean() { return QualityLabel(std::nullopt); }
  static QualityLabel corrupted(CorruptionKind k) { return QualityLabel(k); }

  static QualityLabel parse(const std::string& s) {
    if (s == "clean") return clean();
    constexpr std::string_view prefix = "corrupted:";
    if (s.rfind(prefix, 0) == 0) return corrupted(parse_corruption_kind(s.substr(prefix.size())));
    throw ConfigError("bad quality_label '" + s + "'");
  }

  bool is_clean() const { return !kind_.has_value(); }
  std::optional<CorruptionKind> kind() const { return kind_; }
  std::string str() const { return kind_ ? "corrupted:" + to_string(*kind_) : "clean"; }

  bool operator==(const QualityLabel&) const = default;

 private:
  explicit QualityLabel(std::optional<CorruptionKind> k) : kind_(k) {}
  std::optional<CorruptionKind> kind_;
};

/// A labelled sample. The label and provenance are fixed at construction.
class Sample {
 public:
  Sample(Example text, std::optional<QualityLabel> label = std::nullopt,
         std::optional<std::string> source_id = std::nullopt, std::string category = {},
         json extra = json::object())
      : text_(std::move(text)),
        label_(label),
        source_id_(std::move(source_id)),
        category_(std::move(category)),
        extra_(std::move(extra)) {}

  const Example& example() const { return text_; }
  const std::string& id() const { return text_.id; }
  const std::vector<TokenId>& instruction() const { return text_.instruction; }
  const std::vector<TokenId>& response() const { return text_.response; }
  const std::optional<QualityLabel>& label() const { return label_; }
  const std::optional<std::string>& source_id() const { return source_id_; }
  /// Task family, empty when unknown (see partition's category_key).
  const std::string& category() const { return category_; }
  /// Unknown record fields, carried through load/save untouched.
  const json& extra() const { return extra_; }

  Sample with_label(std::optional<QualityLabel> label) const {
    return Sample(text_, label, source_id_, category_, extra_);
  }

  bool operator==(const Sample& o) const {
    return text_ == o.text_ && label_ == o.label_ && source_id_ == o.source_id_ &&
           category_ == o.category_ && extra_ == o.extra_;
  }

 private:
  Example text_;
  std::optional<QualityLabel> label_;
  std::optional<std::string> source_id_;
  std::string category_;
  json extra_;
};

class Dataset {
 public:
  Dataset() = default;
  Dataset(std::string name, std::vector<Sample> samples) : name_(std::move(name)) {
    samples_.reserve(samples.size());
    for (auto& s : samples) push_back(std::move(s));
  }

  void push_back(Sample s) {
    if (!ids_.emplace(s.id(), samples_.size()).second) throw ConfigError("duplicate sample id '" + s.id() + "'");
    samples_.push_back(std::move(s));
  }

  const std::string& name() const { return name_; }
  std::size_t size() const { return samples_.size(); }
  bool empty() const { return samples_.empty(); }
  const Sample& operator[](std::size_t i) const { return samples_[i]; }
  const std::vector<Sample>& samples() const { return samples_; }
  auto begin() const { return samples_.begin(); }
  auto end() const { return samples_.end(); }
  bool contains(const std::string& id) const { return ids_.count(id) != 0; }
  const Sample* find(const std::string& id) const {
    auto it = ids_.find(id);
    return it == ids_.end() ? nullptr : &samples_[it->second];
  }

  /// Label-stripped training view in dataset order.
  std::vector<Example> examples() const {
    std::vector<Example> out;
    out.reserve(samples_.size());
    for (const auto& s : samples_) out.push_back(s.example());
    return out;
  }

  bool operator==(const Dataset& o) const { return name_ == o.name_ && samples_ == o.samples_; }

 private:
  std::string name_;
  std::vector<Sample> samples_;
  std::unordered_map<std::string, std::size_t> ids_;
};

// ---------------------------------------------------------------------------
// Prompt templates

inline constexpr std::string_view kDefaultTemplate = "{instruction} SEP {response}";

/// Alpaca-style prose layout. Its literal words must be added to the vocab
/// (see template_literal_symbols) before it can be compiled.
inline constexpr std::string_view kAlpacaTemplate =
    "Below is an instruction that describes a task . Write a response that appropriately "
    "completes the request . ### Instruction : {instruction} ### Response : {response}";

struct TemplateParts {
  std::vector<std::string> prefix;  // words before {instruction}
  std::vector<std::string> middle;  // words between {instruction} and {response}
};

inline TemplateParts parse_template(std::string_view tmpl) {
  constexpr std::string_view kIns = "{instruction}";
  constexpr std::string_view kRes = "{response}";
  const auto i = tmpl.find(kIns);
  const auto r = tmpl.find(kRes);
  if (i == std::string_view::npos || r == std::string_view::npos) {
    throw ConfigError("template must contain {instruction} and {response}");
  }
  if (tmpl.find(kIns, i + 1) != std::string_view::npos ||
      tmpl.find(kRes, r + 1) != std::string_view::npos) {
    throw ConfigError("template slots must appear exactly once");
  }
  if (r < i) throw ConfigError("template {response} slot must come after {instruction}");
  if (tmpl.substr(r + kRes.size()).find_first_not_of(" \t\r\n") != std::string_view::npos) {
    throw ConfigError("template {response} slot must be last");
  }
  auto words = [](std::string_view s) {
    std::vector<std::string> out;
    std::istringstream in{std::string(s)};
    std::string w;
    while (in >> w) out.push_back(w);
    return out;
  };
  return {words(tmpl.substr(0, i)), words(tmpl.substr(i + kIns.size(), r - i - kIns.size()))};
}

inline std::vector<std::string> template_literal_symbols(std::string_view tmpl) {
  auto parts = parse_template(tmpl);
  auto out = parts.prefix;
  out.insert(out.end(), parts.middle.begin(), parts.middle.end());
  return out;
}

/// Token sequence plus the half-open span [span_begin, span_end) over which
/// the response loss is computed (response tokens and the closing EOS).
struct Encoded {
  std::vector<TokenId> tokens;
  std::size_t span_begin = 0;
  std::size_t span_end = 0;

  std::size_t span_length() const { return span_end - span_begin; }
};

class PromptTemplate {
 public:
  PromptTemplate(std::string_view tmpl, const Vocab& vocab) : text_(tmpl) {
    auto parts = parse_template(tmpl);
    for (const auto& w : parts.prefix) prefix_.push_back(vocab.id(w));
    for (const auto& w : parts.middle) middle_.push_back(vocab.id(w));
  }

  explicit PromptTemplate(const Vocab& vocab) : PromptTemplate(kDefaultTemplate, vocab) {}

  const std::string& text() const { return text_; }

  /// BOS, prefix, instruction, middle. The model continues from here.
  std::vector<TokenId> prompt(std::span<const TokenId> instruction) const {
    std::vector<TokenId> t;
    t.reserve(1 + prefix_.size() + instruction.size() + middle_.size());
    t.push_back(Vocab::kBos);
    t.insert(t.end(), prefix_.begin(), prefix_.end());
    t.insert(t.end(), instruction.begin(), instruction.end());
    t.insert(t.end(), middle_.begin(), middle_.end());
    return t;
  }

  Encoded encode(const Example& ex) const {
    Encoded e;
    e.tokens = prompt(ex.instruction);
    e.span_begin = e.tokens.size();
    e.tokens.insert(e.tokens.end(), ex.response.begin(), ex.response.end());
    e.tokens.push_back(Vocab::kEos);
    e.span_end = e.tokens.size();
    return e;
  }

  /// Response-only context: BOS, response, EOS. Template literals and the
  /// instruction/response boundary token belong to the instruction side.
  Encoded encode_response_only(const Example& ex) const {
    Encoded e;
    e.tokens.reserve(ex.response.size() + 2);
    e.tokens.push_back(Vocab::kBos);
    e.span_begin = 1;
    e.tokens.insert(e.tokens.end(), ex.response.begin(), ex.response.end());
    e.tokens.push_back(Vocab::kEos);
    e.span_end = e.tokens.size();
    return e;
  }

  /// Inverse of encode: returns (instruction, response).
  std::pair<std::vector<TokenId>, std::vector<TokenId>> decode(const Encoded& e) const {
    const std::size_t ins_begin = 1 + prefix_.size();
    const std::size_t ins_end = e.span_begin - middle_.size();
    require(ins_end >= ins_begin && e.span_end >= e.span_begin + 1, "decode: malformed encoding");
    return {std::vector<TokenId>(e.tokens.begin() + ins_begin, e.tokens.begin() + ins_end),
            std::vector<TokenId>(e.tokens.begin() + e.span_begin, e.tokens.begin() + e.span_end - 1)};
  }

 private:
  std::string text_;
  std::vector<TokenId> prefix_;
  std::vector<TokenId> middle_;
};

// ---------------------------------------------------------------------------
// Synthetic tasks. Each response is a deterministic function of its
// instruction, so clean data has maximal instruction-response alignment.

enum class TaskKind { kKvLookup, kModularAdd, kReverse, kCopy };

inline std::string to_string(TaskKind t) {
  switch (t) {
    case TaskKind::kKvLookup: return "kv_lookup";
    case TaskKind::kModularAdd: return "modular_add";
    case TaskKind::kReverse: return "reverse";
    case TaskKind::kCopy: return "copy";
  }
  return "?";
}

inline TaskKind parse_task(const std::string& s) {
  for (auto t : {TaskKind::kKvLookup, TaskKind::kModularAdd, TaskKind::kReverse, TaskKind::kCopy}) {
    if (to_string(t) == s) return t;
  }
  throw ConfigError("unknown task '" + s + "'");
}

namespace tasks {

inline constexpr int kKvKeys = 32;
inline constexpr int kKvValues = 16;
inline constexpr int kKvResponseLength = 2;
// Irrelevant letters that may precede a kv request.
inline constexpr std::size_t kMaxDistractors = 2;
inline constexpr int kModulus = 10;
inline constexpr int kLetters = 26;
inline constexpr int kMaxSeqLength = 4;

inline std::string key_symbol(int k) { return "k" + std::to_string(k); }
inline std::string value_symbol(int v) { return "v" + std::to_string(v); }
inline std::string number_symbol(int n) { return std::to_string(n); }
inline std::string letter_symbol(int l) { return std::string(1, static_cast<char>('A' + l)); }

/// The fixed key -> values table. Independent of the generator seed so that
/// corpora drawn with different seeds describe the same task. Every value
/// appears equally often in each slot, so no answer is a priori more likely.
inline int kv_value(int key, int slot) {
  static const auto table = [] {
    std::array<std::array<int, kKvKeys>, kKvResponseLength> t{};
    for (int s = 0; s < kKvResponseLength; ++s) {
      std::array<int, kKvKeys> perm{};
      for (int k = 0; k < kKvKeys; ++k) perm[k] = k;
      std::mt19937_64 rng(splitmix64(0x6B765F6C6F6F6BULL + static_cast<std::uint64_t>(s)));
      for (int i = kKvKeys - 1; i > 0; --i) {
        std::swap(perm[i], perm[rng() % static_cast<std::uint64_t>(i + 1)]);
      }
      for (int k = 0; k < kKvKeys; ++k) t[s][k] = perm[k] % kKvValues;
    }
    return t;
  }();
  return table.at(static_cast<std::size_t>(slot)).at(static_cast<std::size_t>(key));
}

inline std::vector<std::string> alphabet(TaskKind t) {
  std::vector<std::string> out;
  switch (t) {
    case TaskKind::kKvLookup:
      out.push_back("GET");
      for (int l = 0; l < kLetters; ++l) out.push_back(letter_symbol(l));
      for (int k = 0; k < kKvKeys; ++k) out.push_back(key_symbol(k));
      for (int v = 0; v < kKvValues; ++v) out.push_back(value_symbol(v));
      break;
    case TaskKind::kModularAdd:
      out.push_back("ADD");
      out.push_back("MOD");
      for (int n = 0; n <= kModulus; ++n) out.push_back(number_symbol(n));
      break;
    case TaskKind::kReverse:
      out.push_back("REV");
      [[fallthrough]];
    case TaskKind::kCopy:
      for (int l = 0; l < kLetters; ++l) out.push_back(letter_symbol(l));
      break;
  }
  return out;
}

}  // namespace tasks

/// Vocabulary covering every task alphabet (93 symbols).
inline Vocab task_vocab() {
  std::vector<std::string> symbols;
  std::unordered_set<std::string> seen;
  for (auto t : {TaskKind::kKvLookup, TaskKind::kModularAdd, TaskKind::kReverse, TaskKind::kCopy}) {
    for (auto& s : tasks::alphabet(t)) {
      if (seen.insert(s).second) symbols.push_back(s);
    }
  }
  return Vocab::from_regular(symbols);
}

/// kv_lookup requests are preceded by 0..max_distractors random letters
/// that do not affect the answer.
inline Dataset generate_task_corpus(TaskKind task, std::size_t n, const Vocab& vocab,
                                    std::uint64_t seed, const std::string& id_prefix = {},
                                    std::size_t max_distractors = tasks::kMaxDistractors) {
  require(n >= 1, "generate_task_corpus: n must be >= 1");
  if (max_distractors > tasks::kMaxDistractors) {
    throw ConfigError("distractors must be <= " + std::to_string(tasks::kMaxDistractors));
  }
  for (const auto& s : tasks::alphabet(task)) {
    if (!vocab.contains(s)) {
      throw ConfigError("vocab too small for task " + to_string(task) + ": missing '" + s + "'");
    }
  }
  const std::string prefix = id_prefix.empty() ? to_string(task) : id_prefix;
  Rng rng(derive_seed(seed, to_string(task)));
  std::vector<Sample> samples;
  samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::string> ins;
    std::vector<std::string> res;
    switch (task) {
      case TaskKind::kKvLookup: {
        const int key = static_cast<int>(uniform_index(rng, tasks::kKvKeys));
        const auto nd = max_distractors ? uniform_index(rng, max_distractors + 1) : 0;
        for (std::size_t q = 0; q < nd; ++q) {
          ins.push_back(tasks::letter_symbol(static_cast<int>(uniform_index(rng, tasks::kLetters))));
        }
        ins.push_back("GET");
        ins.push_back(tasks::key_symbol(key));
        for (int s = 0; s < tasks::kKvResponseLength; ++s) {
          res.push_back(tasks::value_symbol(tasks::kv_value(key, s)));
        }
        break;
      }
      case TaskKind::kModularAdd: {
        const int a = static_cast<int>(uniform_index(rng, tasks::kModulus));
        const int b = static_cast<int>(uniform_index(rng, tasks::kModulus));
        ins = {"ADD", tasks::number_symbol(a), tasks::number_symbol(b), "MOD",
               tasks::number_symbol(tasks::kModulus)};
        res = {tasks::number_symbol((a + b) % tasks::kModulus)};
        break;
      }
      case TaskKind::kReverse:
      case TaskKind::kCopy: {
        const auto len = 1 + uniform_index(rng, tasks::kMaxSeqLength);
        std::vector<std::string> seq;
        for (std::size_t j = 0; j < len; ++j) {
          seq.push_back(tasks::letter_symbol(static_cast<int>(uniform_index(rng, tasks::kLetters))));
        }
        res = seq;
        if (task == TaskKind::kReverse) {
          std::reverse(res.begin(), res.end());
          ins.push_back("REV");
        }
        ins.insert(ins.end(), seq.begin(), seq.end());
        break;
      }
    }
    char idbuf[32];
    std::snprintf(idbuf, sizeof idbuf, "-%06zu", i);
    Example ex{prefix + idbuf, {}, {}};
    for (const auto& s : ins) ex.instruction.push_back(vocab.id(s));
    for (const auto& s : res) ex.response.push_back(vocab.id(s));
    samples.emplace_back(std::move(ex), QualityLabel::clean(), std::nullopt, to_string(task));
  }
  return Dataset(to_string(task), std::move(samples));
}

/// Response of `task` for an instruction, or nullopt if the instruction is
/// not well formed for that task. Used to check generator invariants.
inline std::optional<std::vector<TokenId>> reference_response(TaskKind task, const Vocab& vocab,
                                                              std::span<const TokenId> ins) {
  std::vector<std::string> w;
  for (auto t : ins) w.push_back(vocab.symbol(t));
  std::vector<std::string> res;
  switch (task) {
    case TaskKind::kKvLookup: {
      if (w.size() < 2 || w.size() > 2 + tasks::kMaxDistractors) return std::nullopt;
      const auto& key_sym = w.back();
      if (w[w.size() - 2] != "GET" || key_sym.size() < 2 || key_sym[0] != 'k') return std::nullopt;
      const int key = std::stoi(key_sym.substr(1));
      for (int s = 0; s < tasks::kKvResponseLength; ++s) {
        res.push_back(tasks::value_symbol(tasks::kv_value(key, s)));
      }
      break;
    }
    case TaskKind::kModularAdd:
      if (w.size() != 5 || w[0] != "ADD" || w[3] != "MOD") return std::nullopt;
      res = {tasks::number_symbol((std::stoi(w[1]) + std::stoi(w[2])) % std::stoi(w[4]))};
      break;
    case TaskKind::kReverse:
      if (w.empty() || w[0] != "REV") return std::nullopt;
      res.assign(w.rbegin(), w.rend() - 1);
      break;
    case TaskKind::kCopy:
      res = w;
      break;
  }
  std::vector<TokenId> out;
  for (const auto& s : res) out.push_back(vocab.id(s));
  return out;
}

/// Concatenates datasets; ids must remain unique.
inline Dataset concat(std::string name, std::initializer_list<const Dataset*> parts) {
  Dataset out(std::move(name), {});
  for (const auto* d : parts) {
    for (const auto& s : *d) out.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset files: one JSON object per line with fields
// {id, instruction, response, quality_label?, category?, source_id?}.

inline json sample_to_json(const Sample& s, const Vocab& vocab) {
  json j = s.extra().is_object() ? s.extra() : json::object();
  j["id"] = s.id();
  j["instruction"] = vocab.detokenize(s.instruction());
  j["response"] = vocab.detokenize(s.response());
  if (s.label()) j["quality_label"] = s.label()->str();
  if (!s.category().empty()) j["category"] = s.category();
  if (s.source_id()) j["source_id"] = *s.source_id();
  return j;
}

inline Dataset parse_dataset(std::string_view text, const Vocab& vocab, const std::string& name,
                             const std::string& source = "<dataset>") {
  Dataset ds(name, {});
  for (auto& [line_no, rec] : parse_jsonl(text, source)) {
    auto where = source + ":" + std::to_string(line_no);
    if (!rec.is_object()) throw ConfigError(where + ": record is not an object");
    for (const char* field : {"id", "instruction", "response"}) {
      if (!rec.contains(field) || !rec[field].is_string()) {
        throw ConfigError(where + " (line " + std::to_string(line_no) + "): missing required field '" +
                          field + "'");
      }
    }
    Example ex;
    ex.id = rec["id"].get<std::string>();
    try {
      ex.instruction = vocab.tokenize(rec["instruction"].get<std::string>());
      ex.response = vocab.tokenize(rec["response"].get<std::string>());
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
    if (ex.response.empty()) throw ConfigError(where + ": response must have at least one token");
    std::optional<QualityLabel> label;
    if (rec.contains("quality_label")) label = QualityLabel::parse(rec["quality_label"].get<std::string>());
    std::optional<std::string> source_id;
    if (rec.contains("source_id")) source_id = rec["source_id"].get<std::string>();
    std::string category = rec.value("category", std::string{});
    json extra = rec;
    for (const char* k : {"id", "instruction", "response", "quality_label", "category", "source_id"}) {
      extra.erase(k);
    }
    const std::string id = ex.id;
    if (ds.contains(id)) throw ConfigError(where + ": duplicate id '" + id + "'");
    ds.push_back(Sample(std::move(ex), label, source_id, category, std::move(extra)));
  }
  return ds;
}

inline Dataset load_dataset(const std::filesystem::path& path, const Vocab& vocab) {
  return parse_dataset(read_file(path), vocab, path.stem().string(), path.string());
}

inline std::string serialize_dataset(const Dataset& ds, const Vocab& vocab) {
  std::string out;
  for (const auto& s : ds) {
    out += sample_to_json(s, vocab).dump();
    out += '\n';
  }
  return out;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& path, const Vocab& vocab) {
  write_file_atomic(path, serialize_dataset(ds, vocab));
}

}  // namespace feddqc
