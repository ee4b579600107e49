// Copyright 2026-present the instir authors
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

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "instir/corpus.hpp"
#include "instir/error.hpp"

namespace instir {

/// A prompt body with `{slot}` placeholders. A slot name is a run of
/// [A-Za-z0-9_] between braces; any other brace is literal text.
struct PromptTemplate {
  std::string name;
  std::string body;
  std::set<std::string> required_slots;

  static PromptTemplate from_body(std::string name, std::string body);
};

/// Byte-exact substitution. Throws PreconditionError naming a missing or
/// unknown slot.
std::string render_prompt(const PromptTemplate& t, const std::map<std::string, std::string>& slots);

/// Slots: document, query_positive, instruction_positive.
const PromptTemplate& query_synthesis_template();
/// Slots: document, query_positive, instruction_positive.
const PromptTemplate& instruction_synthesis_template();
/// Slots: document, query.
const PromptTemplate& instruction_generation_template();
/// Slots: instruction, query.
const PromptTemplate& passage_synthesis_template();
/// Slots: instruction, query, passages.
const PromptTemplate& judge_template();

/// Raised when a response lacks the expected label. Keeps the raw text.
class ExtractionError : public Error {
 public:
  ExtractionError(const std::string& what, std::string raw) : Error(what), raw_(std::move(raw)) {}
  const std::string& raw() const noexcept { return raw_; }

 private:
  std::string raw_;
};

/// Raised when rule filtering leaves nothing.
class FilterError : public Error {
 public:
  using Error::Error;
};

/// Content after the first line starting with "<label>:", trimmed.
std::string parse_labeled_line(std::string_view response, std::string_view label);
/// Everything after the first "<label>:" line start, including later lines, trimmed.
std::string parse_labeled_block(std::string_view response, std::string_view label);
/// Text before the first newline, trimmed. Throws FilterError when empty.
std::string rule_filter(std::string_view s);

/// Task names passed to chat clients.
namespace task {
inline constexpr std::string_view kInstructionGeneration = "instruction_generation";
inline constexpr std::string_view kInstructionSynthesis = "instruction_synthesis";
inline constexpr std::string_view kQuerySynthesis = "query_synthesis";
inline constexpr std::string_view kPassageNeg1 = "passage_neg1";
inline constexpr std::string_view kPassageNeg2 = "passage_neg2";
inline constexpr std::string_view kJudge[3] = {"judge_s1", "judge_s2", "judge_s3"};
}  // namespace task

struct ChatRequest {
  std::string task;
  std::string family_id;
  std::string prompt;
};

/// Implementations must tolerate concurrent calls.
class ChatClient {
 public:
  virtual ~ChatClient() = default;
  virtual std::string complete(const ChatRequest& request) = 0;
  virtual std::string model_name() const = 0;
};

struct ChatClientConfig {
  std::string endpoint_url;
  std::string model_name;
  std::string api_key_env;  // empty: no Authorization header
  std::size_t max_parallel = 4;
  double timeout_seconds = 60.0;
  int max_attempts = 3;
  double backoff_seconds = 1.0;
  double temperature = 0.0;

  void validate() const;
};

/// POST {model, messages:[{role:"user", content}], temperature}; the reply
/// text is choices[0].message.content. Reads the API key at construction.
class HttpChatClient final : public ChatClient {
 public:
  explicit HttpChatClient(ChatClientConfig cfg);
  std::string complete(const ChatRequest& request) override;
  std::string model_name() const override { return cfg_.model_name; }

 private:
  ChatClientConfig cfg_;
  std::string token_;
};

/// Offline client over a `.jsonl` file of {task, family_id, response}. A
/// family_id of "*" matches any family. An entry may carry `choose_passage`
/// instead of `response`: the reply is then the label of the "[X] text"
/// prompt line whose text equals it. Unmatched requests throw TransportError.
class ScriptedChatClient final : public ChatClient {
 public:
  struct Entry {
    std::string response;
    std::optional<std::string> choose_passage;
  };

  ScriptedChatClient(std::map<std::pair<std::string, std::string>, Entry> responses, std::string model = "scripted");
  static ScriptedChatClient parse(std::string_view text, const std::string& source = "<memory>");
  static ScriptedChatClient load(const std::string& path);

  std::string complete(const ChatRequest& request) override;
  std::string model_name() const override { return model_; }

 private:
  std::map<std::pair<std::string, std::string>, Entry> responses_;
  std::string model_;
};

class FunctionChatClient final : public ChatClient {
 public:
  using Fn = std::function<std::string(const ChatRequest&)>;
  FunctionChatClient(Fn fn, std::string model) : fn_(std::move(fn)), model_(std::move(model)) {}
  std::string complete(const ChatRequest& request) override { return fn_(request); }
  std::string model_name() const override { return model_; }

 private:
  Fn fn_;
  std::string model_;
};

struct SeedPair {
  std::string id;
  std::string query;
  std::string passage;
};

std::vector<SeedPair> parse_seed_pairs(std::string_view text, const std::string& source = "<memory>");
std::vector<SeedPair> load_seed_pairs(const std::string& path);

/// Positive instruction linking the seed query to its passage.
std::string generate_instruction(const SeedPair& seed, ChatClient& client);

/// Raised when poisoning leaves an instruction or query unchanged.
class NoOpPoisonError : public Error {
 public:
  using Error::Error;
};

/// Fills instruction_neg, query_neg, passage_neg1 (for I-, Q+) and
/// passage_neg2 (for I+, Q-).
void poison_family(TripletFamily& f, ChatClient& client);

/// One judged scenario as shown to the judge.
struct JudgePresentation {
  std::string prompt;
  std::vector<std::string> labels;  // "A", "B", ...
  std::vector<std::string> ids;     // passage id behind each label
  std::string designated;
};

/// Candidates are the designated passage, the family's other passages and
/// the distractors ("D0", "D1", ...), shuffled with a seed derived from the
/// family id and scenario.
JudgePresentation present_scenario(const TripletFamily& f, int scenario, const std::vector<std::string>& distractors,
                                   std::uint64_t seed = 0);

/// First standalone capital-letter token in the response that is one of
/// `labels`; empty when none.
std::string parse_judge_label(std::string_view response, const std::vector<std::string>& labels);

JudgeVerdict quality_check(const TripletFamily& f, ChatClient& judge, const std::vector<std::string>& distractors,
                           std::size_t k, std::uint64_t seed = 0);

/// k passages from other seed pairs, chosen by a generator seeded from the
/// family id.
std::vector<std::string> sample_distractors(const std::vector<SeedPair>& seeds, std::size_t self, std::size_t k,
                                            std::uint64_t seed = 0);

struct PipelineConfig {
  std::size_t max_parallel = 4;
  std::size_t distractors = 3;
  std::uint64_t seed = 0;
  /// Holds journal.jsonl, results.jsonl and rejects.jsonl. Empty: in memory only.
  std::string work_dir;
  /// Reuse finished families from an existing results.jsonl.
  bool resume = false;
  /// Process at most this many unfinished families (0: all).
  std::size_t max_families = 0;
  std::string source = "synth";
  /// Polled between families; when it turns true no new family is started.
  const std::atomic<bool>* stop = nullptr;
};

struct PipelineReport {
  std::size_t seeds = 0;
  std::size_t processed = 0;
  std::size_t resumed = 0;
  std::size_t pending = 0;
  std::size_t generated = 0;
  std::size_t retained = 0;
  std::map<std::string, std::size_t> rejected_by_stage;
  std::size_t chat_requests = 0;

  nlohmann::ordered_json to_json() const;
};

struct PipelineResult {
  Corpus corpus;  // retained families ordered by id
  PipelineReport report;
};

PipelineResult run_pipeline(const std::vector<SeedPair>& seeds, ChatClient& generator, ChatClient& judge,
                            const PipelineConfig& cfg);

}  // namespace instir
