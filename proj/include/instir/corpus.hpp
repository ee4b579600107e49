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

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace instir {

inline constexpr std::string_view kCorpusSchema = "inf-ir/1";

/// Outcome of one judge scenario. Passage ids are family-local role names
/// ("P+", "P1-", "P2-", "D0", "D1", ...).
struct ScenarioResult {
  std::string designated;  // passage id that should have been chosen
  std::string chosen;      // passage id the judge picked; empty if unparseable
  bool matched = false;
};

struct JudgeVerdict {
  std::array<ScenarioResult, 3> scenario_results;
  bool retained = false;
  std::string judge_model;
};

/// A positive (instruction, query, passage) triplet with its poisoned negatives.
/// passage_neg1 is relevant to (instruction_neg, query_pos); passage_neg2 to
/// (instruction_pos, query_neg).
struct TripletFamily {
  std::string id;
  std::string instruction_pos;
  std::string query_pos;
  std::string passage_pos;
  std::optional<std::string> instruction_neg;
  std::optional<std::string> query_neg;
  std::optional<std::string> passage_neg1;
  std::optional<std::string> passage_neg2;
  std::string source;
  std::optional<JudgeVerdict> verdict;

  bool has_negatives() const noexcept {
    return instruction_neg && query_neg && passage_neg1 && passage_neg2;
  }
  bool retained() const noexcept { return verdict && verdict->retained; }

  bool operator==(const TripletFamily&) const = default;
};

bool operator==(const ScenarioResult& a, const ScenarioResult& b);
bool operator==(const JudgeVerdict& a, const JudgeVerdict& b);

using Corpus = std::vector<TripletFamily>;

/// Canonical single-line JSON: keys in the documented fixed order, absent
/// optionals omitted, no trailing newline.
std::string to_json_line(const TripletFamily& f);
nlohmann::ordered_json to_json(const TripletFamily& f);
/// `source`/`line` only feed error messages.
TripletFamily family_from_json(const nlohmann::json& j, const std::string& source = "<memory>",
                               std::size_t line = 0);

Corpus parse_corpus(std::string_view text, const std::string& source = "<memory>");
Corpus load_corpus(const std::string& path);
std::string serialize_corpus(const Corpus& corpus);
void save_corpus(const Corpus& corpus, const std::string& path);

struct Violation {
  std::string field;
  std::string rule;
};

/// Checks the family invariants. Never throws; an empty result means valid.
std::vector<Violation> validate_family(const TripletFamily& f);

struct CorpusStats {
  std::size_t n_families = 0;
  std::size_t n_instructions = 0;
  std::size_t n_queries = 0;
  std::size_t n_passages = 0;
  double avg_len_i = 0.0;
  double avg_len_q = 0.0;
  double avg_len_p = 0.0;
};

/// Counts distinct texts per role (positives and negatives together) and
/// averages their token counts under the toolkit tokenizer.
CorpusStats corpus_stats(const Corpus& corpus);
nlohmann::ordered_json to_json(const CorpusStats& s);

struct TrainTuple {
  std::size_t passage_idx = 0;
  std::size_t instruction_idx = 0;
  std::size_t query_idx = 0;
  bool is_positive = false;

  bool operator==(const TrainTuple&) const = default;
};

/// Table rows holding one family's hard negatives.
struct NegativeRows {
  std::size_t passage_neg1 = 0;
  std::size_t passage_neg2 = 0;
  std::size_t instruction_neg = 0;
  std::size_t query_neg = 0;
};

/// Flattened training view. Row f < n_families() of every table is family f's
/// positive text, so the positive tuple of family f is (f, f, f). Negatives
/// follow the positives in each table.
struct FlatCorpus {
  std::vector<std::string> family_ids;
  std::vector<std::string> passages;
  std::vector<std::string> instructions;
  std::vector<std::string> queries;
  std::vector<NegativeRows> negatives;
  /// Positive tuple per family, then the two hard-negative tuples
  /// (P1-, I-, Q+) and (P2-, I+, Q-) per family.
  std::vector<TrainTuple> tuples;
  std::size_t skipped = 0;

  std::size_t n_families() const noexcept { return family_ids.size(); }
};

/// Orders families by id. Families that are not retained or lack a negative
/// are skipped and counted.
FlatCorpus flatten_training_tuples(const Corpus& corpus);
std::string serialize_flat(const FlatCorpus& flat);

}  // namespace instir
