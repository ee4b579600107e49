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

#include "instir/corpus.hpp"

#include <algorithm>
#include <numeric>
#include <set>

#include "instir/embedding.hpp"
#include "instir/error.hpp"
#include "instir/util.hpp"

namespace instir {

using nlohmann::json;
using nlohmann::ordered_json;

bool operator==(const ScenarioResult& a, const ScenarioResult& b) {
  return a.designated == b.designated && a.chosen == b.chosen && a.matched == b.matched;
}

bool operator==(const JudgeVerdict& a, const JudgeVerdict& b) {
  return a.scenario_results == b.scenario_results && a.retained == b.retained &&
         a.judge_model == b.judge_model;
}

ordered_json to_json(const TripletFamily& f) {
  ordered_json j;
  j["schema"] = kCorpusSchema;
  j["id"] = f.id;
  j["source"] = f.source;
  j["instruction_pos"] = f.instruction_pos;
  j["query_pos"] = f.query_pos;
  j["passage_pos"] = f.passage_pos;
  if (f.instruction_neg) j["instruction_neg"] = *f.instruction_neg;
  if (f.query_neg) j["query_neg"] = *f.query_neg;
  if (f.passage_neg1) j["passage_neg1"] = *f.passage_neg1;
  if (f.passage_neg2) j["passage_neg2"] = *f.passage_neg2;
  if (f.verdict) {
    ordered_json v;
    v["retained"] = f.verdict->retained;
    v["judge_model"] = f.verdict->judge_model;
    v["scenario_results"] = ordered_json::array();
    for (const auto& s : f.verdict->scenario_results) {
      ordered_json sj;
      sj["designated"] = s.designated;
      sj["chosen"] = s.chosen;
      sj["matched"] = s.matched;
      v["scenario_results"].push_back(std::move(sj));
    }
    j["verdict"] = std::move(v);
  }
  return j;
}

std::string to_json_line(const TripletFamily& f) { return to_json(f).dump(); }

namespace {

const std::set<std::string, std::less<>> kFamilyKeys = {
    "schema",   "id",           "source",       "instruction_pos", "query_pos", "passage_pos",
    "instruction_neg", "query_neg", "passage_neg1", "passage_neg2", "verdict"};

std::string require_string(const json& j, const char* key, const std::string& src, std::size_t line) {
  auto it = j.find(key);
  if (it == j.end()) throw ParseError(src, line, std::string("missing field '") + key + "'");
  if (!it->is_string()) throw ParseError(src, line, std::string("field '") + key + "' must be a string");
  return it->get<std::string>();
}

std::optional<std::string> optional_string(const json& j, const char* key, const std::string& src,
                                           std::size_t line) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) throw ParseError(src, line, std::string("field '") + key + "' must be a string");
  return it->get<std::string>();
}

JudgeVerdict verdict_from_json(const json& v, const std::string& src, std::size_t line) {
  if (!v.is_object()) throw ParseError(src, line, "field 'verdict' must be an object");
  JudgeVerdict out;
  auto retained = v.find("retained");
  if (retained == v.end() || !retained->is_boolean()) {
    throw ParseError(src, line, "field 'verdict.retained' must be a boolean");
  }
  out.retained = retained->get<bool>();
  out.judge_model = v.value("judge_model", std::string{});
  auto results = v.find("scenario_results");
  if (results == v.end() || !results->is_array() || results->size() != 3) {
    throw ParseError(src, line, "field 'verdict.scenario_results' must be an array of 3 entries");
  }
  for (std::size_t k = 0; k < 3; ++k) {
    const json& s = (*results)[k];
    if (!s.is_object() || !s.contains("matched") || !s["matched"].is_boolean()) {
      throw ParseError(src, line, "field 'verdict.scenario_results[" + std::to_string(k) + "]' is malformed");
    }
    out.scenario_results[k].designated = s.value("designated", std::string{});
    out.scenario_results[k].chosen = s.value("chosen", std::string{});
    out.scenario_results[k].matched = s["matched"].get<bool>();
  }
  return out;
}

}  // namespace

TripletFamily family_from_json(const json& j, const std::string& src, std::size_t line) {
  if (!j.is_object()) throw ParseError(src, line, "record must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!kFamilyKeys.contains(key)) throw ParseError(src, line, "unknown field '" + key + "'");
  }
  const std::string schema = require_string(j, "schema", src, line);
  if (schema != kCorpusSchema) {
    throw ParseError(src, line, "field 'schema' is '" + schema + "', expected '" + std::string(kCorpusSchema) + "'");
  }
  TripletFamily f;
  f.id = require_string(j, "id", src, line);
  f.source = j.contains("source") ? require_string(j, "source", src, line) : std::string{};
  f.instruction_pos = require_string(j, "instruction_pos", src, line);
  f.query_pos = require_string(j, "query_pos", src, line);
  f.passage_pos = require_string(j, "passage_pos", src, line);
  f.instruction_neg = optional_string(j, "instruction_neg", src, line);
  f.query_neg = optional_string(j, "query_neg", src, line);
  f.passage_neg1 = optional_string(j, "passage_neg1", src, line);
  f.passage_neg2 = optional_string(j, "passage_neg2", src, line);
  if (auto it = j.find("verdict"); it != j.end() && !it->is_null()) f.verdict = verdict_from_json(*it, src, line);
  return f;
}

Corpus parse_corpus(std::string_view text, const std::string& source) {
  Corpus out;
  std::set<std::string, std::less<>> ids;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    ++line_no;
    const std::string_view line = text.substr(start, end - start);
    start = end + 1;
    if (trim(line).empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(source, line_no, std::string("invalid JSON: ") + e.what());
    }
    TripletFamily f = family_from_json(j, source, line_no);
    if (!ids.insert(f.id).second) throw ParseError(source, line_no, "duplicate id '" + f.id + "'");
    out.push_back(std::move(f));
  }
  return out;
}

Corpus load_corpus(const std::string& path) { return parse_corpus(read_file(path), path); }

std::string serialize_corpus(const Corpus& corpus) {
  std::string out;
  for (const auto& f : corpus) {
    out += to_json_line(f);
    out.push_back('\n');
  }
  return out;
}

void save_corpus(const Corpus& corpus, const std::string& path) {
  write_file_atomic(path, serialize_corpus(corpus));
}

std::vector<Violation> validate_family(const TripletFamily& f) {
  std::vector<Violation> out;
  auto require_text = [&](const std::string& value, const char* field) {
    if (trim(value).empty()) out.push_back({field, "must be non-empty after trimming"});
  };
  require_text(f.id, "id");
  require_text(f.instruction_pos, "instruction_pos");
  require_text(f.query_pos, "query_pos");
  require_text(f.passage_pos, "passage_pos");

  // Seed query/passage and generated passages are exempt from the newline rule.
  auto no_newline = [&](const std::optional<std::string>& value, const char* field) {
    if (value && value->find('\n') != std::string::npos) {
      out.push_back({field, "synthetic text must not contain a newline"});
    }
  };
  no_newline(f.instruction_pos, "instruction_pos");
  no_newline(f.instruction_neg, "instruction_neg");
  no_newline(f.query_neg, "query_neg");

  if (f.verdict) {
    const auto& v = *f.verdict;
    const bool all_matched = std::all_of(v.scenario_results.begin(), v.scenario_results.end(),
                                         [](const ScenarioResult& s) { return s.matched; });
    if (v.retained != all_matched) {
      out.push_back({"verdict", "retained must equal all three scenarios matched"});
    }
    if (v.retained) {
      auto present = [&](const std::optional<std::string>& value, const char* field) {
        if (!value) out.push_back({field, "required when verdict.retained is true"});
        else if (trim(*value).empty()) out.push_back({field, "must be non-empty after trimming"});
      };
      present(f.instruction_neg, "instruction_neg");
      present(f.query_neg, "query_neg");
      present(f.passage_neg1, "passage_neg1");
      present(f.passage_neg2, "passage_neg2");
    }
  }
  return out;
}

namespace {

struct RoleAccumulator {
  std::set<std::string, std::less<>> texts;

  void add(const std::string& t) { texts.insert(t); }
  void add(const std::optional<std::string>& t) {
    if (t) texts.insert(*t);
  }
  double mean_tokens() const {
    if (texts.empty()) return 0.0;
    double total = 0.0;
    for (const auto& t : texts) total += static_cast<double>(tokenize(t).size());
    return total / static_cast<double>(texts.size());
  }
};

}  // namespace

CorpusStats corpus_stats(const Corpus& corpus) {
  RoleAccumulator instructions, queries, passages;
  for (const auto& f : corpus) {
    instructions.add(f.instruction_pos);
    instructions.add(f.instruction_neg);
    queries.add(f.query_pos);
    queries.add(f.query_neg);
    passages.add(f.passage_pos);
    passages.add(f.passage_neg1);
    passages.add(f.passage_neg2);
  }
  CorpusStats s;
  s.n_families = corpus.size();
  s.n_instructions = instructions.texts.size();
  s.n_queries = queries.texts.size();
  s.n_passages = passages.texts.size();
  s.avg_len_i = instructions.mean_tokens();
  s.avg_len_q = queries.mean_tokens();
  s.avg_len_p = passages.mean_tokens();
  return s;
}

ordered_json to_json(const CorpusStats& s) {
  ordered_json j;
  j["n_families"] = s.n_families;
  j["n_instructions"] = s.n_instructions;
  j["n_queries"] = s.n_queries;
  j["n_passages"] = s.n_passages;
  j["avg_len_i"] = s.avg_len_i;
  j["avg_len_q"] = s.avg_len_q;
  j["avg_len_p"] = s.avg_len_p;
  return j;
}

FlatCorpus flatten_training_tuples(const Corpus& corpus) {
  std::vector<const TripletFamily*> kept;
  FlatCorpus flat;
  for (const auto& f : corpus) {
    if ((f.verdict && !f.verdict->retained) || !f.has_negatives()) {
      ++flat.skipped;
      continue;
    }
    kept.push_back(&f);
  }
  std::sort(kept.begin(), kept.end(),
            [](const TripletFamily* a, const TripletFamily* b) { return a->id < b->id; });

  const std::size_t n = kept.size();
  for (const TripletFamily* f : kept) {
    flat.family_ids.push_back(f->id);
    flat.passages.push_back(f->passage_pos);
    flat.instructions.push_back(f->instruction_pos);
    flat.queries.push_back(f->query_pos);
  }
  for (std::size_t i = 0; i < n; ++i) {
    const TripletFamily& f = *kept[i];
    NegativeRows rows;
    rows.passage_neg1 = flat.passages.size();
    flat.passages.push_back(*f.passage_neg1);
    rows.passage_neg2 = flat.passages.size();
    flat.passages.push_back(*f.passage_neg2);
    rows.instruction_neg = flat.instructions.size();
    flat.instructions.push_back(*f.instruction_neg);
    rows.query_neg = flat.queries.size();
    flat.queries.push_back(*f.query_neg);
    flat.negatives.push_back(rows);
  }
  for (std::size_t i = 0; i < n; ++i) flat.tuples.push_back({i, i, i, true});
  for (std::size_t i = 0; i < n; ++i) {
    const NegativeRows& r = flat.negatives[i];
    flat.tuples.push_back({r.passage_neg1, r.instruction_neg, i, false});
    flat.tuples.push_back({r.passage_neg2, i, r.query_neg, false});
  }
  return flat;
}

std::string serialize_flat(const FlatCorpus& flat) {
  ordered_json j;
  j["family_ids"] = flat.family_ids;
  j["passages"] = flat.passages;
  j["instructions"] = flat.instructions;
  j["queries"] = flat.queries;
  ordered_json tuples = ordered_json::array();
  for (const auto& t : flat.tuples) {
    tuples.push_back({t.passage_idx, t.instruction_idx, t.query_idx, t.is_positive});
  }
  j["tuples"] = std::move(tuples);
  j["skipped"] = flat.skipped;
  return j.dump() + "\n";
}

}  // namespace instir
