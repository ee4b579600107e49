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

#include "instir/synth.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "http.hpp"
#include "instir/log.hpp"
#include "instir/util.hpp"

namespace instir {

using json = nlohmann::json;

namespace {

bool is_slot_char(char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_';
}

/// Calls `on_slot(begin, end, name)` for each `{name}` occurrence.
template <typename F>
void scan_slots(std::string_view body, F on_slot) {
  for (std::size_t i = 0; i < body.size(); ++i) {
    if (body[i] != '{') continue;
    std::size_t j = i + 1;
    while (j < body.size() && is_slot_char(body[j])) ++j;
    if (j > i + 1 && j < body.size() && body[j] == '}') {
      on_slot(i, j + 1, std::string(body.substr(i + 1, j - i - 1)));
      i = j;
    }
  }
}

std::vector<std::string> split_lines(std::string_view text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t nl = text.find('\n', start);
    if (nl == std::string_view::npos) nl = text.size();
    std::string line(text.substr(start, nl - start));
    if (!line.empty() && line.back() == '\r') line.pop_back();
    out.push_back(std::move(line));
    start = nl + 1;
  }
  return out;
}

/// Index of the first line whose content starts with "<label>:", or npos.
std::size_t find_label(const std::vector<std::string>& lines, std::string_view label, std::string& rest) {
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string_view line = lines[i];
    const std::size_t lead = line.find_first_not_of(" \t");
    if (lead == std::string_view::npos) continue;
    const std::string_view body = line.substr(lead);
    if (body.size() > label.size() && starts_with(body, label) && body[label.size()] == ':') {
      rest = std::string(body.substr(label.size() + 1));
      return i;
    }
  }
  return std::string::npos;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string ask(ChatClient& client, std::string_view task_name, const std::string& family_id,
                const std::string& prompt) {
  return client.complete(ChatRequest{std::string(task_name), family_id, prompt});
}

std::string same_key(std::string_view s) { return casefold(trim(s)); }

}  // namespace

PromptTemplate PromptTemplate::from_body(std::string name, std::string body) {
  PromptTemplate t;
  t.name = std::move(name);
  t.body = std::move(body);
  scan_slots(t.body, [&](std::size_t, std::size_t, std::string slot) { t.required_slots.insert(std::move(slot)); });
  return t;
}

std::string render_prompt(const PromptTemplate& t, const std::map<std::string, std::string>& slots) {
  for (const auto& name : t.required_slots) {
    if (!slots.count(name)) throw PreconditionError("prompt '" + t.name + "': missing slot '" + name + "'");
  }
  for (const auto& [name, value] : slots) {
    if (!t.required_slots.count(name)) throw PreconditionError("prompt '" + t.name + "': unknown slot '" + name + "'");
  }
  std::string out;
  std::size_t last = 0;
  scan_slots(t.body, [&](std::size_t begin, std::size_t end, const std::string& slot) {
    out.append(t.body, last, begin - last);
    out += slots.at(slot);
    last = end;
  });
  out.append(t.body, last, std::string::npos);
  return out;
}

std::string parse_labeled_line(std::string_view response, std::string_view label) {
  std::string rest;
  if (find_label(split_lines(response), label, rest) == std::string::npos) {
    throw ExtractionError("response has no '" + std::string(label) + ":' line", std::string(response));
  }
  return trim(rest);
}

std::string parse_labeled_block(std::string_view response, std::string_view label) {
  const auto lines = split_lines(response);
  std::string rest;
  const std::size_t at = find_label(lines, label, rest);
  if (at == std::string::npos) {
    throw ExtractionError("response has no '" + std::string(label) + ":' line", std::string(response));
  }
  for (std::size_t i = at + 1; i < lines.size(); ++i) rest += "\n" + lines[i];
  return trim(rest);
}

std::string rule_filter(std::string_view s) {
  const std::string out = trim(s.substr(0, s.find('\n')));
  if (out.empty()) throw FilterError("text is empty after newline truncation");
  return out;
}

void ChatClientConfig::validate() const {
  if (endpoint_url.empty()) throw ConfigError("chat client: endpoint_url is empty");
  if (max_parallel < 1) throw ConfigError("chat client: max_parallel must be >= 1");
  if (!(timeout_seconds > 0.0)) throw ConfigError("chat client: timeout must be > 0");
  if (max_attempts < 1) throw ConfigError("chat client: max_attempts must be >= 1");
  if (!(backoff_seconds >= 0.0)) throw ConfigError("chat client: backoff must be >= 0");
}

HttpChatClient::HttpChatClient(ChatClientConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  if (!cfg_.api_key_env.empty()) token_ = detail::require_env(cfg_.api_key_env);
}

std::string HttpChatClient::complete(const ChatRequest& request) {
  json body;
  body["model"] = cfg_.model_name;
  body["messages"] = json::array({{{"role", "user"}, {"content", request.prompt}}});
  body["temperature"] = cfg_.temperature;
  const std::string payload = body.dump();
  std::string last_error;
  for (int attempt = 1; attempt <= cfg_.max_attempts; ++attempt) {
    try {
      const auto res = detail::http_post_json(cfg_.endpoint_url, payload, token_, cfg_.timeout_seconds);
      if (res.status != 200) throw TransportError("chat service returned HTTP " + std::to_string(res.status));
      const json reply = json::parse(res.body);
      return reply.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const json::exception& e) {
      last_error = std::string("malformed chat response: ") + e.what();
    } catch (const TransportError& e) {
      last_error = e.what();
    }
    if (attempt < cfg_.max_attempts) {
      std::this_thread::sleep_for(std::chrono::duration<double>(cfg_.backoff_seconds * attempt));
    }
  }
  throw TransportError("chat request " + request.task + " for " + request.family_id + " failed after " +
                       std::to_string(cfg_.max_attempts) + " attempts: " + last_error);
}

ScriptedChatClient::ScriptedChatClient(std::map<std::pair<std::string, std::string>, Entry> responses,
                                       std::string model)
    : responses_(std::move(responses)), model_(std::move(model)) {}

ScriptedChatClient ScriptedChatClient::parse(std::string_view text, const std::string& source) {
  std::map<std::pair<std::string, std::string>, Entry> responses;
  std::size_t line_no = 0;
  for (const auto& line : split_lines(text)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      const json j = json::parse(line);
      auto key = std::make_pair(j.at("task").get<std::string>(), j.at("family_id").get<std::string>());
      if (responses.count(key)) throw ParseError(source, line_no, "duplicate (task, family_id)");
      Entry e;
      if (j.contains("choose_passage")) {
        e.choose_passage = j.at("choose_passage").get<std::string>();
      } else {
        e.response = j.at("response").get<std::string>();
      }
      responses[std::move(key)] = std::move(e);
    } catch (const json::exception& e) {
      throw ParseError(source, line_no, e.what());
    }
  }
  return ScriptedChatClient(std::move(responses));
}

ScriptedChatClient ScriptedChatClient::load(const std::string& path) { return parse(read_file(path), path); }

std::string ScriptedChatClient::complete(const ChatRequest& request) {
  auto it = responses_.find({request.task, request.family_id});
  if (it == responses_.end()) it = responses_.find({request.task, "*"});
  if (it == responses_.end()) {
    throw TransportError("no scripted response for (" + request.task + ", " + request.family_id + ")");
  }
  if (!it->second.choose_passage) return it->second.response;
  for (const auto& line : split_lines(request.prompt)) {
    if (line.size() >= 4 && line[0] == '[' && line[2] == ']' && line[3] == ' ' &&
        std::string_view(line).substr(4) == *it->second.choose_passage) {
      return std::string(1, line[1]);
    }
  }
  throw TransportError("scripted passage not shown for (" + request.task + ", " + request.family_id + ")");
}

std::vector<SeedPair> parse_seed_pairs(std::string_view text, const std::string& source) {
  std::vector<SeedPair> out;
  std::set<std::string> ids;
  std::size_t line_no = 0;
  for (const auto& line : split_lines(text)) {
    ++line_no;
    if (trim(line).empty()) continue;
    SeedPair p;
    try {
      const json j = json::parse(line);
      p.id = j.at("id").get<std::string>();
      p.query = j.at("query").get<std::string>();
      p.passage = j.at("passage").get<std::string>();
    } catch (const json::exception& e) {
      throw ParseError(source, line_no, e.what());
    }
    if (p.id.empty() || trim(p.query).empty() || trim(p.passage).empty()) {
      throw ParseError(source, line_no, "id, query and passage must be non-empty");
    }
    if (!ids.insert(p.id).second) throw ParseError(source, line_no, "duplicate id '" + p.id + "'");
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<SeedPair> load_seed_pairs(const std::string& path) { return parse_seed_pairs(read_file(path), path); }

std::string generate_instruction(const SeedPair& seed, ChatClient& client) {
  const std::string prompt =
      render_prompt(instruction_generation_template(), {{"document", seed.passage}, {"query", seed.query}});
  return rule_filter(parse_labeled_line(ask(client, task::kInstructionGeneration, seed.id, prompt), "Instruction"));
}

void poison_family(TripletFamily& f, ChatClient& client) {
  if (trim(f.instruction_pos).empty()) throw PreconditionError("poison_family: " + f.id + " has no instruction");
  const std::map<std::string, std::string> base = {
      {"document", f.passage_pos}, {"query_positive", f.query_pos}, {"instruction_positive", f.instruction_pos}};
  const std::string i_neg = rule_filter(parse_labeled_line(
      ask(client, task::kInstructionSynthesis, f.id, render_prompt(instruction_synthesis_template(), base)),
      "Instruction"));
  const std::string q_neg = rule_filter(parse_labeled_line(
      ask(client, task::kQuerySynthesis, f.id, render_prompt(query_synthesis_template(), base)), "Query"));
  if (same_key(i_neg) == same_key(f.instruction_pos)) {
    throw NoOpPoisonError("poisoned instruction equals the original for " + f.id);
  }
  if (same_key(q_neg) == same_key(f.query_pos)) throw NoOpPoisonError("poisoned query equals the original for " + f.id);

  auto passage = [&](std::string_view task_name, const std::string& instr, const std::string& query) {
    const std::string prompt = render_prompt(passage_synthesis_template(), {{"instruction", instr}, {"query", query}});
    std::string p = parse_labeled_block(ask(client, task_name, f.id, prompt), "Passage");
    if (p.empty()) throw FilterError("synthesized passage is empty for " + f.id);
    return p;
  };
  const std::string p1 = passage(task::kPassageNeg1, i_neg, f.query_pos);
  const std::string p2 = passage(task::kPassageNeg2, f.instruction_pos, q_neg);
  f.instruction_neg = i_neg;
  f.query_neg = q_neg;
  f.passage_neg1 = p1;
  f.passage_neg2 = p2;
}

JudgePresentation present_scenario(const TripletFamily& f, int scenario, const std::vector<std::string>& distractors,
                                   std::uint64_t seed) {
  if (!f.has_negatives()) throw PreconditionError("judge: family " + f.id + " lacks negatives");
  if (scenario < 0 || scenario > 2) throw PreconditionError("judge: scenario must be 0, 1 or 2");
  std::vector<std::pair<std::string, std::string>> candidates = {
      {"P+", f.passage_pos}, {"P1-", *f.passage_neg1}, {"P2-", *f.passage_neg2}};
  for (std::size_t d = 0; d < distractors.size(); ++d) candidates.emplace_back("D" + std::to_string(d), distractors[d]);
  if (candidates.size() > 26) throw PreconditionError("judge: more than 26 candidates");

  Rng rng(mix64(fnv1a64(f.id) ^ seed ^ (0x6a75646765ULL + static_cast<std::uint64_t>(scenario))));
  rng.shuffle(candidates);

  static constexpr const char* kDesignated[3] = {"P+", "P1-", "P2-"};
  const std::string& instr = scenario == 1 ? *f.instruction_neg : f.instruction_pos;
  const std::string& query = scenario == 2 ? *f.query_neg : f.query_pos;

  JudgePresentation out;
  out.designated = kDesignated[scenario];
  std::string listing;
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    const std::string label(1, static_cast<char>('A' + c));
    out.labels.push_back(label);
    out.ids.push_back(candidates[c].first);
    if (c) listing += "\n";
    listing += "[" + label + "] " + candidates[c].second;
  }
  out.prompt = render_prompt(judge_template(), {{"instruction", instr}, {"query", query}, {"passages", listing}});
  return out;
}

std::string parse_judge_label(std::string_view response, const std::vector<std::string>& labels) {
  auto word_char = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; };
  for (std::size_t i = 0; i < response.size(); ++i) {
    const char c = response[i];
    if (c < 'A' || c > 'Z') continue;
    if (i > 0 && word_char(response[i - 1])) continue;
    if (i + 1 < response.size() && word_char(response[i + 1])) continue;
    const std::string label(1, c);
    if (std::find(labels.begin(), labels.end(), label) != labels.end()) return label;
  }
  return {};
}

JudgeVerdict quality_check(const TripletFamily& f, ChatClient& judge, const std::vector<std::string>& distractors,
                           std::size_t k, std::uint64_t seed) {
  if (distractors.size() != k) {
    throw PreconditionError("judge: expected " + std::to_string(k) + " distractors, got " +
                            std::to_string(distractors.size()));
  }
  JudgeVerdict v;
  v.judge_model = judge.model_name();
  v.retained = true;
  for (int s = 0; s < 3; ++s) {
    const JudgePresentation p = present_scenario(f, s, distractors, seed);
    ScenarioResult& r = v.scenario_results[static_cast<std::size_t>(s)];
    r.designated = p.designated;
    const std::string label = parse_judge_label(ask(judge, task::kJudge[s], f.id, p.prompt), p.labels);
    if (!label.empty()) {
      const auto at = std::find(p.labels.begin(), p.labels.end(), label) - p.labels.begin();
      r.chosen = p.ids[static_cast<std::size_t>(at)];
    }
    r.matched = r.chosen == r.designated;
    v.retained = v.retained && r.matched;
  }
  return v;
}

std::vector<std::string> sample_distractors(const std::vector<SeedPair>& seeds, std::size_t self, std::size_t k,
                                            std::uint64_t seed) {
  if (self >= seeds.size()) throw PreconditionError("sample_distractors: index out of range");
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (i != self) pool.push_back(i);
  }
  Rng rng(mix64(fnv1a64(seeds[self].id) ^ seed ^ 0x64697374ULL));
  const std::size_t n = std::min(k, pool.size());
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + rng.below(pool.size() - i);
    std::swap(pool[i], pool[j]);
    out.push_back(seeds[pool[i]].passage);
  }
  return out;
}

nlohmann::ordered_json PipelineReport::to_json() const {
  nlohmann::ordered_json j;
  j["seeds"] = seeds;
  j["processed"] = processed;
  j["resumed"] = resumed;
  j["pending"] = pending;
  j["generated"] = generated;
  j["retained"] = retained;
  j["rejected_by_stage"] = nlohmann::ordered_json::object();
  for (const auto& [stage, n] : rejected_by_stage) j["rejected_by_stage"][stage] = n;
  j["retention_rate"] = generated ? static_cast<double>(retained) / static_cast<double>(generated) : 0.0;
  j["chat_requests"] = chat_requests;
  return j;
}

namespace {

class CountingClient final : public ChatClient {
 public:
  explicit CountingClient(ChatClient& inner) : inner_(inner) {}
  std::string complete(const ChatRequest& r) override {
    ++count;
    return inner_.complete(r);
  }
  std::string model_name() const override { return inner_.model_name(); }
  std::atomic<std::size_t> count{0};

 private:
  ChatClient& inner_;
};

/// Final state of one family, as stored in results.jsonl.
struct Outcome {
  std::string family_id;
  bool retained = false;
  bool generated = false;
  std::string stage;  // where it stopped: "done" when retained
  std::string error;
  std::optional<TripletFamily> family;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["family_id"] = family_id;
    j["outcome"] = retained ? "retained" : "rejected";
    j["stage"] = stage;
    j["generated"] = generated;
    if (!error.empty()) j["error"] = error;
    if (family) j["family"] = instir::to_json(*family);
    return j;
  }

  static Outcome from_json(const json& j, const std::string& source, std::size_t line) {
    Outcome o;
    o.family_id = j.at("family_id").get<std::string>();
    o.retained = j.at("outcome").get<std::string>() == "retained";
    o.stage = j.at("stage").get<std::string>();
    o.generated = j.at("generated").get<bool>();
    if (j.contains("error")) o.error = j.at("error").get<std::string>();
    if (j.contains("family")) o.family = family_from_json(j.at("family"), source, line);
    return o;
  }
};

}  // namespace

PipelineResult run_pipeline(const std::vector<SeedPair>& seeds, ChatClient& generator, ChatClient& judge,
                            const PipelineConfig& cfg) {
  if (cfg.max_parallel < 1) throw ConfigError("pipeline: max_parallel must be >= 1");
  std::set<std::string> seed_ids;
  for (const auto& s : seeds) {
    if (!seed_ids.insert(s.id).second) throw PreconditionError("pipeline: duplicate seed id '" + s.id + "'");
  }

  std::map<std::string, Outcome> done;
  std::string journal_path, results_path, rejects_path;
  if (!cfg.work_dir.empty()) {
    std::filesystem::create_directories(cfg.work_dir);
    journal_path = cfg.work_dir + "/journal.jsonl";
    results_path = cfg.work_dir + "/results.jsonl";
    rejects_path = cfg.work_dir + "/rejects.jsonl";
    if (cfg.resume && std::filesystem::exists(results_path)) {
      std::size_t line_no = 0;
      for (const auto& line : split_lines(read_file(results_path))) {
        ++line_no;
        if (trim(line).empty()) continue;
        try {
          Outcome o = Outcome::from_json(json::parse(line), results_path, line_no);
          done[o.family_id] = std::move(o);
        } catch (const json::exception& e) {
          // A torn final line from an interrupted run is dropped; that family is redone.
          log_warn("results_line_dropped", {{"file", results_path}, {"line", line_no}, {"error", e.what()}});
        }
      }
    } else {
      for (const auto* p : {&journal_path, &results_path, &rejects_path}) write_file_atomic(*p, "");
    }
  }

  std::vector<std::size_t> todo;
  std::size_t resumed = 0;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (done.count(seeds[i].id)) {
      ++resumed;
    } else {
      todo.push_back(i);
    }
  }
  const std::size_t pending_total = todo.size();
  if (cfg.max_families > 0 && todo.size() > cfg.max_families) todo.resize(cfg.max_families);

  CountingClient gen(generator);
  CountingClient jud(judge);
  std::mutex mu;
  std::ofstream journal, results, rejects;
  if (!cfg.work_dir.empty()) {
    journal.open(journal_path, std::ios::app | std::ios::binary);
    results.open(results_path, std::ios::app | std::ios::binary);
    rejects.open(rejects_path, std::ios::app | std::ios::binary);
  }
  auto journal_event = [&](const std::string& id, const std::string& stage, const std::string& status) {
    if (cfg.work_dir.empty()) return;
    nlohmann::ordered_json j;
    j["family_id"] = id;
    j["stage"] = stage;
    j["status"] = status;
    j["timestamp"] = utc_timestamp();
    std::lock_guard lock(mu);
    journal << j.dump() << '\n' << std::flush;
  };

  auto process = [&](std::size_t idx) {
    const SeedPair& seed = seeds[idx];
    Outcome o;
    o.family_id = seed.id;
    TripletFamily f;
    f.id = seed.id;
    f.query_pos = seed.query;
    f.passage_pos = seed.passage;
    f.source = cfg.source;
    std::string stage = "instruction";
    try {
      f.instruction_pos = generate_instruction(seed, gen);
      journal_event(f.id, stage, "ok");
      stage = "poison";
      poison_family(f, gen);
      journal_event(f.id, stage, "ok");
      o.generated = true;
      stage = "judge";
      const auto distractors = sample_distractors(seeds, idx, cfg.distractors, cfg.seed);
      f.verdict = quality_check(f, jud, distractors, distractors.size(), cfg.seed);
      journal_event(f.id, stage, f.verdict->retained ? "ok" : "rejected");
      if (f.verdict->retained) {
        stage = "validate";
        const auto violations = validate_family(f);
        if (!violations.empty()) throw PreconditionError(violations.front().field + ": " + violations.front().rule);
        o.retained = true;
        stage = "done";
      }
      o.stage = stage;
      o.family = f;
    } catch (const std::exception& e) {
      journal_event(f.id, stage, "failed");
      o.stage = stage;
      o.error = e.what();
      if (const auto* ex = dynamic_cast<const ExtractionError*>(&e)) o.error += " | raw: " + ex->raw();
      if (o.generated) o.family = f;
    }
    std::lock_guard lock(mu);
    if (!cfg.work_dir.empty()) {
      results << o.to_json().dump() << '\n' << std::flush;
      if (!o.retained) rejects << o.to_json().dump() << '\n' << std::flush;
    }
    done[o.family_id] = std::move(o);
  };

  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> processed{0};
  auto worker = [&] {
    for (std::size_t k = next++; k < todo.size(); k = next++) {
      if (cfg.stop && cfg.stop->load()) break;
      process(todo[k]);
      ++processed;
    }
  };
  const std::size_t n_threads = std::min(cfg.max_parallel, std::max<std::size_t>(todo.size(), 1));
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t t = 0; t < n_threads; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }

  PipelineResult out;
  out.report.seeds = seeds.size();
  out.report.resumed = resumed;
  out.report.processed = processed.load();
  out.report.pending = pending_total - processed.load();
  out.report.chat_requests = gen.count + jud.count;
  for (const auto& [id, o] : done) {
    if (!seed_ids.count(id)) continue;
    if (o.generated) ++out.report.generated;
    if (o.retained) {
      ++out.report.retained;
      out.corpus.push_back(*o.family);
    } else {
      ++out.report.rejected_by_stage[o.stage];
    }
  }
  return out;
}

}  // namespace instir
