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

#include <doctest.h>

#include <atomic>
#include <cstdlib>

#include "instir/error.hpp"
#include "instir/log.hpp"
#include "instir/synth.hpp"
#include "instir/testbed.hpp"
#include "instir/util.hpp"
#include "mock_server.hpp"
#include "support.hpp"

using namespace instir;
using nlohmann::json;

namespace {

struct QuietLogs {
  QuietLogs() { set_log_level(LogLevel::kError); }
  ~QuietLogs() { set_log_level(LogLevel::kInfo); }
};

SeedPair seed_pair() { return {"s1", "is oatmeal healthy", "Oatmeal provides fiber and protein."}; }

std::map<std::pair<std::string, std::string>, ScriptedChatClient::Entry> four_calls(const std::string& i_neg) {
  std::map<std::pair<std::string, std::string>, ScriptedChatClient::Entry> r;
  r[{"instruction_generation", "s1"}] = {"Instruction: focus on nutrition facts", std::nullopt};
  r[{"instruction_synthesis", "s1"}] = {"Here you go.\nInstruction: " + i_neg + "\n", std::nullopt};
  r[{"query_synthesis", "s1"}] = {"Query: how long to cook oatmeal\nextra words", std::nullopt};
  r[{"passage_neg1", "s1"}] = {"Passage: Oatmeal cooks in five minutes.\nStir often.", std::nullopt};
  r[{"passage_neg2", "s1"}] = {"Passage: Steel cut oats take thirty minutes.", std::nullopt};
  return r;
}

WorldConfig small_world(std::size_t train) {
  WorldConfig wc;
  wc.train_families = train;
  wc.eval_families = 5;
  wc.seed = 11;
  return wc;
}

}  // namespace

TEST_CASE("render_prompt") {
  const PromptTemplate t = PromptTemplate::from_body("t", "Q: {q}");
  CHECK(render_prompt(t, {{"q", "x"}}) == "Q: x");
  CHECK_THROWS_AS(render_prompt(t, {}), PreconditionError);
  CHECK_THROWS_AS(render_prompt(t, {{"q", "x"}, {"z", "y"}}), PreconditionError);
}

TEST_CASE("bundled templates") {
  const std::map<std::string, std::string> slots = {
      {"document", "DOC"}, {"query_positive", "QP"}, {"instruction_positive", "IP"}};
  const std::string q = render_prompt(query_synthesis_template(), slots);
  CHECK(q.find("Query: <your new query>") != std::string::npos);
  CHECK(q.find("DOC") != std::string::npos);
  CHECK(q.find("{document}") == std::string::npos);
  const std::string i = render_prompt(instruction_synthesis_template(), slots);
  CHECK(i.find("Instruction: <your new instruction>") != std::string::npos);
  CHECK(instruction_generation_template().required_slots == std::set<std::string>{"document", "query"});
  CHECK(passage_synthesis_template().required_slots == std::set<std::string>{"instruction", "query"});
  CHECK(judge_template().required_slots == std::set<std::string>{"instruction", "passages", "query"});
}

TEST_CASE("labeled output extraction") {
  CHECK(parse_labeled_line("Query: find X\nextra", "Query") == "find X");
  CHECK(parse_labeled_line("preamble\nInstruction: do Y", "Instruction") == "do Y");
  CHECK(parse_labeled_block("Passage: one\ntwo\n", "Passage") == "one\ntwo");
  try {
    parse_labeled_line("no label here", "Query");
    FAIL("expected an extraction error");
  } catch (const ExtractionError& e) {
    CHECK(e.raw() == "no label here");
  }
}

TEST_CASE("rule_filter") {
  CHECK(rule_filter("keep this\ndrop this") == "keep this");
  CHECK(rule_filter("no newline") == "no newline");
  CHECK_THROWS_AS(rule_filter("\nonly tail"), FilterError);
  for (const char* s : {"a\nb", "  x y \n z", "plain"}) CHECK(rule_filter(rule_filter(s)) == rule_filter(s));
}

TEST_CASE("instruction generation") {
  ScriptedChatClient ok(four_calls("x"));
  CHECK(generate_instruction(seed_pair(), ok) == "focus on nutrition facts");
  ScriptedChatClient unlabeled({{{"instruction_generation", "*"}, {"I would focus on facts", std::nullopt}}});
  CHECK_THROWS_AS(generate_instruction(seed_pair(), unlabeled), ExtractionError);
}

TEST_CASE("poisoning fills the family with the scripted strings") {
  ScriptedChatClient client(four_calls("focus on cooking times"));
  TripletFamily f;
  f.id = "s1";
  f.query_pos = seed_pair().query;
  f.passage_pos = seed_pair().passage;
  f.instruction_pos = generate_instruction(seed_pair(), client);
  poison_family(f, client);
  CHECK(*f.instruction_neg == "focus on cooking times");
  CHECK(*f.query_neg == "how long to cook oatmeal");
  CHECK(*f.passage_neg1 == "Oatmeal cooks in five minutes.\nStir often.");
  CHECK(*f.passage_neg2 == "Steel cut oats take thirty minutes.");
}

TEST_CASE("a poisoned instruction equal to the original is rejected") {
  ScriptedChatClient client(four_calls("  Focus on nutrition FACTS "));
  TripletFamily f;
  f.id = "s1";
  f.query_pos = seed_pair().query;
  f.passage_pos = seed_pair().passage;
  f.instruction_pos = "focus on nutrition facts";
  CHECK_THROWS_AS(poison_family(f, client), NoOpPoisonError);
}

TEST_CASE("judge presentation and verdicts") {
  TripletFamily f;
  f.id = "fam";
  f.instruction_pos = "I+";
  f.query_pos = "Q+";
  f.passage_pos = "passage positive";
  f.instruction_neg = "I-";
  f.query_neg = "Q-";
  f.passage_neg1 = "passage one";
  f.passage_neg2 = "passage two";
  const std::vector<std::string> distractors{"d zero", "d one", "d two"};

  const JudgePresentation p = present_scenario(f, 1, distractors, 5);
  CHECK(p.labels.size() == 6);
  CHECK(p.designated == "P1-");
  CHECK(p.prompt.find("I-") != std::string::npos);
  CHECK(p.prompt == present_scenario(f, 1, distractors, 5).prompt);
  CHECK(parse_judge_label("The answer is B.", p.labels) == "B");
  CHECK(parse_judge_label("Answer: [C]", p.labels) == "C");
  CHECK(parse_judge_label("none of them", p.labels).empty());

  std::map<std::pair<std::string, std::string>, ScriptedChatClient::Entry> script;
  script[{"judge_s1", "*"}] = {"", std::string("passage positive")};
  script[{"judge_s2", "*"}] = {"", std::string("passage one")};
  script[{"judge_s3", "*"}] = {"", std::string("passage two")};
  ScriptedChatClient good(script);
  const JudgeVerdict v = quality_check(f, good, distractors, 3, 5);
  CHECK(v.retained);
  CHECK(v.scenario_results[2].chosen == "P2-");

  script[{"judge_s2", "*"}] = {"", std::string("passage positive")};
  ScriptedChatClient bad(script);
  const JudgeVerdict w = quality_check(f, bad, distractors, 3, 5);
  CHECK_FALSE(w.retained);
  CHECK(w.scenario_results[0].matched);
  CHECK_FALSE(w.scenario_results[1].matched);
  CHECK(w.scenario_results[1].chosen == "P+");
  CHECK(w.scenario_results[2].matched);

  CHECK_THROWS_AS(quality_check(f, good, distractors, 4, 5), PreconditionError);
}

TEST_CASE("distractors are seeded and never the family's own passage") {
  std::vector<SeedPair> seeds;
  for (int i = 0; i < 10; ++i) seeds.push_back({"id" + std::to_string(i), "q", "p" + std::to_string(i)});
  const auto a = sample_distractors(seeds, 4, 3, 1);
  CHECK(a.size() == 3);
  CHECK(a == sample_distractors(seeds, 4, 3, 1));
  CHECK(std::find(a.begin(), a.end(), "p4") == a.end());
  CHECK(sample_distractors(seeds, 0, 20, 1).size() == 9);
}

TEST_CASE("seed pair parsing") {
  const auto seeds = parse_seed_pairs("{\"id\":\"a\",\"query\":\"q\",\"passage\":\"p\"}\n\n");
  REQUIRE(seeds.size() == 1);
  CHECK(seeds[0].passage == "p");
  CHECK_THROWS_AS(parse_seed_pairs("{\"id\":\"a\",\"query\":\"q\"}\n", "s.jsonl"), ParseError);
  CHECK_THROWS_AS(
      parse_seed_pairs("{\"id\":\"a\",\"query\":\"q\",\"passage\":\"p\"}\n{\"id\":\"a\",\"query\":\"q\",\"passage\":\"p\"}"),
      ParseError);
}

TEST_CASE("pipeline: all-pass run, resume no-op and empty input") {
  QuietLogs quiet;
  const SyntheticWorld world(small_world(10));
  auto gen = world.generator();
  auto judge = world.judge();
  testing::TempDir dir;
  PipelineConfig cfg;
  cfg.work_dir = dir.str();
  cfg.seed = 3;
  const PipelineResult r = run_pipeline(world.train_seeds(), *gen, *judge, cfg);
  CHECK(r.corpus.size() == 10);
  CHECK(r.report.retained == 10);
  CHECK(r.report.processed == 10);
  for (const auto& f : r.corpus) CHECK(validate_family(f).empty());

  cfg.resume = true;
  const PipelineResult again = run_pipeline(world.train_seeds(), *gen, *judge, cfg);
  CHECK(again.report.processed == 0);
  CHECK(again.report.resumed == 10);
  CHECK(again.report.chat_requests == 0);
  CHECK(serialize_corpus(again.corpus) == serialize_corpus(r.corpus));

  const PipelineResult none = run_pipeline({}, *gen, *judge, PipelineConfig{});
  CHECK(none.corpus.empty());
  CHECK(none.report.seeds == 0);
  CHECK(none.report.generated == 0);
}

TEST_CASE("pipeline: an interrupted run resumes to the uninterrupted result") {
  QuietLogs quiet;
  const SyntheticWorld world(small_world(12));
  auto gen = world.generator();
  auto judge = world.judge();
  testing::TempDir full, part;
  PipelineConfig cfg;
  cfg.seed = 4;
  cfg.max_parallel = 3;
  cfg.work_dir = full.str();
  const PipelineResult reference = run_pipeline(world.train_seeds(), *gen, *judge, cfg);

  cfg.work_dir = part.str();
  cfg.max_families = 5;
  const PipelineResult first = run_pipeline(world.train_seeds(), *gen, *judge, cfg);
  CHECK(first.report.processed == 5);
  CHECK(first.report.pending == 7);

  // Stop flag raised after a few generator calls.
  std::atomic<bool> stop{false};
  int calls = 0;
  FunctionChatClient stopping(
      [&](const ChatRequest& r) {
        if (++calls == 6) stop = true;
        return gen->complete(r);
      },
      "gen");
  cfg.max_families = 0;
  cfg.resume = true;
  cfg.max_parallel = 1;
  cfg.stop = &stop;
  const PipelineResult second = run_pipeline(world.train_seeds(), stopping, *judge, cfg);
  CHECK(second.report.pending > 0);

  cfg.stop = nullptr;
  const PipelineResult last = run_pipeline(world.train_seeds(), *gen, *judge, cfg);
  CHECK(last.report.pending == 0);
  CHECK(serialize_corpus(last.corpus) == serialize_corpus(reference.corpus));
}

TEST_CASE("pipeline gate: perfect judge keeps all, scenario-2 failure keeps none") {
  QuietLogs quiet;
  const SyntheticWorld world(small_world(30));
  auto gen = world.generator();
  auto perfect = world.judge();
  CHECK(run_pipeline(world.train_seeds(), *gen, *perfect, PipelineConfig{}).report.retained == 30);
  WorldJudge failing;
  failing.fail_scenario = 1;
  auto fail = world.judge(failing);
  const PipelineResult r = run_pipeline(world.train_seeds(), *gen, *fail, PipelineConfig{});
  CHECK(r.report.retained == 0);
  CHECK(r.report.generated == 30);
  CHECK(r.corpus.empty());
}

TEST_CASE("pipeline: 85% judge accuracy retains about 0.85^3") {
  QuietLogs quiet;
  const SyntheticWorld world(small_world(100));
  auto gen = world.generator();
  WorldJudge noisy;
  noisy.accuracy = 0.85;
  noisy.seed = 5;
  auto judge = world.judge(noisy);
  const PipelineResult r = run_pipeline(world.train_seeds(), *gen, *judge, PipelineConfig{});
  const double rate = static_cast<double>(r.report.retained) / 100.0;
  CHECK(std::abs(rate - std::pow(0.85, 3)) <= 0.1);
}

TEST_CASE("pipeline records rejects with their stage") {
  QuietLogs quiet;
  std::vector<SeedPair> seeds{{"a", "q a", "p a"}, {"b", "q b", "p b"}};
  FunctionChatClient gen(
      [](const ChatRequest& r) -> std::string {
        if (r.family_id == "b" && r.task == "instruction_generation") return "no label";
        if (r.task == "instruction_generation") return "Instruction: keep it short";
        if (r.task == "instruction_synthesis") return "Instruction: keep it short";
        return "Query: other";
      },
      "gen");
  testing::TempDir dir;
  PipelineConfig cfg;
  cfg.work_dir = dir.str();
  const PipelineResult r = run_pipeline(seeds, gen, gen, cfg);
  CHECK(r.corpus.empty());
  CHECK(r.report.rejected_by_stage.at("instruction") == 1);
  CHECK(r.report.rejected_by_stage.at("poison") == 1);
  const std::string rejects = read_file(dir / "rejects.jsonl");
  CHECK(rejects.find("no label") != std::string::npos);
}

TEST_CASE("http chat client wire format, auth and retries") {
  testing::MockServer mock;
  std::vector<json> bodies;
  std::vector<std::string> auth;
  int failures_left = 1;
  mock.server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    if (failures_left-- > 0) {
      res.status = 500;
      return;
    }
    bodies.push_back(json::parse(req.body));
    auth.push_back(req.get_header_value("Authorization"));
    res.set_content(R"({"choices":[{"message":{"role":"assistant","content":"Instruction: be brief"}}]})",
                    "application/json");
  });
  mock.start();
  ::setenv("INSTIR_CHAT_TEST_KEY", "tok", 1);
  ChatClientConfig cfg;
  cfg.endpoint_url = mock.url("/v1/chat/completions");
  cfg.model_name = "gen-model";
  cfg.api_key_env = "INSTIR_CHAT_TEST_KEY";
  cfg.backoff_seconds = 0.0;
  HttpChatClient client(cfg);
  CHECK(client.complete({"instruction_generation", "x", "PROMPT"}) == "Instruction: be brief");
  REQUIRE(bodies.size() == 1);
  CHECK(bodies[0]["model"] == "gen-model");
  CHECK(bodies[0]["messages"][0]["role"] == "user");
  CHECK(bodies[0]["messages"][0]["content"] == "PROMPT");
  CHECK(auth[0] == "Bearer tok");

  cfg.api_key_env = "INSTIR_CHAT_KEY_NOT_SET";
  try {
    HttpChatClient missing(cfg);
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("INSTIR_CHAT_KEY_NOT_SET") != std::string::npos);
  }

  cfg.api_key_env.clear();
  cfg.endpoint_url = mock.url("/nowhere");
  cfg.max_attempts = 2;
  HttpChatClient lost(cfg);
  CHECK_THROWS_AS(lost.complete({"judge_s1", "x", "p"}), TransportError);
}
