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

#include <cmath>
#include <cstdlib>

#include "instir/error.hpp"
#include "instir/eval.hpp"
#include "instir/log.hpp"
#include "instir/util.hpp"
#include "golden.hpp"
#include "support.hpp"

using namespace instir;

namespace {

using Grades = std::map<std::string, int>;

/// Run over ids in the given order with descending scores.
RankedRun ranked(const std::vector<std::string>& ids, const std::string& qid = "q") {
  std::vector<std::pair<std::string, double>> scored;
  for (std::size_t i = 0; i < ids.size(); ++i) scored.emplace_back(ids[i], static_cast<double>(ids.size() - i));
  return make_run(qid, scored);
}

std::vector<std::string> docs(std::initializer_list<int> order) {
  std::vector<std::string> out;
  for (int d : order) out.push_back("d" + std::to_string(d));
  return out;
}

}  // namespace

TEST_CASE("ranking") {
  CHECK(ranked({"only"}).entries.front().first == "only");
  const RankedRun tie = make_run("q", {{"b", 0.5}, {"a", 0.5}, {"c", 0.9}});
  CHECK(tie.entries[0].first == "c");
  CHECK(tie.entries[1].first == "a");
  CHECK(tie.entries[2].first == "b");
  CHECK_THROWS_AS(make_run("q", {{"a", 1.0}, {"a", 0.5}}), PreconditionError);
  RankedRun broken = tie;
  std::swap(broken.entries[0], broken.entries[2]);
  CHECK_THROWS_AS(broken.validate(), PreconditionError);
}

TEST_CASE("average precision") {
  CHECK(*average_precision(ranked({"a", "b", "c"}), {{"a", 1}, {"b", 1}}) == 1.0);
  CHECK(std::abs(*average_precision(ranked({"a", "x", "b"}), {{"a", 1}, {"b", 1}}) - 0.8333) <= 1e-4);
  std::vector<std::string> ten;
  for (int i = 0; i < 10; ++i) ten.push_back("p" + std::to_string(i));
  CHECK(*average_precision(ranked(ten), {{"p9", 1}}) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK_FALSE(average_precision(ranked({"a", "b"}), {{"a", 0}}).has_value());
  // Relevant passages missing from the run still count in the denominator.
  CHECK(*average_precision(ranked({"a", "b"}), {{"a", 1}, {"zz", 1}}) == 0.5);
}

TEST_CASE("nDCG") {
  CHECK(ndcg_at_k(ranked({"a", "b", "c"}), {{"a", 1}}, 5) == 1.0);
  CHECK(std::abs(ndcg_at_k(ranked({"x", "y", "a"}), {{"a", 1}}, 5) - 0.5) <= 1e-12);
  const double expected = (1.0 + 1.0 / std::log2(5.0)) / (1.0 + 1.0 / std::log2(3.0));
  CHECK(std::abs(ndcg_at_k(ranked({"a", "x", "y", "b", "z"}), {{"a", 1}, {"b", 1}}, 5) - expected) <= 1e-12);
  CHECK(std::abs(expected - 0.8772) <= 1e-4);
  CHECK(ndcg_at_k(ranked({"a", "b"}), {}, 5) == 0.0);
  CHECK(ndcg_at_k(ranked({"x", "a"}), {{"a", 1}}, 1) == 0.0);
  // Linear gain: grade 2 at rank 2 against grade 1 at rank 1.
  const double graded = (1.0 + 2.0 / std::log2(3.0)) / (2.0 + 1.0 / std::log2(3.0));
  CHECK(std::abs(ndcg_at_k(ranked({"a", "b"}), {{"a", 1}, {"b", 2}}, 5) - graded) <= 1e-12);
}

TEST_CASE("pairwise p-MRR") {
  CHECK(pmrr_pair(3, 3) == 0.0);
  CHECK(pmrr_pair(4, 2) == 1.0);
  CHECK(pmrr_pair(2, 4) == -1.0);
  CHECK(pmrr_pair(3, 1) == 2.0);
}

TEST_CASE("p-MRR flips sign exactly when runs are swapped") {
  Rng rng(20);
  std::vector<PairedRun> pairs, swapped;
  Qrels qrels;
  for (int q = 0; q < 20; ++q) {
    const std::string qid = "q" + std::to_string(q);
    std::vector<std::string> ids;
    for (int p = 0; p < 8; ++p) ids.push_back("p" + std::to_string(p));
    auto og = ids, fresh = ids;
    rng.shuffle(og);
    rng.shuffle(fresh);
    qrels.judgments[qid][ids[rng.below(8)]] = 1;
    pairs.push_back({qid, ranked(og, qid), ranked(fresh, qid)});
    swapped.push_back({qid, ranked(fresh, qid), ranked(og, qid)});
  }
  const double a = *p_mrr(pairs, qrels);
  const double b = *p_mrr(swapped, qrels);
  CHECK(a == -b);
}

TEST_CASE("metrics depend on ranks only") {
  const Grades g{{"b", 1}, {"d", 2}};
  const RankedRun base = make_run("q", {{"a", 0.9}, {"b", 0.5}, {"c", 0.1}, {"d", -0.3}});
  const RankedRun warped =
      make_run("q", {{"a", std::exp(9.0)}, {"b", std::exp(5.0)}, {"c", std::exp(1.0)}, {"d", std::exp(-3.0)}});
  CHECK(*average_precision(base, g) == *average_precision(warped, g));
  CHECK(ndcg_at_k(base, g, 3) == ndcg_at_k(warped, g, 3));
  CHECK(first_relevant_rank(base, g) == 2);
  CHECK(first_relevant_rank(base, {}) == 0);
}

TEST_CASE("dataset parsing errors name file and line") {
  try {
    parse_qrels("q1\td1\t1\nq1\td2\n", "qrels.tsv");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
    CHECK(e.source() == "qrels.tsv");
  }
  CHECK_THROWS_AS(parse_qrels("q1\td1\t-1\n"), ParseError);
  CHECK_THROWS_AS(parse_qrels("q1\td1\t1\nq1\td1\t0\n"), ParseError);
  CHECK_THROWS_AS(parse_queries("{\"query_id\":\"a\",\"query\":\"q\"}\n"), ParseError);
  CHECK_THROWS_AS(parse_pool("{\"passage_id\":\"a\",\"text\":\"t\"}\n{\"passage_id\":\"a\",\"text\":\"u\"}\n"),
                  ParseError);
}

TEST_CASE("empty and dangling datasets are rejected") {
  EvalDataset empty;
  CHECK_THROWS_AS(empty.validate(), PreconditionError);
  EvalDataset dangling;
  dangling.queries = {{"q", "query", "i", "j"}};
  dangling.pool = {{"p", "text"}};
  dangling.qrels.judgments["q"]["missing"] = 1;
  CHECK_THROWS_AS(dangling.validate(), PreconditionError);
}

TEST_CASE("instructions that never change rankings give p-MRR of exactly zero") {
  set_log_level(LogLevel::kError);
  ProviderConfig pc;
  pc.dim = 16;
  const RetrieverModel m{make_encoders(pc), init_params(16, 1, "identity-noise", true), Interaction::kConcat};
  EvalDataset d;
  for (int q = 0; q < 4; ++q) {
    const std::string id = "q" + std::to_string(q);
    d.queries.push_back({id, "topic " + std::to_string(q), "same instruction", "same instruction"});
    d.pool.push_back({"p" + std::to_string(q), "topic " + std::to_string(q) + " text"});
    d.qrels.judgments[id]["p" + std::to_string(q)] = 1;
  }
  const MetricReport r = evaluate(m, d);
  CHECK(r.p_mrr == 0.0);
  CHECK(r.n_queries == 4);
  set_log_level(LogLevel::kInfo);
}

TEST_CASE("golden fixture") {
  testing::TempDir dir;
  const RetrieverModel m = testing::golden_model(dir / "store");
  EvalConfig cfg;
  cfg.k = 5;
  const MetricReport r = evaluate_suite(m, testing::data_path("golden"), cfg, dir.str());

  REQUIRE(r.per_query.size() == 5);
  const double ndcg_q2 = 1.5 / (1.0 + 1.0 / std::log2(3.0));
  const double ndcg_q4 = (1.0 + 1.0 / std::log2(5.0)) / (1.0 + 1.0 / std::log2(3.0));
  const double ndcg_q5 = 1.0 / std::log2(5.0);
  const double ap[5] = {1.0, 5.0 / 6.0, 1.0 / 3.0, 0.75, 0.25};
  const double ndcg[5] = {1.0, ndcg_q2, 0.5, ndcg_q4, ndcg_q5};
  const double pmrr[5] = {0.0, 1.0, 0.0, 0.0, -1.0};
  const std::size_t r_og[5] = {1, 2, 3, 1, 2};
  const std::size_t r_new[5] = {1, 1, 3, 1, 4};
  for (int q = 0; q < 5; ++q) {
    CAPTURE(q);
    CHECK(std::abs(*r.per_query[q].ap - ap[q]) <= 1e-12);
    CHECK(std::abs(r.per_query[q].ndcg - ndcg[q]) <= 1e-12);
    CHECK(*r.per_query[q].pmrr == pmrr[q]);
    CHECK(r.per_query[q].rank_og == r_og[q]);
    CHECK(r.per_query[q].rank_new == r_new[q]);
  }
  CHECK(std::abs(r.map - (1.0 + 5.0 / 6.0 + 1.0 / 3.0 + 0.75 + 0.25) / 5.0) <= 1e-12);
  CHECK(std::abs(r.ndcg - (1.0 + ndcg_q2 + 0.5 + ndcg_q4 + ndcg_q5) / 5.0) <= 1e-12);
  CHECK(r.p_mrr == 0.0);

  const std::string golden_path = testing::data_path("golden/report.json");
  if (std::getenv("INSTIR_WRITE_GOLDEN") != nullptr) write_file_atomic(golden_path, read_file(dir / "report.json"));
  CHECK(read_file(dir / "report.json") == read_file(golden_path));
  CHECK(read_file(dir / "report.txt").find("mean") != std::string::npos);
}
