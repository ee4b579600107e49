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

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "instir/embedding.hpp"
#include "instir/model.hpp"

namespace instir {

/// query_id -> passage_id -> graded relevance (>= 0).
struct Qrels {
  std::map<std::string, std::map<std::string, int>> judgments;

  /// Judgments for one query; empty when the query is unjudged.
  const std::map<std::string, int>& for_query(const std::string& query_id) const;
};

/// Tab-separated `query_id  passage_id  grade`, one judgment per line.
Qrels parse_qrels(std::string_view text, const std::string& source = "<memory>");

struct EvalQuery {
  std::string query_id;
  std::string query;
  std::string instruction_og;
  std::string instruction_new;
};

struct PoolPassage {
  std::string passage_id;
  std::string text;
};

std::vector<EvalQuery> parse_queries(std::string_view text, const std::string& source = "<memory>");
std::vector<PoolPassage> parse_pool(std::string_view text, const std::string& source = "<memory>");

/// Entries sorted by descending score, ties by ascending passage id.
struct RankedRun {
  std::string query_id;
  std::vector<std::pair<std::string, double>> entries;

  /// Throws PreconditionError on a duplicate id or a broken ordering.
  void validate() const;
};

/// Sorts the scored passages into a run. Duplicate ids are rejected.
RankedRun make_run(std::string query_id, std::vector<std::pair<std::string, double>> scored);

/// Scores every pool passage against (instruction, query) with `model`.
RankedRun rank_passages(const RetrieverModel& model, std::string_view instruction, std::string_view query,
                        const std::vector<PoolPassage>& pool, std::string query_id = {});

/// 1-based rank of the first passage with grade > 0; 0 when there is none.
std::size_t first_relevant_rank(const RankedRun& run, const std::map<std::string, int>& grades);

/// Mean of precision@r over the ranks r of relevant passages, divided by the
/// number of relevant judgments. nullopt when the query has no relevant passage.
std::optional<double> average_precision(const RankedRun& run, const std::map<std::string, int>& grades);

/// Linear gain; 0 when nothing is relevant. Throws PreconditionError for k = 0.
double ndcg_at_k(const RankedRun& run, const std::map<std::string, int>& grades, std::size_t k);

/// R_og/R_new - 1 when R_og > R_new, else 1 - R_new/R_og. Ranks are 1-based.
double pmrr_pair(std::size_t rank_og, std::size_t rank_new);

struct PairedRun {
  std::string query_id;
  RankedRun run_og;
  RankedRun run_new;
};

/// Mean pmrr_pair over pairs whose runs both contain a relevant passage;
/// nullopt when every pair is excluded.
std::optional<double> p_mrr(const std::vector<PairedRun>& pairs, const Qrels& qrels);

struct EvalDataset {
  std::vector<EvalQuery> queries;
  std::vector<PoolPassage> pool;
  Qrels qrels;
  /// Optional manifest.json; "aggregate" maps metric names to weights.
  nlohmann::json manifest;
  std::string fingerprint;

  /// Throws PreconditionError for an empty dataset or dangling ids.
  void validate() const;
};

/// Reads queries.jsonl, pool.jsonl, qrels.tsv and an optional manifest.json.
EvalDataset load_dataset(const std::string& dir);

struct EvalConfig {
  std::size_t k = 5;
  /// Score relevance under the new instruction; MAP and nDCG come from run_new.
  bool use_new_instruction = true;
};

struct QueryMetrics {
  std::string query_id;
  std::optional<double> ap;
  double ndcg = 0.0;
  std::size_t rank_og = 0;
  std::size_t rank_new = 0;
  std::optional<double> pmrr;
};

struct MetricReport {
  std::size_t n_queries = 0;
  std::size_t n_excluded = 0;
  std::size_t k = 5;
  double map = 0.0;
  double ndcg = 0.0;
  double p_mrr = 0.0;
  std::optional<double> aggregate;
  std::vector<QueryMetrics> per_query;
  nlohmann::ordered_json fingerprints = nlohmann::ordered_json::object();

  nlohmann::ordered_json to_json() const;
  /// Aligned columns: one row per query, then the means.
  std::string to_text() const;
};

MetricReport evaluate(const RetrieverModel& model, const EvalDataset& dataset, const EvalConfig& cfg = {});

/// load_dataset + evaluate; writes report.json and report.txt into out_dir
/// when it is non-empty.
MetricReport evaluate_suite(const RetrieverModel& model, const std::string& dataset_dir, const EvalConfig& cfg,
                            const std::string& out_dir = {});

/// Stable identity of a model: fusion fingerprint plus provider fingerprints.
nlohmann::ordered_json model_fingerprint(const RetrieverModel& model);

}  // namespace instir
