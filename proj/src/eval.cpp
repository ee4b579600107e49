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

#include "instir/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>
#include <sstream>

#include "instir/error.hpp"
#include "instir/log.hpp"
#include "instir/util.hpp"

namespace instir {

using json = nlohmann::json;

namespace {

template <typename F>
void for_each_line(std::string_view text, F fn) {
  std::size_t start = 0;
  std::size_t line_no = 0;
  while (start < text.size()) {
    std::size_t nl = text.find('\n', start);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(start, nl - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    fn(++line_no, line);
    start = nl + 1;
  }
}

std::string required_string(const json& j, const char* key, const std::string& source, std::size_t line) {
  if (!j.contains(key) || !j.at(key).is_string()) {
    throw ParseError(source, line, std::string("missing string field '") + key + "'");
  }
  std::string v = j.at(key).get<std::string>();
  if (trim(v).empty()) throw ParseError(source, line, std::string("field '") + key + "' is empty");
  return v;
}

json parse_json_line(std::string_view line, const std::string& source, std::size_t line_no) {
  try {
    json j = json::parse(line);
    if (!j.is_object()) throw ParseError(source, line_no, "expected a JSON object");
    return j;
  } catch (const json::exception& e) {
    throw ParseError(source, line_no, e.what());
  }
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

}  // namespace

const std::map<std::string, int>& Qrels::for_query(const std::string& query_id) const {
  static const std::map<std::string, int> kEmpty;
  const auto it = judgments.find(query_id);
  return it == judgments.end() ? kEmpty : it->second;
}

Qrels parse_qrels(std::string_view text, const std::string& source) {
  Qrels q;
  for_each_line(text, [&](std::size_t line_no, std::string_view line) {
    if (trim(line).empty()) return;
    const auto fields = split(line, '\t');
    if (fields.size() != 3) throw ParseError(source, line_no, "expected query_id<TAB>passage_id<TAB>grade");
    const std::string qid = trim(fields[0]);
    const std::string pid = trim(fields[1]);
    const std::string g = trim(fields[2]);
    if (qid.empty() || pid.empty()) throw ParseError(source, line_no, "empty id");
    if (g.empty() || g.find_first_not_of("0123456789") != std::string::npos || g.size() > 9) {
      throw ParseError(source, line_no, "grade must be a non-negative integer, got '" + g + "'");
    }
    auto& row = q.judgments[qid];
    if (row.count(pid)) throw ParseError(source, line_no, "duplicate judgment for " + qid + "/" + pid);
    row[pid] = std::stoi(g);
  });
  return q;
}

std::vector<EvalQuery> parse_queries(std::string_view text, const std::string& source) {
  std::vector<EvalQuery> out;
  std::set<std::string> ids;
  for_each_line(text, [&](std::size_t line_no, std::string_view line) {
    if (trim(line).empty()) return;
    const json j = parse_json_line(line, source, line_no);
    EvalQuery q{required_string(j, "query_id", source, line_no), required_string(j, "query", source, line_no),
                required_string(j, "instruction_og", source, line_no),
                required_string(j, "instruction_new", source, line_no)};
    if (!ids.insert(q.query_id).second) throw ParseError(source, line_no, "duplicate query_id '" + q.query_id + "'");
    out.push_back(std::move(q));
  });
  return out;
}

std::vector<PoolPassage> parse_pool(std::string_view text, const std::string& source) {
  std::vector<PoolPassage> out;
  std::set<std::string> ids;
  for_each_line(text, [&](std::size_t line_no, std::string_view line) {
    if (trim(line).empty()) return;
    const json j = parse_json_line(line, source, line_no);
    PoolPassage p{required_string(j, "passage_id", source, line_no), required_string(j, "text", source, line_no)};
    if (!ids.insert(p.passage_id).second) {
      throw ParseError(source, line_no, "duplicate passage_id '" + p.passage_id + "'");
    }
    out.push_back(std::move(p));
  });
  return out;
}

void RankedRun::validate() const {
  std::set<std::string> seen;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (!seen.insert(entries[i].first).second) {
      throw PreconditionError("run " + query_id + ": duplicate passage id '" + entries[i].first + "'");
    }
    if (i > 0) {
      const auto& a = entries[i - 1];
      const auto& b = entries[i];
      if (a.second < b.second || (a.second == b.second && a.first > b.first)) {
        throw PreconditionError("run " + query_id + ": entries out of order at position " + std::to_string(i));
      }
    }
  }
}

RankedRun make_run(std::string query_id, std::vector<std::pair<std::string, double>> scored) {
  for (const auto& [id, s] : scored) {
    if (std::isnan(s)) throw NumericError("run " + query_id + ": NaN score for " + id);
  }
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  RankedRun run{std::move(query_id), std::move(scored)};
  run.validate();
  return run;
}

namespace {

std::vector<Vector> encode_pool(const RetrieverModel& model, const std::vector<PoolPassage>& pool) {
  std::vector<Vector> out;
  out.reserve(pool.size());
  for (const auto& p : pool) {
    try {
      out.push_back(model.encode_passage(p.text));
    } catch (const Error& e) {
      throw Error("encoding pool passage " + p.passage_id + ": " + e.what());
    }
  }
  return out;
}

RankedRun rank_encoded(const RetrieverModel& model, std::string_view instruction, std::string_view query,
                       const std::vector<PoolPassage>& pool, const std::vector<Vector>& vectors,
                       std::string query_id) {
  if (pool.empty()) throw PreconditionError("rank_passages: empty pool");
  Vector iq;
  try {
    iq = model.encode_iq(instruction, query);
  } catch (const Error& e) {
    throw Error("encoding query " + query_id + ": " + e.what());
  }
  std::vector<std::pair<std::string, double>> scored;
  scored.reserve(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) scored.emplace_back(pool[i].passage_id, vectors[i].dot(iq));
  return make_run(std::move(query_id), std::move(scored));
}

}  // namespace

RankedRun rank_passages(const RetrieverModel& model, std::string_view instruction, std::string_view query,
                        const std::vector<PoolPassage>& pool, std::string query_id) {
  if (pool.empty()) throw PreconditionError("rank_passages: empty pool");
  return rank_encoded(model, instruction, query, pool, encode_pool(model, pool), std::move(query_id));
}

std::size_t first_relevant_rank(const RankedRun& run, const std::map<std::string, int>& grades) {
  for (std::size_t i = 0; i < run.entries.size(); ++i) {
    const auto it = grades.find(run.entries[i].first);
    if (it != grades.end() && it->second > 0) return i + 1;
  }
  return 0;
}

std::optional<double> average_precision(const RankedRun& run, const std::map<std::string, int>& grades) {
  const auto n_rel = std::count_if(grades.begin(), grades.end(), [](const auto& g) { return g.second > 0; });
  if (n_rel == 0) return std::nullopt;
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < run.entries.size(); ++i) {
    const auto it = grades.find(run.entries[i].first);
    if (it != grades.end() && it->second > 0) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(i + 1);
    }
  }
  return sum / static_cast<double>(n_rel);
}

double ndcg_at_k(const RankedRun& run, const std::map<std::string, int>& grades, std::size_t k) {
  if (k == 0) throw PreconditionError("ndcg_at_k: k must be >= 1");
  double dcg = 0.0;
  for (std::size_t i = 0; i < std::min(k, run.entries.size()); ++i) {
    const auto it = grades.find(run.entries[i].first);
    if (it != grades.end() && it->second > 0) dcg += it->second / std::log2(static_cast<double>(i) + 2.0);
  }
  std::vector<int> ideal;
  for (const auto& [id, g] : grades) {
    if (g > 0) ideal.push_back(g);
  }
  std::sort(ideal.rbegin(), ideal.rend());
  double idcg = 0.0;
  for (std::size_t i = 0; i < std::min(k, ideal.size()); ++i) idcg += ideal[i] / std::log2(static_cast<double>(i) + 2.0);
  return idcg > 0.0 ? dcg / idcg : 0.0;
}

double pmrr_pair(std::size_t rank_og, std::size_t rank_new) {
  if (rank_og == 0 || rank_new == 0) throw PreconditionError("pmrr_pair: ranks are 1-based");
  const double og = static_cast<double>(rank_og);
  const double nw = static_cast<double>(rank_new);
  return rank_og > rank_new ? og / nw - 1.0 : 1.0 - nw / og;
}

std::optional<double> p_mrr(const std::vector<PairedRun>& pairs, const Qrels& qrels) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& p : pairs) {
    const auto& grades = qrels.for_query(p.query_id);
    const std::size_t r_og = first_relevant_rank(p.run_og, grades);
    const std::size_t r_new = first_relevant_rank(p.run_new, grades);
    if (r_og == 0 || r_new == 0) {
      log_warn("pmrr_pair_excluded", {{"query_id", p.query_id}, {"reason", "no relevant passage in a run"}});
      continue;
    }
    sum += pmrr_pair(r_og, r_new);
    ++n;
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

void EvalDataset::validate() const {
  if (queries.empty()) throw PreconditionError("dataset has no queries");
  if (pool.empty()) throw PreconditionError("dataset has an empty pool");
  std::set<std::string> pool_ids;
  for (const auto& p : pool) pool_ids.insert(p.passage_id);
  std::set<std::string> query_ids;
  for (const auto& q : queries) query_ids.insert(q.query_id);
  for (const auto& [qid, row] : qrels.judgments) {
    if (!query_ids.count(qid)) throw PreconditionError("qrels name unknown query '" + qid + "'");
    for (const auto& [pid, g] : row) {
      if (!pool_ids.count(pid)) throw PreconditionError("qrels name passage '" + pid + "' missing from the pool");
    }
  }
}

EvalDataset load_dataset(const std::string& dir) {
  EvalDataset d;
  const std::string qpath = dir + "/queries.jsonl";
  const std::string ppath = dir + "/pool.jsonl";
  const std::string rpath = dir + "/qrels.tsv";
  const std::string mpath = dir + "/manifest.json";
  const std::string qtext = read_file(qpath);
  const std::string ptext = read_file(ppath);
  const std::string rtext = read_file(rpath);
  d.queries = parse_queries(qtext, qpath);
  d.pool = parse_pool(ptext, ppath);
  d.qrels = parse_qrels(rtext, rpath);
  std::string mtext;
  if (std::filesystem::exists(mpath)) {
    mtext = read_file(mpath);
    try {
      d.manifest = json::parse(mtext);
    } catch (const json::exception& e) {
      throw ParseError(mpath, 0, e.what());
    }
  }
  d.fingerprint = sha256_hex(qtext + '\x1f' + ptext + '\x1f' + rtext + '\x1f' + mtext);
  d.validate();
  return d;
}

nlohmann::ordered_json model_fingerprint(const RetrieverModel& model) {
  nlohmann::ordered_json j;
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(model.params.fingerprint()));
  j["fusion"] = buf;
  j["interaction"] = to_string(model.interaction);
  j["pooling"] = to_string(model.encoders.pooling);
  j["passage_provider"] = model.encoders.passage->fingerprint();
  j["query_provider"] = model.encoders.query->fingerprint();
  return j;
}

MetricReport evaluate(const RetrieverModel& model, const EvalDataset& dataset, const EvalConfig& cfg) {
  dataset.validate();
  if (cfg.k == 0) throw PreconditionError("evaluate: k must be >= 1");
  const std::vector<Vector> vectors = encode_pool(model, dataset.pool);

  MetricReport r;
  r.k = cfg.k;
  double ap_sum = 0.0, ndcg_sum = 0.0, pmrr_sum = 0.0;
  std::size_t n_ap = 0, n_pmrr = 0;
  for (const auto& q : dataset.queries) {
    const auto& grades = dataset.qrels.for_query(q.query_id);
    const bool any_relevant = std::any_of(grades.begin(), grades.end(), [](const auto& g) { return g.second > 0; });
    if (!any_relevant) {
      log_warn("query_excluded", {{"query_id", q.query_id}, {"reason", "no relevant judgment"}});
      ++r.n_excluded;
      continue;
    }
    const RankedRun og = rank_encoded(model, q.instruction_og, q.query, dataset.pool, vectors, q.query_id);
    const RankedRun nw = rank_encoded(model, q.instruction_new, q.query, dataset.pool, vectors, q.query_id);
    const RankedRun& scored = cfg.use_new_instruction ? nw : og;
    QueryMetrics m;
    m.query_id = q.query_id;
    m.ap = average_precision(scored, grades);
    m.ndcg = ndcg_at_k(scored, grades, cfg.k);
    m.rank_og = first_relevant_rank(og, grades);
    m.rank_new = first_relevant_rank(nw, grades);
    if (m.rank_og && m.rank_new) {
      m.pmrr = pmrr_pair(m.rank_og, m.rank_new);
      pmrr_sum += *m.pmrr;
      ++n_pmrr;
    }
    ap_sum += *m.ap;
    ndcg_sum += m.ndcg;
    ++n_ap;
    r.per_query.push_back(std::move(m));
  }
  if (n_ap == 0) throw PreconditionError("evaluate: no query has a relevant judgment");
  r.n_queries = n_ap;
  r.map = ap_sum / static_cast<double>(n_ap);
  r.ndcg = ndcg_sum / static_cast<double>(n_ap);
  r.p_mrr = n_pmrr ? pmrr_sum / static_cast<double>(n_pmrr) : 0.0;

  if (dataset.manifest.is_object() && dataset.manifest.contains("aggregate")) {
    double agg = 0.0;
    for (const auto& [metric, w] : dataset.manifest.at("aggregate").items()) {
      if (!w.is_number()) throw ConfigError("manifest aggregate weight for '" + metric + "' is not a number");
      double value = 0.0;
      if (metric == "map") value = r.map;
      else if (metric == "ndcg") value = r.ndcg;
      else if (metric == "p_mrr") value = r.p_mrr;
      else throw ConfigError("manifest aggregate names unknown metric '" + metric + "'");
      agg += w.get<double>() * value;
    }
    r.aggregate = agg;
  }
  r.fingerprints["model"] = model_fingerprint(model);
  r.fingerprints["dataset"] = dataset.fingerprint;
  nlohmann::ordered_json c;
  c["k"] = cfg.k;
  c["use_new_instruction"] = cfg.use_new_instruction;
  r.fingerprints["config"] = c;
  return r;
}

nlohmann::ordered_json MetricReport::to_json() const {
  nlohmann::ordered_json j;
  j["n_queries"] = n_queries;
  j["n_excluded"] = n_excluded;
  j["k"] = k;
  j["map"] = map;
  j["ndcg_at_k"] = ndcg;
  j["p_mrr"] = p_mrr;
  if (aggregate) j["aggregate"] = *aggregate;
  j["per_query"] = nlohmann::ordered_json::array();
  for (const auto& m : per_query) {
    nlohmann::ordered_json q;
    q["query_id"] = m.query_id;
    q["ap"] = m.ap ? nlohmann::ordered_json(*m.ap) : nlohmann::ordered_json();
    q["ndcg_at_k"] = m.ndcg;
    q["rank_og"] = m.rank_og;
    q["rank_new"] = m.rank_new;
    q["p_mrr"] = m.pmrr ? nlohmann::ordered_json(*m.pmrr) : nlohmann::ordered_json();
    j["per_query"].push_back(q);
  }
  j["fingerprints"] = fingerprints;
  return j;
}

std::string MetricReport::to_text() const {
  std::size_t w = 8;
  for (const auto& m : per_query) w = std::max(w, m.query_id.size());
  const std::string ndcg_col = "nDCG@" + std::to_string(k);
  std::ostringstream o;
  auto cell = [](const std::string& s, std::size_t width) {
    return s + std::string(width > s.size() ? width - s.size() : 0, ' ');
  };
  o << cell("query_id", w) << "  " << cell("AP", 8) << cell(ndcg_col, 9) << cell("R_og", 6) << cell("R_new", 7)
    << "p-MRR\n";
  for (const auto& m : per_query) {
    o << cell(m.query_id, w) << "  " << cell(m.ap ? fmt(*m.ap) : "-", 8) << cell(fmt(m.ndcg), 9)
      << cell(std::to_string(m.rank_og), 6) << cell(std::to_string(m.rank_new), 7) << (m.pmrr ? fmt(*m.pmrr) : "-")
      << "\n";
  }
  o << cell("mean", w) << "  " << cell(fmt(map), 8) << cell(fmt(ndcg), 9) << cell("", 13) << fmt(p_mrr) << "\n";
  o << "queries " << n_queries << ", excluded " << n_excluded;
  if (aggregate) o << ", aggregate " << fmt(*aggregate);
  o << "\n";
  return o.str();
}

MetricReport evaluate_suite(const RetrieverModel& model, const std::string& dataset_dir, const EvalConfig& cfg,
                            const std::string& out_dir) {
  const EvalDataset dataset = load_dataset(dataset_dir);
  MetricReport r = evaluate(model, dataset, cfg);
  if (!out_dir.empty()) {
    write_file_atomic(out_dir + "/report.json", r.to_json().dump(2) + "\n");
    write_file_atomic(out_dir + "/report.txt", r.to_text());
  }
  return r;
}

}  // namespace instir
