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

#include "instir/analytics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>

#include "instir/error.hpp"
#include "instir/util.hpp"

namespace instir {

double aps(const std::vector<Vector>& embeddings) {
  if (embeddings.size() < 2) throw PreconditionError("aps: need at least two vectors");
  std::vector<Vector> unit;
  unit.reserve(embeddings.size());
  for (const auto& v : embeddings) unit.push_back(l2_normalize(v));
  double sum = 0.0;
  for (std::size_t i = 0; i < unit.size(); ++i) {
    for (std::size_t j = i + 1; j < unit.size(); ++j) sum += cosine_sim(unit[i], unit[j]);
  }
  const double pairs = 0.5 * static_cast<double>(unit.size()) * static_cast<double>(unit.size() - 1);
  return std::clamp(sum / pairs, -1.0, 1.0);
}

double ingf(const std::vector<std::string>& texts, std::size_t n_low, std::size_t n_high) {
  if (texts.empty()) throw PreconditionError("ingf: empty corpus");
  if (n_low < 1 || n_low > n_high) throw PreconditionError("ingf: need 1 <= n_low <= n_high");
  std::set<std::string> grams;
  for (const auto& t : texts) {
    const auto toks = tokenize(t);
    for (std::size_t n = n_low; n <= n_high; ++n) {
      for (std::size_t i = 0; i + n <= toks.size(); ++i) {
        std::string g = toks[i];
        for (std::size_t k = 1; k < n; ++k) g += '\x1f' + toks[i + k];
        grams.insert(std::move(g));
      }
    }
  }
  return static_cast<double>(grams.size()) / static_cast<double>(texts.size());
}

double cohens_kappa(const std::vector<std::string>& rater_a, const std::vector<std::string>& rater_b) {
  if (rater_a.size() != rater_b.size()) throw PreconditionError("cohens_kappa: sequences differ in length");
  if (rater_a.empty()) throw PreconditionError("cohens_kappa: empty sequences");
  const double n = static_cast<double>(rater_a.size());
  std::map<std::string, double> fa, fb;
  double agree = 0.0;
  for (std::size_t i = 0; i < rater_a.size(); ++i) {
    fa[rater_a[i]] += 1.0;
    fb[rater_b[i]] += 1.0;
    if (rater_a[i] == rater_b[i]) agree += 1.0;
  }
  const double p_o = agree / n;
  double p_e = 0.0;
  for (const auto& [label, ca] : fa) {
    const auto it = fb.find(label);
    if (it != fb.end()) p_e += (ca / n) * (it->second / n);
  }
  if (p_e >= 1.0) {
    if (p_o >= 1.0) return 1.0;
    throw NumericError("cohens_kappa: chance agreement is 1, kappa is undefined");
  }
  return (p_o - p_e) / (1.0 - p_e);
}

std::vector<OverlapMatch> overlap_check(const std::vector<std::pair<std::string, std::string>>& train_texts,
                                        const std::vector<std::pair<std::string, std::string>>& eval_texts) {
  std::multimap<std::string, const std::string*> eval_index;
  for (const auto& [id, text] : eval_texts) eval_index.emplace(normalize_whitespace(text), &id);
  std::vector<OverlapMatch> out;
  for (const auto& [id, text] : train_texts) {
    const std::string key = normalize_whitespace(text);
    const auto [lo, hi] = eval_index.equal_range(key);
    for (auto it = lo; it != hi; ++it) out.push_back({id, *it->second, key});
  }
  std::sort(out.begin(), out.end(), [](const OverlapMatch& a, const OverlapMatch& b) {
    return std::tie(a.train_id, a.eval_id) < std::tie(b.train_id, b.eval_id);
  });
  return out;
}

namespace {

std::vector<std::pair<std::string, const std::string*>> roles_of(const TripletFamily& f) {
  std::vector<std::pair<std::string, const std::string*>> r = {
      {"instruction_pos", &f.instruction_pos}, {"query_pos", &f.query_pos}, {"passage_pos", &f.passage_pos}};
  if (f.instruction_neg) r.emplace_back("instruction_neg", &*f.instruction_neg);
  if (f.query_neg) r.emplace_back("query_neg", &*f.query_neg);
  if (f.passage_neg1) r.emplace_back("passage_neg1", &*f.passage_neg1);
  if (f.passage_neg2) r.emplace_back("passage_neg2", &*f.passage_neg2);
  return r;
}

std::string one_line(std::string_view s) {
  std::string out(s);
  for (char& c : out) {
    if (c == '\t' || c == '\n' || c == '\r') c = ' ';
  }
  return out;
}

}  // namespace

std::vector<std::pair<std::string, std::string>> corpus_texts(const Corpus& corpus) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& f : corpus) {
    for (const auto& [role, text] : roles_of(f)) out.emplace_back(f.id + "/" + role, *text);
  }
  return out;
}

std::vector<std::string> sample_texts(const Corpus& corpus) {
  std::vector<std::string> out;
  out.reserve(corpus.size());
  for (const auto& f : corpus) out.push_back(f.instruction_pos + " " + f.query_pos + " " + f.passage_pos);
  return out;
}

nlohmann::ordered_json DiversityReport::to_json() const {
  nlohmann::ordered_json j;
  j["aps"] = aps;
  j["ingf"] = ingf;
  j["n_samples"] = n_samples;
  j["ngram_range"] = {ngram_low, ngram_high};
  j["provider"] = provider;
  j["ingf_definition"] = "distinct token n-grams across the corpus per sample (interpretation; higher is more diverse)";
  j["aps_sample"] = "instruction + query + passage of each positive triplet, pooled and normalized";
  return j;
}

DiversityReport diversity_report(const Corpus& corpus, const EmbeddingProvider& provider, Pooling pooling,
                                 std::size_t n_low, std::size_t n_high) {
  const auto texts = sample_texts(corpus);
  std::vector<Vector> vecs;
  vecs.reserve(texts.size());
  for (const auto& t : texts) vecs.push_back(pool(provider.embed(t), pooling));
  DiversityReport r;
  r.aps = aps(vecs);
  r.ingf = ingf(texts, n_low, n_high);
  r.n_samples = texts.size();
  r.ngram_low = n_low;
  r.ngram_high = n_high;
  r.provider = provider.fingerprint();
  return r;
}

std::vector<ExportRow> embed_corpus(const Corpus& corpus, const EmbeddingProvider& provider, Pooling pooling) {
  std::vector<ExportRow> rows;
  for (const auto& f : corpus) {
    for (const auto& [role, text] : roles_of(f)) rows.push_back({f.id, role, *text, pool(provider.embed(*text), pooling)});
  }
  return rows;
}

void export_embeddings(const std::vector<ExportRow>& rows, const std::string& dir) {
  std::string vectors;
  std::string meta = "family_id\trole\ttext\n";
  char buf[40];
  for (const auto& r : rows) {
    for (Eigen::Index c = 0; c < r.vector.size(); ++c) {
      std::snprintf(buf, sizeof(buf), "%.9g", r.vector[c]);
      if (c) vectors += '\t';
      vectors += buf;
    }
    vectors += '\n';
    meta += one_line(r.family_id) + "\t" + r.role + "\t" + one_line(r.text) + "\n";
  }
  std::filesystem::create_directories(dir);
  write_file_atomic(dir + "/embeddings.tsv", vectors);
  write_file_atomic(dir + "/metadata.tsv", meta);
}

std::vector<Vector> parse_embeddings_tsv(std::string_view text) {
  std::vector<Vector> out;
  std::size_t line_no = 0;
  for (const auto& line : split(text, '\n')) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split(line, '\t');
    Vector v(static_cast<Eigen::Index>(cells.size()));
    for (std::size_t c = 0; c < cells.size(); ++c) {
      try {
        v[static_cast<Eigen::Index>(c)] = std::stod(cells[c]);
      } catch (const std::logic_error&) {
        throw ParseError("embeddings.tsv", line_no, "bad number '" + cells[c] + "'");
      }
    }
    if (!out.empty() && out.front().size() != v.size()) throw ParseError("embeddings.tsv", line_no, "ragged row");
    out.push_back(std::move(v));
  }
  return out;
}

}  // namespace instir
