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
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "instir/corpus.hpp"
#include "instir/embedding.hpp"

namespace instir {

/// Mean cosine similarity over all unordered pairs. Inputs are normalized
/// first. Throws PreconditionError for fewer than two vectors.
double aps(const std::vector<Vector>& embeddings);

/// Distinct token n-grams (n in [n_low, n_high]) across all texts, divided
/// by the number of texts.
double ingf(const std::vector<std::string>& texts, std::size_t n_low = 2, std::size_t n_high = 4);

/// Chance-corrected agreement between two label sequences of equal length.
double cohens_kappa(const std::vector<std::string>& rater_a, const std::vector<std::string>& rater_b);

struct OverlapMatch {
  std::string train_id;
  std::string eval_id;
  std::string normalized_text;
};

/// Exact matches after casefolding and whitespace normalization, ordered by
/// (train_id, eval_id).
std::vector<OverlapMatch> overlap_check(const std::vector<std::pair<std::string, std::string>>& train_texts,
                                        const std::vector<std::pair<std::string, std::string>>& eval_texts);

/// (id, text) for every distinct role text of a corpus, ids "<family>/<role>".
std::vector<std::pair<std::string, std::string>> corpus_texts(const Corpus& corpus);

/// "instruction query passage" of each family's positive triplet.
std::vector<std::string> sample_texts(const Corpus& corpus);

struct DiversityReport {
  double aps = 0.0;
  double ingf = 0.0;
  std::size_t n_samples = 0;
  std::size_t ngram_low = 2;
  std::size_t ngram_high = 4;
  std::string provider;

  nlohmann::ordered_json to_json() const;
};

/// APS over provider-pooled sample texts and INGF over the same texts.
DiversityReport diversity_report(const Corpus& corpus, const EmbeddingProvider& provider, Pooling pooling,
                                 std::size_t n_low = 2, std::size_t n_high = 4);

struct ExportRow {
  std::string family_id;
  std::string role;
  std::string text;
  Vector vector;
};

/// Pooled, normalized vectors for every role text of every family.
std::vector<ExportRow> embed_corpus(const Corpus& corpus, const EmbeddingProvider& provider, Pooling pooling);

/// Writes <dir>/embeddings.tsv (tab-separated values, one row per text) and
/// <dir>/metadata.tsv (header family_id, role, text).
void export_embeddings(const std::vector<ExportRow>& rows, const std::string& dir);

/// Parses an embeddings.tsv back into vectors.
std::vector<Vector> parse_embeddings_tsv(std::string_view text);

}  // namespace instir
