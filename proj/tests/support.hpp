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
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include "instir/corpus.hpp"
#include "instir/model.hpp"
#include "instir/objectives.hpp"
#include "instir/util.hpp"

namespace instir::testing {

inline std::string data_path(const std::string& rel) { return std::string(INSTIR_TEST_DATA) + "/" + rel; }

/// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("instir-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string str() const { return path_.string(); }
  std::string operator/(const std::string& rel) const { return (path_ / rel).string(); }

 private:
  std::filesystem::path path_;
};

inline std::string random_text(Rng& rng, std::size_t min_words, std::size_t max_words) {
  static const char* kVocab[] = {"red",  "blue", "green", "cat",  "dog",   "tree",
                                 "rock", "fast", "slow",  "bird", "river", "stone"};
  const std::size_t n = min_words + rng.below(max_words - min_words + 1);
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s += (i ? " " : "") + std::string(kVocab[rng.below(12)]);
  return s;
}

/// Flat corpus of `n` families with random texts and hard negatives.
inline FlatCorpus random_flat(Rng& rng, std::size_t n) {
  FlatCorpus flat;
  for (std::size_t f = 0; f < n; ++f) {
    flat.family_ids.push_back("f" + std::to_string(f));
    flat.passages.push_back(random_text(rng, 2, 5));
    flat.instructions.push_back(random_text(rng, 1, 3));
    flat.queries.push_back(random_text(rng, 1, 3));
    flat.tuples.push_back({f, f, f, true});
  }
  for (std::size_t f = 0; f < n; ++f) {
    NegativeRows r{flat.passages.size(), flat.passages.size() + 1, flat.instructions.size(), flat.queries.size()};
    flat.passages.push_back(random_text(rng, 2, 5));
    flat.passages.push_back(random_text(rng, 2, 5));
    flat.instructions.push_back(random_text(rng, 1, 3));
    flat.queries.push_back(random_text(rng, 1, 3));
    flat.negatives.push_back(r);
  }
  return flat;
}

/// Straight-line loss from model.score: one denominator per term, summed
/// (uni) or pooled (multi), averaged over anchors.
inline double oracle_loss(const LossVariant& v, const TrainingBatch& b, const RetrieverModel& m, double tau) {
  long double total = 0.0L;
  for (std::size_t i = 0; i < b.anchors; ++i) {
    const long double pos = m.score(b.passages[i], b.instructions[i], b.queries[i], tau);
    long double den[3] = {0.0L, 0.0L, 0.0L};
    for (const auto& p : b.passages) den[0] += std::exp((long double)m.score(p, b.instructions[i], b.queries[i], tau));
    for (const auto& ins : b.instructions) {
      den[1] += std::exp((long double)m.score(b.passages[i], ins, b.queries[i], tau));
    }
    for (const auto& [j, k] : b.iq_pairs) {
      den[2] += std::exp((long double)m.score(b.passages[i], b.instructions[j], b.queries[k], tau));
    }
    const bool used[3] = {v.has(kTermP), v.has(kTermI), v.has(kTermIQ)};
    if (v.family == LossFamily::kUni) {
      for (int t = 0; t < 3; ++t) {
        if (used[t]) total += std::log(den[t]) - pos;
      }
    } else {
      long double all = 0.0L;
      for (int t = 0; t < 3; ++t) {
        if (used[t]) all += den[t];
      }
      total += std::log(all) - pos;
    }
  }
  return static_cast<double>(total / static_cast<long double>(b.anchors));
}

}  // namespace instir::testing
