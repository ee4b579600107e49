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
#include <cstdint>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "instir/embedding.hpp"
#include "instir/eval.hpp"
#include "instir/synth.hpp"
#include "instir/util.hpp"

namespace instir {

/// A synthetic instruction-following world small enough to learn at desk
/// scale. Every family has its own topic words. The positive instruction is
/// one cue word and the poisoned instruction another; P1- mentions both cues
/// beside most of the topic, so an untrained model ranks P+ and P1- alike
/// and only a trained fusion layer separates them by instruction.
struct WorldConfig {
  std::size_t train_families = 200;
  std::size_t eval_families = 50;
  std::size_t topic_words = 3;
  std::uint64_t seed = 0;
  std::string cue_pos = "brief";
  std::string cue_neg = "thorough";
  /// When set, each family's P+ filler word is picked from
  /// `balance_candidates` draws so that swapping the cue word moves P+ and
  /// P1- by the same amount under this encoder, making the untrained model
  /// instruction-neutral per family rather than only on average.
  std::shared_ptr<const EmbeddingProvider> balance_provider;
  Pooling balance_pooling = Pooling::kMean;
  std::size_t balance_candidates = 32;
};

struct WorldFamily {
  std::string id;
  std::string instruction_pos;
  std::string query_pos;
  std::string passage_pos;
  std::string instruction_neg;
  std::string query_neg;
  std::string passage_neg1;
  std::string passage_neg2;
};

/// Judge behaviour for the world's chat client.
struct WorldJudge {
  /// Probability that a scenario is answered with the designated passage.
  double accuracy = 1.0;
  /// Scenario index (0..2) always answered wrongly; -1 for none.
  int fail_scenario = -1;
  std::uint64_t seed = 0;
};

class SyntheticWorld {
 public:
  explicit SyntheticWorld(WorldConfig cfg);

  const WorldConfig& config() const noexcept { return cfg_; }
  /// Training families first, then held-out ones.
  const std::vector<WorldFamily>& families() const noexcept { return families_; }
  const WorldFamily* find(const std::string& id) const;

  std::vector<SeedPair> train_seeds() const;
  /// Held-out queries: original instruction I+, new instruction I-, and P1-
  /// judged relevant. The pool is every held-out P+, P1- and P2-.
  EvalDataset eval_dataset() const;
  void write_seeds(const std::string& path) const;
  void write_eval_dataset(const std::string& dir) const;

  /// Scripted responses for every training family: generation answers plus
  /// judge entries naming the designated passage (or, for `fail_scenario`,
  /// a wrong one), in the format ScriptedChatClient reads.
  void write_script(const std::string& path, int fail_scenario = -1) const;

  /// Answers the generation tasks with the family's scripted texts.
  std::unique_ptr<ChatClient> generator() const;
  /// Finds the designated passage among the presented labels.
  std::unique_ptr<ChatClient> judge(WorldJudge behaviour = {}) const;

 private:
  std::string pick_filler(Rng& rng, std::set<std::string>& used, const std::vector<std::string>& topic,
                          const std::string& marked) const;

  WorldConfig cfg_;
  std::vector<WorldFamily> families_;
};

}  // namespace instir
