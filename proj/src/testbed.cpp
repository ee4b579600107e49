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

#include "instir/testbed.hpp"

#include <filesystem>
#include <set>

#include "instir/error.hpp"
#include "instir/util.hpp"

namespace instir {

namespace {

std::string make_word(Rng& rng, std::set<std::string>& used) {
  static constexpr char kConsonants[] = "bdfgklmnprstvz";
  static constexpr char kVowels[] = "aeiou";
  for (;;) {
    std::string w;
    for (int s = 0; s < 3; ++s) {
      w += kConsonants[rng.below(sizeof(kConsonants) - 1)];
      w += kVowels[rng.below(sizeof(kVowels) - 1)];
    }
    if (used.insert(w).second) return w;
  }
}

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += " ";
    out += w;
  }
  return out;
}

class WorldGenerator final : public ChatClient {
 public:
  explicit WorldGenerator(const SyntheticWorld& world) : world_(world) {}

  std::string complete(const ChatRequest& r) override {
    const WorldFamily* f = world_.find(r.family_id);
    if (!f) throw TransportError("world generator: unknown family " + r.family_id);
    if (r.task == task::kInstructionGeneration) return "Instruction: " + f->instruction_pos;
    if (r.task == task::kInstructionSynthesis) return "Instruction: " + f->instruction_neg;
    if (r.task == task::kQuerySynthesis) return "Query: " + f->query_neg;
    if (r.task == task::kPassageNeg1) return "Passage: " + f->passage_neg1;
    if (r.task == task::kPassageNeg2) return "Passage: " + f->passage_neg2;
    throw TransportError("world generator: unexpected task " + r.task);
  }
  std::string model_name() const override { return "world-generator"; }

 private:
  const SyntheticWorld& world_;
};

class WorldJudgeClient final : public ChatClient {
 public:
  WorldJudgeClient(const SyntheticWorld& world, WorldJudge b) : world_(world), b_(b) {}

  std::string complete(const ChatRequest& r) override {
    const WorldFamily* f = world_.find(r.family_id);
    if (!f) throw TransportError("world judge: unknown family " + r.family_id);
    int scenario = -1;
    for (int s = 0; s < 3; ++s) {
      if (r.task == task::kJudge[s]) scenario = s;
    }
    if (scenario < 0) throw TransportError("world judge: unexpected task " + r.task);
    const std::string& target = scenario == 0 ? f->passage_pos : (scenario == 1 ? f->passage_neg1 : f->passage_neg2);

    // Collect the "[X] text" lines of the prompt.
    std::vector<std::pair<char, std::string>> shown;
    for (const auto& line : split(r.prompt, '\n')) {
      if (line.size() >= 4 && line[0] == '[' && line[2] == ']' && line[3] == ' ') shown.emplace_back(line[1], line.substr(4));
    }
    char designated = 0;
    for (const auto& [label, text] : shown) {
      if (text == target) designated = label;
    }
    if (!designated) throw TransportError("world judge: designated passage not shown for " + r.family_id);

    Rng coin(mix64(fnv1a64(r.family_id) ^ b_.seed ^ (0x636f696eULL + static_cast<std::uint64_t>(scenario))));
    const bool correct = scenario != b_.fail_scenario && coin.uniform() < b_.accuracy;
    if (correct) return std::string(1, designated);
    for (const auto& [label, text] : shown) {
      if (label != designated) return std::string(1, label);
    }
    return "none";
  }
  std::string model_name() const override { return "world-judge"; }

 private:
  const SyntheticWorld& world_;
  WorldJudge b_;
};

}  // namespace

SyntheticWorld::SyntheticWorld(WorldConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.topic_words < 2) throw ConfigError("world: topic_words must be >= 2");
  if (cfg_.cue_pos == cfg_.cue_neg) throw ConfigError("world: cue words must differ");
  Rng rng(mix64(cfg_.seed ^ 0x776f726c64ULL));
  std::set<std::string> used = {casefold(cfg_.cue_pos), casefold(cfg_.cue_neg)};
  const std::size_t total = cfg_.train_families + cfg_.eval_families;
  char id[24];
  for (std::size_t n = 0; n < total; ++n) {
    std::vector<std::string> topic, other;
    for (std::size_t k = 0; k < cfg_.topic_words; ++k) topic.push_back(make_word(rng, used));
    for (std::size_t k = 0; k < cfg_.topic_words; ++k) other.push_back(make_word(rng, used));
    std::vector<std::string> marked(topic.begin(), topic.end() - 1);
    marked.push_back(cfg_.cue_pos);
    marked.push_back(cfg_.cue_neg);
    const std::string filler1 = pick_filler(rng, used, topic, join(marked));
    const std::string filler2 = make_word(rng, used);

    WorldFamily f;
    std::snprintf(id, sizeof(id), "w%05zu", n);
    f.id = id;
    f.instruction_pos = cfg_.cue_pos;
    f.instruction_neg = cfg_.cue_neg;
    f.query_pos = join(topic);
    f.query_neg = join(other);
    std::vector<std::string> p = topic;
    p.push_back(filler1);
    f.passage_pos = join(p);
    f.passage_neg1 = join(marked);
    std::vector<std::string> p2 = other;
    p2.push_back(filler2);
    f.passage_neg2 = join(p2);
    families_.push_back(std::move(f));
  }
}

std::string SyntheticWorld::pick_filler(Rng& rng, std::set<std::string>& used, const std::vector<std::string>& topic,
                                        const std::string& marked) const {
  if (!cfg_.balance_provider) return make_word(rng, used);
  const auto& enc = *cfg_.balance_provider;
  const auto vec = [&](const std::string& text) { return pool(enc.embed(text), cfg_.balance_pooling); };
  const std::string query = join(topic);
  const Vector cue_shift = vec(cfg_.cue_neg + " " + query) - vec(cfg_.cue_pos + " " + query);
  const double marked_shift = vec(marked).dot(cue_shift);
  std::string best;
  double best_gap = 0.0;
  for (std::size_t c = 0; c < std::max<std::size_t>(cfg_.balance_candidates, 1); ++c) {
    std::string w = make_word(rng, used);
    std::vector<std::string> p = topic;
    p.push_back(w);
    const double gap = std::abs(vec(join(p)).dot(cue_shift) - marked_shift);
    if (best.empty() || gap < best_gap) {
      if (!best.empty()) used.erase(best);
      best = std::move(w);
      best_gap = gap;
    } else {
      used.erase(w);
    }
  }
  return best;
}

const WorldFamily* SyntheticWorld::find(const std::string& id) const {
  // Ids are "w" + zero-padded index.
  if (id.size() != 6 || id[0] != 'w') return nullptr;
  std::size_t n = 0;
  for (std::size_t i = 1; i < id.size(); ++i) {
    if (id[i] < '0' || id[i] > '9') return nullptr;
    n = n * 10 + static_cast<std::size_t>(id[i] - '0');
  }
  return n < families_.size() ? &families_[n] : nullptr;
}

std::vector<SeedPair> SyntheticWorld::train_seeds() const {
  std::vector<SeedPair> out;
  for (std::size_t n = 0; n < cfg_.train_families; ++n) {
    out.push_back({families_[n].id, families_[n].query_pos, families_[n].passage_pos});
  }
  return out;
}

EvalDataset SyntheticWorld::eval_dataset() const {
  EvalDataset d;
  std::string fp;
  for (std::size_t n = cfg_.train_families; n < families_.size(); ++n) {
    const WorldFamily& f = families_[n];
    d.queries.push_back({f.id, f.query_pos, f.instruction_pos, f.instruction_neg});
    d.qrels.judgments[f.id][f.id + "-p1"] = 1;
    fp += f.id;
  }
  for (const char* suffix : {"-pp", "-p1", "-p2"}) {
    for (std::size_t n = cfg_.train_families; n < families_.size(); ++n) {
      const WorldFamily& f = families_[n];
      const std::string& text = suffix[2] == 'p' ? f.passage_pos : (suffix[2] == '1' ? f.passage_neg1 : f.passage_neg2);
      d.pool.push_back({f.id + suffix, text});
    }
  }
  d.fingerprint = sha256_hex("world:" + std::to_string(cfg_.seed) + ":" + fp);
  return d;
}

void SyntheticWorld::write_seeds(const std::string& path) const {
  std::string out;
  for (const auto& s : train_seeds()) {
    nlohmann::ordered_json j;
    j["id"] = s.id;
    j["query"] = s.query;
    j["passage"] = s.passage;
    out += j.dump() + "\n";
  }
  write_file_atomic(path, out);
}

void SyntheticWorld::write_eval_dataset(const std::string& dir) const {
  const EvalDataset d = eval_dataset();
  std::string queries, pool, qrels;
  for (const auto& q : d.queries) {
    nlohmann::ordered_json j;
    j["query_id"] = q.query_id;
    j["query"] = q.query;
    j["instruction_og"] = q.instruction_og;
    j["instruction_new"] = q.instruction_new;
    queries += j.dump() + "\n";
  }
  for (const auto& p : d.pool) {
    nlohmann::ordered_json j;
    j["passage_id"] = p.passage_id;
    j["text"] = p.text;
    pool += j.dump() + "\n";
  }
  for (const auto& [qid, row] : d.qrels.judgments) {
    for (const auto& [pid, g] : row) qrels += qid + "\t" + pid + "\t" + std::to_string(g) + "\n";
  }
  std::filesystem::create_directories(dir);
  write_file_atomic(dir + "/queries.jsonl", queries);
  write_file_atomic(dir + "/pool.jsonl", pool);
  write_file_atomic(dir + "/qrels.tsv", qrels);
}

void SyntheticWorld::write_script(const std::string& path, int fail_scenario) const {
  std::string out;
  auto line = [&](std::string_view task_name, const std::string& id, const char* key, const std::string& value) {
    nlohmann::ordered_json j;
    j["task"] = task_name;
    j["family_id"] = id;
    j[key] = value;
    out += j.dump() + "\n";
  };
  for (std::size_t n = 0; n < cfg_.train_families; ++n) {
    const WorldFamily& f = families_[n];
    line(task::kInstructionGeneration, f.id, "response", "Instruction: " + f.instruction_pos);
    line(task::kInstructionSynthesis, f.id, "response", "Instruction: " + f.instruction_neg);
    line(task::kQuerySynthesis, f.id, "response", "Query: " + f.query_neg);
    line(task::kPassageNeg1, f.id, "response", "Passage: " + f.passage_neg1);
    line(task::kPassageNeg2, f.id, "response", "Passage: " + f.passage_neg2);
    const std::string* designated[3] = {&f.passage_pos, &f.passage_neg1, &f.passage_neg2};
    for (int s = 0; s < 3; ++s) {
      const std::string& pick = s == fail_scenario ? *designated[(s + 1) % 3] : *designated[s];
      line(task::kJudge[s], f.id, "choose_passage", pick);
    }
  }
  write_file_atomic(path, out);
}

std::unique_ptr<ChatClient> SyntheticWorld::generator() const { return std::make_unique<WorldGenerator>(*this); }

std::unique_ptr<ChatClient> SyntheticWorld::judge(WorldJudge behaviour) const {
  return std::make_unique<WorldJudgeClient>(*this, behaviour);
}

}  // namespace instir
