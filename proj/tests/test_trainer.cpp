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

#include "instir/error.hpp"
#include "instir/log.hpp"
#include "instir/trainer.hpp"
#include "instir/util.hpp"
#include "support.hpp"

using namespace instir;

namespace {

struct QuietLogs {
  QuietLogs() { set_log_level(LogLevel::kError); }
  ~QuietLogs() { set_log_level(LogLevel::kInfo); }
};

/// Families whose positive passage repeats the query words and whose
/// negatives do not; contrastive training separates them easily.
FlatCorpus toy_flat(std::size_t n) {
  Corpus c;
  Rng rng(99);
  for (std::size_t f = 0; f < n; ++f) {
    TripletFamily t;
    t.id = "t" + std::to_string(100 + f);
    const std::string topic = testing::random_text(rng, 2, 3) + " w" + std::to_string(f);
    t.instruction_pos = "prefer detail";
    t.query_pos = topic;
    t.passage_pos = topic + " detail";
    t.instruction_neg = "prefer brevity";
    t.query_neg = testing::random_text(rng, 2, 3) + " v" + std::to_string(f);
    t.passage_neg1 = testing::random_text(rng, 2, 3) + " brevity";
    t.passage_neg2 = *t.query_neg + " other";
    c.push_back(t);
  }
  return flatten_training_tuples(c);
}

EncoderPair hash_encoders(int dim, std::uint64_t seed) {
  ProviderConfig pc;
  pc.dim = dim;
  pc.seed = seed;
  return make_encoders(pc);
}

}  // namespace

TEST_CASE("key-value config parsing") {
  KeyValueFile kv = KeyValueFile::parse(R"(
# training
lr = 1e-3          # trailing comment
betas = [0.8, 0.95]
variant = "multi:P,I"
interaction = cross_attention
epochs = 3
hard_negatives = false

[provider]
kind = "hash"
dim = 16
seed = 4
)",
                                        "train.toml");
  const TrainConfig c = train_config_from(kv);
  const ProviderConfig p = provider_config_from(kv);
  kv.reject_unused();
  CHECK(c.lr == 1e-3);
  CHECK(c.beta1 == 0.8);
  CHECK(c.beta2 == 0.95);
  CHECK(c.variant.name() == "multi:P,I");
  CHECK(c.interaction == Interaction::kCrossAttention);
  CHECK(c.epochs == 3);
  CHECK_FALSE(c.hard_negatives);
  CHECK(p.dim == 16);
  CHECK(p.seed == 4);

  KeyValueFile round = KeyValueFile::parse(to_key_values(c), "round");
  const TrainConfig c2 = train_config_from(round);
  round.reject_unused();
  CHECK(to_json(c2).dump() == to_json(c).dump());
  CHECK(provider_config_from_json(to_json(p)).dim == 16);
}

TEST_CASE("key-value config errors name the file and line") {
  CHECK_THROWS_AS(KeyValueFile::parse("a = 1\na = 2\n", "f"), ParseError);
  CHECK_THROWS_AS(KeyValueFile::parse("[oops\n", "f"), ParseError);
  CHECK_THROWS_AS(KeyValueFile::parse("novalue\n", "f"), ParseError);
  KeyValueFile unknown = KeyValueFile::parse("lr = 1\nlearning_rate = 2\n", "f");
  train_config_from(unknown);
  try {
    unknown.reject_unused();
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("learning_rate") != std::string::npos);
  }
  KeyValueFile bad = KeyValueFile::parse("epochs = many\n", "f");
  CHECK_THROWS_AS(train_config_from(bad), ConfigError);
  KeyValueFile bad_variant = KeyValueFile::parse("variant = \"tri:P\"\n", "f");
  CHECK_THROWS_AS(train_config_from(bad_variant), ConfigError);
}

TEST_CASE("config validation") {
  TrainConfig c;
  c.validate();
  c.epochs = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.tau = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("adamw update rule") {
  TrainConfig cfg;
  cfg.lr = 0.1;
  FusionParams p = init_params(3, 1, "uniform-fan", true);
  const FusionParams before = p;

  SUBCASE("zero gradient, no decay") {
    cfg.weight_decay = 0.0;
    AdamWState s = AdamWState::zeros_like(p);
    CHECK(adamw_step(p, FusionGrads::zeros_like(p), s, cfg));
    CHECK(p.w_instruction == before.w_instruction);
    CHECK(*p.proj_iq == *before.proj_iq);
  }
  SUBCASE("zero gradient with decay scales the parameters") {
    cfg.weight_decay = 0.5;
    AdamWState s = AdamWState::zeros_like(p);
    adamw_step(p, FusionGrads::zeros_like(p), s, cfg);
    CHECK(p.w_query_key == before.w_query_key * (1.0 - 0.1 * 0.5));
  }
  SUBCASE("first step with unit gradient") {
    cfg.weight_decay = 0.01;
    AdamWState s = AdamWState::zeros_like(p);
    FusionGrads g = FusionGrads::zeros_like(p);
    for (auto& [name, m] : g.tensors()) m->setOnes();
    adamw_step(p, g, s, cfg);
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) {
        const double theta = before.w_query_value(r, c);
        const double expected = theta - cfg.lr * (1.0 / (1.0 + cfg.eps)) - cfg.lr * cfg.weight_decay * theta;
        CHECK(std::abs(p.w_query_value(r, c) - expected) <= 1e-15);
      }
    }
    CHECK(s.t == 1);
  }
  SUBCASE("non-finite gradient is skipped and counted") {
    QuietLogs quiet;
    AdamWState s = AdamWState::zeros_like(p);
    FusionGrads g = FusionGrads::zeros_like(p);
    g.w_instruction(0, 0) = std::nan("");
    CHECK_FALSE(adamw_step(p, g, s, cfg));
    CHECK(s.skipped == 1);
    CHECK(s.t == 0);
    CHECK(p.w_instruction == before.w_instruction);
  }
}

TEST_CASE("optimizer state round trip") {
  const FusionParams p = init_params(4, 1, "uniform-fan", true);
  AdamWState s = AdamWState::zeros_like(p);
  s.t = 7;
  s.skipped = 2;
  s.m[1](2, 3) = 0.25;
  s.v[4](0, 0) = 1e-9;
  const std::string bytes = serialize_optimizer_state(s);
  const AdamWState r = parse_optimizer_state(bytes, 4);
  CHECK(r.t == 7);
  CHECK(r.skipped == 2);
  CHECK(r.m[1](2, 3) == 0.25);
  CHECK(r.v[4](0, 0) == 1e-9);
  CHECK(serialize_optimizer_state(r) == bytes);
  CHECK_THROWS_AS(parse_optimizer_state(bytes.substr(0, bytes.size() - 1), 4), ParseError);
  CHECK_THROWS_AS(parse_optimizer_state("garbage!", 4), ParseError);
}

TEST_CASE("training lowers the loss on a separable toy corpus") {
  QuietLogs quiet;
  const FlatCorpus flat = toy_flat(20);
  TrainConfig cfg;
  cfg.lr = 5e-3;
  cfg.epochs = 4;
  cfg.variant = LossVariant::parse("multi:P,I");
  const TrainResult r = train(flat, hash_encoders(32, 1), cfg);
  REQUIRE(r.epoch_mean_loss.size() == 4);
  CHECK(r.epoch_mean_loss.back() < r.epoch_mean_loss.front());
  CHECK(r.history.size() == 4 * 5);
  CHECK(r.optimizer.t == 20);
}

TEST_CASE("training is reproducible to the byte") {
  QuietLogs quiet;
  const FlatCorpus flat = toy_flat(10);
  TrainConfig cfg;
  cfg.seed = 1;
  cfg.variant = LossVariant::parse("multi:P,I");
  testing::TempDir a, b;
  TrainOptions oa, ob;
  oa.out_dir = a.str();
  ob.out_dir = b.str();
  oa.header_extra["note"] = "x";
  ob.header_extra["note"] = "x";
  const TrainResult ra = train(flat, hash_encoders(16, 1), cfg, oa);
  train(flat, hash_encoders(16, 1), cfg, ob);
  for (const char* f : {"final.ckpt", "final.adamw", "epoch-1.ckpt", "epoch-2.adamw", "history.csv"}) {
    CHECK(read_file(a / f) == read_file(b / f));
  }
  const LoadedCheckpoint ck = load_checkpoint(a / "final.ckpt");
  CHECK(ck.header.extra["variant"] == "multi:P,I");
  CHECK(ck.header.extra["note"] == "x");
  CHECK(ck.header.step_count == ra.history.size());
  CHECK(starts_with(read_file(a / "history.csv"), "step,epoch,loss\n"));

  TrainConfig other = cfg;
  other.seed = 2;
  testing::TempDir c;
  TrainOptions oc;
  oc.out_dir = c.str();
  oc.header_extra["note"] = "x";
  train(flat, hash_encoders(16, 1), other, oc);
  CHECK(read_file(c / "final.ckpt") != read_file(a / "final.ckpt"));
}

TEST_CASE("training resumes from given initial parameters") {
  QuietLogs quiet;
  const FlatCorpus flat = toy_flat(6);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.lr = 0.0;
  cfg.weight_decay = 0.0;
  TrainOptions opts;
  opts.initial = init_params(16, 42, "uniform-fan", true);
  const TrainResult r = train(flat, hash_encoders(16, 1), cfg, opts);
  CHECK(r.params.w_instruction == opts.initial->w_instruction);
}

TEST_CASE("training rejects tiny corpora and bad configs") {
  QuietLogs quiet;
  TrainConfig cfg;
  cfg.epochs = 0;
  CHECK_THROWS_AS(train(toy_flat(4), hash_encoders(8, 1), cfg), ConfigError);
  CHECK_THROWS_AS(train(FlatCorpus{}, hash_encoders(8, 1), TrainConfig{}), PreconditionError);
}

TEST_CASE("grad_check") {
  TrainConfig cfg;
  cfg.variant = LossVariant::parse("multi:P,I,IQ");
  for (Interaction inter : {Interaction::kConcat, Interaction::kCrossAttention}) {
    cfg.interaction = inter;
    const GradCheckReport ok = grad_check(cfg, 10, 1e-4);
    CHECK(ok.passed);
    CHECK(ok.instances.size() == 10);

    GradCheckOptions broken;
    broken.perturb_gradient = [](FusionGrads& g) { g.proj_iq *= 1.01; };
    CHECK_FALSE(grad_check(cfg, 3, 1e-4, broken).passed);
  }
  const GradCheckReport empty = grad_check(cfg, 0, 1e-4);
  CHECK(empty.passed);
  CHECK(empty.instances.empty());
  CHECK(empty.to_json()["passed"] == true);
}
