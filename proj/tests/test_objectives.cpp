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
#include <set>

#include "instir/error.hpp"
#include "instir/objectives.hpp"
#include "support.hpp"

using namespace instir;

namespace {

ScoreBundle two_anchor_bundle(double pos, double p_off, double i_off, double iq_off) {
  ScoreBundle b;
  b.tau = 1.0;
  b.anchors = 2;
  b.s_p.resize(2, 2);
  b.s_i.resize(2, 2);
  b.s_iq.resize(2, 2);
  b.s_p << pos, p_off, p_off, pos;
  b.s_i << pos, i_off, i_off, pos;
  b.s_iq << pos, iq_off, iq_off, pos;
  return b;
}

RetrieverModel hash_model(int dim, std::uint64_t seed, Interaction inter) {
  ProviderConfig pc;
  pc.dim = dim;
  pc.seed = seed;
  return RetrieverModel{make_encoders(pc), init_params(dim, seed, "uniform-fan", true, 0.5), inter};
}

}  // namespace

TEST_CASE("loss variant names") {
  const auto all = all_variants();
  REQUIRE(all.size() == 14);
  std::set<std::string> names;
  for (const auto& v : all) {
    names.insert(v.name());
    CHECK(LossVariant::parse(v.name()) == v);
  }
  CHECK(names.size() == 14);
  CHECK(all.front().name() == "uni:P");
  CHECK(all.back().name() == "multi:P,I,IQ");
  CHECK(LossVariant::parse("multi:I,P") == LossVariant::parse("multi:P,I"));
  for (const char* bad : {"", "multi", "multi:", "uni:X", "multi:P,P", "bi:P", "uni:P,"}) {
    CHECK_THROWS_AS(LossVariant::parse(bad), ConfigError);
  }
}

TEST_CASE("score") {
  Vector a(2), b(2), c(2);
  a << 1, 0;
  b << 0, 1;
  c << 0.5, std::sqrt(0.75);
  CHECK(score(a, a, 1.0) == 1.0);
  CHECK(score(a, b, 0.01) == 0.0);
  CHECK(score(a, c, 0.05) == doctest::Approx(10.0).epsilon(1e-12));
  CHECK_THROWS_AS(score(a, a, 0.0), PreconditionError);
}

TEST_CASE("nce_core") {
  const double x = 0.37;
  CHECK(nce_core(x, std::vector<double>{x}) == 0.0);
  CHECK(nce_core(x, std::vector<double>{x, x, x, x}) == doctest::Approx(std::log(4.0)).epsilon(1e-15));
  CHECK(nce_core(0.9, std::vector<double>{0.9, 0.1}) ==
        doctest::Approx(-std::log(std::exp(0.9) / (std::exp(0.9) + std::exp(0.1)))).epsilon(1e-14));
  CHECK(nce_core(0.9, std::vector<double>{0.9, 0.1}) == doctest::Approx(0.3711).epsilon(1e-3));
  // Large scores do not overflow.
  CHECK(std::isfinite(nce_core(1000.0, std::vector<double>{1000.0, 999.0})));
  CHECK_THROWS_AS(nce_core(0.0, std::vector<double>{}), PreconditionError);
}

TEST_CASE("worked values") {
  const ScoreBundle b = two_anchor_bundle(0.9, 0.1, 0.2, 0.3);
  const double expected =
      -std::log(std::exp(0.9) / (3 * std::exp(0.9) + std::exp(0.1) + std::exp(0.2) + std::exp(0.3)));
  CHECK(loss(LossVariant::parse("multi:P,I,IQ"), b) == doctest::Approx(expected).epsilon(1e-14));
  CHECK(std::abs(loss(LossVariant::parse("multi:P,I,IQ"), b) - 1.5034) <= 5e-4);

  ScoreBundle flat;
  flat.anchors = 4;
  flat.s_p = Matrix::Constant(4, 4, 0.25);
  CHECK(std::abs(loss(LossVariant::parse("uni:P"), flat) - std::log(4.0)) <= 1e-12);
}

TEST_CASE("uni losses are sums of their single-term losses") {
  const ScoreBundle b = two_anchor_bundle(0.4, -0.2, 0.7, 0.1);
  const double p = loss(LossVariant::parse("uni:P"), b);
  const double i = loss(LossVariant::parse("uni:I"), b);
  const double iq = loss(LossVariant::parse("uni:IQ"), b);
  CHECK(loss(LossVariant::parse("uni:P,I"), b) == p + i);
  CHECK(loss(LossVariant::parse("uni:P,I,IQ"), b) == doctest::Approx(p + i + iq).epsilon(1e-15));
}

TEST_CASE("loss is non-negative and monotone in the scores") {
  for (const auto& v : all_variants()) {
    const double base = loss(v, two_anchor_bundle(0.4, 0.1, 0.2, 0.3));
    CHECK(base >= 0.0);
    CHECK(loss(v, two_anchor_bundle(0.5, 0.1, 0.2, 0.3)) < base);
    ScoreBundle worse = two_anchor_bundle(0.4, 0.1, 0.2, 0.3);
    worse.s_p(0, 1) += 0.2;
    worse.s_i(0, 1) += 0.2;
    worse.s_iq(0, 1) += 0.2;
    CHECK(loss(v, worse) > base);
  }
}

TEST_CASE("missing tables are rejected") {
  ScoreBundle b;
  b.anchors = 2;
  b.s_p = Matrix::Zero(2, 2);
  CHECK_THROWS_AS(loss(LossVariant::parse("uni:I"), b), PreconditionError);
}

TEST_CASE("make_batch layout") {
  Rng rng(1);
  const FlatCorpus flat = testing::random_flat(rng, 4);
  const std::vector<std::size_t> rows{2, 0};
  const TrainingBatch plain = make_batch(flat, rows, false);
  CHECK(plain.anchors == 2);
  CHECK(plain.passages == std::vector<std::string>{flat.passages[2], flat.passages[0]});
  CHECK(plain.iq_pairs.size() == 2);
  const TrainingBatch hard = make_batch(flat, rows, true);
  CHECK(hard.passages.size() == 6);
  CHECK(hard.instructions.size() == 4);
  CHECK(hard.queries.size() == 4);
  CHECK(hard.passages[2] == flat.passages[flat.negatives[2].passage_neg1]);
  CHECK(hard.passages[3] == flat.passages[flat.negatives[2].passage_neg2]);
  CHECK(hard.instructions[2] == flat.instructions[flat.negatives[2].instruction_neg]);
  REQUIRE(hard.iq_pairs.size() == 6);
  CHECK(hard.iq_pairs[2] == std::pair<std::size_t, std::size_t>{2, 0});
  CHECK(hard.iq_pairs[3] == std::pair<std::size_t, std::size_t>{0, 2});
  hard.validate();

  TrainingBatch broken = hard;
  broken.iq_pairs[1] = {0, 1};
  CHECK_THROWS_AS(broken.validate(), PreconditionError);
  const std::vector<std::size_t> out_of_range{9};
  CHECK_THROWS_AS(make_batch(flat, out_of_range, false), PreconditionError);
}

TEST_CASE("bundle tables match direct evaluation") {
  Rng rng(2);
  const FlatCorpus flat = testing::random_flat(rng, 3);
  const RetrieverModel m = hash_model(8, 4, Interaction::kCrossAttention);

  const std::vector<std::size_t> one{1};
  const ScoreBundle single = build_score_bundle(make_batch(flat, one, false), m, 1.0);
  CHECK(single.s_p.size() == 1);
  CHECK(single.s_p(0, 0) == single.s_i(0, 0));
  CHECK(single.s_p(0, 0) == single.s_iq(0, 0));

  const std::vector<std::size_t> two{0, 2};
  const TrainingBatch b = make_batch(flat, two, true);
  const ScoreBundle s = build_score_bundle(b, m, 1.0);
  for (std::size_t i = 0; i < 2; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    for (std::size_t p = 0; p < b.passages.size(); ++p) {
      CHECK(std::abs(s.s_p(r, static_cast<Eigen::Index>(p)) -
                     m.score(b.passages[p], b.instructions[i], b.queries[i])) <= 1e-14);
    }
    for (std::size_t j = 0; j < b.instructions.size(); ++j) {
      CHECK(std::abs(s.s_i(r, static_cast<Eigen::Index>(j)) -
                     m.score(b.passages[i], b.instructions[j], b.queries[i])) <= 1e-14);
    }
    for (std::size_t k = 0; k < b.iq_pairs.size(); ++k) {
      const auto [ji, qi] = b.iq_pairs[k];
      CHECK(std::abs(s.s_iq(r, static_cast<Eigen::Index>(k)) -
                     m.score(b.passages[i], b.instructions[ji], b.queries[qi])) <= 1e-14);
    }
  }
}

TEST_CASE("bundle cost is linear in the batch") {
  Rng rng(3);
  const FlatCorpus flat = testing::random_flat(rng, 8);
  const RetrieverModel m = hash_model(8, 1, Interaction::kConcat);
  const std::vector<std::size_t> rows{0, 1, 2, 3, 4, 5, 6, 7};
  const ScoreBundle s = build_score_bundle(make_batch(flat, rows, false), m, 1.0);
  CHECK(s.counters.marginal_rows == 8 * 3);
  CHECK(s.counters.passage_encodings == 8);
  // iq_{j,i} for every (j, i) plus nothing else: the IQ marginal reuses the diagonal.
  CHECK(s.counters.iq_encodings == 8 * 8);
}

TEST_CASE("fast loss agrees with the oracles") {
  Rng rng(17);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 2 + rng.below(4);
    const FlatCorpus flat = testing::random_flat(rng, n);
    std::vector<std::size_t> rows(n);
    for (std::size_t i = 0; i < n; ++i) rows[i] = i;
    const bool hard = trial % 2 == 0;
    const TrainingBatch b = make_batch(flat, rows, hard);
    const RetrieverModel m =
        hash_model(16, 100 + trial, trial % 3 == 0 ? Interaction::kCrossAttention : Interaction::kConcat);
    const double tau = 0.2 + rng.uniform();
    for (const auto& v : all_variants()) {
      const double fast = loss(v, build_score_bundle(b, m, tau));
      CHECK(std::abs(fast - brute_force_loss(v, b, m, tau)) <= 1e-12);
      CHECK(std::abs(fast - testing::oracle_loss(v, b, m, tau)) <= 1e-12);
      CHECK(std::abs(fast - loss_and_grad(v, b, m, tau).loss) <= 1e-12);
    }
  }
}

TEST_CASE("brute force guard and trivial batch") {
  Rng rng(5);
  const FlatCorpus flat = testing::random_flat(rng, 7);
  const RetrieverModel m = hash_model(8, 1, Interaction::kConcat);
  const std::vector<std::size_t> seven{0, 1, 2, 3, 4, 5, 6};
  CHECK_THROWS_AS(brute_force_loss(LossVariant::parse("uni:P"), make_batch(flat, seven, false), m, 1.0),
                  PreconditionError);
  const std::vector<std::size_t> one{3};
  CHECK(brute_force_loss(LossVariant::parse("uni:P"), make_batch(flat, one, false), m, 1.0) == 0.0);
}

TEST_CASE("large temperature: loss tends to ln(count) and gradients vanish") {
  Rng rng(6);
  const FlatCorpus flat = testing::random_flat(rng, 3);
  const std::vector<std::size_t> rows{0, 1, 2};
  const TrainingBatch b = make_batch(flat, rows, true);
  const RetrieverModel m = hash_model(8, 2, Interaction::kCrossAttention);
  const auto r = loss_and_grad(LossVariant::parse("uni:P"), b, m, 1e6);
  CHECK(std::abs(r.loss - std::log(static_cast<double>(b.passages.size()))) <= 1e-5);
  const auto multi = loss_and_grad(LossVariant::parse("multi:P,I,IQ"), b, m, 1e6);
  const double count = static_cast<double>(b.passages.size() + b.instructions.size() + b.iq_pairs.size());
  CHECK(std::abs(multi.loss - std::log(count)) <= 1e-5);
  for (const auto& [name, g] : multi.grads.tensors()) {
    if (g->size() > 0) CHECK(g->cwiseAbs().maxCoeff() <= 1e-5);
  }
}

TEST_CASE("duplicate anchors get identical per-anchor gradients") {
  Rng rng(7);
  const FlatCorpus flat = testing::random_flat(rng, 2);
  const std::vector<std::size_t> rows{1, 1};
  const TrainingBatch b = make_batch(flat, rows, false);
  const RetrieverModel m = hash_model(6, 3, Interaction::kCrossAttention);
  LossOptions opts;
  opts.per_anchor = true;
  const auto r = loss_and_grad(LossVariant::parse("multi:P,I,IQ"), b, m, 0.5, opts);
  REQUIRE(r.per_anchor.size() == 2);
  const auto a = r.per_anchor[0].tensors();
  const auto c = r.per_anchor[1].tensors();
  for (std::size_t t = 0; t < a.size(); ++t) CHECK((*a[t].second - *c[t].second).cwiseAbs().maxCoeff() <= 1e-15);
  CHECK(r.per_anchor_loss[0] == r.per_anchor_loss[1]);
}
