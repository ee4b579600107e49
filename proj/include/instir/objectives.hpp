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
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "instir/corpus.hpp"
#include "instir/fusion.hpp"
#include "instir/model.hpp"

namespace instir {

enum class LossFamily { kUni, kMulti };

/// Bit flags for the contrasted variables.
enum LossTerm : unsigned {
  kTermP = 1u,   // passage marginal: sim(p_m, iq_{i,i})
  kTermI = 2u,   // instruction marginal: sim(p_i, iq_{j,i})
  kTermIQ = 4u,  // instruction-query marginal: sim(p_i, iq_{k,k})
};

/// One of the 14 objectives: a family (univariate sum of NCE terms, or one
/// multivariate NCE over the union of marginals) and a non-empty term set.
struct LossVariant {
  LossFamily family = LossFamily::kMulti;
  unsigned terms = kTermP;

  /// Accepts "uni:P", "multi:P,I,IQ", etc. Terms may appear in any order.
  static LossVariant parse(std::string_view name);
  /// Canonical name, terms in P,I,IQ order.
  std::string name() const;
  bool has(LossTerm t) const noexcept { return (terms & t) != 0; }

  bool operator==(const LossVariant&) const = default;
};

/// All 14 variants, uni before multi, each in canonical term order.
std::vector<LossVariant> all_variants();

/// A minibatch laid out for marginal sampling. Anchor i (i < anchors) owns
/// row i of passages, instructions and queries, and iq_pairs[i] == (i, i).
/// Rows past `anchors` are extra candidates (hard negatives).
struct TrainingBatch {
  std::vector<std::string> passages;
  std::vector<std::string> instructions;
  std::vector<std::string> queries;
  /// (instruction row, query row) candidates for the IQ marginal.
  std::vector<std::pair<std::size_t, std::size_t>> iq_pairs;
  std::size_t anchors = 0;

  void validate() const;
};

/// Builds a batch from flattened families. With hard negatives, each family
/// also contributes P1- and P2- as passages, I- as an instruction, Q- as a
/// query, and (I-, Q+), (I+, Q-) as IQ candidates.
TrainingBatch make_batch(const FlatCorpus& flat, std::span<const std::size_t> families, bool hard_negatives);

/// Raw cosine tables (not yet divided by tau) for every anchor:
///   s_p(i, m)  = sim(p_m, iq_{i,i})     m over passages
///   s_i(i, j)  = sim(p_i, iq_{j,i})     j over instructions
///   s_iq(i, k) = sim(p_i, iq_pairs[k])  k over IQ candidates
/// Column i of each table is the positive score.
struct ScoreBundle {
  Matrix s_p;
  Matrix s_i;
  Matrix s_iq;
  double tau = 1.0;
  std::size_t anchors = 0;

  struct Counters {
    std::size_t passage_encodings = 0;
    std::size_t iq_encodings = 0;
    std::size_t marginal_rows = 0;
  } counters;
};

/// cosine(p, iq) / tau. Throws PreconditionError when tau <= 0.
double score(const Vector& p, const Vector& iq, double tau);

/// Fills the tables for the requested terms (default all). Unrequested
/// tables are left empty. Cost is linear in batch size per anchor and
/// variable: each distinct iq_{j,i} is encoded once.
ScoreBundle build_score_bundle(const TrainingBatch& batch, const RetrieverModel& model, double tau,
                               unsigned terms = kTermP | kTermI | kTermIQ);

/// -log(exp(pos) / sum(exp(negs))) with a max-shifted log-sum-exp.
double nce_core(double pos, std::span<const double> negs);

/// Mean over anchors; see LossVariant.
double loss(const LossVariant& variant, const ScoreBundle& bundle);

struct LossOptions {
  const CrossAttentionHooks* hooks = nullptr;
  /// Test seam applied to the finished gradient.
  std::function<void(FusionGrads&)> perturb_gradient;
  /// Also return each anchor's contribution to the gradient.
  bool per_anchor = false;
};

struct LossAndGrad {
  double loss = 0.0;
  FusionGrads grads;
  std::vector<FusionGrads> per_anchor;
  std::vector<double> per_anchor_loss;
};

/// Loss and its exact gradient with respect to the fusion parameters.
/// Encoders are frozen, so under concat only the projection heads receive
/// gradient. Throws NumericError naming the anchor on non-finite values.
LossAndGrad loss_and_grad(const LossVariant& variant, const TrainingBatch& batch, const RetrieverModel& model,
                          double tau, const LossOptions& options = {});

inline constexpr std::size_t kBruteForceMaxAnchors = 6;

/// Reference loss recomputed from scratch: every score is encoded
/// independently and every denominator is an explicit sum of exponentials.
/// Throws PreconditionError for more than kBruteForceMaxAnchors anchors.
double brute_force_loss(const LossVariant& variant, const TrainingBatch& batch, const RetrieverModel& model,
                        double tau);

}  // namespace instir
