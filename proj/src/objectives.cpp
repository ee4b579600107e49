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

#include "instir/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>

#include "instir/error.hpp"
#include "instir/util.hpp"

namespace instir {

LossVariant LossVariant::parse(std::string_view name) {
  const auto colon = name.find(':');
  if (colon == std::string_view::npos) throw ConfigError("loss variant '" + std::string(name) + "' lacks ':'");
  LossVariant v;
  const std::string_view family = name.substr(0, colon);
  if (family == "uni") v.family = LossFamily::kUni;
  else if (family == "multi") v.family = LossFamily::kMulti;
  else throw ConfigError("loss variant '" + std::string(name) + "': family must be uni or multi");
  v.terms = 0;
  for (const auto& raw : split(name.substr(colon + 1), ',')) {
    const std::string t = trim(raw);
    unsigned bit = 0;
    if (t == "P") bit = kTermP;
    else if (t == "I") bit = kTermI;
    else if (t == "IQ") bit = kTermIQ;
    else throw ConfigError("loss variant '" + std::string(name) + "': unknown term '" + t + "'");
    if (v.terms & bit) throw ConfigError("loss variant '" + std::string(name) + "': repeated term '" + t + "'");
    v.terms |= bit;
  }
  return v;
}

std::string LossVariant::name() const {
  std::string out = family == LossFamily::kUni ? "uni:" : "multi:";
  bool first = true;
  for (auto [bit, label] : {std::pair{kTermP, "P"}, std::pair{kTermI, "I"}, std::pair{kTermIQ, "IQ"}}) {
    if (terms & bit) {
      if (!first) out += ",";
      out += label;
      first = false;
    }
  }
  return out;
}

std::vector<LossVariant> all_variants() {
  static constexpr unsigned kOrder[] = {kTermP,         kTermI,          kTermIQ,          kTermP | kTermI,
                                        kTermP | kTermIQ, kTermI | kTermIQ, kTermP | kTermI | kTermIQ};
  std::vector<LossVariant> out;
  for (LossFamily f : {LossFamily::kUni, LossFamily::kMulti}) {
    for (unsigned t : kOrder) out.push_back({f, t});
  }
  return out;
}

void TrainingBatch::validate() const {
  if (anchors < 1) throw PreconditionError("batch has no anchors");
  if (passages.size() < anchors || instructions.size() < anchors || queries.size() < anchors ||
      iq_pairs.size() < anchors) {
    throw PreconditionError("batch tables are shorter than the anchor count");
  }
  for (std::size_t k = 0; k < iq_pairs.size(); ++k) {
    const auto [j, q] = iq_pairs[k];
    if (j >= instructions.size() || q >= queries.size()) throw PreconditionError("batch iq pair out of range");
    if (k < anchors && (j != k || q != k)) throw PreconditionError("batch iq pair of an anchor must be (i, i)");
  }
}

TrainingBatch make_batch(const FlatCorpus& flat, std::span<const std::size_t> families, bool hard_negatives) {
  TrainingBatch b;
  b.anchors = families.size();
  for (std::size_t a = 0; a < families.size(); ++a) {
    const std::size_t f = families[a];
    if (f >= flat.n_families()) throw PreconditionError("make_batch: family row out of range");
    b.passages.push_back(flat.passages[f]);
    b.instructions.push_back(flat.instructions[f]);
    b.queries.push_back(flat.queries[f]);
    b.iq_pairs.emplace_back(a, a);
  }
  if (hard_negatives) {
    for (std::size_t a = 0; a < families.size(); ++a) {
      const NegativeRows& neg = flat.negatives[families[a]];
      b.passages.push_back(flat.passages[neg.passage_neg1]);
      b.passages.push_back(flat.passages[neg.passage_neg2]);
      b.instructions.push_back(flat.instructions[neg.instruction_neg]);
      b.queries.push_back(flat.queries[neg.query_neg]);
      b.iq_pairs.emplace_back(b.anchors + a, a);  // (I-, Q+)
      b.iq_pairs.emplace_back(a, b.anchors + a);  // (I+, Q-)
    }
  }
  return b;
}

double score(const Vector& p, const Vector& iq, double tau) {
  if (!(tau > 0.0)) throw PreconditionError("score: temperature must be positive");
  return cosine_sim(p, iq) / tau;
}

double nce_core(double pos, std::span<const double> negs) {
  if (negs.empty()) throw PreconditionError("nce_core: empty denominator");
  const double mx = *std::max_element(negs.begin(), negs.end());
  double total = 0.0;
  for (double s : negs) total += std::exp(s - mx);
  return mx + std::log(total) - pos;
}

namespace {

using IqKey = std::pair<std::size_t, std::size_t>;

/// Shared-computation state behind a bundle, kept for the backward pass.
class BundleWork {
 public:
  BundleWork(const TrainingBatch& batch, const RetrieverModel& model, const CrossAttentionHooks* hooks)
      : batch_(batch), model_(model), hooks_(hooks), passages_(batch.passages.size()) {
    batch.validate();
  }

  const Vector& passage(std::size_t m) {
    if (!passages_[m]) {
      const Vector u = pool(model_.encoders.passage->embed(batch_.passages[m]), model_.encoders.pooling);
      passages_[m] = head_forward(u, model_.params.proj_passage);
      ++counters.passage_encodings;
    }
    return passages_[m]->out;
  }

  const Vector& iq(IqKey key) {
    auto it = iq_index_.find(key);
    if (it != iq_index_.end()) return iqs_[it->second].out;
    IqEntry e;
    const std::string& instr = batch_.instructions[key.first];
    const std::string& query = batch_.queries[key.second];
    if (model_.interaction == Interaction::kConcat) {
      const Vector u = pool(model_.encoders.query->embed(concat_iq(instr, query)), model_.encoders.pooling);
      e.head = head_forward(u, model_.params.proj_iq);
      e.out = e.head.out;
    } else {
      auto r = cross_attention_forward(tokens(instr), tokens(query), model_.params, hooks_);
      e.out = std::move(r.iq);
      e.cache = std::move(r.cache);
    }
    ++counters.iq_encodings;
    iq_index_.emplace(key, iqs_.size());
    iqs_.push_back(std::move(e));
    return iqs_.back().out;
  }

  /// Accumulates dL/dsim * other-vector into the per-vector upstream buffers.
  void add_upstream(std::size_t passage_row, IqKey key, double coeff) {
    if (coeff == 0.0) return;
    const std::size_t iq_row = iq_index_.at(key);
    const int d = model_.params.dim;
    auto& gp = passage_grad_[passage_row];
    if (gp.size() == 0) gp = Vector::Zero(d);
    auto& gq = iq_grad_[iq_row];
    if (gq.size() == 0) gq = Vector::Zero(d);
    gp += coeff * iqs_[iq_row].out;
    gq += coeff * passages_[passage_row]->out;
  }

  FusionGrads backward() {
    FusionGrads g = FusionGrads::zeros_like(model_.params);
    const auto& params = model_.params;
    for (const auto& [m, up] : passage_grad_) {
      head_backward(*passages_[m], params.proj_passage, up, params.proj_passage ? &g.proj_passage : nullptr);
    }
    for (const auto& [row, up] : iq_grad_) {
      const IqEntry& e = iqs_[row];
      if (model_.interaction == Interaction::kConcat) {
        head_backward(e.head, params.proj_iq, up, params.proj_iq ? &g.proj_iq : nullptr);
      } else {
        const auto ca = cross_attention_backward(e.cache, params, up);
        g.w_instruction += ca.w_instruction;
        g.w_query_key += ca.w_query_key;
        g.w_query_value += ca.w_query_value;
        if (params.proj_iq) g.proj_iq += ca.proj_iq;
      }
    }
    passage_grad_.clear();
    iq_grad_.clear();
    return g;
  }

  ScoreBundle::Counters counters;

 private:
  struct IqEntry {
    Vector out;
    HeadResult head;
    FusionCache cache;
  };

  const TokenMatrix& tokens(const std::string& text) {
    auto it = token_cache_.find(text);
    if (it == token_cache_.end()) it = token_cache_.emplace(text, model_.encoders.query->embed(text)).first;
    return it->second;
  }

  const TrainingBatch& batch_;
  const RetrieverModel& model_;
  const CrossAttentionHooks* hooks_;
  std::vector<std::optional<HeadResult>> passages_;
  std::map<IqKey, std::size_t> iq_index_;
  std::vector<IqEntry> iqs_;
  std::map<std::string, TokenMatrix, std::less<>> token_cache_;
  std::map<std::size_t, Vector> passage_grad_;
  std::map<std::size_t, Vector> iq_grad_;
};

ScoreBundle fill_bundle(BundleWork& work, const TrainingBatch& batch, double tau, unsigned terms) {
  if (!(tau > 0.0)) throw PreconditionError("temperature must be positive");
  ScoreBundle b;
  b.tau = tau;
  b.anchors = batch.anchors;
  const auto n = static_cast<Eigen::Index>(batch.anchors);
  if (terms & kTermP) b.s_p.resize(n, static_cast<Eigen::Index>(batch.passages.size()));
  if (terms & kTermI) b.s_i.resize(n, static_cast<Eigen::Index>(batch.instructions.size()));
  if (terms & kTermIQ) b.s_iq.resize(n, static_cast<Eigen::Index>(batch.iq_pairs.size()));
  for (std::size_t i = 0; i < batch.anchors; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    if (terms & kTermP) {
      const Vector& anchor_iq = work.iq({i, i});
      for (std::size_t m = 0; m < batch.passages.size(); ++m) {
        b.s_p(r, static_cast<Eigen::Index>(m)) = work.passage(m).dot(anchor_iq);
      }
      ++work.counters.marginal_rows;
    }
    if (terms & kTermI) {
      const Vector& p = work.passage(i);
      for (std::size_t j = 0; j < batch.instructions.size(); ++j) {
        b.s_i(r, static_cast<Eigen::Index>(j)) = p.dot(work.iq({j, i}));
      }
      ++work.counters.marginal_rows;
    }
    if (terms & kTermIQ) {
      const Vector& p = work.passage(i);
      for (std::size_t k = 0; k < batch.iq_pairs.size(); ++k) {
        b.s_iq(r, static_cast<Eigen::Index>(k)) = p.dot(work.iq(batch.iq_pairs[k]));
      }
      ++work.counters.marginal_rows;
    }
  }
  b.counters = work.counters;
  return b;
}

std::vector<double> scaled_row(const Matrix& table, Eigen::Index row, double tau) {
  std::vector<double> out(static_cast<std::size_t>(table.cols()));
  for (Eigen::Index c = 0; c < table.cols(); ++c) out[static_cast<std::size_t>(c)] = table(row, c) / tau;
  return out;
}

const Matrix& table_for(const ScoreBundle& b, LossTerm t) {
  return t == kTermP ? b.s_p : (t == kTermI ? b.s_i : b.s_iq);
}

constexpr LossTerm kTerms[] = {kTermP, kTermI, kTermIQ};

void require_tables(const LossVariant& v, const ScoreBundle& b) {
  for (LossTerm t : kTerms) {
    if (v.has(t) && table_for(b, t).rows() != static_cast<Eigen::Index>(b.anchors)) {
      throw PreconditionError("score bundle lacks a table required by " + v.name());
    }
  }
}

double anchor_loss(const LossVariant& v, const ScoreBundle& b, std::size_t i) {
  const auto r = static_cast<Eigen::Index>(i);
  if (v.family == LossFamily::kUni) {
    double total = 0.0;
    for (LossTerm t : kTerms) {
      if (!v.has(t)) continue;
      const Matrix& table = table_for(b, t);
      total += nce_core(table(r, r) / b.tau, scaled_row(table, r, b.tau));
    }
    return total;
  }
  std::vector<double> all;
  double pos = 0.0;
  for (LossTerm t : kTerms) {
    if (!v.has(t)) continue;
    const Matrix& table = table_for(b, t);
    pos = table(r, r) / b.tau;
    const auto row = scaled_row(table, r, b.tau);
    all.insert(all.end(), row.begin(), row.end());
  }
  return nce_core(pos, all);
}

/// dL_i/d(raw sim) for every entry of the anchor's rows, pushed into `work`.
void anchor_upstream(const LossVariant& v, const ScoreBundle& b, const TrainingBatch& batch, std::size_t i,
                     double weight, BundleWork& work) {
  const auto r = static_cast<Eigen::Index>(i);
  const double tau = b.tau;
  auto push = [&](LossTerm t, Eigen::Index c, double coeff) {
    const auto col = static_cast<std::size_t>(c);
    switch (t) {
      case kTermP: work.add_upstream(col, {i, i}, coeff); break;
      case kTermI: work.add_upstream(i, {col, i}, coeff); break;
      case kTermIQ: work.add_upstream(i, batch.iq_pairs[col], coeff); break;
    }
  };
  if (v.family == LossFamily::kUni) {
    for (LossTerm t : kTerms) {
      if (!v.has(t)) continue;
      const Matrix& table = table_for(b, t);
      const auto row = scaled_row(table, r, tau);
      const double mx = *std::max_element(row.begin(), row.end());
      double z = 0.0;
      for (double s : row) z += std::exp(s - mx);
      for (Eigen::Index c = 0; c < table.cols(); ++c) {
        double g = std::exp(row[static_cast<std::size_t>(c)] - mx) / z;
        if (c == r) g -= 1.0;
        push(t, c, weight * g / tau);
      }
    }
    return;
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (LossTerm t : kTerms) {
    if (v.has(t)) mx = std::max(mx, table_for(b, t).row(r).maxCoeff() / tau);
  }
  double z = 0.0;
  for (LossTerm t : kTerms) {
    if (!v.has(t)) continue;
    const Matrix& table = table_for(b, t);
    for (Eigen::Index c = 0; c < table.cols(); ++c) z += std::exp(table(r, c) / tau - mx);
  }
  bool numerator_done = false;
  for (LossTerm t : kTerms) {
    if (!v.has(t)) continue;
    const Matrix& table = table_for(b, t);
    for (Eigen::Index c = 0; c < table.cols(); ++c) {
      double g = std::exp(table(r, c) / tau - mx) / z;
      if (c == r && !numerator_done) {
        g -= 1.0;
        numerator_done = true;
      }
      push(t, c, weight * g / tau);
    }
  }
}

}  // namespace

ScoreBundle build_score_bundle(const TrainingBatch& batch, const RetrieverModel& model, double tau, unsigned terms) {
  BundleWork work(batch, model, nullptr);
  return fill_bundle(work, batch, tau, terms);
}

double loss(const LossVariant& variant, const ScoreBundle& bundle) {
  require_tables(variant, bundle);
  double total = 0.0;
  for (std::size_t i = 0; i < bundle.anchors; ++i) total += anchor_loss(variant, bundle, i);
  return total / static_cast<double>(bundle.anchors);
}

LossAndGrad loss_and_grad(const LossVariant& variant, const TrainingBatch& batch, const RetrieverModel& model,
                          double tau, const LossOptions& options) {
  BundleWork work(batch, model, options.hooks);
  const ScoreBundle bundle = fill_bundle(work, batch, tau, variant.terms);
  const double weight = 1.0 / static_cast<double>(batch.anchors);

  LossAndGrad out;
  for (std::size_t i = 0; i < batch.anchors; ++i) {
    const double li = anchor_loss(variant, bundle, i);
    if (!std::isfinite(li)) throw NumericError("non-finite loss at anchor " + std::to_string(i));
    out.per_anchor_loss.push_back(li);
    out.loss += li;
  }
  out.loss *= weight;

  if (options.per_anchor) {
    out.grads = FusionGrads::zeros_like(model.params);
    for (std::size_t i = 0; i < batch.anchors; ++i) {
      anchor_upstream(variant, bundle, batch, i, weight, work);
      FusionGrads gi = work.backward();
      if (!gi.all_finite()) throw NumericError("non-finite gradient at anchor " + std::to_string(i));
      out.grads += gi;
      out.per_anchor.push_back(std::move(gi));
    }
  } else {
    for (std::size_t i = 0; i < batch.anchors; ++i) anchor_upstream(variant, bundle, batch, i, weight, work);
    out.grads = work.backward();
    if (!out.grads.all_finite()) {
      // Recompute per anchor to name the offender.
      for (std::size_t i = 0; i < batch.anchors; ++i) {
        anchor_upstream(variant, bundle, batch, i, weight, work);
        if (!work.backward().all_finite()) throw NumericError("non-finite gradient at anchor " + std::to_string(i));
      }
      throw NumericError("non-finite gradient");
    }
  }
  if (options.perturb_gradient) options.perturb_gradient(out.grads);
  return out;
}

double brute_force_loss(const LossVariant& variant, const TrainingBatch& batch, const RetrieverModel& model,
                        double tau) {
  batch.validate();
  if (batch.anchors > kBruteForceMaxAnchors) {
    throw PreconditionError("brute_force_loss: at most " + std::to_string(kBruteForceMaxAnchors) + " anchors");
  }
  if (!(tau > 0.0)) throw PreconditionError("temperature must be positive");
  auto sim = [&](const std::string& p, const std::string& instr, const std::string& q) {
    const Vector pv = model.encode_passage(p);
    const Vector iqv = model.encode_iq(instr, q);
    double dot = 0.0;
    for (Eigen::Index c = 0; c < pv.size(); ++c) dot += pv[c] * iqv[c];
    return dot / tau;
  };

  double total = 0.0;
  for (std::size_t i = 0; i < batch.anchors; ++i) {
    const double pos = sim(batch.passages[i], batch.instructions[i], batch.queries[i]);
    double den_p = 0.0;
    double den_i = 0.0;
    double den_iq = 0.0;
    if (variant.has(kTermP)) {
      for (std::size_t m = 0; m < batch.passages.size(); ++m) {
        den_p += std::exp(sim(batch.passages[m], batch.instructions[i], batch.queries[i]));
      }
    }
    if (variant.has(kTermI)) {
      for (std::size_t j = 0; j < batch.instructions.size(); ++j) {
        den_i += std::exp(sim(batch.passages[i], batch.instructions[j], batch.queries[i]));
      }
    }
    if (variant.has(kTermIQ)) {
      for (const auto& [j, k] : batch.iq_pairs) {
        den_iq += std::exp(sim(batch.passages[i], batch.instructions[j], batch.queries[k]));
      }
    }
    if (variant.family == LossFamily::kUni) {
      if (variant.has(kTermP)) total += -std::log(std::exp(pos) / den_p);
      if (variant.has(kTermI)) total += -std::log(std::exp(pos) / den_i);
      if (variant.has(kTermIQ)) total += -std::log(std::exp(pos) / den_iq);
    } else {
      total += -std::log(std::exp(pos) / (den_p + den_i + den_iq));
    }
  }
  return total / static_cast<double>(batch.anchors);
}

}  // namespace instir
