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
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "instir/corpus.hpp"
#include "instir/embedding.hpp"
#include "instir/fusion.hpp"
#include "instir/objectives.hpp"

namespace instir {

struct TrainConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::size_t batch_size = 4;
  std::size_t epochs = 2;
  std::uint64_t seed = 0;
  LossVariant variant{LossFamily::kMulti, kTermP | kTermI | kTermIQ};
  Interaction interaction = Interaction::kConcat;
  double tau = 1.0;
  bool share_encoder = true;
  Pooling pooling = Pooling::kMean;
  /// Minibatches whose gradients are averaged per optimizer step.
  std::size_t grad_accum = 1;
  bool hard_negatives = true;
  std::string init_scheme = "identity-noise";
  bool projection = true;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// Flat `key = value` file: `#` starts a comment, string values may be
/// quoted, booleans are true/false, betas is `[b1, b2]`. Keys are kept
/// with their line numbers so callers can report unknown ones.
struct KeyValueFile {
  struct Entry {
    std::string value;
    std::size_t line = 0;
    bool used = false;
  };
  std::string source;
  std::map<std::string, Entry, std::less<>> entries;

  static KeyValueFile parse(std::string_view text, const std::string& source);
  /// Marks the key used and returns its value.
  std::optional<std::string> take(std::string_view key);
  /// Throws ConfigError for the first key nobody took.
  void reject_unused() const;
};

/// Reads the TrainConfig keys (lr, betas, eps, weight_decay, batch_size,
/// epochs, seed, variant, interaction, tau, share_encoder, pooling,
/// grad_accum, hard_negatives, init_scheme, projection).
TrainConfig train_config_from(KeyValueFile& kv);
/// Reads provider.* keys.
ProviderConfig provider_config_from(KeyValueFile& kv);

/// Provider settings as stored in checkpoint headers (no secrets: only the
/// name of the API-key variable).
nlohmann::ordered_json to_json(const ProviderConfig& cfg);
ProviderConfig provider_config_from_json(const nlohmann::json& j);

std::string to_key_values(const TrainConfig& cfg);
nlohmann::ordered_json to_json(const TrainConfig& cfg);

struct AdamWState {
  /// Indexed like FusionParams::tensors().
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  std::uint64_t t = 0;
  std::uint64_t skipped = 0;

  static AdamWState zeros_like(const FusionParams& p);
};

/// Decoupled-weight-decay update. Returns false, leaving params untouched
/// and counting the skip, when any gradient entry is non-finite.
bool adamw_step(FusionParams& params, const FusionGrads& grads, AdamWState& state, const TrainConfig& cfg);

/// Layout: magic "INSTIRAD", u64 t, u64 skipped, u64 tensor count, then
/// each (m, v) pair as dim*dim little-endian f64.
std::string serialize_optimizer_state(const AdamWState& state);
AdamWState parse_optimizer_state(std::string_view bytes, int dim);

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double loss = 0.0;
};

struct TrainResult {
  FusionParams params;
  AdamWState optimizer;
  std::vector<StepRecord> history;
  std::vector<double> epoch_mean_loss;
  std::size_t degenerate_batches = 0;
  std::vector<std::string> checkpoints;
};

struct TrainOptions {
  /// When set: history.csv, epoch-<n>.ckpt (+ .adamw) and final.ckpt.
  std::string out_dir;
  /// Starting parameters; default is init_params from the config.
  std::optional<FusionParams> initial;
  std::function<void(const StepRecord&)> on_step;
  /// Merged into every checkpoint header.
  nlohmann::ordered_json header_extra = nlohmann::ordered_json::object();
};

TrainResult train(const FlatCorpus& flat, const EncoderPair& encoders, const TrainConfig& cfg,
                  const TrainOptions& options = {});

std::string history_csv(const std::vector<StepRecord>& history);

struct GradCheckOptions {
  int dim = 6;
  std::uint64_t seed = 7;
  double step = 1e-5;
  std::function<void(FusionGrads&)> perturb_gradient;
};

struct GradCheckInstance {
  std::size_t index = 0;
  std::map<std::string, double> rel_error;
  double max_rel_error = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::string variant;
  double tolerance = 0.0;
  std::vector<GradCheckInstance> instances;
  /// Worst error per parameter matrix across instances.
  std::map<std::string, double> max_rel_error;
  bool passed = true;

  nlohmann::ordered_json to_json() const;
};

/// Compares the analytic gradient with central differences on random small
/// batches. Error per matrix is max|a - n| / max(max|a|, max|n|, 1e-8).
GradCheckReport grad_check(const TrainConfig& cfg, std::size_t n_instances, double tolerance,
                           const GradCheckOptions& options = {});

}  // namespace instir
