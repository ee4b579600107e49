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

#include "instir/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>
#include <numeric>
#include <sstream>

#include "instir/error.hpp"
#include "instir/log.hpp"
#include "instir/model.hpp"
#include "instir/util.hpp"

namespace instir {

void TrainConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("train config: lr must be a finite value >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("train config: betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw ConfigError("train config: eps must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("train config: weight_decay must be >= 0");
  if (batch_size < 2) throw ConfigError("train config: batch_size must be >= 2 for contrastive training");
  if (epochs < 1) throw ConfigError("train config: epochs must be >= 1");
  if (!(tau > 0.0)) throw ConfigError("train config: tau must be positive");
  if (grad_accum < 1) throw ConfigError("train config: grad_accum must be >= 1");
  if (variant.terms == 0 || (variant.terms & ~7u) != 0) throw ConfigError("train config: empty loss variant");
}

namespace {

std::string unquote(const std::string& v) {
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return v.substr(1, v.size() - 2);
  return v;
}

[[noreturn]] void bad_value(const KeyValueFile& kv, std::string_view key, const std::string& why) {
  const auto it = kv.entries.find(key);
  const std::size_t line = it == kv.entries.end() ? 0 : it->second.line;
  throw ConfigError(kv.source + ":" + std::to_string(line) + ": " + std::string(key) + ": " + why);
}

double as_double(const KeyValueFile& kv, std::string_view key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::logic_error&) {
    bad_value(kv, key, "expected a number, got '" + v + "'");
  }
}

std::uint64_t as_u64(const KeyValueFile& kv, std::string_view key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
    bad_value(kv, key, "expected a non-negative integer, got '" + v + "'");
  }
  try {
    return std::stoull(v);
  } catch (const std::logic_error&) {
    bad_value(kv, key, "integer out of range: '" + v + "'");
  }
}

bool as_bool(const KeyValueFile& kv, std::string_view key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  bad_value(kv, key, "expected true or false, got '" + v + "'");
}

template <typename F>
auto as_enum(const KeyValueFile& kv, std::string_view key, const std::string& v, F parse) {
  try {
    return parse(v);
  } catch (const Error& e) {
    bad_value(kv, key, e.what());
  }
}

}  // namespace

KeyValueFile KeyValueFile::parse(std::string_view text, const std::string& source) {
  KeyValueFile kv;
  kv.source = source;
  std::string prefix;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string raw;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = trim(raw);
    // Strip a trailing comment unless the '#' sits inside a quoted value.
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line = trim(line.substr(0, i));
        break;
      }
    }
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ParseError(source, line_no, "unterminated section header");
      prefix = trim(line.substr(1, line.size() - 2));
      if (!prefix.empty()) prefix += ".";
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(source, line_no, "expected 'key = value'");
    const std::string key = prefix + trim(line.substr(0, eq));
    const std::string value = unquote(trim(line.substr(eq + 1)));
    if (key.empty() || key == prefix) throw ParseError(source, line_no, "empty key");
    if (kv.entries.count(key)) throw ParseError(source, line_no, "duplicate key '" + key + "'");
    kv.entries[key] = Entry{value, line_no, false};
  }
  return kv;
}

std::optional<std::string> KeyValueFile::take(std::string_view key) {
  auto it = entries.find(key);
  if (it == entries.end()) return std::nullopt;
  it->second.used = true;
  return it->second.value;
}

void KeyValueFile::reject_unused() const {
  for (const auto& [key, e] : entries) {
    if (!e.used) throw ConfigError(source + ":" + std::to_string(e.line) + ": unknown key '" + key + "'");
  }
}

TrainConfig train_config_from(KeyValueFile& kv) {
  TrainConfig c;
  if (auto v = kv.take("lr")) c.lr = as_double(kv, "lr", *v);
  if (auto v = kv.take("betas")) {
    std::string s = trim(*v);
    if (s.size() < 2 || s.front() != '[' || s.back() != ']') bad_value(kv, "betas", "expected [b1, b2]");
    const auto parts = split(s.substr(1, s.size() - 2), ',');
    if (parts.size() != 2) bad_value(kv, "betas", "expected two values");
    c.beta1 = as_double(kv, "betas", trim(parts[0]));
    c.beta2 = as_double(kv, "betas", trim(parts[1]));
  }
  if (auto v = kv.take("eps")) c.eps = as_double(kv, "eps", *v);
  if (auto v = kv.take("weight_decay")) c.weight_decay = as_double(kv, "weight_decay", *v);
  if (auto v = kv.take("batch_size")) c.batch_size = as_u64(kv, "batch_size", *v);
  if (auto v = kv.take("epochs")) c.epochs = as_u64(kv, "epochs", *v);
  if (auto v = kv.take("seed")) c.seed = as_u64(kv, "seed", *v);
  if (auto v = kv.take("variant")) c.variant = as_enum(kv, "variant", *v, [](const std::string& s) {
    return LossVariant::parse(s);
  });
  if (auto v = kv.take("interaction")) c.interaction = as_enum(kv, "interaction", *v, [](const std::string& s) {
    return parse_interaction(s);
  });
  if (auto v = kv.take("tau")) c.tau = as_double(kv, "tau", *v);
  if (auto v = kv.take("share_encoder")) c.share_encoder = as_bool(kv, "share_encoder", *v);
  if (auto v = kv.take("pooling")) c.pooling = as_enum(kv, "pooling", *v, [](const std::string& s) {
    return parse_pooling(s);
  });
  if (auto v = kv.take("grad_accum")) c.grad_accum = as_u64(kv, "grad_accum", *v);
  if (auto v = kv.take("hard_negatives")) c.hard_negatives = as_bool(kv, "hard_negatives", *v);
  if (auto v = kv.take("init_scheme")) c.init_scheme = *v;
  if (auto v = kv.take("projection")) c.projection = as_bool(kv, "projection", *v);
  return c;
}

ProviderConfig provider_config_from(KeyValueFile& kv) {
  ProviderConfig p;
  if (auto v = kv.take("provider.kind")) p.kind = as_enum(kv, "provider.kind", *v, [](const std::string& s) {
    return parse_provider_kind(s);
  });
  if (auto v = kv.take("provider.dim")) p.dim = static_cast<int>(as_u64(kv, "provider.dim", *v));
  if (auto v = kv.take("provider.seed")) p.seed = as_u64(kv, "provider.seed", *v);
  if (auto v = kv.take("provider.store_path")) p.store_path = *v;
  if (auto v = kv.take("provider.query_store_path")) p.query_store_path = *v;
  auto remote = [&](RemoteEmbeddingConfig& r, const std::string& pre) {
    if (auto v = kv.take(pre + "endpoint_url")) r.endpoint_url = *v;
    if (auto v = kv.take(pre + "model_name")) r.model_name = *v;
    if (auto v = kv.take(pre + "api_key_env")) r.api_key_env = *v;
    if (auto v = kv.take(pre + "batch_size")) r.batch_size = static_cast<int>(as_u64(kv, pre + "batch_size", *v));
    if (auto v = kv.take(pre + "max_attempts")) {
      r.max_attempts = static_cast<int>(as_u64(kv, pre + "max_attempts", *v));
    }
    if (auto v = kv.take(pre + "backoff_seconds")) r.backoff_seconds = as_double(kv, pre + "backoff_seconds", *v);
    if (auto v = kv.take(pre + "timeout_seconds")) r.timeout_seconds = as_double(kv, pre + "timeout_seconds", *v);
    r.dim = p.dim;
  };
  remote(p.remote, "provider.");
  remote(p.query_remote, "provider.query_");
  return p;
}

namespace {

nlohmann::ordered_json remote_json(const RemoteEmbeddingConfig& r) {
  nlohmann::ordered_json j;
  j["endpoint_url"] = r.endpoint_url;
  j["model_name"] = r.model_name;
  j["api_key_env"] = r.api_key_env;
  j["batch_size"] = r.batch_size;
  j["max_attempts"] = r.max_attempts;
  j["backoff_seconds"] = r.backoff_seconds;
  j["timeout_seconds"] = r.timeout_seconds;
  return j;
}

RemoteEmbeddingConfig remote_from(const nlohmann::json& j, int dim) {
  RemoteEmbeddingConfig r;
  r.endpoint_url = j.value("endpoint_url", "");
  r.model_name = j.value("model_name", "");
  r.api_key_env = j.value("api_key_env", "");
  r.batch_size = j.value("batch_size", r.batch_size);
  r.max_attempts = j.value("max_attempts", r.max_attempts);
  r.backoff_seconds = j.value("backoff_seconds", r.backoff_seconds);
  r.timeout_seconds = j.value("timeout_seconds", r.timeout_seconds);
  r.dim = dim;
  return r;
}

}  // namespace

nlohmann::ordered_json to_json(const ProviderConfig& c) {
  nlohmann::ordered_json j;
  j["kind"] = to_string(c.kind);
  j["dim"] = c.dim;
  j["seed"] = c.seed;
  j["pooling"] = to_string(c.pooling);
  j["share_encoder"] = c.share_encoder;
  if (c.kind == ProviderKind::kPrecomputed) {
    j["store_path"] = c.store_path;
    j["query_store_path"] = c.query_store_path;
  }
  if (c.kind == ProviderKind::kRemote) {
    j["remote"] = remote_json(c.remote);
    j["query_remote"] = remote_json(c.query_remote);
  }
  return j;
}

ProviderConfig provider_config_from_json(const nlohmann::json& j) {
  try {
    ProviderConfig c;
    c.kind = parse_provider_kind(j.at("kind").get<std::string>());
    c.dim = j.at("dim").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.pooling = parse_pooling(j.at("pooling").get<std::string>());
    c.share_encoder = j.at("share_encoder").get<bool>();
    c.store_path = j.value("store_path", "");
    c.query_store_path = j.value("query_store_path", "");
    if (j.contains("remote")) c.remote = remote_from(j.at("remote"), c.dim);
    if (j.contains("query_remote")) c.query_remote = remote_from(j.at("query_remote"), c.dim);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("provider settings: ") + e.what());
  }
}

std::string to_key_values(const TrainConfig& c) {
  std::ostringstream o;
  o.precision(17);
  o << "lr = " << c.lr << "\n"
    << "betas = [" << c.beta1 << ", " << c.beta2 << "]\n"
    << "eps = " << c.eps << "\n"
    << "weight_decay = " << c.weight_decay << "\n"
    << "batch_size = " << c.batch_size << "\n"
    << "epochs = " << c.epochs << "\n"
    << "seed = " << c.seed << "\n"
    << "variant = \"" << c.variant.name() << "\"\n"
    << "interaction = \"" << to_string(c.interaction) << "\"\n"
    << "tau = " << c.tau << "\n"
    << "share_encoder = " << (c.share_encoder ? "true" : "false") << "\n"
    << "pooling = \"" << to_string(c.pooling) << "\"\n"
    << "grad_accum = " << c.grad_accum << "\n"
    << "hard_negatives = " << (c.hard_negatives ? "true" : "false") << "\n"
    << "init_scheme = \"" << c.init_scheme << "\"\n"
    << "projection = " << (c.projection ? "true" : "false") << "\n";
  return o.str();
}

nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["lr"] = c.lr;
  j["betas"] = {c.beta1, c.beta2};
  j["eps"] = c.eps;
  j["weight_decay"] = c.weight_decay;
  j["batch_size"] = c.batch_size;
  j["epochs"] = c.epochs;
  j["seed"] = c.seed;
  j["variant"] = c.variant.name();
  j["interaction"] = to_string(c.interaction);
  j["tau"] = c.tau;
  j["share_encoder"] = c.share_encoder;
  j["pooling"] = to_string(c.pooling);
  j["grad_accum"] = c.grad_accum;
  j["hard_negatives"] = c.hard_negatives;
  j["init_scheme"] = c.init_scheme;
  j["projection"] = c.projection;
  return j;
}

AdamWState AdamWState::zeros_like(const FusionParams& p) {
  AdamWState s;
  for (const auto& [name, m] : p.tensors()) {
    s.m.push_back(Matrix::Zero(m->rows(), m->cols()));
    s.v.push_back(Matrix::Zero(m->rows(), m->cols()));
  }
  return s;
}

bool adamw_step(FusionParams& params, const FusionGrads& grads, AdamWState& state, const TrainConfig& cfg) {
  auto tensors = params.tensors();
  if (state.m.size() != tensors.size() || state.v.size() != tensors.size()) {
    throw PreconditionError("adamw_step: optimizer state does not match the parameters");
  }
  std::vector<const Matrix*> g;
  const auto named_grads = grads.tensors();
  for (const auto& [name, p] : tensors) {
    const auto it = std::find_if(named_grads.begin(), named_grads.end(), [&](const auto& e) { return e.first == name; });
    if (it == named_grads.end() || it->second->rows() != p->rows() || it->second->cols() != p->cols()) {
      throw PreconditionError("adamw_step: gradient for " + name + " is missing or misshapen");
    }
    g.push_back(it->second);
  }
  for (const Matrix* gm : g) {
    if (!gm->allFinite()) {
      ++state.skipped;
      log_warn("optimizer_step_skipped", {{"reason", "non-finite gradient"}, {"skipped", state.skipped}});
      return false;
    }
  }
  ++state.t;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  const double decay = 1.0 - cfg.lr * cfg.weight_decay;
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    Matrix& theta = *tensors[k].second;
    Matrix& m = state.m[k];
    Matrix& v = state.v[k];
    const Matrix& gk = *g[k];
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
      const double gi = gk.data()[i];
      m.data()[i] = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * gi;
      v.data()[i] = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * gi * gi;
      const double mhat = m.data()[i] / c1;
      const double vhat = v.data()[i] / c2;
      theta.data()[i] = theta.data()[i] * decay - cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
  return true;
}

namespace {

constexpr char kAdamMagic[] = "INSTIRAD";

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(std::string_view bytes, std::size_t& off) {
  if (off + 8 > bytes.size()) throw ParseError("<optimizer state>", 0, "truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[off + i])) << (8 * i);
  off += 8;
  return v;
}

}  // namespace

std::string serialize_optimizer_state(const AdamWState& s) {
  std::string out(kAdamMagic, 8);
  put_u64(out, s.t);
  put_u64(out, s.skipped);
  put_u64(out, s.m.size());
  for (std::size_t k = 0; k < s.m.size(); ++k) {
    append_matrix_le(out, s.m[k]);
    append_matrix_le(out, s.v[k]);
  }
  return out;
}

AdamWState parse_optimizer_state(std::string_view bytes, int dim) {
  if (bytes.size() < 8 || bytes.substr(0, 8) != std::string_view(kAdamMagic, 8)) {
    throw ParseError("<optimizer state>", 0, "bad magic");
  }
  std::size_t off = 8;
  AdamWState s;
  s.t = get_u64(bytes, off);
  s.skipped = get_u64(bytes, off);
  const std::uint64_t n = get_u64(bytes, off);
  if (n > 16) throw ParseError("<optimizer state>", 0, "implausible tensor count");
  for (std::uint64_t k = 0; k < n; ++k) {
    s.m.push_back(read_matrix_le(bytes, off, dim, dim));
    s.v.push_back(read_matrix_le(bytes, off, dim, dim));
  }
  if (off != bytes.size()) throw ParseError("<optimizer state>", 0, "trailing bytes");
  return s;
}

std::string history_csv(const std::vector<StepRecord>& history) {
  std::ostringstream o;
  o.precision(17);
  o << "step,epoch,loss\n";
  for (const auto& r : history) o << r.step << "," << r.epoch << "," << r.loss << "\n";
  return o.str();
}

namespace {

bool degenerate(const TrainingBatch& b) {
  auto same = [](const std::vector<std::string>& v) {
    return std::all_of(v.begin(), v.end(), [&](const std::string& s) { return s == v.front(); });
  };
  return same(b.passages) && same(b.instructions) && same(b.queries);
}

CheckpointHeader header_for(const TrainConfig& cfg, const FusionParams& params, const EncoderPair& enc,
                            std::uint64_t steps, std::size_t epoch, const nlohmann::ordered_json& more) {
  CheckpointHeader h;
  h.dim = params.dim;
  h.scheme = params.scheme;
  h.seed = params.seed;
  h.step_count = steps;
  h.extra["epoch"] = epoch;
  h.extra["variant"] = cfg.variant.name();
  h.extra["interaction"] = to_string(cfg.interaction);
  h.extra["pooling"] = to_string(cfg.pooling);
  h.extra["passage_provider"] = enc.passage->fingerprint();
  h.extra["query_provider"] = enc.query->fingerprint();
  h.extra["config"] = to_json(cfg);
  for (const auto& [k, v] : more.items()) h.extra[k] = v;
  return h;
}

void write_checkpoint_pair(const std::string& base, const FusionParams& params, const AdamWState& opt,
                           const CheckpointHeader& h) {
  save_checkpoint(params, h, base + ".ckpt");
  write_file_atomic(base + ".adamw", serialize_optimizer_state(opt));
}

}  // namespace

TrainResult train(const FlatCorpus& flat, const EncoderPair& encoders, const TrainConfig& cfg,
                  const TrainOptions& options) {
  cfg.validate();
  if (flat.n_families() == 0) throw PreconditionError("train: no training families");
  if (!encoders.passage || !encoders.query) throw PreconditionError("train: encoders are not set");
  const int dim = encoders.passage->dim();
  if (encoders.query->dim() != dim) throw PreconditionError("train: passage and query encoders differ in dim");

  RetrieverModel model{encoders, options.initial ? *options.initial
                                                 : init_params(dim, cfg.seed, cfg.init_scheme, cfg.projection),
                       cfg.interaction};
  model.encoders.pooling = cfg.pooling;
  model.params.validate();
  if (model.params.dim != dim) throw PreconditionError("train: initial parameters do not match the encoder dim");

  TrainResult result;
  result.optimizer = AdamWState::zeros_like(model.params);
  if (!options.out_dir.empty()) std::filesystem::create_directories(options.out_dir);

  std::vector<std::size_t> order(flat.n_families());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix64(cfg.seed ^ 0x7472616e5f6f7264ULL));
  std::size_t step = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order);
    FusionGrads acc = FusionGrads::zeros_like(model.params);
    double acc_loss = 0.0;
    std::size_t micro = 0;
    double epoch_loss = 0.0;
    std::size_t epoch_steps = 0;

    auto flush = [&] {
      if (micro == 0) return;
      acc *= 1.0 / static_cast<double>(micro);
      adamw_step(model.params, acc, result.optimizer, cfg);
      StepRecord rec{++step, epoch, acc_loss / static_cast<double>(micro)};
      result.history.push_back(rec);
      if (options.on_step) options.on_step(rec);
      epoch_loss += rec.loss;
      ++epoch_steps;
      acc = FusionGrads::zeros_like(model.params);
      acc_loss = 0.0;
      micro = 0;
    };

    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      const std::span<const std::size_t> rows(order.data() + start, n);
      const TrainingBatch batch = make_batch(flat, rows, cfg.hard_negatives);
      if (degenerate(batch)) {
        ++result.degenerate_batches;
        log_warn("degenerate_batch_skipped", {{"epoch", epoch}, {"first_family", flat.family_ids[rows[0]]}});
        continue;
      }
      const LossAndGrad lg = loss_and_grad(cfg.variant, batch, model, cfg.tau);
      acc += lg.grads;
      acc_loss += lg.loss;
      if (++micro == cfg.grad_accum) flush();
    }
    flush();

    result.epoch_mean_loss.push_back(epoch_steps ? epoch_loss / static_cast<double>(epoch_steps)
                                                 : std::numeric_limits<double>::quiet_NaN());
    log_info("epoch_done", {{"epoch", epoch}, {"steps", epoch_steps}, {"mean_loss", result.epoch_mean_loss.back()}});
    if (!options.out_dir.empty()) {
      const std::string base = options.out_dir + "/epoch-" + std::to_string(epoch);
      write_checkpoint_pair(base, model.params, result.optimizer, header_for(cfg, model.params, encoders, step, epoch, options.header_extra));
      result.checkpoints.push_back(base + ".ckpt");
    }
  }

  if (!options.out_dir.empty()) {
    const std::string base = options.out_dir + "/final";
    write_checkpoint_pair(base, model.params, result.optimizer,
                          header_for(cfg, model.params, encoders, step, cfg.epochs, options.header_extra));
    result.checkpoints.push_back(base + ".ckpt");
    write_file_atomic(options.out_dir + "/history.csv", history_csv(result.history));
  }
  result.params = std::move(model.params);
  return result;
}

nlohmann::ordered_json GradCheckReport::to_json() const {
  nlohmann::ordered_json j;
  j["variant"] = variant;
  j["tolerance"] = tolerance;
  j["passed"] = passed;
  j["n_instances"] = instances.size();
  j["max_rel_error"] = nlohmann::ordered_json::object();
  for (const auto& [name, e] : max_rel_error) j["max_rel_error"][name] = e;
  j["instances"] = nlohmann::ordered_json::array();
  for (const auto& inst : instances) {
    nlohmann::ordered_json ij;
    ij["index"] = inst.index;
    ij["passed"] = inst.passed;
    ij["max_rel_error"] = inst.max_rel_error;
    for (const auto& [name, e] : inst.rel_error) ij["rel_error"][name] = e;
    j["instances"].push_back(ij);
  }
  return j;
}

namespace {

std::string random_text(Rng& rng) {
  static constexpr const char* kWords[] = {"amber", "basil", "cedar", "delta", "ember", "fjord",
                                           "grove", "haven", "indigo", "jasper", "kelp", "lumen"};
  const std::size_t n = 1 + rng.below(4);
  std::string out;
  for (std::size_t i = 0; i < n; ++i) {
    if (i) out += " ";
    out += kWords[rng.below(std::size(kWords))];
  }
  return out;
}

/// Random families with hard negatives laid out like flatten_training_tuples.
FlatCorpus random_flat(Rng& rng, std::size_t families) {
  FlatCorpus flat;
  for (std::size_t f = 0; f < families; ++f) {
    flat.family_ids.push_back("g" + std::to_string(f));
    flat.passages.push_back(random_text(rng));
    flat.instructions.push_back(random_text(rng));
    flat.queries.push_back(random_text(rng));
  }
  for (std::size_t f = 0; f < families; ++f) {
    NegativeRows neg;
    neg.passage_neg1 = flat.passages.size();
    flat.passages.push_back(random_text(rng));
    neg.passage_neg2 = flat.passages.size();
    flat.passages.push_back(random_text(rng));
    neg.instruction_neg = flat.instructions.size();
    flat.instructions.push_back(random_text(rng));
    neg.query_neg = flat.queries.size();
    flat.queries.push_back(random_text(rng));
    flat.negatives.push_back(neg);
  }
  return flat;
}

}  // namespace

GradCheckReport grad_check(const TrainConfig& cfg, std::size_t n_instances, double tolerance,
                           const GradCheckOptions& options) {
  if (!(tolerance > 0.0)) throw PreconditionError("grad_check: tolerance must be positive");
  if (!(options.step > 0.0)) throw PreconditionError("grad_check: step must be positive");
  GradCheckReport report;
  report.variant = cfg.variant.name();
  report.tolerance = tolerance;

  for (std::size_t idx = 0; idx < n_instances; ++idx) {
    Rng rng(mix64(options.seed * 0x9e3779b97f4a7c15ULL + idx));
    const std::size_t anchors = 2 + rng.below(2);
    const bool hard = rng.below(2) == 1;
    const FlatCorpus flat = random_flat(rng, anchors);
    std::vector<std::size_t> rows(anchors);
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    const TrainingBatch batch = make_batch(flat, rows, hard);

    ProviderConfig pc;
    pc.dim = options.dim;
    pc.seed = rng.next_u64();
    pc.pooling = cfg.pooling;
    pc.share_encoder = cfg.share_encoder;
    RetrieverModel model{make_encoders(pc), init_params(options.dim, rng.next_u64(), "uniform-fan", true, 0.5),
                         cfg.interaction};

    LossOptions lo;
    lo.perturb_gradient = options.perturb_gradient;
    const LossAndGrad analytic = loss_and_grad(cfg.variant, batch, model, cfg.tau, lo);
    auto eval = [&] { return loss(cfg.variant, build_score_bundle(batch, model, cfg.tau, cfg.variant.terms)); };

    GradCheckInstance inst;
    inst.index = idx;
    const auto grads = analytic.grads.tensors();
    for (auto& [name, p] : model.params.tensors()) {
      const auto git = std::find_if(grads.begin(), grads.end(), [&](const auto& e) { return e.first == name; });
      const Matrix& a = *git->second;
      Matrix numeric(p->rows(), p->cols());
      for (Eigen::Index i = 0; i < p->size(); ++i) {
        const double orig = p->data()[i];
        p->data()[i] = orig + options.step;
        const double up = eval();
        p->data()[i] = orig - options.step;
        const double down = eval();
        p->data()[i] = orig;
        numeric.data()[i] = (up - down) / (2.0 * options.step);
      }
      const double scale = std::max({a.cwiseAbs().maxCoeff(), numeric.cwiseAbs().maxCoeff(), 1e-8});
      const double err = (a - numeric).cwiseAbs().maxCoeff() / scale;
      inst.rel_error[name] = err;
      inst.max_rel_error = std::max(inst.max_rel_error, err);
      report.max_rel_error[name] = std::max(report.max_rel_error[name], err);
    }
    inst.passed = inst.max_rel_error <= tolerance;
    report.passed = report.passed && inst.passed;
    report.instances.push_back(std::move(inst));
  }
  return report;
}

}  // namespace instir
