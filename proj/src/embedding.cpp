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

#include "instir/embedding.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "http.hpp"
#include "instir/util.hpp"

namespace instir {

using nlohmann::json;

Pooling parse_pooling(std::string_view name) {
  if (name == "mean") return Pooling::kMean;
  if (name == "last") return Pooling::kLast;
  throw ConfigError("unknown pooling '" + std::string(name) + "' (expected mean|last)");
}

std::string_view to_string(Pooling p) noexcept { return p == Pooling::kMean ? "mean" : "last"; }

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    const bool word = (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c >= 0x80;
    if (word) {
      cur.push_back(c >= 'A' && c <= 'Z' ? static_cast<char>(c - 'A' + 'a') : ch);
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

Vector hash_token(std::string_view token, int dim, std::uint64_t seed) {
  if (dim < 1) throw PreconditionError("hash_token: dim must be positive");
  Vector row(dim);
  std::uint64_t state = fnv1a64(token) ^ seed;
  double sumsq = 0.0;
  for (int c = 0; c < dim; ++c) {
    state += 0x9e3779b97f4a7c15ULL;
    const std::uint64_t z = mix64(state);
    const double v = static_cast<double>(2 * (z >> 12) + 1) * 0x1.0p-52 - 1.0;
    row[c] = v;
    sumsq += v * v;
  }
  const double norm = std::sqrt(sumsq);
  if (!(norm > 0.0)) throw NumericError("hash_token: zero row");
  for (int c = 0; c < dim; ++c) row[c] /= norm;
  return row;
}

TokenMatrix hash_embed(std::span<const std::string> tokens, int dim, std::uint64_t seed) {
  if (tokens.empty()) throw PreconditionError("hash_embed: text has no tokens");
  TokenMatrix m(static_cast<Eigen::Index>(tokens.size()), dim);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    m.row(static_cast<Eigen::Index>(t)) = hash_token(tokens[t], dim, seed).transpose();
  }
  return m;
}

Vector pool_raw(const TokenMatrix& m, Pooling mode) {
  if (m.rows() < 1) throw PreconditionError("pool: matrix has no rows");
  if (mode == Pooling::kLast) return m.row(m.rows() - 1).transpose();
  Vector acc = Vector::Zero(m.cols());
  for (Eigen::Index r = 0; r < m.rows(); ++r) acc += m.row(r).transpose();
  return acc / static_cast<double>(m.rows());
}

Vector l2_normalize(const Vector& v) {
  const double n = v.norm();
  if (!(n > 0.0) || !std::isfinite(n)) throw NumericError("degenerate pooling: vector norm is zero or non-finite");
  return v / n;
}

Vector pool(const TokenMatrix& m, Pooling mode) { return l2_normalize(pool_raw(m, mode)); }

double cosine_sim(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw PreconditionError("cosine_sim: dimension mismatch");
  return a.dot(b);
}

std::vector<TokenMatrix> EmbeddingProvider::embed_batch(std::span<const std::string> texts) const {
  std::vector<TokenMatrix> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back(embed(t));
  return out;
}

HashProvider::HashProvider(int dim, std::uint64_t seed) : dim_(dim), seed_(seed) {
  if (dim < 2) throw ConfigError("hash provider: dim must be >= 2");
}

TokenMatrix HashProvider::embed(std::string_view text) const {
  const auto tokens = tokenize(text);
  if (tokens.empty()) {
    throw PreconditionError("hash provider: text has no tokens: '" + std::string(text.substr(0, 60)) + "'");
  }
  return hash_embed(tokens, dim_, seed_);
}

std::string HashProvider::fingerprint() const {
  return "hash:d=" + std::to_string(dim_) + ":seed=" + std::to_string(seed_);
}

// ---------------------------------------------------------------------------
// Precomputed store

namespace {

void put_f32_le(std::string& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, sizeof bits);
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
}

float get_f32_le(const char* p) {
  std::uint32_t bits = 0;
  for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[b])) << (8 * b);
  float f;
  std::memcpy(&f, &bits, sizeof f);
  return f;
}

}  // namespace

PrecomputedStore::PrecomputedStore(const std::string& base) : base_(base) {
  const std::string manifest_path = base + ".manifest.json";
  json manifest;
  try {
    manifest = json::parse(read_file(manifest_path));
  } catch (const json::parse_error& e) {
    throw ParseError(manifest_path, 1, e.what());
  }
  blob_ = read_file(base + ".embbin");
  dim_ = manifest.at("dim").get<int>();
  for (const auto& [sha, e] : manifest.at("entries").items()) {
    Entry entry{e.at("offset").get<std::uint64_t>(), e.at("n_tokens").get<int>(), e.at("dim").get<int>()};
    if (entry.dim != dim_) throw ParseError(manifest_path, 1, "entry " + sha + " has dim " + std::to_string(entry.dim));
    const std::uint64_t bytes = 4ULL * static_cast<std::uint64_t>(entry.n_tokens) * static_cast<std::uint64_t>(entry.dim);
    if (entry.n_tokens < 1 || entry.offset + bytes > blob_.size()) {
      throw ParseError(manifest_path, 1, "entry " + sha + " lies outside the .embbin file");
    }
    entries_.emplace(sha, entry);
  }
}

bool PrecomputedStore::contains(std::string_view text) const { return entries_.contains(sha256_hex(text)); }

TokenMatrix PrecomputedStore::embed(std::string_view text) const {
  const std::string id = sha256_hex(text);
  auto it = entries_.find(id);
  if (it == entries_.end()) throw PrecomputedMiss(id);
  const Entry& e = it->second;
  TokenMatrix m(e.n_tokens, e.dim);
  const char* p = blob_.data() + e.offset;
  for (int r = 0; r < e.n_tokens; ++r) {
    for (int c = 0; c < e.dim; ++c, p += 4) m(r, c) = static_cast<double>(get_f32_le(p));
  }
  return m;
}

std::string PrecomputedStore::fingerprint() const {
  return "precomputed:" + sha256_hex(blob_).substr(0, 16) + ":entries=" + std::to_string(entries_.size());
}

void PrecomputedStoreWriter::add(std::string_view text, const TokenMatrix& m) {
  if (m.cols() != dim_ || m.rows() < 1) throw PreconditionError("store writer: matrix shape does not match dim");
  items_[sha256_hex(text)] = m;
}

void PrecomputedStoreWriter::write(const std::string& base) const {
  std::string blob;
  nlohmann::ordered_json entries = nlohmann::ordered_json::object();
  for (const auto& [sha, m] : items_) {
    entries[sha] = {{"offset", blob.size()}, {"n_tokens", m.rows()}, {"dim", m.cols()}};
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) put_f32_le(blob, static_cast<float>(m(r, c)));
    }
  }
  nlohmann::ordered_json manifest;
  manifest["dim"] = dim_;
  manifest["entries"] = std::move(entries);
  write_file_atomic(base + ".embbin", blob);
  write_file_atomic(base + ".manifest.json", manifest.dump(1) + "\n");
}

// ---------------------------------------------------------------------------
// Remote

RemoteProvider::RemoteProvider(RemoteEmbeddingConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.endpoint_url.empty()) throw ConfigError("remote provider: endpoint_url is empty");
  if (cfg_.dim < 2) throw ConfigError("remote provider: dim must be >= 2");
  if (cfg_.batch_size < 1) throw ConfigError("remote provider: batch_size must be >= 1");
  if (cfg_.max_attempts < 1) throw ConfigError("remote provider: max_attempts must be >= 1");
  if (!(cfg_.timeout_seconds > 0)) throw ConfigError("remote provider: timeout must be > 0");
  if (!cfg_.api_key_env.empty()) detail::require_env(cfg_.api_key_env);
}

std::vector<TokenMatrix> RemoteProvider::request(std::span<const std::string> texts) const {
  json body;
  body["model"] = cfg_.model_name;
  body["input"] = std::vector<std::string>(texts.begin(), texts.end());
  const std::string token = cfg_.api_key_env.empty() ? std::string{} : detail::require_env(cfg_.api_key_env);
  std::string last_error;
  for (int attempt = 1; attempt <= cfg_.max_attempts; ++attempt) {
    try {
      const auto res = detail::http_post_json(cfg_.endpoint_url, body.dump(), token, cfg_.timeout_seconds);
      if (res.status != 200) {
        throw TransportError("embedding service returned HTTP " + std::to_string(res.status));
      }
      const json reply = json::parse(res.body);
      const auto& data = reply.at("data");
      if (!data.is_array() || data.size() != texts.size()) {
        throw TransportError("embedding service returned " + std::to_string(data.size()) + " vectors for " +
                             std::to_string(texts.size()) + " inputs");
      }
      std::vector<TokenMatrix> out;
      out.reserve(texts.size());
      for (const auto& item : data) {
        const auto v = item.at("embedding").get<std::vector<double>>();
        if (static_cast<int>(v.size()) != cfg_.dim) {
          throw TransportError("embedding service returned dim " + std::to_string(v.size()));
        }
        TokenMatrix m(1, cfg_.dim);
        for (int c = 0; c < cfg_.dim; ++c) m(0, c) = v[static_cast<std::size_t>(c)];
        out.push_back(std::move(m));
      }
      return out;
    } catch (const json::exception& e) {
      last_error = std::string("malformed embedding response: ") + e.what();
    } catch (const TransportError& e) {
      last_error = e.what();
    }
    if (attempt < cfg_.max_attempts) {
      std::this_thread::sleep_for(std::chrono::duration<double>(cfg_.backoff_seconds * attempt));
    }
  }
  throw TransportError(last_error + " (after " + std::to_string(cfg_.max_attempts) + " attempts)");
}

TokenMatrix RemoteProvider::embed(std::string_view text) const {
  const std::string t(text);
  return request(std::span<const std::string>(&t, 1)).front();
}

std::vector<TokenMatrix> RemoteProvider::embed_batch(std::span<const std::string> texts) const {
  std::vector<TokenMatrix> out;
  out.reserve(texts.size());
  for (std::size_t start = 0; start < texts.size(); start += static_cast<std::size_t>(cfg_.batch_size)) {
    const std::size_t n = std::min(texts.size() - start, static_cast<std::size_t>(cfg_.batch_size));
    auto part = request(texts.subspan(start, n));
    for (auto& m : part) out.push_back(std::move(m));
  }
  return out;
}

std::string RemoteProvider::fingerprint() const {
  return "remote:" + cfg_.endpoint_url + ":" + cfg_.model_name + ":d=" + std::to_string(cfg_.dim);
}

CachingProvider::CachingProvider(std::shared_ptr<const EmbeddingProvider> inner) : inner_(std::move(inner)) {}

TokenMatrix CachingProvider::embed(std::string_view text) const {
  {
    std::lock_guard lock(mu_);
    if (auto it = cache_.find(text); it != cache_.end()) return it->second;
  }
  TokenMatrix m = inner_->embed(text);
  std::lock_guard lock(mu_);
  return cache_.emplace(std::string(text), std::move(m)).first->second;
}

// ---------------------------------------------------------------------------
// Config

ProviderKind parse_provider_kind(std::string_view name) {
  if (name == "hash") return ProviderKind::kHash;
  if (name == "precomputed") return ProviderKind::kPrecomputed;
  if (name == "remote") return ProviderKind::kRemote;
  throw ConfigError("unknown provider kind '" + std::string(name) + "' (expected hash|precomputed|remote)");
}

std::string_view to_string(ProviderKind k) noexcept {
  switch (k) {
    case ProviderKind::kHash: return "hash";
    case ProviderKind::kPrecomputed: return "precomputed";
    case ProviderKind::kRemote: return "remote";
  }
  return "hash";
}

void ProviderConfig::validate() const {
  if (dim < 2) throw ConfigError("provider dim must be >= 2");
  if (kind == ProviderKind::kPrecomputed && store_path.empty()) throw ConfigError("precomputed provider needs store_path");
  if (kind == ProviderKind::kPrecomputed && !share_encoder && query_store_path.empty()) {
    throw ConfigError("unshared precomputed provider needs query_store_path");
  }
  if (kind == ProviderKind::kRemote && remote.endpoint_url.empty()) throw ConfigError("remote provider needs endpoint_url");
}

EncoderPair make_encoders(const ProviderConfig& cfg) {
  cfg.validate();
  EncoderPair pair;
  pair.pooling = cfg.pooling;
  switch (cfg.kind) {
    case ProviderKind::kHash:
      pair.passage = std::make_shared<HashProvider>(cfg.dim, cfg.seed);
      if (!cfg.share_encoder) pair.query = std::make_shared<HashProvider>(cfg.dim, cfg.seed ^ ProviderConfig::kQueryTowerSalt);
      break;
    case ProviderKind::kPrecomputed: {
      auto store = std::make_shared<PrecomputedStore>(cfg.store_path);
      if (store->dim() != cfg.dim) throw ConfigError("precomputed store dim does not match provider dim");
      pair.passage = store;
      if (!cfg.share_encoder) pair.query = std::make_shared<PrecomputedStore>(cfg.query_store_path);
      break;
    }
    case ProviderKind::kRemote: {
      auto remote = cfg.remote;
      remote.dim = cfg.dim;
      pair.passage = std::make_shared<CachingProvider>(std::make_shared<RemoteProvider>(remote));
      if (!cfg.share_encoder) {
        auto q = cfg.query_remote.endpoint_url.empty() ? remote : cfg.query_remote;
        q.dim = cfg.dim;
        pair.query = std::make_shared<CachingProvider>(std::make_shared<RemoteProvider>(q));
      }
      break;
    }
  }
  if (cfg.share_encoder) pair.query = pair.passage;
  return pair;
}

}  // namespace instir
