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

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "instir/error.hpp"

namespace instir {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Token-level embeddings of one text: one row per token, `dim` columns.
using TokenMatrix = Matrix;

enum class Pooling { kMean, kLast };

Pooling parse_pooling(std::string_view name);
std::string_view to_string(Pooling p) noexcept;

/// Casefolds ASCII letters and splits on maximal runs of characters that are
/// not ASCII alphanumerics. Bytes >= 0x80 count as alphanumeric so UTF-8
/// words stay whole.
std::vector<std::string> tokenize(std::string_view text);

/// Hash embedding of a single token, unit-normalized.
///
///   state = fnv1a64(utf8 bytes) ^ seed
///   for c in 0..dim-1:
///     state += 0x9e3779b97f4a7c15          (mod 2^64)
///     z = splitmix64_finalize(state)
///     row[c] = (2 * (z >> 12) + 1) * 2^-52 - 1     // exact, in (-1, 1)
///   row /= sqrt(sum of squares, summed in index order)
///
/// Only correctly rounded IEEE operations are involved, so rows are
/// bit-identical on any conforming platform.
Vector hash_token(std::string_view token, int dim, std::uint64_t seed);

/// One row per token; throws PreconditionError on an empty token list.
TokenMatrix hash_embed(std::span<const std::string> tokens, int dim, std::uint64_t seed);

/// Pools the rows and L2-normalizes. Throws NumericError when the pooled
/// vector is zero.
Vector pool(const TokenMatrix& m, Pooling mode);

/// Pooled representation before normalization, used by the gradient code.
Vector pool_raw(const TokenMatrix& m, Pooling mode);

/// Dot product of two unit vectors.
double cosine_sim(const Vector& a, const Vector& b);

Vector l2_normalize(const Vector& v);

/// An encoder. Implementations are read-only after construction and safe to
/// call concurrently.
class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual int dim() const noexcept = 0;
  virtual TokenMatrix embed(std::string_view text) const = 0;
  /// Order-preserving. The default calls embed() per text.
  virtual std::vector<TokenMatrix> embed_batch(std::span<const std::string> texts) const;
  /// Identifies the provider and its settings in reports and checkpoints.
  virtual std::string fingerprint() const = 0;
};

class HashProvider final : public EmbeddingProvider {
 public:
  HashProvider(int dim, std::uint64_t seed);
  int dim() const noexcept override { return dim_; }
  TokenMatrix embed(std::string_view text) const override;
  std::string fingerprint() const override;
  std::uint64_t seed() const noexcept { return seed_; }

 private:
  int dim_;
  std::uint64_t seed_;
};

/// Embeddings computed elsewhere, looked up by the SHA-256 of the text.
///
/// `<base>.embbin` holds little-endian f32 row-major matrix blocks;
/// `<base>.manifest.json` is {"dim": d, "entries": {sha256: {"offset": bytes,
/// "n_tokens": n, "dim": d}}}.
class PrecomputedStore final : public EmbeddingProvider {
 public:
  struct Entry {
    std::uint64_t offset = 0;
    int n_tokens = 0;
    int dim = 0;
  };

  /// `base` is the path without the `.embbin` / `.manifest.json` suffix.
  explicit PrecomputedStore(const std::string& base);

  int dim() const noexcept override { return dim_; }
  /// Throws PrecomputedMiss naming the text's SHA-256 when absent.
  TokenMatrix embed(std::string_view text) const override;
  std::string fingerprint() const override;
  bool contains(std::string_view text) const;
  std::size_t size() const noexcept { return entries_.size(); }

 private:
  int dim_ = 0;
  std::string base_;
  std::string blob_;
  std::map<std::string, Entry, std::less<>> entries_;
};

class PrecomputedMiss : public Error {
 public:
  explicit PrecomputedMiss(const std::string& text_id)
      : Error("precomputed store has no entry for text " + text_id), text_id_(text_id) {}
  const std::string& text_id() const noexcept { return text_id_; }

 private:
  std::string text_id_;
};

/// Builds a store file pair. Later entries for the same text replace earlier ones.
class PrecomputedStoreWriter {
 public:
  explicit PrecomputedStoreWriter(int dim) : dim_(dim) {}
  void add(std::string_view text, const TokenMatrix& m);
  void write(const std::string& base) const;

 private:
  int dim_;
  std::map<std::string, TokenMatrix> items_;
};

struct RemoteEmbeddingConfig {
  std::string endpoint_url;  // e.g. http://localhost:8080/v1/embeddings
  std::string model_name;
  std::string api_key_env;   // empty: no Authorization header
  int dim = 0;
  int batch_size = 32;
  int max_attempts = 3;
  double backoff_seconds = 0.5;
  double timeout_seconds = 30.0;
};

/// Client for services speaking POST {model, input:[texts]} ->
/// {data:[{embedding:[...]}...]}. Each returned vector becomes a 1-row
/// TokenMatrix.
class RemoteProvider final : public EmbeddingProvider {
 public:
  explicit RemoteProvider(RemoteEmbeddingConfig cfg);
  int dim() const noexcept override { return cfg_.dim; }
  TokenMatrix embed(std::string_view text) const override;
  std::vector<TokenMatrix> embed_batch(std::span<const std::string> texts) const override;
  std::string fingerprint() const override;

 private:
  std::vector<TokenMatrix> request(std::span<const std::string> texts) const;
  RemoteEmbeddingConfig cfg_;
};

/// Memoizes another provider's output per text. Thread-safe.
class CachingProvider final : public EmbeddingProvider {
 public:
  explicit CachingProvider(std::shared_ptr<const EmbeddingProvider> inner);
  int dim() const noexcept override { return inner_->dim(); }
  TokenMatrix embed(std::string_view text) const override;
  std::string fingerprint() const override { return inner_->fingerprint(); }

 private:
  std::shared_ptr<const EmbeddingProvider> inner_;
  mutable std::mutex mu_;
  mutable std::map<std::string, TokenMatrix, std::less<>> cache_;
};

enum class ProviderKind { kHash, kPrecomputed, kRemote };

ProviderKind parse_provider_kind(std::string_view name);
std::string_view to_string(ProviderKind k) noexcept;

struct ProviderConfig {
  ProviderKind kind = ProviderKind::kHash;
  int dim = 32;
  std::uint64_t seed = 0;
  Pooling pooling = Pooling::kMean;
  /// One encoder for passages and instruction-aware queries. When false the
  /// query side gets its own instance: a hash provider seeded with
  /// seed ^ kQueryTowerSalt, or the store/endpoint named by the query_* fields.
  bool share_encoder = true;
  std::string store_path;        // precomputed
  std::string query_store_path;  // precomputed, unshared
  RemoteEmbeddingConfig remote;  // remote
  RemoteEmbeddingConfig query_remote;

  static constexpr std::uint64_t kQueryTowerSalt = 0x5157e4c0ffee1234ULL;

  void validate() const;
};

/// Passage-side and query-side encoders. Identical pointers when shared.
struct EncoderPair {
  std::shared_ptr<const EmbeddingProvider> passage;
  std::shared_ptr<const EmbeddingProvider> query;
  Pooling pooling = Pooling::kMean;
};

EncoderPair make_encoders(const ProviderConfig& cfg);

}  // namespace instir
