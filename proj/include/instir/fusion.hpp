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
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "instir/embedding.hpp"

namespace instir {

/// How an instruction and a query are combined into one representation.
enum class Interaction {
  kConcat,          // encode "<instruction> <query>" as one text
  kCrossAttention,  // instruction tokens attend over query tokens
};

Interaction parse_interaction(std::string_view name);
std::string_view to_string(Interaction i) noexcept;

/// Learnable parameters of the fusion layer. Every matrix is dim x dim.
///
/// Cross-attention computes, for instruction tokens E_I (m x d) and query
/// tokens E_Q (n x d):
///   logits = (E_I w_instruction)(E_Q w_query_key)^T / sqrt(d)
///   O      = row_softmax(logits) (E_Q w_query_value)
///   iq     = normalize(mean_rows(O) proj_iq)
/// The projection heads are optional; absent means identity.
struct FusionParams {
  int dim = 0;
  Matrix w_instruction;
  Matrix w_query_key;
  Matrix w_query_value;
  std::optional<Matrix> proj_passage;
  std::optional<Matrix> proj_iq;
  std::string scheme = "identity";
  std::uint64_t seed = 0;

  static FusionParams identity(int dim, bool with_projection);

  /// Named views of the present matrices, in checkpoint order.
  std::vector<std::pair<std::string, Matrix*>> tensors();
  std::vector<std::pair<std::string, const Matrix*>> tensors() const;

  /// Throws NumericError / PreconditionError when shapes or entries are bad.
  void validate() const;
  /// Hash of dims and every entry's bit pattern.
  std::uint64_t fingerprint() const;
};

/// Gradient buffers shaped like FusionParams (absent heads stay empty).
struct FusionGrads {
  Matrix w_instruction;
  Matrix w_query_key;
  Matrix w_query_value;
  Matrix proj_passage;
  Matrix proj_iq;

  static FusionGrads zeros_like(const FusionParams& p);
  std::vector<std::pair<std::string, Matrix*>> tensors();
  std::vector<std::pair<std::string, const Matrix*>> tensors() const;
  FusionGrads& operator+=(const FusionGrads& other);
  FusionGrads& operator*=(double s);
  bool all_finite() const;
};

/// `uniform-fan`: entries uniform in +-sqrt(6/(2d)).
/// `identity-noise`: I + noise_scale * uniform-fan.
/// Projection heads, when requested, always use identity-noise.
FusionParams init_params(int dim, std::uint64_t seed, std::string_view scheme, bool with_projection,
                         double noise_scale = 0.01);

/// Test seam: lets a harness edit the raw attention logits before the softmax.
struct CrossAttentionHooks {
  std::function<void(Matrix& logits)> on_logits;
};

/// Intermediates kept for the backward pass.
struct FusionCache {
  Matrix instr_tokens;     // E_I
  Matrix query_tokens;     // E_Q
  Matrix instr_proj;       // E_I w_instruction
  Matrix query_keys;       // E_Q w_query_key
  Matrix query_values;     // E_Q w_query_value
  Matrix attention;        // m x n, rows sum to 1
  Matrix output;           // m x d
  Vector pooled;           // mean over rows of output
  Vector projected;        // pooled * proj_iq (or pooled)
  double projected_norm = 0.0;
  std::uint64_t params_fingerprint = 0;
};

struct CrossAttentionResult {
  Vector iq;
  FusionCache cache;
};

CrossAttentionResult cross_attention_forward(const TokenMatrix& instr_tokens, const TokenMatrix& query_tokens,
                                             const FusionParams& params,
                                             const CrossAttentionHooks* hooks = nullptr);

struct CrossAttentionGrads {
  Matrix w_instruction;
  Matrix w_query_key;
  Matrix w_query_value;
  Matrix proj_iq;  // empty when the params have no proj_iq
};

/// Exact gradients of upstream . iq with respect to the attention weights and
/// proj_iq. Throws PreconditionError when `params` differ from the forward call's.
CrossAttentionGrads cross_attention_backward(const FusionCache& cache, const FusionParams& params,
                                             const Vector& upstream);

/// normalize(u * proj) with proj optional. `u` is kept for the backward pass.
struct HeadResult {
  Vector out;
  Vector input;
  Vector projected;
  double projected_norm = 0.0;
};

HeadResult head_forward(const Vector& u, const std::optional<Matrix>& proj);

/// Returns d(upstream . out)/du and accumulates the proj gradient into
/// `proj_grad` when proj is present.
Vector head_backward(const HeadResult& h, const std::optional<Matrix>& proj, const Vector& upstream,
                     Matrix* proj_grad);

/// "<instruction> <query>" after trimming both. Throws on empty input.
std::string concat_iq(std::string_view instruction, std::string_view query);

/// Metadata stored with a checkpoint.
struct CheckpointHeader {
  int dim = 0;
  std::string scheme;
  std::uint64_t seed = 0;
  std::uint64_t step_count = 0;
  nlohmann::ordered_json extra = nlohmann::ordered_json::object();
};

/// Layout: 8-byte magic "INSTIRCK", u64 little-endian header length, JSON
/// header, then each tensor named in header.tensors as dim*dim little-endian
/// f64 values in row-major order.
std::string serialize_checkpoint(const FusionParams& params, const CheckpointHeader& header);
void save_checkpoint(const FusionParams& params, const CheckpointHeader& header, const std::string& path);

struct LoadedCheckpoint {
  FusionParams params;
  CheckpointHeader header;
};

LoadedCheckpoint parse_checkpoint(std::string_view bytes, const std::string& source = "<memory>");
LoadedCheckpoint load_checkpoint(const std::string& path);

/// Little-endian f64 matrix block helpers shared with the optimizer state file.
void append_matrix_le(std::string& out, const Matrix& m);
Matrix read_matrix_le(std::string_view bytes, std::size_t& offset, Eigen::Index rows, Eigen::Index cols);

}  // namespace instir
