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

#include "instir/fusion.hpp"

#include <cmath>
#include <cstring>

#include "instir/error.hpp"
#include "instir/util.hpp"

namespace instir {

Interaction parse_interaction(std::string_view name) {
  if (name == "concat") return Interaction::kConcat;
  if (name == "cross_attention" || name == "cross-attention") return Interaction::kCrossAttention;
  throw ConfigError("unknown interaction '" + std::string(name) + "' (expected concat|cross_attention)");
}

std::string_view to_string(Interaction i) noexcept {
  return i == Interaction::kConcat ? "concat" : "cross_attention";
}

FusionParams FusionParams::identity(int dim, bool with_projection) {
  return init_params(dim, 0, "identity-noise", with_projection, 0.0);
}

std::vector<std::pair<std::string, Matrix*>> FusionParams::tensors() {
  std::vector<std::pair<std::string, Matrix*>> out = {
      {"w_instruction", &w_instruction}, {"w_query_key", &w_query_key}, {"w_query_value", &w_query_value}};
  if (proj_passage) out.emplace_back("proj_passage", &*proj_passage);
  if (proj_iq) out.emplace_back("proj_iq", &*proj_iq);
  return out;
}

std::vector<std::pair<std::string, const Matrix*>> FusionParams::tensors() const {
  std::vector<std::pair<std::string, const Matrix*>> out = {
      {"w_instruction", &w_instruction}, {"w_query_key", &w_query_key}, {"w_query_value", &w_query_value}};
  if (proj_passage) out.emplace_back("proj_passage", &*proj_passage);
  if (proj_iq) out.emplace_back("proj_iq", &*proj_iq);
  return out;
}

void FusionParams::validate() const {
  if (dim < 2) throw PreconditionError("fusion params: dim must be >= 2");
  for (const auto& [name, m] : tensors()) {
    if (m->rows() != dim || m->cols() != dim) throw PreconditionError("fusion params: " + name + " is not dim x dim");
    if (!m->allFinite()) throw NumericError("fusion params: " + name + " has non-finite entries");
  }
}

std::uint64_t FusionParams::fingerprint() const {
  std::uint64_t h = fnv1a64("fusion") ^ static_cast<std::uint64_t>(dim);
  for (const auto& [name, m] : tensors()) {
    h = mix64(h ^ fnv1a64(name));
    const auto* bytes = reinterpret_cast<const char*>(m->data());
    h ^= fnv1a64(std::string_view(bytes, static_cast<std::size_t>(m->size()) * sizeof(double)));
    h = mix64(h);
  }
  return h;
}

FusionGrads FusionGrads::zeros_like(const FusionParams& p) {
  FusionGrads g;
  const int d = p.dim;
  g.w_instruction = Matrix::Zero(d, d);
  g.w_query_key = Matrix::Zero(d, d);
  g.w_query_value = Matrix::Zero(d, d);
  if (p.proj_passage) g.proj_passage = Matrix::Zero(d, d);
  if (p.proj_iq) g.proj_iq = Matrix::Zero(d, d);
  return g;
}

std::vector<std::pair<std::string, Matrix*>> FusionGrads::tensors() {
  std::vector<std::pair<std::string, Matrix*>> out = {
      {"w_instruction", &w_instruction}, {"w_query_key", &w_query_key}, {"w_query_value", &w_query_value}};
  if (proj_passage.size() > 0) out.emplace_back("proj_passage", &proj_passage);
  if (proj_iq.size() > 0) out.emplace_back("proj_iq", &proj_iq);
  return out;
}

std::vector<std::pair<std::string, const Matrix*>> FusionGrads::tensors() const {
  std::vector<std::pair<std::string, const Matrix*>> out = {
      {"w_instruction", &w_instruction}, {"w_query_key", &w_query_key}, {"w_query_value", &w_query_value}};
  if (proj_passage.size() > 0) out.emplace_back("proj_passage", &proj_passage);
  if (proj_iq.size() > 0) out.emplace_back("proj_iq", &proj_iq);
  return out;
}

FusionGrads& FusionGrads::operator+=(const FusionGrads& other) {
  auto mine = tensors();
  auto theirs = other.tensors();
  if (mine.size() != theirs.size()) throw PreconditionError("gradient shapes differ");
  for (std::size_t k = 0; k < mine.size(); ++k) *mine[k].second += *theirs[k].second;
  return *this;
}

FusionGrads& FusionGrads::operator*=(double s) {
  for (auto& [_, m] : tensors()) *m *= s;
  return *this;
}

bool FusionGrads::all_finite() const {
  for (const auto& [_, m] : tensors()) {
    if (!m->allFinite()) return false;
  }
  return true;
}

FusionParams init_params(int dim, std::uint64_t seed, std::string_view scheme, bool with_projection,
                         double noise_scale) {
  if (dim < 2) throw PreconditionError("init_params: dim must be >= 2");
  const bool identity_noise = scheme == "identity-noise";
  if (!identity_noise && scheme != "uniform-fan") {
    throw ConfigError("unknown init scheme '" + std::string(scheme) + "' (expected uniform-fan|identity-noise)");
  }
  const double bound = std::sqrt(6.0 / (2.0 * dim));
  Rng rng(mix64(seed ^ 0x1a2b3c4d5e6f7788ULL));
  auto fan = [&] {
    Matrix m(dim, dim);
    for (int r = 0; r < dim; ++r) {
      for (int c = 0; c < dim; ++c) m(r, c) = rng.uniform(-bound, bound);
    }
    return m;
  };
  auto noisy_identity = [&] {
    Matrix m = fan() * noise_scale;
    m.diagonal().array() += 1.0;
    return m;
  };
  FusionParams p;
  p.dim = dim;
  p.scheme = std::string(scheme);
  p.seed = seed;
  p.w_instruction = identity_noise ? noisy_identity() : fan();
  p.w_query_key = identity_noise ? noisy_identity() : fan();
  p.w_query_value = identity_noise ? noisy_identity() : fan();
  if (with_projection) {
    p.proj_passage = noisy_identity();
    p.proj_iq = noisy_identity();
  }
  return p;
}

HeadResult head_forward(const Vector& u, const std::optional<Matrix>& proj) {
  HeadResult h;
  h.input = u;
  h.projected = proj ? Vector(proj->transpose() * u) : u;
  h.projected_norm = h.projected.norm();
  if (!(h.projected_norm > 0.0) || !std::isfinite(h.projected_norm)) {
    throw NumericError("projection head: output norm is zero or non-finite");
  }
  h.out = h.projected / h.projected_norm;
  return h;
}

Vector head_backward(const HeadResult& h, const std::optional<Matrix>& proj, const Vector& upstream,
                     Matrix* proj_grad) {
  const Vector dz = (upstream - h.out * h.out.dot(upstream)) / h.projected_norm;
  if (!proj) return dz;
  if (proj_grad != nullptr) proj_grad->noalias() += h.input * dz.transpose();
  return *proj * dz;
}

namespace {

void check_finite(const Matrix& m, const char* stage) {
  if (!m.allFinite()) throw NumericError(std::string("cross-attention: non-finite values at ") + stage);
}

}  // namespace

CrossAttentionResult cross_attention_forward(const TokenMatrix& instr_tokens, const TokenMatrix& query_tokens,
                                             const FusionParams& params, const CrossAttentionHooks* hooks) {
  const int d = params.dim;
  if (instr_tokens.rows() < 1 || query_tokens.rows() < 1) {
    throw PreconditionError("cross-attention: instruction and query need at least one token");
  }
  if (instr_tokens.cols() != d || query_tokens.cols() != d) {
    throw PreconditionError("cross-attention: token dim does not match params dim");
  }
  CrossAttentionResult r;
  FusionCache& c = r.cache;
  c.instr_tokens = instr_tokens;
  c.query_tokens = query_tokens;
  c.instr_proj = instr_tokens * params.w_instruction;
  c.query_keys = query_tokens * params.w_query_key;
  c.query_values = query_tokens * params.w_query_value;
  Matrix logits = c.instr_proj * c.query_keys.transpose() / std::sqrt(static_cast<double>(d));
  if (hooks != nullptr && hooks->on_logits) hooks->on_logits(logits);
  check_finite(logits, "logits");

  c.attention.resize(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    double total = 0.0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      const double e = std::exp(logits(i, j) - mx);
      c.attention(i, j) = e;
      total += e;
    }
    c.attention.row(i) /= total;
  }
  check_finite(c.attention, "softmax");
  c.output = c.attention * c.query_values;
  check_finite(c.output, "attention output");
  c.pooled = c.output.colwise().mean().transpose();

  const HeadResult h = head_forward(c.pooled, params.proj_iq);
  c.projected = h.projected;
  c.projected_norm = h.projected_norm;
  c.params_fingerprint = params.fingerprint();
  r.iq = h.out;
  return r;
}

CrossAttentionGrads cross_attention_backward(const FusionCache& c, const FusionParams& params,
                                             const Vector& upstream) {
  if (c.params_fingerprint != params.fingerprint()) {
    throw PreconditionError("cross-attention backward: params differ from the forward call");
  }
  const int d = params.dim;
  if (upstream.size() != d) throw PreconditionError("cross-attention backward: upstream has wrong dim");
  CrossAttentionGrads g;
  if (params.proj_iq) g.proj_iq = Matrix::Zero(d, d);

  HeadResult h;
  h.input = c.pooled;
  h.projected = c.projected;
  h.projected_norm = c.projected_norm;
  h.out = c.projected / c.projected_norm;
  const Vector du = head_backward(h, params.proj_iq, upstream, params.proj_iq ? &g.proj_iq : nullptr);

  const Eigen::Index m = c.output.rows();
  const Matrix d_output = Matrix::Ones(m, 1) * (du.transpose() / static_cast<double>(m));
  const Matrix d_attention = d_output * c.query_values.transpose();
  const Matrix d_values = c.attention.transpose() * d_output;

  Matrix d_logits(c.attention.rows(), c.attention.cols());
  for (Eigen::Index i = 0; i < d_logits.rows(); ++i) {
    const double inner = c.attention.row(i).dot(d_attention.row(i));
    d_logits.row(i) = c.attention.row(i).cwiseProduct(d_attention.row(i).array().matrix() -
                                                      Eigen::RowVectorXd::Constant(d_logits.cols(), inner));
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  const Matrix d_instr_proj = d_logits * c.query_keys * scale;
  const Matrix d_query_keys = d_logits.transpose() * c.instr_proj * scale;

  g.w_instruction = c.instr_tokens.transpose() * d_instr_proj;
  g.w_query_key = c.query_tokens.transpose() * d_query_keys;
  g.w_query_value = c.query_tokens.transpose() * d_values;
  return g;
}

std::string concat_iq(std::string_view instruction, std::string_view query) {
  const std::string i = trim(instruction);
  const std::string q = trim(query);
  if (i.empty() || q.empty()) throw PreconditionError("concat_iq: instruction and query must be non-empty");
  return i + " " + q;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr std::string_view kMagic = "INSTIRCK";

void put_u64_le(std::string& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}

std::uint64_t get_u64_le(std::string_view bytes, std::size_t offset) {
  std::uint64_t v = 0;
  for (int b = 0; b < 8; ++b) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[offset + b])) << (8 * b);
  }
  return v;
}

}  // namespace

void append_matrix_le(std::string& out, const Matrix& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      std::uint64_t bits;
      const double v = m(r, c);
      std::memcpy(&bits, &v, sizeof bits);
      put_u64_le(out, bits);
    }
  }
}

Matrix read_matrix_le(std::string_view bytes, std::size_t& offset, Eigen::Index rows, Eigen::Index cols) {
  const std::size_t need = static_cast<std::size_t>(rows * cols) * 8;
  if (offset + need > bytes.size()) throw ParseError("<binary>", 0, "truncated matrix block");
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      const std::uint64_t bits = get_u64_le(bytes, offset);
      double v;
      std::memcpy(&v, &bits, sizeof v);
      m(r, c) = v;
      offset += 8;
    }
  }
  return m;
}

std::string serialize_checkpoint(const FusionParams& params, const CheckpointHeader& header) {
  params.validate();
  nlohmann::ordered_json j;
  j["format"] = "instir-fusion/1";
  j["dim"] = params.dim;
  j["scheme"] = header.scheme.empty() ? params.scheme : header.scheme;
  j["seed"] = header.seed;
  j["step_count"] = header.step_count;
  nlohmann::ordered_json names = nlohmann::ordered_json::array();
  for (const auto& [name, _] : params.tensors()) names.push_back(name);
  j["tensors"] = std::move(names);
  for (const auto& [k, v] : header.extra.items()) j[k] = v;
  const std::string head = j.dump();

  std::string out(kMagic);
  put_u64_le(out, head.size());
  out += head;
  for (const auto& [_, m] : params.tensors()) append_matrix_le(out, *m);
  return out;
}

void save_checkpoint(const FusionParams& params, const CheckpointHeader& header, const std::string& path) {
  write_file_atomic(path, serialize_checkpoint(params, header));
}

LoadedCheckpoint parse_checkpoint(std::string_view bytes, const std::string& source) {
  if (bytes.size() < 16 || bytes.substr(0, 8) != kMagic) throw ParseError(source, 1, "not a fusion checkpoint");
  const std::uint64_t head_len = get_u64_le(bytes, 8);
  if (16 + head_len > bytes.size()) throw ParseError(source, 1, "truncated checkpoint header");
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(bytes.substr(16, head_len));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(source, 1, std::string("bad checkpoint header: ") + e.what());
  }
  LoadedCheckpoint out;
  out.header.dim = j.at("dim").get<int>();
  out.header.scheme = j.at("scheme").get<std::string>();
  out.header.seed = j.at("seed").get<std::uint64_t>();
  out.header.step_count = j.at("step_count").get<std::uint64_t>();
  for (const auto& [k, v] : j.items()) {
    if (k != "format" && k != "dim" && k != "scheme" && k != "seed" && k != "step_count" && k != "tensors") {
      out.header.extra[k] = v;
    }
  }
  FusionParams& p = out.params;
  p.dim = out.header.dim;
  p.scheme = out.header.scheme;
  p.seed = out.header.seed;
  std::size_t offset = 16 + head_len;
  for (const auto& name_json : j.at("tensors")) {
    const auto name = name_json.get<std::string>();
    if (offset + static_cast<std::size_t>(p.dim) * static_cast<std::size_t>(p.dim) * 8 > bytes.size()) {
      throw ParseError(source, 0, "truncated tensor '" + name + "'");
    }
    Matrix m = read_matrix_le(bytes, offset, p.dim, p.dim);
    if (name == "w_instruction") p.w_instruction = std::move(m);
    else if (name == "w_query_key") p.w_query_key = std::move(m);
    else if (name == "w_query_value") p.w_query_value = std::move(m);
    else if (name == "proj_passage") p.proj_passage = std::move(m);
    else if (name == "proj_iq") p.proj_iq = std::move(m);
    else throw ParseError(source, 1, "unknown tensor '" + name + "'");
  }
  if (offset != bytes.size()) throw ParseError(source, 1, "trailing bytes after tensors");
  p.validate();
  return out;
}

LoadedCheckpoint load_checkpoint(const std::string& path) { return parse_checkpoint(read_file(path), path); }

}  // namespace instir
