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

#include <string_view>

#include "instir/embedding.hpp"
#include "instir/fusion.hpp"

namespace instir {

/// Encoders plus fusion parameters: everything needed to score a passage
/// against an instruction-query pair.
struct RetrieverModel {
  EncoderPair encoders;
  FusionParams params;
  Interaction interaction = Interaction::kConcat;

  /// normalize(pool(Enc_P(text)) proj_passage)
  Vector encode_passage(std::string_view text) const;
  /// Instruction-aware query embedding under the configured interaction.
  Vector encode_iq(std::string_view instruction, std::string_view query) const;
  /// cosine(p, iq) / tau
  double score(std::string_view passage, std::string_view instruction, std::string_view query,
               double tau = 1.0) const;
};

}  // namespace instir
