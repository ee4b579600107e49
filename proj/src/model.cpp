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

#include "instir/model.hpp"

#include "instir/error.hpp"
#include "instir/objectives.hpp"

namespace instir {

Vector RetrieverModel::encode_passage(std::string_view text) const {
  const Vector u = pool(encoders.passage->embed(text), encoders.pooling);
  return head_forward(u, params.proj_passage).out;
}

Vector RetrieverModel::encode_iq(std::string_view instruction, std::string_view query) const {
  if (interaction == Interaction::kConcat) {
    const Vector u = pool(encoders.query->embed(concat_iq(instruction, query)), encoders.pooling);
    return head_forward(u, params.proj_iq).out;
  }
  return cross_attention_forward(encoders.query->embed(instruction), encoders.query->embed(query), params).iq;
}

double RetrieverModel::score(std::string_view passage, std::string_view instruction, std::string_view query,
                             double tau) const {
  return instir::score(encode_passage(passage), encode_iq(instruction, query), tau);
}

}  // namespace instir
