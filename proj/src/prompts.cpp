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

#include "instir/synth.hpp"

namespace instir {

namespace {

constexpr const char* kQuerySynthesis = R"PROMPT(You are given a document along with a search query and an instruction that retrieves this document.

Document: {document}
Positive Query: {query_positive}
Positive Instruction: {instruction_positive}

Your task is to generate a NEW search query that will lead to the creation of DISTINCTLY DIFFERENT documents. The new query combined with the original instruction needs to create documents that are easily distinguishable from the original document when evaluated.

To create effective negative examples:
1. IDENTIFY KEY ELEMENTS: First, identify 2-3 core aspects/facts/claims of the original document.
2. CREATE SEMANTIC OPPOSITES:
  - Your new query should target information that contradicts or significantly diverges from these core aspects
3. MAINTAIN DOMAIN RELEVANCE: Stay in a similar subject area but with crucial differences:
  - Change time periods, locations, entities, or outcomes
  - Reverse cause-effect relationships
  - Switch perspective (e.g., benefits vs. drawbacks, support vs. opposition)
  - Modify the granularity or specificity level
4. ENSURE CLEAR DISTINCTION: A human evaluator should be able to easily determine which document is the original vs. synthetic based on these key distinctions.

The goal is that when your NEW query is used with the ORIGINAL instruction, they should produce documents that are clearly distinguishable from the original document (at least 3 significant differences).

Please provide your answer in the following format:
Query: <your new query>
Be concise but specific enough to ensure clear differentiation.)PROMPT";

constexpr const char* kInstructionSynthesis = R"PROMPT(You are given a document along with a search query and an instruction that retrieves this document.

Document: {document}

Positive Query: {query_positive}

Positive Instruction: {instruction_positive}

Your task is to generate a NEW instruction that will lead to the creation of DISTINCTLY DIFFERENT documents. The new instruction combined with the original query needs to create documents that are easily distinguishable from the original document when evaluated.

To create effective negative examples:

1. IDENTIFY KEY ELEMENTS: First, identify 2-3 core aspects/facts/claims of the original document.

2. CREATE SEMANTIC OPPOSITES:
  - Your new instruction should target information that contradicts or significantly diverges from these core aspects

3. MAINTAIN DOMAIN RELEVANCE: Stay in a similar subject area but with crucial differences:
  - Change time periods, locations, entities, or outcomes
  - Reverse cause-effect relationships
  - Switch perspective (e.g., benefits vs. drawbacks, support vs. opposition)
  - Modify the granularity or specificity level

4. ENSURE CLEAR DISTINCTION: A human evaluator should be able to easily determine which document is the original vs. synthetic based on these key distinctions.

The goal is that when your NEW instruction is used with the ORIGINAL query, they should produce documents that are clearly distinguishable from the original document (at least 3 significant differences).

Please provide your answer in the following format:

Instruction: <your new instruction>

Be concise but specific enough to ensure clear differentiation.)PROMPT";

constexpr const char* kInstructionGeneration = R"PROMPT(You are given a search query and a document that answers it.

Query: {query}
Document: {document}

Write one instruction a user could attach to this query to make the request more specific or to state a preferred style or context. The document must remain a correct answer to the query under your instruction, and the instruction must not repeat the query.

Please provide your answer in the following format:
Instruction: <your instruction>)PROMPT";

constexpr const char* kPassageSynthesis = R"PROMPT(Write a passage that is relevant to the following search query when the instruction is followed. The passage should satisfy the instruction fully and read like a document from a web corpus.

Instruction: {instruction}
Query: {query}

Please provide your answer in the following format:
Passage: <your passage>)PROMPT";

constexpr const char* kJudge = R"PROMPT(You are judging search results.

Instruction: {instruction}
Query: {query}

Candidate passages:
{passages}

Which single passage is the most relevant to the query when the instruction is followed? Answer with the label of that passage only, for example "B".)PROMPT";

}  // namespace

const PromptTemplate& query_synthesis_template() {
  static const PromptTemplate t = PromptTemplate::from_body("query_synthesis", kQuerySynthesis);
  return t;
}

const PromptTemplate& instruction_synthesis_template() {
  static const PromptTemplate t = PromptTemplate::from_body("instruction_synthesis", kInstructionSynthesis);
  return t;
}

const PromptTemplate& instruction_generation_template() {
  static const PromptTemplate t = PromptTemplate::from_body("instruction_generation", kInstructionGeneration);
  return t;
}

const PromptTemplate& passage_synthesis_template() {
  static const PromptTemplate t = PromptTemplate::from_body("passage_synthesis", kPassageSynthesis);
  return t;
}

const PromptTemplate& judge_template() {
  static const PromptTemplate t = PromptTemplate::from_body("judge", kJudge);
  return t;
}

}  // namespace instir
