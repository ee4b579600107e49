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

#include <functional>
#include <string>
#include <string_view>

#include <json.hpp>

namespace instir {

enum class LogLevel { kDebug, kInfo, kWarn, kError };

std::string_view to_string(LogLevel level) noexcept;

/// Process-wide structured logger. Lines go to stderr unless a sink is set.
/// Text lines look like `[warn] event key=value ...`; JSON lines carry
/// {"level", "event", ...fields}.
void set_log_json(bool json);
void set_log_level(LogLevel min_level);
/// Replaces the output; pass an empty function to restore stderr.
void set_log_sink(std::function<void(const std::string& line)> sink);

void log_event(LogLevel level, std::string_view event, const nlohmann::ordered_json& fields = {});

inline void log_info(std::string_view event, const nlohmann::ordered_json& fields = {}) {
  log_event(LogLevel::kInfo, event, fields);
}
inline void log_warn(std::string_view event, const nlohmann::ordered_json& fields = {}) {
  log_event(LogLevel::kWarn, event, fields);
}

}  // namespace instir
