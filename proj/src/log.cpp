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

#include "instir/log.hpp"

#include <iostream>
#include <mutex>

namespace instir {

namespace {

struct LogState {
  std::mutex mu;
  bool json = false;
  LogLevel min_level = LogLevel::kInfo;
  std::function<void(const std::string&)> sink;
};

LogState& state() {
  static LogState s;
  return s;
}

}  // namespace

std::string_view to_string(LogLevel level) noexcept {
  switch (level) {
    case LogLevel::kDebug: return "debug";
    case LogLevel::kInfo: return "info";
    case LogLevel::kWarn: return "warn";
    case LogLevel::kError: return "error";
  }
  return "info";
}

void set_log_json(bool json) {
  std::lock_guard lock(state().mu);
  state().json = json;
}

void set_log_level(LogLevel min_level) {
  std::lock_guard lock(state().mu);
  state().min_level = min_level;
}

void set_log_sink(std::function<void(const std::string& line)> sink) {
  std::lock_guard lock(state().mu);
  state().sink = std::move(sink);
}

void log_event(LogLevel level, std::string_view event, const nlohmann::ordered_json& fields) {
  auto& s = state();
  std::lock_guard lock(s.mu);
  if (level < s.min_level) return;
  std::string line;
  if (s.json) {
    nlohmann::ordered_json j;
    j["level"] = to_string(level);
    j["event"] = event;
    if (fields.is_object()) {
      for (const auto& [k, v] : fields.items()) j[k] = v;
    }
    line = j.dump();
  } else {
    line = "[" + std::string(to_string(level)) + "] " + std::string(event);
    if (fields.is_object()) {
      for (const auto& [k, v] : fields.items()) {
        line += " " + k + "=" + (v.is_string() ? v.get<std::string>() : v.dump());
      }
    }
  }
  if (s.sink) {
    s.sink(line);
  } else {
    std::cerr << line << '\n';
  }
}

}  // namespace instir
