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

#include <string>

namespace instir::detail {

struct HttpResponse {
  int status = 0;
  std::string body;
};

/// POSTs a JSON body to `url` (http:// or https://). A non-empty
/// `bearer_token` is sent as an Authorization header. Throws TransportError
/// when no response arrives.
HttpResponse http_post_json(const std::string& url, const std::string& body,
                            const std::string& bearer_token, double timeout_seconds);

/// Reads the named environment variable; throws ConfigError naming it when unset or empty.
std::string require_env(const std::string& name);

}  // namespace instir::detail
