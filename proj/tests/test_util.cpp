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

#include <doctest.h>

#include <set>

#include "instir/error.hpp"
#include "instir/util.hpp"
#include "support.hpp"

using namespace instir;

TEST_CASE("rng is deterministic and below() stays in range") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng r(1);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 1000; ++i) {
    const auto x = r.below(7);
    CHECK(x < 7);
    seen.insert(x);
  }
  CHECK(seen.size() == 7);
  for (int i = 0; i < 1000; ++i) {
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
}

TEST_CASE("shuffle is a seeded permutation") {
  std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  auto w = v;
  Rng(7).shuffle(v);
  Rng(7).shuffle(w);
  CHECK(v == w);
  std::sort(w.begin(), w.end());
  CHECK(w == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
}

TEST_CASE("string helpers") {
  CHECK(trim("  a b \t\n") == "a b");
  CHECK(trim("") == "");
  CHECK(casefold("AbC") == "abc");
  CHECK(normalize_whitespace("  a \t b\n\nc ") == "a b c");
  CHECK(split("a\tb\t", '\t') == std::vector<std::string>{"a", "b", ""});
  CHECK(starts_with("prefix-rest", "prefix"));
  CHECK_FALSE(starts_with("pre", "prefix"));
}

TEST_CASE("sha256 matches known digests") {
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("fnv1a64 and mix64 reference values") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(mix64(0) == 0);
}

TEST_CASE("file round trip") {
  testing::TempDir dir;
  const std::string path = dir / "x.txt";
  write_file_atomic(path, "hello\n");
  CHECK(read_file(path) == "hello\n");
  write_file_atomic(path, "again");
  CHECK(read_file(path) == "again");
  CHECK_THROWS_AS(read_file(dir / "missing"), Error);
}
