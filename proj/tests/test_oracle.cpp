// Copyright 2026 The pieval Authors.
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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "pieval/oracle.hpp"

using namespace pieval;

namespace {

ToyLM::Config small(std::uint64_t seed) {
  ToyLM::Config cfg;
  cfg.seed = seed;
  cfg.d_model = 16;
  cfg.max_len = 64;
  return cfg;
}

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("pieval_test_oracle_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("toy oracle generates deterministically and honours its context") {
  const ToyOracle a(small(5)), b(small(5)), c(small(6));
  CHECK(a.id() == b.id());
  CHECK(a.id() != c.id());
  CHECK(a.generate("hello", 5) == b.generate("hello", 5));
  CHECK(a.generate("hello", 0).empty());
  CHECK_THROWS_AS((void)a.generate(std::string(80, 'x'), 2), ContextOverflow);
  CHECK(a.capabilities().grad);
  CHECK(a.detokenize(a.tokenize("round trip")) == "round trip");
}

TEST_CASE("generation-only backends refuse token-level calls") {
  const auto echo = ScriptedOracle::echo();
  CHECK(echo->generate("abc", 3) == "abc");
  CHECK(echo->calls() == 1);
  const std::vector<TokenId> t{1};
  CHECK_THROWS_AS((void)echo->ce_loss(t, t), CapabilityError);
  CHECK_THROWS_AS((void)echo->focus(t, Range{0, 1}), CapabilityError);
  CHECK_THROWS_AS((void)echo->embeddings(), CapabilityError);
  CHECK_THROWS_AS(echo->require(&Capabilities::grad, "gradients"), CapabilityError);
  CHECK_THROWS_AS((void)perplexity(*echo, "abc"), CapabilityError);
}

TEST_CASE("cache keys separate backend, prompt and decode params") {
  const auto k = cache_key("m", "p", {8, 0.0});
  CHECK(k.size() == 64);
  CHECK(k == cache_key("m", "p", {8, 0.0}));
  CHECK(k != cache_key("m", "p", {9, 0.0}));
  CHECK(k != cache_key("m", "q", {8, 0.0}));
  CHECK(k != cache_key("n", "p", {8, 0.0}));
  // length prefixes stop boundary shifts from colliding
  CHECK(cache_key("ab", "c", {1, 0.0}) != cache_key("a", "bc", {1, 0.0}));
}

TEST_CASE("cached oracle serves repeats from disk, including raw bytes") {
  const auto dir = scratch("cache");
  auto cache = std::make_shared<ResponseCache>(dir);
  const std::string weird = std::string("caf\xc3\xa9 \xff\xfe", 8);
  auto inner = std::make_shared<ScriptedOracle>("stub", [&](std::string_view p, int) {
    return std::string(p) + weird;
  });
  CachedOracle cached(inner, cache);
  const auto first = cached.generate("q", 4);
  CHECK(first == "q" + weird);
  CHECK(cached.generate("q", 4) == first);
  CHECK(cached.hits() == 1);
  CHECK(cached.misses() == 1);
  CHECK(inner->calls() == 1);

  const auto key = cache_key("stub", "q", {4, 0.0});
  const auto path = cache->path_for(key);
  CHECK(std::filesystem::exists(path));
  CHECK(path.parent_path().filename() == key.substr(0, 2));
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
    CHECK(e.path().extension() != ".tmp");

  // a fresh process sees the same file
  CachedOracle again(inner, std::make_shared<ResponseCache>(dir));
  CHECK(again.generate("q", 4) == first);
  CHECK(inner->calls() == 1);

  // a torn entry is a miss, then repaired
  {
    std::ofstream out(path, std::ios::trunc);
    out << "{\"key\":";
  }
  CHECK(again.generate("q", 4) == first);
  CHECK(inner->calls() == 2);
  CHECK(cache->get(key).value() == first);
  std::filesystem::remove_all(dir);
}

TEST_CASE("perplexity oracles") {
  const auto text = std::string("the quick brown fox");
  SUBCASE("uniform model has perplexity V") {
    const ToyOracle o(std::make_shared<const ToyLM>(ToyLM::uniform(small(1))));
    CHECK(perplexity(o, text) == doctest::Approx(double(ToyLM::kVocab)).epsilon(1e-9));
  }
  SUBCASE("a model certain of every token has perplexity 1") {
    const ToyOracle o(std::make_shared<const ToyLM>(ToyLM::rigged(small(1), 'a', 1e4)));
    CHECK(perplexity(o, "aaaa") == doctest::Approx(1.0).epsilon(1e-9));
  }
  SUBCASE("seeded model matches a hand recomputation") {
    const auto lm = std::make_shared<const ToyLM>(small(9));
    const ToyOracle o(lm);
    const auto tokens = ByteTokenizer::encode(text);
    double nll = 0;
    std::vector<TokenId> prefix;
    for (TokenId t : tokens) {
      const auto lp = ToyLM::log_softmax(lm->next_logits(prefix));
      nll -= lp(t);
      prefix.push_back(t);
    }
    CHECK(perplexity(o, text) == doctest::Approx(std::exp(nll / double(tokens.size()))).epsilon(1e-9));
  }
  const ToyOracle o(small(1));
  CHECK_THROWS_AS((void)perplexity(o, ""), ContractError);
}
