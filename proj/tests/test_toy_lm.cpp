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

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pieval/toy_lm.hpp"
#include "test_support.hpp"

using namespace pieval;

namespace {

ToyLM::Config small(std::uint64_t seed) {
  ToyLM::Config cfg;
  cfg.seed = seed;
  cfg.d_model = 24;
  cfg.max_len = 128;
  return cfg;
}

}  // namespace

TEST_CASE("attention rows and next-token distributions are normalised") {
  const ToyLM lm(small(3));
  const auto tokens = ByteTokenizer::encode("Summarize the text.\nabc");
  const auto attn = lm.attention(tokens);
  REQUIRE(attn.rows() == static_cast<Eigen::Index>(tokens.size() + 1));
  for (Eigen::Index i = 0; i < attn.rows(); ++i) {
    CHECK(std::abs(attn.row(i).sum() - 1.0) < 1e-9);
    for (Eigen::Index j = i + 1; j < attn.cols(); ++j) CHECK(attn(i, j) == 0.0);
  }
  const auto lp = ToyLM::log_softmax(lm.next_logits(tokens));
  CHECK(std::abs(lp.array().exp().sum() - 1.0) < 1e-9);
}

TEST_CASE("construction is deterministic in the seed") {
  const ToyLM a(small(11)), b(small(11)), c(small(12));
  CHECK(a.embeddings() == b.embeddings());
  CHECK(a.embeddings() != c.embeddings());
  const auto prompt = ByteTokenizer::encode("hello there");
  CHECK(a.greedy(prompt, 6) == b.greedy(prompt, 6));
  CHECK(a.greedy(prompt, 6) == a.greedy(prompt, 6));
  CHECK(a.greedy(prompt, 0).empty());
}

TEST_CASE("uniform model gives ln V for a single target token") {
  const auto lm = ToyLM::uniform(small(1));
  const auto prefix = ByteTokenizer::encode("anything");
  const std::vector<TokenId> target{'x'};
  CHECK(lm.ce_loss(prefix, target).value == doctest::Approx(std::log(double(ToyLM::kVocab))).epsilon(1e-12));
}

TEST_CASE("rigged model is certain of its token") {
  const auto lm = ToyLM::rigged(small(1), 'q', 1e4);
  const std::vector<TokenId> target{'q', 'q', 'q'};
  const auto loss = lm.ce_loss(ByteTokenizer::encode("prefix"), target);
  CHECK(loss.value < 1e-12);
  for (double lp : loss.token_logprobs) CHECK(lp <= 0.0);
}

TEST_CASE("ce_loss rejects bad spans and empty targets") {
  const ToyLM lm(small(1));
  const auto prefix = ByteTokenizer::encode("abc");
  const std::vector<TokenId> target{'d'};
  CHECK_THROWS_AS((void)lm.ce_loss(prefix, target, Range{1, 5}), ContractError);
  CHECK_THROWS_AS((void)lm.ce_loss(prefix, std::vector<TokenId>{}), ContractError);
  CHECK_THROWS_AS((void)lm.ce_loss(std::vector<TokenId>(200, 'a'), target), ContractError);
}

TEST_CASE("ce gradient matches central finite differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto c = testing::make_gradient_case(seed);
    const ToyLM lm(c.config);
    const auto check = testing::check_ce_gradient(lm, c);
    INFO("seed " << seed << " worst relative error " << check.worst_relative_error);
    CHECK(check.worst_relative_error <= 1e-4);
  }
}

TEST_CASE("focus gradient matches central finite differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto c = testing::make_gradient_case(seed + 100);
    const ToyLM lm(c.config);
    const auto check = testing::check_focus_gradient(lm, c);
    INFO("seed " << seed << " worst relative error " << check.worst_relative_error);
    CHECK(check.worst_relative_error <= 1e-4);
  }
}

TEST_CASE("focus score edge cases") {
  const ToyLM lm(small(5));
  const auto instr = ByteTokenizer::encode("Repeat the data.");
  CHECK(lm.focus(instr, Range{0, instr.size()}).value == doctest::Approx(1.0).epsilon(1e-12));

  const auto prompt = ByteTokenizer::encode("Repeat the data.\nsome data here");
  CHECK(lm.focus(prompt, Range{0, 0}).value == 0.0);

  // Recompute from the exposed attention matrix: last row, renormalised
  // without the BOS column.
  const auto attn = lm.attention(prompt);
  const auto last = attn.rows() - 1;
  double mass = 0;
  for (std::size_t j = 0; j < instr.size(); ++j) mass += attn(last, static_cast<Eigen::Index>(j + 1));
  const double expected = mass / (1.0 - attn(last, 0));
  const double score = lm.focus(prompt, Range{0, instr.size()}).value;
  CHECK(score == doctest::Approx(expected).epsilon(1e-12));
  CHECK(score >= 0.0);
  CHECK(score <= 1.0);
}

TEST_CASE("multi-step focus averages over generated positions") {
  const ToyLM lm(small(8));
  const auto prompt = ByteTokenizer::encode("Classify.\ntext");
  const Range span{0, 9};
  const auto generated = lm.greedy(prompt, 2);
  REQUIRE(generated.size() == 2);
  auto seq = prompt;
  seq.insert(seq.end(), generated.begin(), generated.end());
  const auto attn = lm.attention(seq);
  double total = 0;
  for (Eigen::Index r = static_cast<Eigen::Index>(prompt.size());
       r < static_cast<Eigen::Index>(prompt.size()) + 3; ++r) {
    double mass = 0;
    for (std::size_t j = span.begin; j < span.end; ++j) mass += attn(r, static_cast<Eigen::Index>(j + 1));
    total += mass / (1.0 - attn(r, 0));
  }
  CHECK(lm.focus(prompt, span, 3).value == doctest::Approx(total / 3).epsilon(1e-12));
}
