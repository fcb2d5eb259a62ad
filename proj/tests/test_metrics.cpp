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
#include <map>

#include "metric_oracles.hpp"
#include "pieval/metrics.hpp"

using namespace pieval;

namespace {

TaskSample sample(std::string task, std::string instruction, std::string data, std::string response,
                  MetricKind metric = MetricKind::accuracy) {
  return {std::move(task), std::move(instruction), std::move(data), std::move(response), metric};
}

/// Answers each prompt from a lookup on its data line; "" when unknown.
std::shared_ptr<ScriptedOracle> lookup(std::map<std::string, std::string> by_substring) {
  return std::make_shared<ScriptedOracle>("lookup", [m = std::move(by_substring)](std::string_view p, int) {
    for (const auto& [k, v] : m)
      if (p.find(k) != std::string_view::npos) return v;
    return std::string();
  });
}

}  // namespace

TEST_CASE("text metrics at identity and on hand-counted cases") {
  for (const char* s : {"the cat sat", "Hello, World!", "a"}) {
    CHECK(rouge1(s, s) == 1.0);
    CHECK(gleu(s, s) == 1.0);
    CHECK(accuracy(s, s) == 1.0);
  }
  CHECK(rouge1("the cat", "the cat sat") == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(rouge1("the the the", "the cat") == doctest::Approx(0.4).epsilon(1e-12));  // clipped
  CHECK(rouge1("", "x") == 0.0);
  CHECK(rouge1("CAT!", "cat") == 1.0);
  // gleu("the cat", "the cat sat"): 1-grams 2/2 vs 2/3, 2-grams 1/1 vs 1/2 -> min(3/3, 3/5)
  CHECK(gleu("the cat", "the cat sat") == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(gleu("", "x") == 0.0);
  CHECK_THROWS_AS((void)rouge1("a", ""), ContractError);
  CHECK_THROWS_AS((void)gleu("a", ""), ContractError);
  CHECK_THROWS_AS((void)accuracy("a", ""), ContractError);
}

TEST_CASE("accuracy normalisation and choice letters") {
  CHECK(accuracy("  Positive. ", "positive") == 1.0);
  CHECK(accuracy("Not  equivalent!", "not equivalent") == 1.0);
  CHECK(accuracy("positive sentiment", "positive") == 0.0);
  CHECK(accuracy("The answer is B.", "B", true) == 1.0);
  CHECK(accuracy("(C)", "C", true) == 1.0);
  CHECK(accuracy("A Bee", "B", true) == 0.0);  // first standalone letter is A
  CHECK(accuracy("BAD", "B", true) == 0.0);
  CHECK(extract_choice_letter("none here") == std::nullopt);
  const auto mmlu = render_mmlu({"2 x 3?", {"5", "6", "7", "8"}, "B"});
  CHECK(task_utility(mmlu, "The answer is B.") == 1.0);
  CHECK(task_utility(mmlu, "the answer is b") == 0.0);
}

TEST_CASE("rouge1 and gleu agree with brute-force oracles") {
  auto rng = make_rng(1, "metrics/text");
  double worst_r = 0, worst_g = 0;
  for (int i = 0; i < 500; ++i) {
    const auto c = testing::random_text(rng, 0, 10);
    const auto r = testing::random_text(rng, 1, 10);
    const double rr = rouge1(c, r), rg = gleu(c, r);
    worst_r = std::max(worst_r, std::abs(rr - testing::oracle_rouge1(c, r)));
    worst_g = std::max(worst_g, std::abs(rg - testing::oracle_gleu(c, r)));
    CHECK(rr >= 0.0);
    CHECK(rr <= 1.0);
    CHECK(rg >= 0.0);
    CHECK(rg <= 1.0);
    if (!rouge_tokens(c).empty()) CHECK(rouge1(c, r) == doctest::Approx(rouge1(r, c)).epsilon(1e-12));
  }
  CHECK(worst_r <= 1e-9);
  CHECK(worst_g <= 1e-9);
}

TEST_CASE("auc: examples, brute force, monotone invariance") {
  CHECK(auc(std::vector{0.1, 0.2}, std::vector{0.8, 0.9}) == 1.0);
  CHECK(auc(std::vector{0.8, 0.9}, std::vector{0.1, 0.2}) == 0.0);
  CHECK(auc(std::vector{0.5, 0.5, 0.5}, std::vector{0.5, 0.5}) == 0.5);
  CHECK_THROWS_AS((void)auc(std::vector<double>{}, std::vector{1.0}), ContractError);
  auto rng = make_rng(2, "metrics/auc");
  for (int i = 0; i < 500; ++i) {
    const auto x = testing::random_scores(rng, 1 + uniform_index(rng, 50));
    const auto c = testing::random_scores(rng, 1 + uniform_index(rng, 50));
    const double a = auc(x, c);
    CHECK(std::abs(a - testing::oracle_auc(x, c)) <= 1e-9);
    std::vector<double> tx, tc;
    for (double v : x) tx.push_back(std::exp(3 * v) - 7);
    for (double v : c) tc.push_back(std::exp(3 * v) - 7);
    CHECK(auc(tx, tc) == a);
  }
}

TEST_CASE("absolute utility against stubs") {
  PromptResponseSet pr;
  pr.samples = {sample("sent", "Classify.", "d0", "positive"), sample("sent", "Classify.", "d1", "negative"),
                sample("sum", "Summarize.", "d2", "short text here", MetricKind::rouge1)};
  const auto truth = lookup({{"d0", "positive"}, {"d1", "negative"}, {"d2", "short text here"}});
  auto u = absolute_utility(*truth, pr, 8);
  CHECK(u.by_task.at("sent") == 1.0);
  CHECK(u.by_task.at("sum") == 1.0);
  CHECK(u.overall == 1.0);
  const auto empty = ScriptedOracle::constant("");
  u = absolute_utility(*empty, pr, 8);
  CHECK(u.by_task.at("sent") == 0.0);
  // recount from records
  const auto half = lookup({{"d0", "positive"}, {"d2", "short"}});
  u = absolute_utility(*half, pr, 8);
  CHECK(u.by_task.at("sent") == 0.5);
  CHECK(u.by_task.at("sum") == doctest::Approx(rouge1("short", "short text here")));
  CHECK(u.overall == doctest::Approx((1.0 + 0.0 + 0.5) / 3));
  CHECK(u.records.size() == 3);
}

TEST_CASE("asv against stubs") {
  std::vector<InjectionTuple> t;
  for (int i = 0; i < 4; ++i) {
    InjectionTuple tup;
    tup.target = sample("a", "Classify.", "target" + std::to_string(i), "yes");
    tup.injected = sample("b", "Say.", "inj" + std::to_string(i), "no" + std::to_string(i));
    t.push_back(tup);
  }
  const std::vector<Separator> z{make_separator(AttackKind::combined)};
  const auto echo_re = lookup({{"inj0", "no0"}, {"inj1", "no1"}, {"inj2", "no2"}, {"inj3", "no3"}});
  CHECK(asv(*echo_re, t, z, "combined", 4).value == 1.0);
  CHECK(asv(*ScriptedOracle::constant("yes"), t, z, "combined", 4).value == 0.0);
  const auto three = lookup({{"inj0", "no0"}, {"inj1", "no1"}, {"inj3", "no3"}});
  const auto res = asv(*three, t, z, "combined", 4);
  CHECK(res.value == 0.75);
  CHECK(res.records.size() == 4);
  CHECK(res.records[2].metric_value == 0.0);
  const std::vector<Separator> wrong(2);
  CHECK_THROWS_AS((void)asv(*three, t, wrong, "x", 4), ContractError);
}

TEST_CASE("win rate") {
  const auto defended = ScriptedOracle::constant("DEFENDED");
  const auto reference = ScriptedOracle::constant("REFERENCE");
  // Prefers whichever slot holds the defended response.
  const auto fan = std::make_shared<ScriptedOracle>("fan", [](std::string_view p, int) {
    return p.find("(A):\nDEFENDED") != std::string_view::npos ? "A" : "B";
  });
  std::vector<std::string> prompts;
  for (int i = 0; i < 10; ++i) prompts.push_back("prompt " + std::to_string(i));
  auto wr = win_rate(*defended, *reference, *fan, prompts, 7, 4);
  CHECK(wr.value == 1.0);
  CHECK(wr.excluded == 0);

  // 3 of 10 preferred
  const auto picky = std::make_shared<ScriptedOracle>("picky", [](std::string_view p, int) {
    const bool want = p.find("prompt 1\n") != std::string_view::npos || p.find("prompt 4\n") != std::string_view::npos ||
                      p.find("prompt 7\n") != std::string_view::npos;
    const bool a_is_defended = p.find("(A):\nDEFENDED") != std::string_view::npos;
    return (want == a_is_defended) ? "A" : "B";
  });
  CHECK(win_rate(*defended, *reference, *picky, prompts, 7, 4).value == doctest::Approx(0.3));

  // unparseable verdicts are excluded and counted
  const auto vague = std::make_shared<ScriptedOracle>("vague", [](std::string_view p, int) {
    return p.find("prompt 0\n") != std::string_view::npos ? std::string("hmm") : std::string("(A).");
  });
  std::vector<SampleRecord> recs;
  wr = win_rate(*defended, *reference, *vague, prompts, 7, 4, &recs);
  CHECK(wr.excluded == 1);
  CHECK(wr.excluded_fraction() == doctest::Approx(0.1));
  CHECK(recs.size() == 10);
  CHECK_FALSE(recs[0].label.has_value());

  // symmetric setting with a coin-flip judge
  std::vector<std::string> many;
  for (int i = 0; i < 1000; ++i) many.push_back("q" + std::to_string(i));
  const auto coin = std::make_shared<ScriptedOracle>("coin", [](std::string_view p, int) {
    return sha256_hex(p)[0] < '8' ? "A" : "B";
  });
  wr = win_rate(*reference, *reference, *coin, many, 3, 4);
  CHECK(std::abs(*wr.value - 0.5) < 0.06);

  CHECK(parse_verdict(" b ") == 'B');
  CHECK(parse_verdict("Response A") == 'A');
  CHECK(parse_verdict("A or B") == std::nullopt);
  CHECK(render_judge_prompt("{a}", "{b}", "x").find("Response (A):\n{b}") != std::string::npos);
}

TEST_CASE("aggregate recount and record round trip") {
  std::vector<SampleRecord> recs;
  auto add = [&](std::string stage, std::string attack, std::string det, std::optional<double> v,
                 std::optional<int> label, std::optional<double> score) {
    SampleRecord r;
    r.sample_id = stage + "/" + std::to_string(recs.size());
    r.stage = std::move(stage);
    r.attack = std::move(attack);
    r.detector = std::move(det);
    r.task_id = "t";
    r.metric_value = v;
    r.label = label;
    r.score = score;
    recs.push_back(r);
  };
  add("utility", "", "", 1.0, {}, {});
  add("utility", "", "", 0.25, {}, {});
  add("attack", "naive", "", 0.5, {}, {});
  add("fpr", "", "ppl", {}, 0, 0.1);
  add("fpr", "", "ppl", {}, 1, 0.7);
  add("fnr", "naive", "ppl", {}, 1, 0.9);
  add("fnr", "naive", "ppl", {}, 0, 0.2);
  const auto rep = aggregate(recs);
  CHECK(rep.utility_overall == 0.625);
  CHECK(rep.asv_by_attack.at("naive") == 0.5);
  CHECK(rep.detectors.at("ppl").fpr == 0.5);
  CHECK(rep.detectors.at("ppl").fnr_by_attack.at("naive") == 0.5);
  CHECK(rep.detectors.at("ppl").auc_by_attack.at("naive") == 0.75);
  for (const auto& r : recs) {
    const auto back = record_from_json(record_to_json(r));
    CHECK(record_to_json(back) == record_to_json(r));
  }
}
