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

#include "pieval/optimizer.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"
#include "pieval/metrics.hpp"

namespace pieval {

namespace {

bool piece_editable(OptimizableSpan span, XcLayout::Piece p) {
  switch (span) {
    case OptimizableSpan::none:
      return false;
    case OptimizableSpan::separator:
      return p == XcLayout::separator;
    case OptimizableSpan::separator_instruction:
      return p == XcLayout::separator || p == XcLayout::instruction;
    case OptimizableSpan::separator_instruction_data:
      return p == XcLayout::separator || p == XcLayout::instruction || p == XcLayout::data;
  }
  return false;
}

std::vector<TokenId> concat(std::span<const TokenId> a, std::span<const TokenId> b) {
  std::vector<TokenId> out(a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

/// Rows of `grad` for the editable range; the empty matrix stays empty.
void check_grad(const Eigen::MatrixXd& grad, const std::optional<Range>& editable, int vocab) {
  if (!editable) return;
  if (grad.rows() != static_cast<Eigen::Index>(editable->size()) || grad.cols() != vocab)
    throw ContractError("objective gradient has shape " + std::to_string(grad.rows()) + "x" +
                        std::to_string(grad.cols()) + ", expected " + std::to_string(editable->size()) + "x" +
                        std::to_string(vocab));
}

}  // namespace

void GcgConfig::validate() const {
  if (top_k < 1) throw ConfigError("gcg top_k must be >= 1");
  if (candidates_per_iter < 1) throw ConfigError("gcg candidates_per_iter must be >= 1");
  if (iterations < 0) throw ConfigError("gcg iterations must be >= 0");
  if (alpha < 0 || !std::isfinite(alpha)) throw ConfigError("gcg alpha must be finite and >= 0");
  if (init_tokens.empty() && (init_length < 1 || filler.empty()))
    throw ConfigError("gcg needs init_tokens or a positive init_length with a filler");
  if (span == OptimizableSpan::none) throw ConfigError("gcg span must not be none");
}

GcgConfig GcgConfig::full_scale() {
  GcgConfig c;
  c.top_k = 256;
  c.candidates_per_iter = 512;
  c.iterations = 500;
  c.init_length = 20;
  return c;
}

std::vector<TokenId> XcLayout::tokens() const {
  std::vector<TokenId> out;
  for (const auto& p : pieces) out.insert(out.end(), p.begin(), p.end());
  return out;
}

Range XcLayout::range(Piece p) const {
  std::size_t begin = 0;
  for (int i = 0; i < p; ++i) begin += pieces[i].size();
  return {begin, begin + pieces[p].size()};
}

Range XcLayout::editable_range(OptimizableSpan span) const {
  std::optional<Range> out;
  for (int i = 0; i < kPieces; ++i) {
    const auto p = static_cast<Piece>(i);
    if (!piece_editable(span, p)) continue;
    const auto r = range(p);
    out = out ? Range{out->begin, r.end} : r;
  }
  if (!out) throw ContractError("no editable piece for span " + std::string(to_string(span)));
  return *out;
}

bool XcLayout::editable(OptimizableSpan span, std::size_t pos) const {
  for (int i = 0; i < kPieces; ++i) {
    const auto r = range(static_cast<Piece>(i));
    if (pos >= r.begin && pos < r.end) return piece_editable(span, static_cast<Piece>(i));
  }
  return false;
}

void XcLayout::set(std::size_t pos, TokenId token) {
  for (auto& p : pieces) {
    if (pos < p.size()) {
      p[pos] = token;
      return;
    }
    pos -= p.size();
  }
  throw ContractError("layout position out of range");
}

ContaminatedData XcLayout::render(const ModelOracle& oracle) const {
  std::array<std::string, kPieces> s;
  for (int i = 0; i < kPieces; ++i) s[i] = oracle.detokenize(pieces[i]);
  return assemble_contaminated(s[target_data], s[separator], s[lead], s[instruction], s[glue], s[data]);
}

XcLayout make_layout(const ModelOracle& oracle, const InjectionTuple& tuple,
                     std::span<const TokenId> separator_tokens) {
  XcLayout l;
  l.pieces[XcLayout::target_data] = oracle.tokenize(tuple.target.data);
  l.pieces[XcLayout::separator].assign(separator_tokens.begin(), separator_tokens.end());
  // Same whitespace rule as contaminate(), decided once from the initial
  // separator so that lengths stay fixed during the search.
  const auto sep_text = oracle.detokenize(separator_tokens);
  const std::string_view head = sep_text.empty() ? std::string_view(tuple.target.data) : std::string_view(sep_text);
  const bool has_injected = !tuple.injected.instruction.empty() || !tuple.injected.data.empty();
  if (has_injected && !head.empty() && !std::isspace(static_cast<unsigned char>(head.back())))
    l.pieces[XcLayout::lead] = oracle.tokenize(" ");
  l.pieces[XcLayout::instruction] = oracle.tokenize(tuple.injected.instruction);
  if (!tuple.injected.instruction.empty() && !tuple.injected.data.empty())
    l.pieces[XcLayout::glue] = oracle.tokenize(" ");
  l.pieces[XcLayout::data] = oracle.tokenize(tuple.injected.data);
  return l;
}

AttackObjective::AttackObjective(const ModelOracle& oracle, const InjectionTuple& tuple)
    : oracle_(oracle),
      head_(oracle.tokenize(render_prompt(tuple.target.instruction, ""))),
      target_(oracle.tokenize(tuple.injected.response)) {
  if (target_.empty()) throw ContractError("attack objective: empty injected response");
}

std::vector<TokenId> AttackObjective::prompt(std::span<const TokenId> xc) const { return concat(head_, xc); }

ObjectiveValue AttackObjective::evaluate(std::span<const TokenId> xc, std::optional<Range> editable) const {
  std::optional<Range> shifted;
  if (editable) shifted = Range{editable->begin + head_.size(), editable->end + head_.size()};
  auto loss = oracle_.ce_loss(prompt(xc), target_, shifted);
  check_grad(loss.grad, editable, oracle_.vocab_size());
  return {loss.value, std::move(loss.grad)};
}

ObjectiveValue EvasionObjective::evaluate(std::span<const TokenId> xc, std::optional<Range> editable) const {
  auto f = detector_.score_tokens(xc, editable);
  check_grad(f.grad, editable, detector_.oracle().vocab_size());
  return {f.value, std::move(f.grad)};
}

AdaptiveObjective::AdaptiveObjective(const EvasionObjective& evasion, const AttackObjective& attack, double alpha)
    : evasion_(evasion), attack_(attack), alpha_(alpha) {
  if (alpha < 0 || !std::isfinite(alpha)) throw ConfigError("adaptive alpha must be finite and >= 0");
}

ObjectiveValue AdaptiveObjective::evaluate(std::span<const TokenId> xc, std::optional<Range> editable) const {
  auto out = evasion_.evaluate(xc, editable);
  if (alpha_ == 0) return out;
  const auto a = attack_.evaluate(xc, editable);
  out.value += alpha_ * a.value;
  if (editable) out.grad += alpha_ * a.grad;
  return out;
}

namespace {

bool attack_success(const ModelOracle& oracle, const InjectionTuple& tuple, std::string_view xc_text,
                    int max_tokens) {
  const auto reply = oracle.generate(render_prompt(tuple.target.instruction, xc_text), max_tokens);
  return utility_success(tuple.injected.metric, task_utility(tuple.injected, reply));
}

}  // namespace

GcgTrace gcg_optimize(const InjectionTuple& tuple, const ModelOracle& oracle, const GcgConfig& cfg,
                      const Objective& objective, int max_tokens) {
  cfg.validate();
  oracle.require(&Capabilities::grad, "gradients");

  std::vector<TokenId> init = cfg.init_tokens;
  if (init.empty()) {
    const auto one = oracle.tokenize(cfg.filler);
    for (int i = 0; i < cfg.init_length; ++i) init.insert(init.end(), one.begin(), one.end());
  }

  GcgTrace trace;
  trace.layout = make_layout(oracle, tuple, init);
  auto& layout = trace.layout;
  const Range window = layout.editable_range(cfg.span);
  std::vector<std::size_t> positions;
  for (std::size_t p = window.begin; p < window.end; ++p)
    if (layout.editable(cfg.span, p)) positions.push_back(p);

  std::set<TokenId> banned = cfg.banned_tokens;
  for (TokenId t : oracle.special_tokens()) banned.insert(t);
  std::vector<TokenId> allowed;
  for (TokenId v = 0; v < oracle.vocab_size(); ++v)
    if (!banned.contains(v) && oracle.is_text_token(v)) allowed.push_back(v);
  if (allowed.empty()) throw ContractError("gcg: every token is banned");

  auto tokens = layout.tokens();
  auto current = objective.evaluate(tokens, window);
  double best = current.value;
  trace.steps.push_back({0, best, -1, -1});
  auto abort = [&](std::string why) {
    trace.aborted = true;
    trace.abort_reason = std::move(why);
    spdlog::warn("gcg aborted: {}", trace.abort_reason);
  };
  if (!std::isfinite(best)) abort("non-finite initial loss");

  auto rng = make_rng(cfg.seed, "gcg");
  std::vector<std::pair<std::size_t, TokenId>> pool;
  std::vector<TokenId> order;
  for (int it = 1; it <= cfg.iterations && !trace.aborted; ++it) {
    if (cfg.loss_threshold && best <= *cfg.loss_threshold) break;

    // top-k most negative gradient entries per editable position
    pool.clear();
    for (std::size_t p : positions) {
      const auto row = current.grad.row(static_cast<Eigen::Index>(p - window.begin));
      order.clear();
      for (TokenId v : allowed)
        if (v != tokens[p]) order.push_back(v);
      const auto k = std::min<std::size_t>(static_cast<std::size_t>(cfg.top_k), order.size());
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                        [&](TokenId a, TokenId b) { return row(a) < row(b) || (row(a) == row(b) && a < b); });
      for (std::size_t i = 0; i < k; ++i) pool.emplace_back(p, order[i]);
    }
    const std::size_t m = std::min<std::size_t>(static_cast<std::size_t>(cfg.candidates_per_iter), pool.size());
    for (std::size_t i = 0; i < m; ++i) std::swap(pool[i], pool[i + uniform_index(rng, pool.size() - i)]);

    std::optional<std::size_t> pick;
    double pick_loss = best;
    for (std::size_t i = 0; i < m; ++i) {
      auto cand = tokens;
      cand[pool[i].first] = pool[i].second;
      const double v = objective.evaluate(cand, std::nullopt).value;
      if (!std::isfinite(v)) {
        abort("non-finite candidate loss at iteration " + std::to_string(it));
        break;
      }
      if (v < pick_loss) {
        pick_loss = v;
        pick = i;
      }
    }
    if (trace.aborted) break;

    GcgStep step{it, best, -1, -1};
    if (pick) {
      const auto [pos, tok] = pool[*pick];
      layout.set(pos, tok);
      tokens[pos] = tok;
      best = pick_loss;
      current = objective.evaluate(tokens, window);
      step = {it, best, static_cast<long>(pos), tok};
    }
    trace.steps.push_back(step);
  }
  trace.final_loss = best;
  trace.contaminated = layout.render(oracle);

  if (const auto* adaptive = dynamic_cast<const AdaptiveObjective*>(&objective)) {
    const auto& detector = adaptive->evasion().detector();
    trace.final_evasion = adaptive->evasion().evaluate(tokens, std::nullopt).value;
    trace.final_ce = adaptive->attack().evaluate(tokens, std::nullopt).value;
    trace.recorded_flags = AdaptiveFlags{
        *trace.final_evasion < detector.threshold(),
        attack_success(oracle, tuple, trace.contaminated.text, max_tokens)};
  }
  return trace;
}

AdaptiveFlags evaluate_adaptive_success(const GcgTrace& trace, const Detector& detector, const ModelOracle& oracle,
                                        const InjectionTuple& tuple, int max_tokens) {
  const auto& text = trace.contaminated.text;
  return {detector.detect(text).label == 0, attack_success(oracle, tuple, text, max_tokens)};
}

std::string trace_to_jsonl(const GcgTrace& trace, std::size_t tuple_index) {
  std::string out;
  for (const auto& s : trace.steps) {
    nlohmann::ordered_json j;
    j["tuple"] = tuple_index;
    j["iteration"] = s.iteration;
    j["loss"] = s.best_loss;
    j["position"] = s.chosen_position;
    j["token"] = s.chosen_token;
    out += j.dump() + "\n";
  }
  nlohmann::ordered_json j;
  j["tuple"] = tuple_index;
  j["final_loss"] = trace.final_loss;
  j["aborted"] = trace.aborted;
  if (trace.aborted) j["abort_reason"] = trace.abort_reason;
  j["separator"] = trace.contaminated.piece(trace.contaminated.spans.separator);
  j["text"] = trace.contaminated.text;
  if (trace.final_evasion) j["final_evasion"] = *trace.final_evasion;
  if (trace.final_ce) j["final_ce"] = *trace.final_ce;
  if (trace.recorded_flags) {
    j["evaded"] = trace.recorded_flags->evaded;
    j["attack_succeeded"] = trace.recorded_flags->attack_succeeded;
  }
  out += j.dump() + "\n";
  return out;
}

}  // namespace pieval
