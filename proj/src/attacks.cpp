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

#include "pieval/attacks.hpp"

#include <cctype>
#include <limits>

namespace pieval {

std::string_view to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::naive: return "naive";
    case AttackKind::escape: return "escape";
    case AttackKind::context_ignoring: return "context_ignoring";
    case AttackKind::fake_completion: return "fake_completion";
    case AttackKind::combined: return "combined";
    case AttackKind::combined_adaptive_delimiters: return "combined_adaptive_delimiters";
    case AttackKind::gcg: return "gcg";
    case AttackKind::gcg_adaptive: return "gcg_adaptive";
  }
  return "naive";
}

AttackKind parse_attack_kind(std::string_view name) {
  for (auto k : {AttackKind::naive, AttackKind::escape, AttackKind::context_ignoring,
                 AttackKind::fake_completion, AttackKind::combined,
                 AttackKind::combined_adaptive_delimiters, AttackKind::gcg, AttackKind::gcg_adaptive})
    if (to_string(k) == name) return k;
  throw ConfigError("unknown attack \"" + std::string(name) + "\"");
}

std::string_view to_string(OptimizableSpan span) {
  switch (span) {
    case OptimizableSpan::none: return "none";
    case OptimizableSpan::separator: return "separator";
    case OptimizableSpan::separator_instruction: return "separator_instruction";
    case OptimizableSpan::separator_instruction_data: return "separator_instruction_data";
  }
  return "none";
}

OptimizableSpan parse_span(std::string_view name) {
  for (auto s : {OptimizableSpan::none, OptimizableSpan::separator,
                 OptimizableSpan::separator_instruction, OptimizableSpan::separator_instruction_data})
    if (to_string(s) == name) return s;
  throw ConfigError("unknown optimizable span \"" + std::string(name) + "\"");
}

AttackSpec AttackSpec::heuristic(AttackKind kind) {
  AttackSpec spec;
  spec.name = std::string(to_string(kind));
  spec.kind = kind;
  if (kind != AttackKind::combined_adaptive_delimiters)
    spec.separator_template = make_separator(kind).text;
  spec.span = OptimizableSpan::none;
  return spec;
}

void AttackSpec::validate() const {
  if (is_heuristic(kind) && span != OptimizableSpan::none)
    throw ContractError("heuristic attack \"" + name + "\" cannot have an optimizable span");
  if (!is_heuristic(kind) && span == OptimizableSpan::none)
    throw ContractError("optimization attack \"" + name + "\" needs an optimizable span");
}

Separator make_separator(AttackKind kind, std::size_t escape_count) {
  switch (kind) {
    case AttackKind::naive: return {""};
    case AttackKind::escape: return {std::string(escape_count, '\n')};
    case AttackKind::context_ignoring: return {std::string(kContextIgnoring)};
    case AttackKind::fake_completion: return {std::string(kFakeCompletion)};
    case AttackKind::combined: return {std::string(kCombined)};
    case AttackKind::combined_adaptive_delimiters:
      throw ContractError("combined_adaptive_delimiters needs embeddings; use "
                          "structure_with_surrogate_delimiters");
    case AttackKind::gcg:
    case AttackKind::gcg_adaptive:
      throw ContractError("optimization attacks have no fixed separator; use the optimizer");
  }
  throw ContractError("unknown attack kind");
}

std::vector<Range> ContaminatedData::ordered() const {
  return {spans.target_data, spans.separator, spans.lead, spans.injected_instruction, spans.glue,
          spans.injected_data};
}

ContaminatedData assemble_contaminated(std::string_view target_data, std::string_view separator,
                                       std::string_view lead, std::string_view injected_instruction,
                                       std::string_view glue, std::string_view injected_data) {
  ContaminatedData out;
  auto append = [&out](std::string_view piece) {
    Range r{out.text.size(), out.text.size() + piece.size()};
    out.text.append(piece);
    return r;
  };
  out.spans.target_data = append(target_data);
  out.spans.separator = append(separator);
  out.spans.lead = append(lead);
  out.spans.injected_instruction = append(injected_instruction);
  out.spans.glue = append(glue);
  out.spans.injected_data = append(injected_data);
  return out;
}

ContaminatedData contaminate(std::string_view target_data, const Separator& z,
                             std::string_view injected_instruction, std::string_view injected_data) {
  const bool has_injected = !injected_instruction.empty() || !injected_data.empty();
  const std::string_view head = z.text.empty() ? target_data : std::string_view(z.text);
  const bool needs_lead = has_injected && !head.empty() && !std::isspace(static_cast<unsigned char>(head.back()));
  const bool needs_glue = !injected_instruction.empty() && !injected_data.empty();
  return assemble_contaminated(target_data, z.text, needs_lead ? " " : "", injected_instruction,
                               needs_glue ? " " : "", injected_data);
}

TokenId nearest_surrogate(TokenId special, const Eigen::MatrixXd& embeddings,
                          const std::set<TokenId>& banned) {
  if (special < 0 || special >= embeddings.rows())
    throw ContractError("special token " + std::to_string(special) + " outside the embedding table");
  const Eigen::RowVectorXd anchor = embeddings.row(special);
  TokenId best = -1;
  double best_dist = std::numeric_limits<double>::infinity();
  for (Eigen::Index v = 0; v < embeddings.rows(); ++v) {
    if (banned.contains(static_cast<TokenId>(v))) continue;
    const double dist = (embeddings.row(v) - anchor).squaredNorm();
    if (dist < best_dist) {
      best_dist = dist;
      best = static_cast<TokenId>(v);
    }
  }
  if (best < 0) throw ContractError("no surrogate candidates left after banning");
  return best;
}

}  // namespace pieval
