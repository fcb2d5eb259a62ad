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

#pragma once

#include <Eigen/Core>

#include <array>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "pieval/attacks.hpp"
#include "pieval/corpus.hpp"
#include "pieval/defenses.hpp"
#include "pieval/oracle.hpp"

namespace pieval {

struct GcgConfig {
  int top_k = 8;
  int candidates_per_iter = 32;
  int iterations = 50;
  OptimizableSpan span = OptimizableSpan::separator;
  /// Initial separator tokens; empty means `init_length` copies of the filler.
  std::vector<TokenId> init_tokens;
  int init_length = 16;
  std::string filler = "!";
  std::uint64_t seed = 0;
  double alpha = 0.01;
  std::optional<double> loss_threshold;
  /// Never proposed as replacements (the oracle's special tokens always are).
  std::set<TokenId> banned_tokens;

  /// Throws ConfigError on out-of-range fields.
  void validate() const;
  /// Larger search used against full-scale bridge backends.
  static GcgConfig full_scale();
};

/// x_c as token pieces. GCG edits pieces in place; their lengths never change.
struct XcLayout {
  enum Piece { target_data, separator, lead, instruction, glue, data, kPieces };
  std::array<std::vector<TokenId>, kPieces> pieces;

  [[nodiscard]] std::vector<TokenId> tokens() const;
  [[nodiscard]] Range range(Piece p) const;
  /// Contiguous token range from the separator through the last editable piece.
  [[nodiscard]] Range editable_range(OptimizableSpan span) const;
  /// Whether token position `pos` (index into tokens()) may be edited.
  [[nodiscard]] bool editable(OptimizableSpan span, std::size_t pos) const;
  void set(std::size_t pos, TokenId token);

  /// Rendered text of every piece.
  [[nodiscard]] ContaminatedData render(const ModelOracle& oracle) const;
};

/// Tokenizes the tuple's pieces around `separator_tokens`.
XcLayout make_layout(const ModelOracle& oracle, const InjectionTuple& tuple,
                     std::span<const TokenId> separator_tokens);

struct ObjectiveValue {
  double value = 0;
  Eigen::MatrixXd grad;  // rows: positions of the editable range; cols: vocab
};

/// Loss minimised by GCG, evaluated on the full x_c token sequence. The
/// gradient covers `editable` (a range over x_c tokens).
class Objective {
 public:
  virtual ~Objective() = default;
  [[nodiscard]] virtual ObjectiveValue evaluate(std::span<const TokenId> xc, std::optional<Range> editable) const = 0;
};

/// l_ce of r_e after the target instruction and x_c.
class AttackObjective final : public Objective {
 public:
  AttackObjective(const ModelOracle& oracle, const InjectionTuple& tuple);
  [[nodiscard]] ObjectiveValue evaluate(std::span<const TokenId> xc, std::optional<Range> editable) const override;
  [[nodiscard]] std::vector<TokenId> prompt(std::span<const TokenId> xc) const;
  [[nodiscard]] const std::vector<TokenId>& target() const { return target_; }

 private:
  const ModelOracle& oracle_;
  std::vector<TokenId> head_;
  std::vector<TokenId> target_;
};

/// Focus detector score of x_c: lower means judged clean.
class EvasionObjective final : public Objective {
 public:
  explicit EvasionObjective(const FocusDetector& detector) : detector_(detector) {}
  [[nodiscard]] ObjectiveValue evaluate(std::span<const TokenId> xc, std::optional<Range> editable) const override;
  [[nodiscard]] const FocusDetector& detector() const { return detector_; }

 private:
  const FocusDetector& detector_;
};

/// evasion + alpha * attack. The evasion term enters with a plus sign so
/// that minimising drives the detector toward "clean".
class AdaptiveObjective final : public Objective {
 public:
  AdaptiveObjective(const EvasionObjective& evasion, const AttackObjective& attack, double alpha);
  [[nodiscard]] ObjectiveValue evaluate(std::span<const TokenId> xc, std::optional<Range> editable) const override;
  [[nodiscard]] const EvasionObjective& evasion() const { return evasion_; }
  [[nodiscard]] const AttackObjective& attack() const { return attack_; }
  [[nodiscard]] double alpha() const { return alpha_; }

 private:
  const EvasionObjective& evasion_;
  const AttackObjective& attack_;
  double alpha_;
};

struct GcgStep {
  int iteration = 0;
  double best_loss = 0;
  long chosen_position = -1;  // index into x_c tokens; -1 when nothing improved
  TokenId chosen_token = -1;
  bool operator==(const GcgStep&) const = default;
};

struct AdaptiveFlags {
  bool evaded = false;
  bool attack_succeeded = false;
  bool operator==(const AdaptiveFlags&) const = default;
};

struct GcgTrace {
  std::vector<GcgStep> steps;  // steps[0] is the initial state
  XcLayout layout;             // final tokens
  ContaminatedData contaminated;  // final text, rendered from layout
  double final_loss = 0;
  bool aborted = false;
  std::string abort_reason;
  /// Filled by gcg_optimize for adaptive objectives, from token-level values.
  std::optional<double> final_evasion;
  std::optional<double> final_ce;
  std::optional<AdaptiveFlags> recorded_flags;

  [[nodiscard]] std::vector<TokenId> final_tokens() const { return layout.tokens(); }
};

/// Greedy Coordinate Gradient over the editable pieces of x_c.
GcgTrace gcg_optimize(const InjectionTuple& tuple, const ModelOracle& oracle, const GcgConfig& cfg,
                      const Objective& objective, int max_tokens = 16);

/// Re-derives both adaptive flags from the final text alone: the detector
/// re-scores the final x_c text, and the oracle answers the rendered prompt.
AdaptiveFlags evaluate_adaptive_success(const GcgTrace& trace, const Detector& detector, const ModelOracle& oracle,
                                        const InjectionTuple& tuple, int max_tokens = 16);

/// One JSON line per step, then a summary line.
std::string trace_to_jsonl(const GcgTrace& trace, std::size_t tuple_index);

}  // namespace pieval
