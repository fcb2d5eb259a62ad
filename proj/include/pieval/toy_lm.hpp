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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pieval/common.hpp"

namespace pieval {

/// Byte-level vocabulary: ids 0..255 are raw bytes, followed by a small block
/// of special tokens.
struct ByteTokenizer {
  static constexpr TokenId kBos = 256;
  static constexpr TokenId kEos = 257;
  static constexpr TokenId kInst = 258;
  static constexpr TokenId kInpt = 259;
  static constexpr TokenId kResp = 260;
  static constexpr TokenId kSys = 261;
  static constexpr int kVocabSize = 264;

  static std::vector<TokenId> encode(std::string_view text) {
    std::vector<TokenId> out;
    out.reserve(text.size());
    for (char c : text) out.push_back(static_cast<TokenId>(static_cast<unsigned char>(c)));
    return out;
  }

  static std::string token_text(TokenId id) {
    if (id >= 0 && id < 256) return std::string(1, static_cast<char>(id));
    switch (id) {
      case kBos: return "<s>";
      case kEos: return "</s>";
      case kInst: return "[INST]";
      case kInpt: return "[INPT]";
      case kResp: return "[RESP]";
      case kSys: return "[SYS]";
      default: return "<reserved" + std::to_string(id) + ">";
    }
  }

  static std::string decode(std::span<const TokenId> ids) {
    std::string out;
    for (TokenId id : ids) out += token_text(id);
    return out;
  }

  static bool is_special(TokenId id) { return id >= 256; }
};

template <typename Scalar>
struct BasicTokenLoss {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  Scalar value = 0;
  std::vector<Scalar> token_logprobs;  // log p of each target token, all <= 0
  Matrix grad;                         // |span| x V, empty unless requested
};

template <typename Scalar>
struct BasicFocus {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  Scalar value = 0;
  Matrix grad;  // |span| x V, empty unless requested
};

/// Single-layer, single-head causal attention language model with tied
/// input/output embeddings over the byte vocabulary.
///
///   h0 = onehot(tokens) E + P
///   A  = softmax_causal(c (h0 Wq)(h0 Wk)^T),  c = attention_scale / sqrt(d)
///   h1 = h0 + A (h0 Wv)
///   logits = h1 E^T + b
///
/// Every model input is prefixed with BOS internally; public methods take and
/// return token positions relative to the caller's sequence. Gradients are
/// taken with respect to the one-hot rows of the caller's tokens.
template <typename Scalar>
class BasicToyLM {
 public:
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
  using TokenLoss = BasicTokenLoss<Scalar>;
  using Focus = BasicFocus<Scalar>;

  struct Config {
    int d_model = 32;
    int max_len = 1024;
    std::uint64_t seed = 0;
    Scalar embedding_scale = Scalar(0.6);
    Scalar projection_scale = Scalar(1.0);
    Scalar attention_scale = Scalar(1.0);
  };

  explicit BasicToyLM(const Config& cfg) : cfg_(cfg) {
    if (cfg.d_model < 16 || cfg.d_model > 64) throw ContractError("d_model must lie in [16, 64]");
    if (cfg.max_len < 2) throw ContractError("max_len must be at least 2");
    const int d = cfg.d_model;
    Rng rng(cfg.seed);
    auto fill = [&rng](Matrix& m, Eigen::Index rows, Eigen::Index cols, Scalar scale) {
      m.resize(rows, cols);
      for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j)
          m(i, j) = scale * static_cast<Scalar>(2.0 * uniform_unit(rng) - 1.0);
    };
    const Scalar proj = cfg.projection_scale / std::sqrt(static_cast<Scalar>(d)) * Scalar(1.7320508075688772);
    fill(embedding_, kVocab, d, cfg.embedding_scale);
    fill(positional_, cfg.max_len, d, cfg.embedding_scale * Scalar(0.5));
    fill(wq_, d, d, proj);
    fill(wk_, d, d, proj);
    fill(wv_, d, d, proj);
    bias_ = RowVector::Zero(kVocab);
  }

  /// All logits equal: every next-token distribution is uniform.
  static BasicToyLM uniform(Config cfg) {
    BasicToyLM lm(cfg);
    lm.embedding_.setZero();
    lm.bias_.setZero();
    return lm;
  }

  /// Random weights plus an output bias of `margin` on `token`, so the model
  /// predicts `token` everywhere with probability -> 1 as margin grows.
  static BasicToyLM rigged(Config cfg, TokenId token, Scalar margin) {
    BasicToyLM lm(cfg);
    lm.bias_(token) = margin;
    return lm;
  }

  static constexpr int kVocab = ByteTokenizer::kVocabSize;

  [[nodiscard]] int vocab_size() const { return kVocab; }
  [[nodiscard]] int d_model() const { return cfg_.d_model; }
  /// Longest caller sequence accepted (BOS occupies one position).
  [[nodiscard]] int max_tokens() const { return cfg_.max_len - 1; }
  [[nodiscard]] const Config& config() const { return cfg_; }
  [[nodiscard]] const Matrix& embeddings() const { return embedding_; }
  [[nodiscard]] const RowVector& output_bias() const { return bias_; }

  /// h0 for BOS + tokens.
  [[nodiscard]] Matrix embed(std::span<const TokenId> tokens) const {
    check_length(tokens.size());
    Matrix h0(static_cast<Eigen::Index>(tokens.size() + 1), cfg_.d_model);
    h0.row(0) = embedding_.row(ByteTokenizer::kBos) + positional_.row(0);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      check_token(tokens[i]);
      const auto r = static_cast<Eigen::Index>(i + 1);
      h0.row(r) = embedding_.row(tokens[i]) + positional_.row(r);
    }
    return h0;
  }

  /// h0 for BOS + soft token rows. `onehot` is n x V; rows need not be
  /// one-hot, which is what finite-difference checks perturb.
  [[nodiscard]] Matrix embed_soft(const Matrix& onehot) const {
    check_length(static_cast<std::size_t>(onehot.rows()));
    const Eigen::Index n = onehot.rows();
    Matrix h0(n + 1, cfg_.d_model);
    h0.row(0) = embedding_.row(ByteTokenizer::kBos) + positional_.row(0);
    h0.bottomRows(n) = onehot * embedding_ + positional_.block(1, 0, n, cfg_.d_model);
    return h0;
  }

  /// Teacher-forced negative log-likelihood of `target` after `prefix`.
  /// When `grad_span` is set (prefix coordinates) the gradient with respect
  /// to those tokens' one-hot rows is filled in.
  [[nodiscard]] TokenLoss ce_loss(std::span<const TokenId> prefix, std::span<const TokenId> target,
                                  std::optional<Range> grad_span = std::nullopt) const {
    if (target.empty()) throw ContractError("ce_loss: empty target");
    if (grad_span && grad_span->end > prefix.size())
      throw ContractError("ce_loss: span outside the prefix");
    std::vector<TokenId> seq(prefix.begin(), prefix.end());
    seq.insert(seq.end(), target.begin(), target.end() - 1);
    const Matrix h0 = embed(seq);
    return ce_from_embeddings(h0, prefix.size(), target, grad_span);
  }

  /// Loss only, from precomputed h0 (BOS + prefix + target[:-1]).
  [[nodiscard]] Scalar ce_value_from_embeddings(const Matrix& h0, std::size_t prefix_len,
                                                std::span<const TokenId> target) const {
    return ce_from_embeddings(h0, prefix_len, target, std::nullopt).value;
  }

  /// Single-step focus value from precomputed h0 (BOS + prompt).
  [[nodiscard]] Scalar focus_value_from_embeddings(const Matrix& h0, Range span) const {
    const Activations act = forward(h0, h0.rows() - 1);
    const Scalar mass = act.attn.row(0).segment(static_cast<Eigen::Index>(span.begin + 1),
                                                static_cast<Eigen::Index>(span.size())).sum();
    return mass / (Scalar(1) - act.attn(0, 0));
  }

  /// Full (n+1) x (n+1) causal attention matrix over BOS + tokens; row i is
  /// the attention of position i, index 0 is BOS.
  [[nodiscard]] Matrix attention(std::span<const TokenId> tokens) const {
    const Activations act = forward(embed(tokens), 0);
    return act.attn;
  }

  /// Attention mass that the last `steps` positions (the last prompt position
  /// followed by greedily generated ones) place on `span`, renormalised over
  /// non-BOS positions, averaged across steps.
  [[nodiscard]] Focus focus(std::span<const TokenId> tokens, Range span, int steps = 1,
                            std::optional<Range> grad_span = std::nullopt) const {
    if (steps < 1) throw ContractError("focus: steps must be positive");
    if (span.end > tokens.size()) throw ContractError("focus: span outside the prompt");
    if (grad_span && grad_span->end > tokens.size())
      throw ContractError("focus: gradient span outside the prompt");
    Focus out;
    if (tokens.empty() || span.empty()) {
      if (grad_span) out.grad = Matrix::Zero(static_cast<Eigen::Index>(grad_span->size()), kVocab);
      return out;
    }
    std::vector<TokenId> seq(tokens.begin(), tokens.end());
    if (steps > 1) {
      auto more = greedy(tokens, steps - 1);
      seq.insert(seq.end(), more.begin(), more.end());
    }
    const Matrix h0 = embed(seq);
    const auto L = h0.rows();
    const Eigen::Index first = static_cast<Eigen::Index>(tokens.size());  // last prompt position
    const Activations act = forward(h0, first);
    const Eigen::Index n = L - first;
    const auto s0 = static_cast<Eigen::Index>(span.begin + 1);
    const auto sn = static_cast<Eigen::Index>(span.size());
    Matrix d_attn = Matrix::Zero(n, L);
    Scalar total = 0;
    for (Eigen::Index r = 0; r < n; ++r) {
      const Scalar mass = act.attn.row(r).segment(s0, sn).sum();
      const Scalar denom = Scalar(1) - act.attn(r, 0);
      total += mass / denom;
      if (grad_span) {
        d_attn.row(r).segment(s0, sn).setConstant(Scalar(1) / denom / Scalar(n));
        d_attn(r, 0) = mass / (denom * denom) / Scalar(n);
      }
    }
    out.value = total / Scalar(n);
    if (grad_span) {
      const Matrix d_h0 = backward(act, Matrix::Zero(n, cfg_.d_model), d_attn);
      out.grad = span_grad(d_h0, *grad_span);
    }
    return out;
  }

  /// Next-token logits after BOS + tokens.
  [[nodiscard]] RowVector next_logits(std::span<const TokenId> tokens) const {
    const Matrix h0 = embed(tokens);
    const Activations act = forward(h0, h0.rows() - 1);
    return act.h1.row(0) * embedding_.transpose() + bias_;
  }

  /// Greedy decoding; ties go to the lowest id. Stops at EOS (not emitted),
  /// after `max_new` tokens, or when the context is full.
  [[nodiscard]] std::vector<TokenId> greedy(std::span<const TokenId> prompt, int max_new) const {
    std::vector<TokenId> seq(prompt.begin(), prompt.end());
    std::vector<TokenId> out;
    for (int step = 0; step < max_new; ++step) {
      if (seq.size() >= static_cast<std::size_t>(max_tokens())) break;
      const RowVector z = next_logits(seq);
      Eigen::Index best = 0;
      for (Eigen::Index v = 1; v < z.size(); ++v)
        if (z(v) > z(best)) best = v;
      const auto tok = static_cast<TokenId>(best);
      if (tok == ByteTokenizer::kEos) break;
      out.push_back(tok);
      seq.push_back(tok);
    }
    return out;
  }

  /// Log-softmax of one logit row.
  static RowVector log_softmax(const RowVector& z) {
    const Scalar m = z.maxCoeff();
    const Scalar lse = m + std::log((z.array() - m).exp().sum());
    return (z.array() - lse).matrix();
  }

 private:
  struct Activations {
    Eigen::Index first = 0;  // first query row kept
    Matrix h0, q, k, v;
    Matrix attn;  // (L - first) x L
    Matrix h1;    // (L - first) x d
  };

  void check_length(std::size_t n) const {
    if (n + 1 > static_cast<std::size_t>(cfg_.max_len))
      throw ContextOverflow("context overflow: " + std::to_string(n) + " tokens exceed the limit of " +
                          std::to_string(max_tokens()));
  }

  static void check_token(TokenId t) {
    if (t < 0 || t >= kVocab) throw ContractError("token id " + std::to_string(t) + " outside vocabulary");
  }

  [[nodiscard]] Scalar scale() const {
    return cfg_.attention_scale / std::sqrt(static_cast<Scalar>(cfg_.d_model));
  }

  /// Attention and residual output for query rows [first, L).
  [[nodiscard]] Activations forward(const Matrix& h0, Eigen::Index first) const {
    Activations act;
    act.first = first;
    act.h0 = h0;
    const Eigen::Index L = h0.rows();
    const Eigen::Index n = L - first;
    act.k = h0 * wk_;
    act.v = h0 * wv_;
    act.q = h0.bottomRows(n) * wq_;
    act.attn = scale() * act.q * act.k.transpose();
    for (Eigen::Index r = 0; r < n; ++r) {
      const Eigen::Index visible = first + r + 1;
      auto row = act.attn.row(r);
      const Scalar m = row.head(visible).maxCoeff();
      row.head(visible) = (row.head(visible).array() - m).exp().matrix();
      row.head(visible) /= row.head(visible).sum();
      if (visible < L) row.tail(L - visible).setZero();
    }
    act.h1 = h0.bottomRows(n) + act.attn * act.v;
    return act;
  }

  /// d loss / d h0 given gradients on h1 rows and on the attention rows.
  [[nodiscard]] Matrix backward(const Activations& act, const Matrix& d_h1, const Matrix& d_attn) const {
    const Eigen::Index n = act.attn.rows();
    const Scalar c = scale();
    const Matrix d_attn_total = d_attn + d_h1 * act.v.transpose();
    const Matrix d_v = act.attn.transpose() * d_h1;
    const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> row_dot =
        d_attn_total.cwiseProduct(act.attn).rowwise().sum();
    const Matrix d_scores =
        act.attn.cwiseProduct(d_attn_total - row_dot.replicate(1, d_attn_total.cols()));
    const Matrix d_q = c * d_scores * act.k;
    const Matrix d_k = c * d_scores.transpose() * act.q;
    Matrix d_h0 = d_k * wk_.transpose() + d_v * wv_.transpose();
    d_h0.bottomRows(n) += d_h1 + d_q * wq_.transpose();
    return d_h0;
  }

  /// Rows of d h0 for caller positions in `span`, mapped through E^T.
  [[nodiscard]] Matrix span_grad(const Matrix& d_h0, Range span) const {
    return d_h0.middleRows(static_cast<Eigen::Index>(span.begin + 1),
                           static_cast<Eigen::Index>(span.size())) *
           embedding_.transpose();
  }

  [[nodiscard]] TokenLoss ce_from_embeddings(const Matrix& h0, std::size_t prefix_len,
                                             std::span<const TokenId> target,
                                             std::optional<Range> grad_span) const {
    // Row prefix_len of BOS+seq predicts target[0].
    const auto first = static_cast<Eigen::Index>(prefix_len);
    const Activations act = forward(h0, first);
    const Eigen::Index n = act.h1.rows();
    TokenLoss out;
    Matrix d_logits;
    if (grad_span) d_logits = Matrix::Zero(n, kVocab);
    for (Eigen::Index r = 0; r < n; ++r) {
      const RowVector z = act.h1.row(r) * embedding_.transpose() + bias_;
      const RowVector lp = log_softmax(z);
      const TokenId y = target[static_cast<std::size_t>(r)];
      check_token(y);
      out.token_logprobs.push_back(lp(y));
      out.value -= lp(y);
      if (grad_span) {
        d_logits.row(r) = lp.array().exp().matrix();
        d_logits(r, y) -= Scalar(1);
      }
    }
    if (grad_span) {
      const Matrix d_h1 = d_logits * embedding_;
      const Matrix d_h0 = backward(act, d_h1, Matrix::Zero(n, h0.rows()));
      out.grad = span_grad(d_h0, *grad_span);
    }
    return out;
  }

  Config cfg_;
  Matrix embedding_;   // V x d, tied with the output projection
  Matrix positional_;  // max_len x d
  Matrix wq_, wk_, wv_;
  RowVector bias_;
};

using ToyLM = BasicToyLM<double>;
using TokenLoss = BasicTokenLoss<double>;

}  // namespace pieval
