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

#include <atomic>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pieval/common.hpp"
#include "pieval/toy_lm.hpp"

namespace pieval {

struct Capabilities {
  bool generate = true;
  bool logprob = false;
  bool grad = false;
  bool attention = false;
};

using Focus = BasicFocus<double>;

/// The model f. Every backend generates; token-level methods are optional
/// and throw CapabilityError when the backend lacks them. Implementations
/// must be safe for concurrent calls.
class ModelOracle {
 public:
  virtual ~ModelOracle() = default;

  /// Stable identity used in cache keys and reports.
  [[nodiscard]] virtual std::string id() const = 0;
  [[nodiscard]] virtual Capabilities capabilities() const = 0;

  /// Continuation of `prompt` (the prompt itself is not echoed).
  [[nodiscard]] virtual std::string generate(std::string_view prompt, int max_tokens) const = 0;

  [[nodiscard]] virtual std::vector<TokenId> tokenize(std::string_view text) const;
  [[nodiscard]] virtual std::string detokenize(std::span<const TokenId> tokens) const;
  [[nodiscard]] virtual int vocab_size() const;
  /// Ids the runtime strips from untrusted data (structured-query delimiters).
  [[nodiscard]] virtual std::vector<TokenId> special_tokens() const;
  /// Whether detokenize/tokenize round-trips the single token `id`.
  [[nodiscard]] virtual bool is_text_token(TokenId id) const { return id >= 0 && id < vocab_size(); }
  [[nodiscard]] virtual Eigen::MatrixXd embeddings() const;

  /// Teacher-forced cross-entropy of `target` after `prefix`; the gradient
  /// over `grad_span` requires the grad capability.
  [[nodiscard]] virtual TokenLoss ce_loss(std::span<const TokenId> prefix,
                                          std::span<const TokenId> target,
                                          std::optional<Range> grad_span = std::nullopt) const;

  /// Attention focus of the generation position(s) on `instruction`.
  [[nodiscard]] virtual Focus focus(std::span<const TokenId> tokens, Range instruction, int steps = 1,
                                    std::optional<Range> grad_span = std::nullopt) const;

  /// Throws CapabilityError naming the missing capability.
  void require(bool Capabilities::*cap, std::string_view name) const;
};

using OraclePtr = std::shared_ptr<const ModelOracle>;

/// In-process ToyLM backend with every capability.
class ToyOracle final : public ModelOracle {
 public:
  explicit ToyOracle(std::shared_ptr<const ToyLM> lm, std::string name = "toy");
  explicit ToyOracle(const ToyLM::Config& cfg) : ToyOracle(std::make_shared<const ToyLM>(cfg)) {}

  [[nodiscard]] std::string id() const override { return id_; }
  [[nodiscard]] Capabilities capabilities() const override { return {true, true, true, true}; }
  [[nodiscard]] std::string generate(std::string_view prompt, int max_tokens) const override;
  [[nodiscard]] std::vector<TokenId> tokenize(std::string_view text) const override;
  [[nodiscard]] std::string detokenize(std::span<const TokenId> tokens) const override;
  [[nodiscard]] int vocab_size() const override { return ToyLM::kVocab; }
  [[nodiscard]] std::vector<TokenId> special_tokens() const override;
  // a lone byte >= 0x80 is not valid UTF-8 on its own
  [[nodiscard]] bool is_text_token(TokenId id) const override { return id >= 0 && id < 128; }
  [[nodiscard]] Eigen::MatrixXd embeddings() const override { return lm_->embeddings(); }
  [[nodiscard]] TokenLoss ce_loss(std::span<const TokenId> prefix, std::span<const TokenId> target,
                                  std::optional<Range> grad_span) const override;
  [[nodiscard]] Focus focus(std::span<const TokenId> tokens, Range instruction, int steps,
                            std::optional<Range> grad_span) const override;

  [[nodiscard]] const ToyLM& model() const { return *lm_; }

 private:
  std::shared_ptr<const ToyLM> lm_;
  std::string id_;
};

/// Generation-only backend driven by a callback; used for stubs and judges.
class ScriptedOracle final : public ModelOracle {
 public:
  using Script = std::function<std::string(std::string_view prompt, int max_tokens)>;
  ScriptedOracle(std::string id, Script script) : id_(std::move(id)), script_(std::move(script)) {}

  /// Returns its prompt verbatim.
  static std::shared_ptr<ScriptedOracle> echo();
  static std::shared_ptr<ScriptedOracle> constant(std::string reply);

  [[nodiscard]] std::string id() const override { return id_; }
  [[nodiscard]] Capabilities capabilities() const override { return {}; }
  [[nodiscard]] std::string generate(std::string_view prompt, int max_tokens) const override {
    ++calls_;
    return script_(prompt, max_tokens);
  }
  [[nodiscard]] std::size_t calls() const { return calls_.load(); }

 private:
  std::string id_;
  Script script_;
  mutable std::atomic<std::size_t> calls_{0};
};

/// Content-addressed response store: one file per key under a two-character
/// shard directory. Writes are atomic (temp file + rename).
class ResponseCache {
 public:
  explicit ResponseCache(std::filesystem::path dir);

  [[nodiscard]] std::optional<std::string> get(const std::string& key) const;
  void put(const std::string& key, std::string_view value) const;
  [[nodiscard]] std::filesystem::path path_for(const std::string& key) const;
  [[nodiscard]] const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path dir_;
};

struct DecodeParams {
  int max_tokens = 0;
  double temperature = 0.0;
};

/// Hash of (backend id, prompt, decode params).
std::string cache_key(std::string_view backend_id, std::string_view prompt, const DecodeParams& params);

/// Memoises generate() of another oracle; token-level calls pass through.
class CachedOracle final : public ModelOracle {
 public:
  CachedOracle(OraclePtr inner, std::shared_ptr<const ResponseCache> cache);

  [[nodiscard]] std::string id() const override { return inner_->id(); }
  [[nodiscard]] Capabilities capabilities() const override { return inner_->capabilities(); }
  [[nodiscard]] std::string generate(std::string_view prompt, int max_tokens) const override;
  [[nodiscard]] std::vector<TokenId> tokenize(std::string_view text) const override {
    return inner_->tokenize(text);
  }
  [[nodiscard]] std::string detokenize(std::span<const TokenId> tokens) const override {
    return inner_->detokenize(tokens);
  }
  [[nodiscard]] int vocab_size() const override { return inner_->vocab_size(); }
  [[nodiscard]] std::vector<TokenId> special_tokens() const override { return inner_->special_tokens(); }
  [[nodiscard]] bool is_text_token(TokenId id) const override { return inner_->is_text_token(id); }
  [[nodiscard]] Eigen::MatrixXd embeddings() const override { return inner_->embeddings(); }
  [[nodiscard]] TokenLoss ce_loss(std::span<const TokenId> prefix, std::span<const TokenId> target,
                                  std::optional<Range> grad_span) const override {
    return inner_->ce_loss(prefix, target, grad_span);
  }
  [[nodiscard]] Focus focus(std::span<const TokenId> tokens, Range instruction, int steps,
                            std::optional<Range> grad_span) const override {
    return inner_->focus(tokens, instruction, steps, grad_span);
  }

  [[nodiscard]] std::size_t hits() const { return hits_.load(); }
  [[nodiscard]] std::size_t misses() const { return misses_.load(); }
  [[nodiscard]] const OraclePtr& inner() const { return inner_; }

 private:
  OraclePtr inner_;
  std::shared_ptr<const ResponseCache> cache_;
  mutable std::atomic<std::size_t> hits_{0};
  mutable std::atomic<std::size_t> misses_{0};
};

/// Mean per-token negative log-likelihood of `text`, exponentiated.
double perplexity(const ModelOracle& oracle, std::string_view text);

}  // namespace pieval
