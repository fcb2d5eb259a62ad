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

#include <atomic>
#include <chrono>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <vector>

#include "pieval/oracle.hpp"

namespace pieval {

/// "scheme://host[:port]" and the path that follows it.
struct UrlParts {
  std::string origin;
  std::string path;
};
UrlParts split_url(const std::string& url);

struct RetryPolicy {
  int max_attempts = 4;
  std::chrono::milliseconds initial_backoff{250};
  std::chrono::seconds timeout{120};
};

struct ChatClientConfig {
  std::string url;  // full completion endpoint
  std::string api_key;
  std::string model;
  double temperature = 0.0;
  bool use_messages = false;  // send {messages:[...]} instead of {prompt}
  int max_in_flight = 4;
  RetryPolicy retry;

  /// Endpoint and credential from PIEVAL_API_URL / PIEVAL_API_KEY.
  static ChatClientConfig from_env(std::string model);
};

/// Hosted chat-completion backend (generation only).
///
///   POST {model, prompt | messages, max_tokens, temperature} -> {text}
///
/// OpenAI-style {choices:[{text}]} and {choices:[{message:{content}}]}
/// replies are accepted as well. 429 and 5xx responses are retried with
/// exponential backoff; exhausted retries raise TransportError carrying the
/// attempt count and last status.
class ChatClient final : public ModelOracle {
 public:
  explicit ChatClient(ChatClientConfig cfg);

  [[nodiscard]] std::string id() const override { return "chat:" + cfg_.model + "@" + cfg_.url; }
  [[nodiscard]] Capabilities capabilities() const override { return {}; }
  [[nodiscard]] std::string generate(std::string_view prompt, int max_tokens) const override;

 private:
  ChatClientConfig cfg_;
  UrlParts url_;
  mutable std::counting_semaphore<1024> in_flight_;
};

struct BridgeConfig {
  std::string url;    // base URL of the sidecar
  std::string token;  // optional shared bearer token
  RetryPolicy retry;
};

struct BridgeMeta {
  std::string model_id;
  int vocab_size = 0;
  std::vector<TokenId> special_tokens;
};

struct DetectResult {
  int label = 0;
  double score = 0;
};

/// Client for the model sidecar. Token ids, not text, cross the wire for
/// loss and gradient calls; every request carries a request_id that the
/// response must echo.
///
///   /meta        {}                                  -> {model_id, vocab_size, special_tokens}
///   /tokenize    {text}                              -> {token_ids}
///   /detokenize  {token_ids}                         -> {text}
///   /generate    {prompt, max_tokens, temperature}   -> {text}
///   /loss        {prefix_tokens, target_tokens}      -> {loss, token_logprobs?}
///   /grad        {prefix_tokens, target_tokens, span:[start,end)}
///                                                    -> {loss, grad | grad_b64 (+shape)}
///   /embeddings  {token_ids}                         -> {vectors}
///   /detect      {detector, text}                    -> {label, score}
class BridgeClient final : public ModelOracle {
 public:
  explicit BridgeClient(BridgeConfig cfg);

  [[nodiscard]] std::string id() const override;
  [[nodiscard]] Capabilities capabilities() const override { return {true, true, true, false}; }
  [[nodiscard]] std::string generate(std::string_view prompt, int max_tokens) const override;
  [[nodiscard]] std::vector<TokenId> tokenize(std::string_view text) const override;
  [[nodiscard]] std::string detokenize(std::span<const TokenId> tokens) const override;
  [[nodiscard]] int vocab_size() const override { return meta().vocab_size; }
  [[nodiscard]] std::vector<TokenId> special_tokens() const override { return meta().special_tokens; }
  [[nodiscard]] Eigen::MatrixXd embeddings() const override;
  [[nodiscard]] TokenLoss ce_loss(std::span<const TokenId> prefix, std::span<const TokenId> target,
                                  std::optional<Range> grad_span) const override;

  [[nodiscard]] Eigen::MatrixXd embeddings(std::span<const TokenId> ids) const;
  [[nodiscard]] DetectResult detect(const std::string& detector, std::string_view text) const;
  [[nodiscard]] const BridgeMeta& meta() const;

 private:
  friend struct BridgeRpc;
  [[nodiscard]] std::string post(const std::string& endpoint, std::string body) const;

  BridgeConfig cfg_;
  mutable std::atomic<std::uint64_t> next_request_{1};
  mutable std::once_flag meta_once_;
  mutable BridgeMeta meta_;
};

}  // namespace pieval
