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

#include "pieval/remote.hpp"

#include <spdlog/spdlog.h>

#include <cstdlib>
#include <cstring>
#include <thread>

#include "httplib.h"
#include "json.hpp"

namespace pieval {

using nlohmann::json;

namespace {

bool retryable(int status) { return status == 429 || (status >= 500 && status < 600); }

/// POST with retries. Returns the response body of the first 2xx reply.
std::string post_with_retry(const UrlParts& url, const std::string& body, const std::string& bearer,
                            const RetryPolicy& policy) {
  int last_status = -1;
  std::string last_error;
  auto backoff = policy.initial_backoff;
  const int attempts = std::max(1, policy.max_attempts);
  for (int attempt = 1; attempt <= attempts; ++attempt) {
    httplib::Client cli(url.origin);
    cli.set_connection_timeout(policy.timeout);
    cli.set_read_timeout(policy.timeout);
    cli.set_write_timeout(policy.timeout);
    httplib::Headers headers;
    if (!bearer.empty()) headers.emplace("Authorization", "Bearer " + bearer);
    auto res = cli.Post(url.path.empty() ? "/" : url.path, headers, body, "application/json");
    if (res) {
      last_status = res->status;
      if (res->status >= 200 && res->status < 300) return res->body;
      last_error = "HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200);
      if (!retryable(res->status))
        throw TransportError(url.origin + url.path + " failed: " + last_error, attempt, last_status);
    } else {
      last_status = -1;
      last_error = httplib::to_string(res.error());
    }
    if (attempt < attempts) {
      spdlog::warn("{}{}: attempt {}/{} failed ({}), retrying in {} ms", url.origin, url.path, attempt,
                   attempts, last_error, backoff.count());
      std::this_thread::sleep_for(backoff);
      backoff *= 2;
    }
  }
  throw TransportError(url.origin + url.path + " failed after " + std::to_string(attempts) +
                           " attempts: " + last_error,
                       attempts, last_status);
}

json parse_reply(const std::string& body, const std::string& what) {
  try {
    return json::parse(body);
  } catch (const json::parse_error& e) {
    throw TransportError(what + ": unparseable reply: " + e.what(), 1, 200);
  }
}

}  // namespace

UrlParts split_url(const std::string& url) {
  const auto scheme = url.find("://");
  if (scheme == std::string::npos) throw ConfigError("URL without scheme: " + url);
  const auto slash = url.find('/', scheme + 3);
  if (slash == std::string::npos) return {url, ""};
  return {url.substr(0, slash), url.substr(slash)};
}

ChatClientConfig ChatClientConfig::from_env(std::string model) {
  ChatClientConfig cfg;
  const char* url = std::getenv("PIEVAL_API_URL");
  if (url == nullptr || *url == '\0') throw ConfigError("PIEVAL_API_URL is not set");
  cfg.url = url;
  if (const char* key = std::getenv("PIEVAL_API_KEY")) cfg.api_key = key;
  cfg.model = std::move(model);
  return cfg;
}

ChatClient::ChatClient(ChatClientConfig cfg)
    : cfg_(std::move(cfg)), url_(split_url(cfg_.url)), in_flight_(std::clamp(cfg_.max_in_flight, 1, 1024)) {}

std::string ChatClient::generate(std::string_view prompt, int max_tokens) const {
  json body;
  body["model"] = cfg_.model;
  if (cfg_.use_messages)
    body["messages"] = json::array({{{"role", "user"}, {"content", std::string(prompt)}}});
  else
    body["prompt"] = std::string(prompt);
  body["max_tokens"] = max_tokens;
  body["temperature"] = cfg_.temperature;

  in_flight_.acquire();
  std::string reply;
  try {
    reply = post_with_retry(url_, body.dump(-1, ' ', false, json::error_handler_t::replace), cfg_.api_key,
                            cfg_.retry);
  } catch (...) {
    in_flight_.release();
    throw;
  }
  in_flight_.release();

  const json j = parse_reply(reply, id());
  if (auto it = j.find("text"); it != j.end() && it->is_string()) return it->get<std::string>();
  if (auto it = j.find("choices"); it != j.end() && it->is_array() && !it->empty()) {
    const auto& c = (*it)[0];
    if (c.contains("text") && c["text"].is_string()) return c["text"].get<std::string>();
    if (c.contains("message") && c["message"].contains("content"))
      return c["message"]["content"].get<std::string>();
  }
  throw TransportError(id() + ": reply has no text field", 1, 200);
}

BridgeClient::BridgeClient(BridgeConfig cfg) : cfg_(std::move(cfg)) { (void)split_url(cfg_.url); }

std::string BridgeClient::id() const { return "bridge:" + meta().model_id + "@" + cfg_.url; }

std::string BridgeClient::post(const std::string& endpoint, std::string body) const {
  auto url = split_url(cfg_.url);
  while (!url.path.empty() && url.path.back() == '/') url.path.pop_back();
  url.path += endpoint;
  return post_with_retry(url, body, cfg_.token, cfg_.retry);
}

struct BridgeRpc {
  static json call(const BridgeClient& client, const std::string& endpoint, json body) {
    const std::string request_id = std::to_string(client.next_request_++);
    body["request_id"] = request_id;
    const json reply =
        parse_reply(client.post(endpoint, body.dump(-1, ' ', false, json::error_handler_t::replace)),
                    "bridge " + endpoint);
    if (reply.value("request_id", std::string()) != request_id)
      throw TransportError("bridge " + endpoint + ": reply does not echo request_id " + request_id, 1, 200);
    return reply;
  }
};

namespace {

Eigen::MatrixXd decode_matrix(const json& reply, const char* key, Eigen::Index rows, Eigen::Index cols) {
  Eigen::MatrixXd m(rows, cols);
  const std::string b64_key = std::string(key) + "_b64";
  if (reply.contains(b64_key)) {
    const std::string raw = base64_decode(reply[b64_key].get<std::string>());
    if (raw.size() != sizeof(float) * static_cast<std::size_t>(rows * cols))
      throw TransportError(b64_key + " has " + std::to_string(raw.size()) + " bytes, expected " +
                               std::to_string(sizeof(float) * rows * cols),
                           1, 200);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) {
        float f;
        std::memcpy(&f, raw.data() + sizeof(float) * static_cast<std::size_t>(i * cols + j), sizeof(float));
        m(i, j) = f;
      }
    return m;
  }
  const auto& rows_json = reply.at(key);
  if (!rows_json.is_array() || static_cast<Eigen::Index>(rows_json.size()) != rows)
    throw TransportError(std::string(key) + " has the wrong number of rows", 1, 200);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto& row = rows_json[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
      throw TransportError(std::string(key) + " row " + std::to_string(i) + " has the wrong width", 1, 200);
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = row[static_cast<std::size_t>(j)].get<double>();
  }
  return m;
}

}  // namespace

const BridgeMeta& BridgeClient::meta() const {
  std::call_once(meta_once_, [this] {
    const json reply = BridgeRpc::call(*this, "/meta", json::object());
    meta_.model_id = reply.at("model_id").get<std::string>();
    meta_.vocab_size = reply.at("vocab_size").get<int>();
    meta_.special_tokens = reply.value("special_tokens", std::vector<TokenId>{});
  });
  return meta_;
}

std::string BridgeClient::generate(std::string_view prompt, int max_tokens) const {
  json body{{"prompt", std::string(prompt)}, {"max_tokens", max_tokens}, {"temperature", 0.0}};
  return BridgeRpc::call(*this, "/generate", std::move(body))
      .at("text")
      .get<std::string>();
}

std::vector<TokenId> BridgeClient::tokenize(std::string_view text) const {
  json body{{"text", std::string(text)}};
  return BridgeRpc::call(*this, "/tokenize", std::move(body))
      .at("token_ids")
      .get<std::vector<TokenId>>();
}

std::string BridgeClient::detokenize(std::span<const TokenId> tokens) const {
  json body{{"token_ids", std::vector<TokenId>(tokens.begin(), tokens.end())}};
  return BridgeRpc::call(*this, "/detokenize", std::move(body))
      .at("text")
      .get<std::string>();
}

Eigen::MatrixXd BridgeClient::embeddings(std::span<const TokenId> ids) const {
  const int v = vocab_size();
  for (TokenId t : ids)
    if (t < 0 || t >= v) throw ContractError("token id " + std::to_string(t) + " outside the bridge vocabulary");
  json body{{"token_ids", std::vector<TokenId>(ids.begin(), ids.end())}};
  const json reply = BridgeRpc::call(*this, "/embeddings", std::move(body));
  const auto& vectors = reply.at("vectors");
  if (vectors.size() != ids.size()) throw TransportError("/embeddings returned the wrong row count", 1, 200);
  const auto width = static_cast<Eigen::Index>(vectors.empty() ? 0 : vectors[0].size());
  return decode_matrix(reply, "vectors", static_cast<Eigen::Index>(ids.size()), width);
}

Eigen::MatrixXd BridgeClient::embeddings() const {
  std::vector<TokenId> all(static_cast<std::size_t>(vocab_size()));
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<TokenId>(i);
  return embeddings(all);
}

TokenLoss BridgeClient::ce_loss(std::span<const TokenId> prefix, std::span<const TokenId> target,
                                std::optional<Range> grad_span) const {
  if (target.empty()) throw ContractError("ce_loss: empty target");
  const int v = vocab_size();
  for (auto seq : {prefix, target})
    for (TokenId t : seq)
      if (t < 0 || t >= v) throw ContractError("token id " + std::to_string(t) + " outside the bridge vocabulary");
  json body{{"prefix_tokens", std::vector<TokenId>(prefix.begin(), prefix.end())},
            {"target_tokens", std::vector<TokenId>(target.begin(), target.end())}};
  TokenLoss out;
  if (!grad_span) {
    const json reply = BridgeRpc::call(*this, "/loss", std::move(body));
    out.value = reply.at("loss").get<double>();
    out.token_logprobs = reply.value("token_logprobs", std::vector<double>{});
    return out;
  }
  if (grad_span->end > prefix.size()) throw ContractError("ce_loss: span outside the prefix");
  body["span"] = {grad_span->begin, grad_span->end};
  const json reply = BridgeRpc::call(*this, "/grad", std::move(body));
  out.value = reply.at("loss").get<double>();
  out.grad = decode_matrix(reply, "grad", static_cast<Eigen::Index>(grad_span->size()), v);
  return out;
}

DetectResult BridgeClient::detect(const std::string& detector, std::string_view text) const {
  json body{{"detector", detector}, {"text", std::string(text)}};
  const json reply = BridgeRpc::call(*this, "/detect", std::move(body));
  return {reply.at("label").get<int>(), reply.at("score").get<double>()};
}

}  // namespace pieval
