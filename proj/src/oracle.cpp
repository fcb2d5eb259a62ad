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

#include "pieval/oracle.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "pieval/corpus.hpp"

namespace pieval {

namespace {

[[noreturn]] void missing(const ModelOracle& o, std::string_view what) {
  throw CapabilityError("backend \"" + o.id() + "\" does not support " + std::string(what));
}

}  // namespace

std::vector<TokenId> ModelOracle::tokenize(std::string_view) const { missing(*this, "tokenize"); }
std::string ModelOracle::detokenize(std::span<const TokenId>) const { missing(*this, "detokenize"); }
int ModelOracle::vocab_size() const { missing(*this, "vocab_size"); }
std::vector<TokenId> ModelOracle::special_tokens() const { return {}; }
Eigen::MatrixXd ModelOracle::embeddings() const { missing(*this, "embeddings"); }

TokenLoss ModelOracle::ce_loss(std::span<const TokenId>, std::span<const TokenId>,
                               std::optional<Range>) const {
  missing(*this, "ce_loss");
}

Focus ModelOracle::focus(std::span<const TokenId>, Range, int, std::optional<Range>) const {
  missing(*this, "attention focus");
}

void ModelOracle::require(bool Capabilities::*cap, std::string_view name) const {
  if (!(capabilities().*cap)) missing(*this, name);
}

ToyOracle::ToyOracle(std::shared_ptr<const ToyLM> lm, std::string name) : lm_(std::move(lm)) {
  const auto& c = lm_->config();
  std::ostringstream id;
  id << name << ":seed=" << c.seed << ":d=" << c.d_model << ":len=" << c.max_len << ":weights="
     << sha256_hex(std::string_view(reinterpret_cast<const char*>(lm_->embeddings().data()),
                                    sizeof(double) * static_cast<std::size_t>(lm_->embeddings().size())))
            .substr(0, 12)
     << sha256_hex(std::string_view(reinterpret_cast<const char*>(lm_->output_bias().data()),
                                    sizeof(double) * static_cast<std::size_t>(lm_->output_bias().size())))
            .substr(0, 4);
  id_ = id.str();
}

std::string ToyOracle::generate(std::string_view prompt, int max_tokens) const {
  const auto tokens = ByteTokenizer::encode(prompt);
  if (tokens.size() > static_cast<std::size_t>(lm_->max_tokens()))
    throw ContextOverflow("prompt of " + std::to_string(tokens.size()) + " tokens exceeds context of " +
                          std::to_string(lm_->max_tokens()));
  return ByteTokenizer::decode(lm_->greedy(tokens, max_tokens));
}

std::vector<TokenId> ToyOracle::tokenize(std::string_view text) const { return ByteTokenizer::encode(text); }

std::string ToyOracle::detokenize(std::span<const TokenId> tokens) const {
  return ByteTokenizer::decode(tokens);
}

std::vector<TokenId> ToyOracle::special_tokens() const {
  return {ByteTokenizer::kInst, ByteTokenizer::kInpt, ByteTokenizer::kResp};
}

TokenLoss ToyOracle::ce_loss(std::span<const TokenId> prefix, std::span<const TokenId> target,
                             std::optional<Range> grad_span) const {
  return lm_->ce_loss(prefix, target, grad_span);
}

Focus ToyOracle::focus(std::span<const TokenId> tokens, Range instruction, int steps,
                       std::optional<Range> grad_span) const {
  return lm_->focus(tokens, instruction, steps, grad_span);
}

std::shared_ptr<ScriptedOracle> ScriptedOracle::echo() {
  return std::make_shared<ScriptedOracle>("echo", [](std::string_view p, int) { return std::string(p); });
}

std::shared_ptr<ScriptedOracle> ScriptedOracle::constant(std::string reply) {
  return std::make_shared<ScriptedOracle>("constant:" + reply,
                                          [reply](std::string_view, int) { return reply; });
}

ResponseCache::ResponseCache(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::filesystem::create_directories(dir_);
}

std::filesystem::path ResponseCache::path_for(const std::string& key) const {
  return dir_ / key.substr(0, 2) / (key + ".json");
}

std::optional<std::string> ResponseCache::get(const std::string& key) const {
  const auto path = path_for(key);
  std::error_code ec;
  if (!std::filesystem::exists(path, ec)) return std::nullopt;
  try {
    auto j = nlohmann::json::parse(read_file(path));
    return base64_decode(j.at("response_b64").get<std::string>());
  } catch (const std::exception&) {
    return std::nullopt;  // torn or foreign file: treat as a miss and overwrite
  }
}

void ResponseCache::put(const std::string& key, std::string_view value) const {
  const auto path = path_for(key);
  std::filesystem::create_directories(path.parent_path());
  nlohmann::json j;
  j["key"] = key;
  j["response_b64"] = base64_encode(value);
  std::ostringstream tmp_name;
  tmp_name << path.filename().string() << "." << std::this_thread::get_id() << ".tmp";
  const auto tmp = path.parent_path() / tmp_name.str();
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
  }
  std::filesystem::rename(tmp, path);
}

std::string cache_key(std::string_view backend_id, std::string_view prompt, const DecodeParams& params) {
  // Length-prefixed raw bytes: prompts need not be valid UTF-8.
  std::ostringstream material;
  material << backend_id.size() << ':' << backend_id << '|' << prompt.size() << ':' << prompt << '|'
           << params.max_tokens << '|' << params.temperature;
  return sha256_hex(material.str());
}

CachedOracle::CachedOracle(OraclePtr inner, std::shared_ptr<const ResponseCache> cache)
    : inner_(std::move(inner)), cache_(std::move(cache)) {}

std::string CachedOracle::generate(std::string_view prompt, int max_tokens) const {
  const auto key = cache_key(inner_->id(), prompt, {max_tokens, 0.0});
  if (auto hit = cache_->get(key)) {
    ++hits_;
    return *hit;
  }
  ++misses_;
  auto out = inner_->generate(prompt, max_tokens);
  cache_->put(key, out);
  return out;
}

double perplexity(const ModelOracle& oracle, std::string_view text) {
  oracle.require(&Capabilities::logprob, "log-probabilities");
  const auto tokens = oracle.tokenize(text);
  if (tokens.empty()) throw ContractError("perplexity of empty text");
  const auto loss = oracle.ce_loss({}, tokens);
  return std::exp(loss.value / static_cast<double>(tokens.size()));
}

}  // namespace pieval
