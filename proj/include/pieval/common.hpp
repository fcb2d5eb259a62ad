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

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <exception>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace pieval {

using TokenId = std::int32_t;

/// Half-open range [begin, end) over bytes or tokens.
struct Range {
  std::size_t begin = 0;
  std::size_t end = 0;

  [[nodiscard]] std::size_t size() const { return end - begin; }
  [[nodiscard]] bool empty() const { return end == begin; }
  bool operator==(const Range&) const = default;
};

// Error taxonomy. Every error the library raises derives from Error so the
// CLI can report it uniformly.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed input record. `line` is 1-based.
struct ParseError : Error {
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line(line) {}
  std::size_t line;
};

struct ConfigError : Error {
  using Error::Error;
};

struct ConstructionError : Error {
  using Error::Error;
};

/// Caller violated an operation precondition.
struct ContractError : Error {
  using Error::Error;
};

struct ContextOverflow : ContractError {
  using ContractError::ContractError;
};

/// The backend does not support the requested capability.
struct CapabilityError : Error {
  using Error::Error;
};

struct TransportError : Error {
  TransportError(const std::string& what, int attempts, int last_status)
      : Error(what), attempts(attempts), last_status(last_status) {}
  int attempts;
  int last_status;  // HTTP status, or -1 when no response was received
};

/// Lowercase hex SHA-256 of `data`.
std::string sha256_hex(std::string_view data);

std::string base64_encode(std::string_view bytes);
/// Throws ParseError(0, ...) on malformed input.
std::string base64_decode(std::string_view text);

/// 64-bit seed for a named substream of `seed`. Stages draw randomness only
/// from their own substream so adding a stage never perturbs another.
std::uint64_t substream_seed(std::uint64_t seed, std::string_view name);

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed, std::string_view stream) {
  return Rng(substream_seed(seed, stream));
}

/// Unbiased integer in [0, n). std::uniform_int_distribution is
/// implementation-defined, this is not.
std::uint64_t uniform_index(Rng& rng, std::uint64_t n);

/// Fisher-Yates permutation of 0..n-1.
std::vector<std::size_t> permutation(Rng& rng, std::size_t n);

/// Uniform double in [0, 1) from the top 53 bits of one draw.
inline double uniform_unit(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Lowercase, trim, collapse internal whitespace runs to one space.
std::string normalize_text(std::string_view text);

/// Runs fn(i) for i in [0, n) on at most `limit` threads. Callers write
/// results into per-index slots, so output order never depends on timing.
/// If several calls throw, the one with the lowest index is rethrown.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t limit, Fn&& fn) {
  const std::size_t workers = std::min(std::max<std::size_t>(limit, 1), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::size_t failed_at = n;
  std::exception_ptr failure;
  auto run = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (i < failed_at) {
          failed_at = i;
          failure = std::current_exception();
        }
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < workers; ++t) pool.emplace_back(run);
  run();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace pieval
