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

#include <chrono>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "pieval/defenses.hpp"
#include "pieval/metrics.hpp"
#include "pieval/optimizer.hpp"

namespace pieval {

inline constexpr std::string_view kVersion = "0.1.0";

/// Which backend answers prompts. Credentials never live here: remote
/// backends read PIEVAL_API_URL / PIEVAL_API_KEY.
struct OracleSpec {
  std::string backend = "toy";  // toy | chat | bridge | echo | constant
  // toy
  std::uint64_t seed = 0;
  int d_model = 32;
  int max_len = 1024;
  // chat
  std::string model;
  // constant
  std::string reply;
};

struct DetectorSpec {
  std::string name;  // report key; defaults to kind
  std::string kind;  // constant | perplexity | known_answer | llm | focus | remote
  double value = 0;  // constant
  std::string secret = "DGDSGNH";
  int steps = 1;            // focus
  std::string remote_name;  // remote
  int max_tokens = 0;       // 0: detector default
};

struct SampleSpec {
  std::size_t tuples = 50;           // 0: all of T
  std::size_t adaptive_tuples = 25;  // drawn from the selected tuples
  std::size_t clean = 0;             // 0: all of X
  std::size_t win_rate_prompts = 50;
};

struct WinRateSpec {
  OracleSpec reference;
  OracleSpec judge;
};

struct RunConfig {
  std::filesystem::path bench;
  OracleSpec oracle;
  std::vector<std::string> attacks;
  std::vector<std::string> prevention{"none"};
  std::vector<DetectorSpec> detectors;
  ThresholdPolicy threshold;
  /// Passes to run: utility, asv, detection, adaptive, win_rate.
  std::vector<std::string> metrics{"utility", "asv", "detection"};
  GcgConfig gcg;
  std::vector<OptimizableSpan> adaptive_spans{OptimizableSpan::separator, OptimizableSpan::separator_instruction};
  std::optional<WinRateSpec> win_rate;
  std::uint64_t seed = 0;
  std::size_t concurrency = 1;
  std::optional<std::filesystem::path> cache_dir;
  int max_tokens = 16;
  SampleSpec sample;

  /// Parses and validates. `seed` is mandatory; relative paths resolve
  /// against `base`.
  static RunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base = {});
  static RunConfig load(const std::filesystem::path& path);
  /// Canonical form with every default filled in.
  [[nodiscard]] nlohmann::json to_json() const;
  /// SHA-256 of the canonical form; key order in the source file is irrelevant.
  [[nodiscard]] std::string hash() const;
  /// Throws ConfigError when a name does not resolve.
  void validate() const;
  [[nodiscard]] bool runs(std::string_view metric) const;
};

OraclePtr make_oracle(const OracleSpec& spec);
DetectorPtr make_detector(const DetectorSpec& spec, const OraclePtr& oracle);

struct StageResult {
  std::string name;
  double seconds = 0;
  bool ok = true;
  std::string error;
};

struct RunManifest {
  std::string config_hash;
  std::string code_version{kVersion};
  std::vector<StageResult> stages;
  std::map<std::string, std::string> digests;  // output file -> sha256
  std::size_t cache_hits = 0;
  std::size_t cache_misses = 0;
  [[nodiscard]] bool ok() const;
  [[nodiscard]] nlohmann::json to_json() const;
};

struct RunOutput {
  EvalReport report;
  RunManifest manifest;
};

/// Runs the configured passes and writes, under `out_dir`: records.jsonl
/// (flushed per stage, before any aggregation), traces/*.jsonl for
/// optimizer runs, report.json, report.md, report.csv and manifest.json.
/// A failing stage is recorded in the manifest and later stages still run.
RunOutput plan_and_execute(const RunConfig& config, const std::filesystem::path& out_dir);

/// Indices into T used by the attack passes: a seeded sample, ascending.
std::vector<std::size_t> select_tuples(std::size_t t_size, std::size_t n, std::uint64_t seed);

nlohmann::ordered_json report_to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::json& j);

enum class ReportFormat { markdown, csv };
ReportFormat parse_report_format(std::string_view name);

/// Attack-by-model ASV grid and detector FPR/FNR/AUC grid. The CSV form is
/// long (one value per row) and parses back with parse_report_csv.
std::string render_report(const EvalReport& report, ReportFormat format);
EvalReport parse_report_csv(std::string_view csv);

}  // namespace pieval
