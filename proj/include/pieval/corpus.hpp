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

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pieval/common.hpp"

namespace pieval {

enum class MetricKind { accuracy, rouge1, gleu };

std::string_view to_string(MetricKind kind);
/// Throws ConfigError on an unknown name.
MetricKind parse_metric_kind(std::string_view name);

/// One (instruction, data, ground-truth response) triple.
struct TaskSample {
  std::string task_id;
  std::string instruction;
  std::string data;
  std::string response;
  MetricKind metric = MetricKind::accuracy;

  bool operator==(const TaskSample&) const = default;
};

/// Prompt text p = s || x as seen by the model. The newline between
/// instruction and data is the artifact's fixed prompt format.
std::string render_prompt(std::string_view instruction, std::string_view data);

struct PromptResponseSet {
  std::vector<TaskSample> samples;
  std::string provenance;
  std::uint64_t seed = 0;
  std::size_t per_task_quota = 0;
};

/// A target/injected pairing. Indices point into the PromptResponseSet the
/// tuple was built from.
struct InjectionTuple {
  std::size_t target_index = 0;
  std::size_t injected_index = 0;
  TaskSample target;
  TaskSample injected;
};

struct CleanSet {
  std::vector<std::string> data;
};

struct ContaminationPair {
  std::string clean_data;
  TaskSample injected;
  std::size_t tuple_index = 0;
};

struct ContaminationSet {
  std::vector<ContaminationPair> pairs;
};

/// Response inequality used for the r_t != r_e constraint.
bool responses_distinct(std::string_view a, std::string_view b);

/// The fixed MMLU rendering.
inline constexpr std::string_view kMmluInstruction =
    "Answer the following multiple-choice question. Respond with only the letter of the "
    "correct choice.";

struct MmluRecord {
  std::string question;
  std::vector<std::string> choices;  // exactly four
  std::string answer;                // "A".."D"
};

TaskSample render_mmlu(const MmluRecord& record, std::string task_id = "mmlu");

/// Reads one task from JSONL. Records use the dataset schema
/// {task_id, instruction, data, response, metric}; records carrying
/// {question, choices, answer} are rendered with the MMLU template instead.
/// `task_id` overrides the per-record id when non-empty.
std::vector<TaskSample> load_dataset(const std::filesystem::path& path,
                                     std::string_view task_id = {});
std::vector<TaskSample> parse_dataset(std::string_view jsonl, std::string_view task_id = {});

PromptResponseSet build_pr(const std::vector<std::vector<TaskSample>>& datasets,
                           std::size_t per_task_quota, std::uint64_t seed,
                           std::string provenance = "synthetic");

std::vector<InjectionTuple> build_t(const PromptResponseSet& pr, std::size_t pairings_per_target,
                                    std::uint64_t seed);

std::pair<CleanSet, ContaminationSet> build_x_and_xc(const PromptResponseSet& pr,
                                                     const std::vector<InjectionTuple>& t);

/// Everything downstream evaluation needs.
struct Benchmark {
  PromptResponseSet pr;
  std::vector<InjectionTuple> t;
  CleanSet x;
  ContaminationSet xc;
  std::size_t pairings_per_target = 0;
  std::vector<std::string> dataset_hashes;
};

Benchmark build_benchmark(const std::vector<std::vector<TaskSample>>& datasets,
                          std::size_t per_task_quota, std::size_t pairings_per_target,
                          std::uint64_t seed, std::string provenance = "synthetic");

/// Content hash of one loaded task, stable across file formatting.
std::string dataset_hash(const std::vector<TaskSample>& samples);

// Bundle directory: pr.jsonl, t.jsonl, x.jsonl, xc.jsonl, manifest.json.
std::string serialize_pr(const PromptResponseSet& pr);
std::string serialize_t(const std::vector<InjectionTuple>& t);
std::string serialize_x(const CleanSet& x);
std::string serialize_xc(const ContaminationSet& xc);
std::string serialize_manifest(const Benchmark& bench);

void write_bundle(const Benchmark& bench, const std::filesystem::path& dir);
Benchmark read_bundle(const std::filesystem::path& dir);

std::string read_file(const std::filesystem::path& path);
/// Write-to-temp then rename.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

}  // namespace pieval
