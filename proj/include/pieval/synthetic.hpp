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
#include <vector>

#include "pieval/corpus.hpp"

namespace pieval::synthetic {

// Seeded stand-in corpora with the shape of the public benchmarks. The
// artifact never downloads or redistributes real datasets; these exist so
// the desk suites and the count checks can run offline.

/// Seven tasks in the OpenPromptInjection layout (duplicate detection,
/// grammar correction, hate detection, NLI, sentiment, spam, summarization),
/// `samples_per_task` each.
std::vector<std::vector<TaskSample>> open_prompt_injection_like(std::size_t samples_per_task,
                                                                std::uint64_t seed);

/// One multiple-choice task rendered through the MMLU template.
std::vector<TaskSample> mmlu_like(std::size_t samples, std::uint64_t seed);

}  // namespace pieval::synthetic
