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

#include "pieval/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"

namespace pieval {

using ordered_json = nlohmann::ordered_json;

namespace {

constexpr auto kReplace = nlohmann::json::error_handler_t::replace;

std::string dump_line(const ordered_json& j) { return j.dump(-1, ' ', false, kReplace) + "\n"; }

std::string required_string(const nlohmann::json& rec, const char* key, std::size_t line) {
  auto it = rec.find(key);
  if (it == rec.end()) throw ParseError(line, std::string("missing field \"") + key + "\"");
  if (!it->is_string()) throw ParseError(line, std::string("field \"") + key + "\" is not a string");
  return it->get<std::string>();
}

ordered_json sample_to_json(const TaskSample& s) {
  ordered_json j;
  j["task_id"] = s.task_id;
  j["instruction"] = s.instruction;
  j["data"] = s.data;
  j["response"] = s.response;
  j["metric"] = std::string(to_string(s.metric));
  return j;
}

std::vector<std::string> distinct_tasks(const std::vector<TaskSample>& samples) {
  std::vector<std::string> tasks;
  for (const auto& s : samples)
    if (std::find(tasks.begin(), tasks.end(), s.task_id) == tasks.end()) tasks.push_back(s.task_id);
  return tasks;
}

std::vector<std::string> split_lines(std::string_view text) {
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto nl = text.find('\n', start);
    if (nl == std::string_view::npos) {
      if (start < text.size()) lines.emplace_back(text.substr(start));
      break;
    }
    lines.emplace_back(text.substr(start, nl - start));
    start = nl + 1;
  }
  return lines;
}

bool blank(std::string_view line) {
  return std::all_of(line.begin(), line.end(),
                     [](char c) { return std::isspace(static_cast<unsigned char>(c)); });
}

}  // namespace

std::string_view to_string(MetricKind kind) {
  switch (kind) {
    case MetricKind::accuracy: return "accuracy";
    case MetricKind::rouge1: return "rouge1";
    case MetricKind::gleu: return "gleu";
  }
  return "accuracy";
}

MetricKind parse_metric_kind(std::string_view name) {
  if (name == "accuracy") return MetricKind::accuracy;
  if (name == "rouge1") return MetricKind::rouge1;
  if (name == "gleu") return MetricKind::gleu;
  throw ConfigError("unknown metric kind \"" + std::string(name) + "\"");
}

std::string render_prompt(std::string_view instruction, std::string_view data) {
  std::string out(instruction);
  out.push_back('\n');
  out.append(data);
  return out;
}

bool responses_distinct(std::string_view a, std::string_view b) {
  return normalize_text(a) != normalize_text(b);
}

TaskSample render_mmlu(const MmluRecord& record, std::string task_id) {
  if (record.choices.size() != 4) throw ContractError("MMLU record needs exactly four choices");
  TaskSample s;
  s.task_id = std::move(task_id);
  s.instruction = std::string(kMmluInstruction);
  s.data = record.question;
  static constexpr char kLetters[] = "ABCD";
  for (std::size_t i = 0; i < 4; ++i) {
    s.data += '\n';
    s.data += kLetters[i];
    s.data += ". ";
    s.data += record.choices[i];
  }
  s.response = record.answer;
  s.metric = MetricKind::accuracy;
  return s;
}

std::vector<TaskSample> parse_dataset(std::string_view jsonl, std::string_view task_id) {
  std::vector<TaskSample> out;
  std::map<std::string, MetricKind> metric_by_task;
  const auto lines = split_lines(jsonl);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::size_t line_no = i + 1;
    if (blank(lines[i])) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(lines[i]);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(line_no, std::string("invalid JSON: ") + e.what());
    }
    if (!rec.is_object()) throw ParseError(line_no, "record is not an object");

    TaskSample s;
    if (rec.contains("question")) {
      MmluRecord m;
      m.question = required_string(rec, "question", line_no);
      auto choices = rec.find("choices");
      if (choices == rec.end() || !choices->is_array() || choices->size() != 4)
        throw ParseError(line_no, "\"choices\" must be an array of four strings");
      for (const auto& c : *choices) {
        if (!c.is_string()) throw ParseError(line_no, "choice is not a string");
        m.choices.push_back(c.get<std::string>());
      }
      auto answer = rec.find("answer");
      if (answer == rec.end()) throw ParseError(line_no, "missing field \"answer\"");
      if (answer->is_number_integer()) {
        const auto idx = answer->get<int>();
        if (idx < 0 || idx > 3) throw ParseError(line_no, "answer index out of range");
        m.answer = std::string(1, static_cast<char>('A' + idx));
      } else if (answer->is_string()) {
        m.answer = answer->get<std::string>();
        if (m.answer.size() != 1 || m.answer[0] < 'A' || m.answer[0] > 'D')
          throw ParseError(line_no, "answer must be a letter A-D");
      } else {
        throw ParseError(line_no, "answer must be a letter or an index");
      }
      std::string id = rec.contains("task_id") ? required_string(rec, "task_id", line_no) : "mmlu";
      s = render_mmlu(m, std::move(id));
    } else {
      s.instruction = required_string(rec, "instruction", line_no);
      s.data = required_string(rec, "data", line_no);
      s.response = required_string(rec, "response", line_no);
      s.task_id = rec.contains("task_id") ? required_string(rec, "task_id", line_no) : "task";
      if (rec.contains("metric")) s.metric = parse_metric_kind(required_string(rec, "metric", line_no));
    }
    if (!task_id.empty()) s.task_id = std::string(task_id);
    if (s.instruction.empty()) throw ParseError(line_no, "empty instruction");
    if (s.response.empty()) throw ParseError(line_no, "empty response");

    auto [it, inserted] = metric_by_task.emplace(s.task_id, s.metric);
    if (!inserted && it->second != s.metric)
      throw ParseError(line_no, "metric differs from earlier records of task \"" + s.task_id + "\"");
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<TaskSample> load_dataset(const std::filesystem::path& path, std::string_view task_id) {
  return parse_dataset(read_file(path), task_id);
}

PromptResponseSet build_pr(const std::vector<std::vector<TaskSample>>& datasets,
                           std::size_t per_task_quota, std::uint64_t seed, std::string provenance) {
  PromptResponseSet pr;
  pr.seed = seed;
  pr.per_task_quota = per_task_quota;
  pr.provenance = std::move(provenance);
  for (std::size_t d = 0; d < datasets.size(); ++d) {
    const auto& task = datasets[d];
    if (task.size() < per_task_quota) {
      const std::string name = task.empty() ? std::to_string(d) : task.front().task_id;
      throw ConfigError("quota " + std::to_string(per_task_quota) + " exceeds the " +
                        std::to_string(task.size()) + " samples of task \"" + name + "\"");
    }
    auto rng = make_rng(seed, "pr/" + std::to_string(d));
    auto order = permutation(rng, task.size());
    order.resize(per_task_quota);
    std::sort(order.begin(), order.end());
    for (auto idx : order) pr.samples.push_back(task[idx]);
  }
  return pr;
}

std::vector<InjectionTuple> build_t(const PromptResponseSet& pr, std::size_t pairings_per_target,
                                    std::uint64_t seed) {
  if (pairings_per_target < 1) throw ContractError("pairings_per_target must be at least 1");
  const auto& samples = pr.samples;
  const auto tasks = distinct_tasks(samples);
  const bool per_task = tasks.size() > 1;

  std::vector<std::vector<std::size_t>> pools(per_task ? tasks.size() : 1);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::size_t pool = 0;
    if (per_task)
      pool = static_cast<std::size_t>(
          std::find(tasks.begin(), tasks.end(), samples[i].task_id) - tasks.begin());
    pools[pool].push_back(i);
  }

  std::vector<InjectionTuple> out;
  out.reserve(samples.size() * pairings_per_target);
  for (std::size_t target = 0; target < samples.size(); ++target) {
    auto rng = make_rng(seed, "t/" + std::to_string(target));
    std::vector<std::size_t> chosen;
    for (std::size_t j = 0; j < pairings_per_target; ++j) {
      const auto& pool = pools[per_task ? j % pools.size() : 0];
      const auto order = permutation(rng, pool.size());
      std::optional<std::size_t> pick;
      for (auto o : order) {
        const auto cand = pool[o];
        if (cand == target) continue;
        if (std::find(chosen.begin(), chosen.end(), cand) != chosen.end()) continue;
        if (!responses_distinct(samples[target].response, samples[cand].response)) continue;
        pick = cand;
        break;
      }
      if (!pick)
        throw ConstructionError("no injected candidate with a distinct response for target sample " +
                                std::to_string(target) + " (task \"" + samples[target].task_id +
                                "\", pairing " + std::to_string(j) + ")");
      chosen.push_back(*pick);
      out.push_back({target, *pick, samples[target], samples[*pick]});
    }
  }
  return out;
}

std::pair<CleanSet, ContaminationSet> build_x_and_xc(const PromptResponseSet& pr,
                                                     const std::vector<InjectionTuple>& t) {
  CleanSet x;
  std::set<std::string_view> seen;
  for (const auto& s : pr.samples)
    if (seen.insert(s.data).second) x.data.push_back(s.data);

  ContaminationSet xc;
  xc.pairs.reserve(t.size());
  for (std::size_t k = 0; k < t.size(); ++k) xc.pairs.push_back({t[k].target.data, t[k].injected, k});
  return {std::move(x), std::move(xc)};
}

std::string dataset_hash(const std::vector<TaskSample>& samples) {
  std::string text;
  for (const auto& s : samples) text += dump_line(sample_to_json(s));
  return sha256_hex(text);
}

Benchmark build_benchmark(const std::vector<std::vector<TaskSample>>& datasets,
                          std::size_t per_task_quota, std::size_t pairings_per_target,
                          std::uint64_t seed, std::string provenance) {
  Benchmark b;
  b.pr = build_pr(datasets, per_task_quota, seed, std::move(provenance));
  b.t = build_t(b.pr, pairings_per_target, seed);
  std::tie(b.x, b.xc) = build_x_and_xc(b.pr, b.t);
  b.pairings_per_target = pairings_per_target;
  for (const auto& d : datasets) b.dataset_hashes.push_back(dataset_hash(d));
  return b;
}

std::string serialize_pr(const PromptResponseSet& pr) {
  std::string out;
  for (const auto& s : pr.samples) out += dump_line(sample_to_json(s));
  return out;
}

std::string serialize_t(const std::vector<InjectionTuple>& t) {
  std::string out;
  for (const auto& tup : t) {
    ordered_json j;
    j["target"] = tup.target_index;
    j["injected"] = tup.injected_index;
    out += dump_line(j);
  }
  return out;
}

std::string serialize_x(const CleanSet& x) {
  std::string out;
  for (const auto& d : x.data) {
    ordered_json j;
    j["data"] = d;
    out += dump_line(j);
  }
  return out;
}

std::string serialize_xc(const ContaminationSet& xc) {
  std::string out;
  for (const auto& p : xc.pairs) {
    ordered_json j;
    j["tuple"] = p.tuple_index;
    j["data"] = p.clean_data;
    j["injected_prompt"] = render_prompt(p.injected.instruction, p.injected.data);
    out += dump_line(j);
  }
  return out;
}

std::string serialize_manifest(const Benchmark& bench) {
  ordered_json j;
  j["provenance"] = bench.pr.provenance;
  j["seed"] = bench.pr.seed;
  j["per_task_quota"] = bench.pr.per_task_quota;
  j["pairings_per_target"] = bench.pairings_per_target;
  j["tasks"] = distinct_tasks(bench.pr.samples);
  j["dataset_hashes"] = bench.dataset_hashes;
  ordered_json counts;
  counts["pr"] = bench.pr.samples.size();
  counts["t"] = bench.t.size();
  counts["x"] = bench.x.data.size();
  counts["xc"] = bench.xc.pairs.size();
  j["counts"] = counts;
  return j.dump(2, ' ', false, kReplace) + "\n";
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) throw ConfigError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_bundle(const Benchmark& bench, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_file_atomic(dir / "pr.jsonl", serialize_pr(bench.pr));
  write_file_atomic(dir / "t.jsonl", serialize_t(bench.t));
  write_file_atomic(dir / "x.jsonl", serialize_x(bench.x));
  write_file_atomic(dir / "xc.jsonl", serialize_xc(bench.xc));
  write_file_atomic(dir / "manifest.json", serialize_manifest(bench));
}

Benchmark read_bundle(const std::filesystem::path& dir) {
  Benchmark b;
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad manifest.json: " + std::string(e.what()));
  }
  b.pr.provenance = manifest.value("provenance", "");
  b.pr.seed = manifest.value("seed", std::uint64_t{0});
  b.pr.per_task_quota = manifest.value("per_task_quota", std::size_t{0});
  b.pairings_per_target = manifest.value("pairings_per_target", std::size_t{0});
  b.dataset_hashes = manifest.value("dataset_hashes", std::vector<std::string>{});

  b.pr.samples = parse_dataset(read_file(dir / "pr.jsonl"));
  const auto& samples = b.pr.samples;

  const auto t_lines = split_lines(read_file(dir / "t.jsonl"));
  for (std::size_t i = 0; i < t_lines.size(); ++i) {
    if (blank(t_lines[i])) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(t_lines[i]);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(i + 1, std::string("t.jsonl: ") + e.what());
    }
    const auto target = j.at("target").get<std::size_t>();
    const auto injected = j.at("injected").get<std::size_t>();
    if (target >= samples.size() || injected >= samples.size())
      throw ParseError(i + 1, "t.jsonl: index out of range");
    b.t.push_back({target, injected, samples[target], samples[injected]});
  }

  const auto x_lines = split_lines(read_file(dir / "x.jsonl"));
  for (std::size_t i = 0; i < x_lines.size(); ++i) {
    if (blank(x_lines[i])) continue;
    try {
      b.x.data.push_back(nlohmann::json::parse(x_lines[i]).at("data").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(i + 1, std::string("x.jsonl: ") + e.what());
    }
  }

  const auto xc_lines = split_lines(read_file(dir / "xc.jsonl"));
  for (std::size_t i = 0; i < xc_lines.size(); ++i) {
    if (blank(xc_lines[i])) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(xc_lines[i]);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(i + 1, std::string("xc.jsonl: ") + e.what());
    }
    const auto k = j.at("tuple").get<std::size_t>();
    if (k >= b.t.size()) throw ParseError(i + 1, "xc.jsonl: tuple index out of range");
    b.xc.pairs.push_back({j.at("data").get<std::string>(), b.t[k].injected, k});
  }
  return b;
}

}  // namespace pieval
