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

// pieval command line. Every evaluation subcommand is the same planned run
// with a narrower set of passes.

#include <spdlog/spdlog.h>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pieval/corpus.hpp"
#include "pieval/harness.hpp"
#include "pieval/synthetic.hpp"

namespace fs = std::filesystem;
using namespace pieval;

namespace {

struct RunArgs {
  fs::path config;
  fs::path out;
  std::optional<std::size_t> concurrency;
  std::optional<fs::path> cache_dir;
  std::vector<std::string> attacks;
  bool adaptive = false;
};

void add_run_options(CLI::App* sub, RunArgs& a) {
  sub->add_option("-c,--config", a.config, "run config (JSON)")->required()->check(CLI::ExistingFile);
  sub->add_option("-o,--out", a.out, "output directory")->required();
  sub->add_option("-j,--concurrency", a.concurrency, "parallel oracle calls");
  sub->add_option("--cache-dir", a.cache_dir, "response cache directory");
}

int run(const RunArgs& a, std::vector<std::string> metrics) {
  auto cfg = RunConfig::load(a.config);
  if (a.concurrency) cfg.concurrency = *a.concurrency;
  if (a.cache_dir) cfg.cache_dir = fs::absolute(*a.cache_dir);
  if (!a.attacks.empty()) cfg.attacks = a.attacks;
  if (a.adaptive) metrics.push_back("adaptive");
  cfg.metrics = std::move(metrics);
  cfg.validate();

  const auto out = plan_and_execute(cfg, a.out);
  for (const auto& s : out.manifest.stages) {
    if (s.ok)
      spdlog::info("{:<10} ok     {:.2f}s", s.name, s.seconds);
    else
      spdlog::error("{:<10} FAILED {:.2f}s: {}", s.name, s.seconds, s.error);
  }
  spdlog::info("cache: {} hits, {} misses; report in {}", out.manifest.cache_hits, out.manifest.cache_misses,
               a.out.string());
  return out.manifest.ok() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"prompt injection attack and defense evaluation"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace|debug|info|warn|error|off")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));

  // build-bench
  auto* bb = app.add_subcommand("build-bench", "sample PR, T, X and X_c into a bundle");
  std::vector<fs::path> datasets;
  std::size_t synthetic_n = 0, mmlu_n = 0, quota = 100, pairings = 7;
  std::uint64_t bench_seed = 0;
  fs::path bench_out;
  bb->add_option("--dataset", datasets, "task JSONL file, one per task")->check(CLI::ExistingFile);
  bb->add_option("--synthetic", synthetic_n, "seven stand-in tasks with N samples each");
  bb->add_option("--synthetic-mmlu", mmlu_n, "stand-in multiple-choice task with N samples");
  bb->add_option("--quota", quota, "samples kept per task");
  bb->add_option("--pairings", pairings, "injected tasks paired with each target");
  bb->add_option("--seed", bench_seed)->required();
  bb->add_option("-o,--out", bench_out, "bundle directory")->required();

  RunArgs attack_a, optimize_a, prevention_a, detection_a, utility_a, win_a, run_a;
  auto* at = app.add_subcommand("attack", "attack success value of each configured attack");
  add_run_options(at, attack_a);
  at->add_option("--attack", attack_a.attacks, "override the configured attacks");

  auto* op = app.add_subcommand("optimize", "GCG separator search, traces under <out>/traces");
  add_run_options(op, optimize_a);
  op->add_flag("--adaptive", optimize_a.adaptive, "also run the detector-aware variant");

  auto* pv = app.add_subcommand("eval-prevention", "utility and ASV under the configured prevention defenses");
  add_run_options(pv, prevention_a);

  auto* dt = app.add_subcommand("eval-detection", "threshold calibration, FPR/FNR/AUC");
  add_run_options(dt, detection_a);
  dt->add_flag("--adaptive", detection_a.adaptive, "include the adaptive attack pass");

  auto* ut = app.add_subcommand("eval-utility", "clean-task utility");
  add_run_options(ut, utility_a);

  auto* wr = app.add_subcommand("win-rate", "judged win rate against the reference model");
  add_run_options(wr, win_a);

  auto* rn = app.add_subcommand("run", "every pass listed in the config");
  add_run_options(rn, run_a);

  auto* rp = app.add_subcommand("report", "render report.json as markdown or CSV");
  fs::path report_in;
  std::string report_format = "md";
  std::optional<fs::path> report_out;
  rp->add_option("input", report_in, "report.json, or a run directory")->required();
  rp->add_option("-f,--format", report_format, "md|csv");
  rp->add_option("-o,--out", report_out, "write here instead of stdout");

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::from_str(log_level));

  try {
    if (*bb) {
      std::vector<std::vector<TaskSample>> tasks;
      if (synthetic_n > 0) tasks = synthetic::open_prompt_injection_like(synthetic_n, bench_seed);
      if (mmlu_n > 0) tasks.push_back(synthetic::mmlu_like(mmlu_n, bench_seed));
      for (const auto& p : datasets) tasks.push_back(load_dataset(p));
      if (tasks.empty()) throw ConfigError("build-bench needs --dataset, --synthetic or --synthetic-mmlu");
      const bool real = !datasets.empty();
      const auto bench = build_benchmark(tasks, quota, pairings, bench_seed, real ? "datasets" : "synthetic");
      write_bundle(bench, bench_out);
      spdlog::info("PR {}  T {}  X {}  X_c {} -> {}", bench.pr.samples.size(), bench.t.size(), bench.x.data.size(),
                   bench.xc.pairs.size(), bench_out.string());
      return 0;
    }
    if (*at) return run(attack_a, {"asv"});
    if (*op) {
      if (optimize_a.attacks.empty()) optimize_a.attacks = {"gcg"};
      return run(optimize_a, {"asv"});
    }
    if (*pv) return run(prevention_a, {"utility", "asv"});
    if (*dt) return run(detection_a, {"detection"});
    if (*ut) return run(utility_a, {"utility"});
    if (*wr) return run(win_a, {"win_rate"});
    if (*rn) {
      auto cfg = RunConfig::load(run_a.config);
      return run(run_a, cfg.metrics);
    }
    if (*rp) {
      if (fs::is_directory(report_in)) report_in /= "report.json";
      const auto report = report_from_json(nlohmann::json::parse(read_file(report_in)));
      const auto text = render_report(report, parse_report_format(report_format));
      if (report_out)
        write_file_atomic(*report_out, text);
      else
        std::cout << text;
      return 0;
    }
  } catch (const ConfigError& e) {
    spdlog::error("config: {}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
