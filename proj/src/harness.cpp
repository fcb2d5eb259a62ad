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

#include "pieval/harness.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "pieval/corpus.hpp"
#include "pieval/remote.hpp"

namespace pieval {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

const std::set<std::string> kMetrics{"utility", "asv", "detection", "adaptive", "win_rate"};
const std::set<std::string> kDetectorKinds{"constant", "perplexity", "known_answer", "llm", "focus", "remote"};

void check_keys(const json& j, std::initializer_list<std::string_view> allowed, std::string_view where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), k) == allowed.end())
      throw ConfigError(std::string(where) + ": unknown key \"" + k + "\"");
  }
}

template <typename T>
T field(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key \"") + key + "\": " + e.what());
  }
}

OracleSpec oracle_from_json(const json& j, std::string_view where) {
  check_keys(j, {"backend", "seed", "d_model", "max_len", "model", "reply"}, where);
  OracleSpec s;
  s.backend = field(j, "backend", s.backend);
  s.seed = field(j, "seed", s.seed);
  s.d_model = field(j, "d_model", s.d_model);
  s.max_len = field(j, "max_len", s.max_len);
  s.model = field(j, "model", s.model);
  s.reply = field(j, "reply", s.reply);
  return s;
}

json oracle_to_json(const OracleSpec& s) {
  return {{"backend", s.backend}, {"seed", s.seed}, {"d_model", s.d_model},
          {"max_len", s.max_len}, {"model", s.model}, {"reply", s.reply}};
}

// JSON has no infinities; thresholds can be one.
json number(double v) {
  if (std::isfinite(v)) return v;
  return std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
}

double number_from(const json& v) {
  if (v.is_number()) return v.get<double>();
  const auto s = v.get<std::string>();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  throw ParseError(0, "not a number: " + s);
}

std::string fmt_exact(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_short(double v) {
  if (!std::isfinite(v)) return fmt_exact(v);
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::string env_or_empty(const char* name) {
  const char* v = std::getenv(name);
  return v ? v : "";
}

}  // namespace

// Config.

RunConfig RunConfig::from_json(const json& j, const fs::path& base) {
  check_keys(j, {"bench", "oracle", "attacks", "prevention", "detectors", "threshold", "metrics", "gcg",
                 "adaptive_spans", "win_rate", "seed", "concurrency", "cache_dir", "max_tokens", "sample"},
             "config");
  if (!j.contains("seed")) throw ConfigError("config: \"seed\" is required");
  RunConfig c;
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() || base.empty() ? fs::path(p) : base / p; };
  if (!j.contains("bench")) throw ConfigError("config: \"bench\" is required");
  c.bench = resolve(field<std::string>(j, "bench", ""));
  if (j.contains("oracle")) c.oracle = oracle_from_json(j["oracle"], "oracle");
  c.attacks = field(j, "attacks", c.attacks);
  c.prevention = field(j, "prevention", c.prevention);
  if (j.contains("detectors")) {
    for (const auto& d : j["detectors"]) {
      check_keys(d, {"name", "kind", "value", "secret", "steps", "remote_name", "max_tokens"}, "detector");
      DetectorSpec s;
      s.kind = field<std::string>(d, "kind", "");
      s.name = field(d, "name", s.kind);
      s.value = field(d, "value", s.value);
      s.secret = field(d, "secret", s.secret);
      s.steps = field(d, "steps", s.steps);
      s.remote_name = field(d, "remote_name", s.remote_name);
      s.max_tokens = field(d, "max_tokens", s.max_tokens);
      c.detectors.push_back(std::move(s));
    }
  }
  if (j.contains("threshold")) {
    const auto& t = j["threshold"];
    check_keys(t, {"method", "fpr_budget", "fixed_threshold"}, "threshold");
    const auto method = field<std::string>(t, "method", "fpr_budget");
    if (method == "fpr_budget") c.threshold.method = ThresholdMethod::fpr_budget;
    else if (method == "fixed") c.threshold.method = ThresholdMethod::fixed;
    else throw ConfigError("threshold method must be fpr_budget or fixed");
    c.threshold.fpr_budget = field(t, "fpr_budget", c.threshold.fpr_budget);
    c.threshold.fixed_threshold = field(t, "fixed_threshold", c.threshold.fixed_threshold);
  }
  c.metrics = field(j, "metrics", c.metrics);
  if (j.contains("gcg")) {
    const auto& g = j["gcg"];
    check_keys(g, {"top_k", "candidates_per_iter", "iterations", "span", "init_length", "filler", "alpha",
                   "loss_threshold", "banned_tokens"},
               "gcg");
    c.gcg.top_k = field(g, "top_k", c.gcg.top_k);
    c.gcg.candidates_per_iter = field(g, "candidates_per_iter", c.gcg.candidates_per_iter);
    c.gcg.iterations = field(g, "iterations", c.gcg.iterations);
    if (g.contains("span")) c.gcg.span = parse_span(g["span"].get<std::string>());
    c.gcg.init_length = field(g, "init_length", c.gcg.init_length);
    c.gcg.filler = field(g, "filler", c.gcg.filler);
    c.gcg.alpha = field(g, "alpha", c.gcg.alpha);
    if (g.contains("loss_threshold") && !g["loss_threshold"].is_null())
      c.gcg.loss_threshold = g["loss_threshold"].get<double>();
    for (TokenId t : field(g, "banned_tokens", std::vector<TokenId>{})) c.gcg.banned_tokens.insert(t);
  }
  if (j.contains("adaptive_spans")) {
    c.adaptive_spans.clear();
    for (const auto& s : j["adaptive_spans"]) c.adaptive_spans.push_back(parse_span(s.get<std::string>()));
  }
  if (j.contains("win_rate") && !j["win_rate"].is_null()) {
    const auto& w = j["win_rate"];
    check_keys(w, {"reference", "judge"}, "win_rate");
    WinRateSpec s;
    if (w.contains("reference")) s.reference = oracle_from_json(w["reference"], "win_rate.reference");
    if (w.contains("judge")) s.judge = oracle_from_json(w["judge"], "win_rate.judge");
    c.win_rate = s;
  }
  c.seed = field(j, "seed", c.seed);
  c.concurrency = field(j, "concurrency", c.concurrency);
  if (j.contains("cache_dir") && !j["cache_dir"].is_null()) c.cache_dir = resolve(j["cache_dir"].get<std::string>());
  c.max_tokens = field(j, "max_tokens", c.max_tokens);
  if (j.contains("sample")) {
    const auto& s = j["sample"];
    check_keys(s, {"tuples", "adaptive_tuples", "clean", "win_rate_prompts"}, "sample");
    c.sample.tuples = field(s, "tuples", c.sample.tuples);
    c.sample.adaptive_tuples = field(s, "adaptive_tuples", c.sample.adaptive_tuples);
    c.sample.clean = field(s, "clean", c.sample.clean);
    c.sample.win_rate_prompts = field(s, "win_rate_prompts", c.sample.win_rate_prompts);
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return from_json(j, path.parent_path());
}

json RunConfig::to_json() const {
  json j;
  j["bench"] = bench.string();
  j["oracle"] = oracle_to_json(oracle);
  j["attacks"] = attacks;
  j["prevention"] = prevention;
  j["detectors"] = json::array();
  for (const auto& d : detectors)
    j["detectors"].push_back({{"name", d.name}, {"kind", d.kind}, {"value", number(d.value)}, {"secret", d.secret},
                              {"steps", d.steps}, {"remote_name", d.remote_name}, {"max_tokens", d.max_tokens}});
  j["threshold"] = {{"method", threshold.method == ThresholdMethod::fixed ? "fixed" : "fpr_budget"},
                    {"fpr_budget", threshold.fpr_budget},
                    {"fixed_threshold", number(threshold.fixed_threshold)}};
  j["metrics"] = metrics;
  j["gcg"] = {{"top_k", gcg.top_k},
              {"candidates_per_iter", gcg.candidates_per_iter},
              {"iterations", gcg.iterations},
              {"span", std::string(to_string(gcg.span))},
              {"init_length", gcg.init_length},
              {"filler", gcg.filler},
              {"alpha", gcg.alpha},
              {"loss_threshold", gcg.loss_threshold ? json(*gcg.loss_threshold) : json(nullptr)},
              {"banned_tokens", std::vector<TokenId>(gcg.banned_tokens.begin(), gcg.banned_tokens.end())}};
  j["adaptive_spans"] = json::array();
  for (auto s : adaptive_spans) j["adaptive_spans"].push_back(std::string(to_string(s)));
  j["win_rate"] = win_rate ? json{{"reference", oracle_to_json(win_rate->reference)},
                                  {"judge", oracle_to_json(win_rate->judge)}}
                           : json(nullptr);
  j["seed"] = seed;
  j["concurrency"] = concurrency;
  j["cache_dir"] = cache_dir ? json(cache_dir->string()) : json(nullptr);
  j["max_tokens"] = max_tokens;
  j["sample"] = {{"tuples", sample.tuples},
                 {"adaptive_tuples", sample.adaptive_tuples},
                 {"clean", sample.clean},
                 {"win_rate_prompts", sample.win_rate_prompts}};
  return j;
}

std::string RunConfig::hash() const {
  // nlohmann::json keeps object keys sorted, so dump() is canonical.
  return sha256_hex(to_json().dump());
}

bool RunConfig::runs(std::string_view metric) const {
  return std::find(metrics.begin(), metrics.end(), metric) != metrics.end();
}

void RunConfig::validate() const {
  for (const auto& m : metrics)
    if (!kMetrics.contains(m)) throw ConfigError("unknown metric \"" + m + "\"");
  for (const auto& a : attacks) {
    const auto k = parse_attack_kind(a);
    if (k == AttackKind::gcg_adaptive)
      throw ConfigError("gcg_adaptive runs in the adaptive pass; list \"adaptive\" under metrics instead");
  }
  for (const auto& p : prevention) (void)prevention_template(p);
  std::set<std::string> names;
  for (const auto& d : detectors) {
    if (!kDetectorKinds.contains(d.kind)) throw ConfigError("unknown detector kind \"" + d.kind + "\"");
    if (d.name.empty()) throw ConfigError("detector name must be non-empty");
    if (!names.insert(d.name).second) throw ConfigError("duplicate detector name \"" + d.name + "\"");
    if (d.kind == "remote" && d.remote_name.empty()) throw ConfigError("remote detector needs remote_name");
  }
  if (threshold.fpr_budget < 0 || threshold.fpr_budget > 1) throw ConfigError("fpr_budget must lie in [0, 1]");
  if (concurrency < 1) throw ConfigError("concurrency must be >= 1");
  if (max_tokens < 1) throw ConfigError("max_tokens must be >= 1");
  gcg.validate();
  if (runs("adaptive")) {
    if (std::none_of(detectors.begin(), detectors.end(), [](const auto& d) { return d.kind == "focus"; }))
      throw ConfigError("the adaptive pass needs a focus detector");
    if (adaptive_spans.empty()) throw ConfigError("adaptive_spans must be non-empty");
    for (auto s : adaptive_spans)
      if (s == OptimizableSpan::none) throw ConfigError("adaptive span must not be none");
  }
  if (runs("win_rate") && !win_rate) throw ConfigError("the win_rate pass needs a win_rate section");
  for (const auto* o : {&oracle, win_rate ? &win_rate->reference : nullptr, win_rate ? &win_rate->judge : nullptr}) {
    if (!o) continue;
    static const std::set<std::string> backends{"toy", "chat", "bridge", "echo", "constant"};
    if (!backends.contains(o->backend)) throw ConfigError("unknown oracle backend \"" + o->backend + "\"");
    if (o->backend == "chat" && o->model.empty()) throw ConfigError("chat backend needs a model name");
  }
}

OraclePtr make_oracle(const OracleSpec& spec) {
  if (spec.backend == "toy") {
    ToyLM::Config cfg;
    cfg.seed = spec.seed;
    cfg.d_model = spec.d_model;
    cfg.max_len = spec.max_len;
    return std::make_shared<const ToyOracle>(std::make_shared<const ToyLM>(cfg),
                                             "toy-s" + std::to_string(spec.seed) + "-d" + std::to_string(spec.d_model));
  }
  if (spec.backend == "echo") return ScriptedOracle::echo();
  if (spec.backend == "constant") return ScriptedOracle::constant(spec.reply);
  if (spec.backend == "chat") return std::make_shared<const ChatClient>(ChatClientConfig::from_env(spec.model));
  if (spec.backend == "bridge") {
    BridgeConfig b;
    b.url = env_or_empty("PIEVAL_API_URL");
    if (b.url.empty()) throw ConfigError("bridge backend: PIEVAL_API_URL is not set");
    b.token = env_or_empty("PIEVAL_API_KEY");
    return std::make_shared<const BridgeClient>(b);
  }
  throw ConfigError("unknown oracle backend \"" + spec.backend + "\"");
}

DetectorPtr make_detector(const DetectorSpec& spec, const OraclePtr& oracle) {
  if (spec.kind == "constant") return std::make_shared<ConstantDetector>(spec.value);
  if (spec.kind == "perplexity") return std::make_shared<PerplexityDetector>(oracle);
  if (spec.kind == "known_answer")
    return std::make_shared<KnownAnswerDetector>(oracle, spec.secret, spec.max_tokens > 0 ? spec.max_tokens : 32);
  if (spec.kind == "llm") return std::make_shared<LlmDetector>(oracle, spec.max_tokens > 0 ? spec.max_tokens : 4);
  if (spec.kind == "focus") return std::make_shared<FocusDetector>(oracle, spec.steps);
  if (spec.kind == "remote") {
    auto bridge = std::dynamic_pointer_cast<const BridgeClient>(oracle);
    if (!bridge) throw ConfigError("remote detector \"" + spec.name + "\" needs the bridge backend");
    return std::make_shared<RemoteDetector>(bridge, spec.remote_name);
  }
  throw ConfigError("unknown detector kind \"" + spec.kind + "\"");
}

std::vector<std::size_t> select_tuples(std::size_t t_size, std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> out;
  if (n == 0 || n >= t_size) {
    out.resize(t_size);
    std::iota(out.begin(), out.end(), std::size_t{0});
    return out;
  }
  auto rng = make_rng(seed, "harness/tuples");
  out = permutation(rng, t_size);
  out.resize(n);
  std::sort(out.begin(), out.end());
  return out;
}

bool RunManifest::ok() const {
  return std::all_of(stages.begin(), stages.end(), [](const auto& s) { return s.ok; });
}

json RunManifest::to_json() const {
  json j;
  j["config_hash"] = config_hash;
  j["code_version"] = code_version;
  j["ok"] = ok();
  j["stages"] = json::array();
  for (const auto& s : stages) {
    json e{{"name", s.name}, {"seconds", s.seconds}, {"ok", s.ok}};
    if (!s.ok) e["error"] = s.error;
    j["stages"].push_back(e);
  }
  j["digests"] = digests;
  j["cache"] = {{"hits", cache_hits}, {"misses", cache_misses}};
  return j;
}

// Execution.

namespace {

class Run {
 public:
  Run(const RunConfig& cfg, fs::path out_dir) : cfg_(cfg), out_(std::move(out_dir)) {}

  RunOutput execute() {
    fs::create_directories(out_);
    records_file_.open(out_ / "records.jsonl", std::ios::binary | std::ios::trunc);
    if (!records_file_) throw Error("cannot write " + (out_ / "records.jsonl").string());
    out_manifest_.config_hash = cfg_.hash();

    stage("setup", [&] { setup(); });
    if (!bench_) return finish();
    if (cfg_.runs("utility")) stage("utility", [&] { utility_pass(); });
    if (cfg_.runs("asv")) stage("asv", [&] { asv_pass(); });
    if (cfg_.runs("detection")) stage("detection", [&] { detection_pass(); });
    if (cfg_.runs("adaptive")) stage("adaptive", [&] { adaptive_pass(); });
    if (cfg_.runs("win_rate")) stage("win_rate", [&] { win_rate_pass(); });
    return finish();
  }

 private:
  template <typename Fn>
  void stage(std::string name, Fn&& fn) {
    StageResult r;
    r.name = std::move(name);
    const auto t0 = std::chrono::steady_clock::now();
    try {
      fn();
    } catch (const std::exception& e) {
      r.ok = false;
      r.error = e.what();
      spdlog::error("stage {} failed: {}", r.name, e.what());
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    spdlog::info("stage {} {} in {:.2f}s", r.name, r.ok ? "done" : "FAILED", r.seconds);
    out_manifest_.stages.push_back(std::move(r));
  }

  OraclePtr cached(OraclePtr inner) {
    if (!cache_) return inner;
    auto c = std::make_shared<const CachedOracle>(std::move(inner), cache_);
    cached_.push_back(c);
    return c;
  }

  void setup() {
    bench_ = read_bundle(cfg_.bench);
    if (cfg_.cache_dir) cache_ = std::make_shared<const ResponseCache>(*cfg_.cache_dir);
    oracle_ = cached(make_oracle(cfg_.oracle));
    like_.model = oracle_->id();
    for (const auto& spec : cfg_.detectors) detectors_.emplace_back(spec.name, make_detector(spec, oracle_));
    for (std::size_t i : select_tuples(bench_->t.size(), cfg_.sample.tuples, cfg_.seed))
      tuples_.push_back(bench_->t[i]);
    spdlog::info("run {}: {} tuples of {}, oracle {}", out_manifest_.config_hash.substr(0, 12), tuples_.size(),
                 bench_->t.size(), oracle_->id());
  }

  void persist(const std::vector<SampleRecord>& recs) {
    for (const auto& r : recs) records_file_ << record_to_json(r) << '\n';
    records_file_.flush();
    if (!records_file_) throw Error("write failed: records.jsonl");
    records_.insert(records_.end(), recs.begin(), recs.end());
  }

  void utility_pass() { persist(absolute_utility(*oracle_, bench_->pr, cfg_.max_tokens, cfg_.concurrency).records); }

  /// Contaminated data for one attack over the selected tuples. Optimizer
  /// attacks run once and are reused by later passes.
  const std::vector<std::string>& texts_for(const std::string& attack) {
    if (auto it = texts_.find(attack); it != texts_.end()) return it->second;
    const auto kind = parse_attack_kind(attack);
    std::vector<std::string> texts(tuples_.size());
    if (kind == AttackKind::gcg) {
      std::vector<GcgTrace> traces(tuples_.size());
      parallel_for(tuples_.size(), cfg_.concurrency, [&](std::size_t i) {
        auto g = cfg_.gcg;
        g.seed = substream_seed(cfg_.seed, "gcg/" + std::to_string(i));
        const AttackObjective objective(*oracle_, tuples_[i]);
        traces[i] = gcg_optimize(tuples_[i], *oracle_, g, objective, cfg_.max_tokens);
        texts[i] = traces[i].contaminated.text;
      });
      write_traces("gcg", traces);
    } else if (kind == AttackKind::combined_adaptive_delimiters) {
      const auto specials = oracle_->special_tokens();
      if (specials.size() < 3)
        throw CapabilityError("combined_adaptive_delimiters: backend exposes no instruction/input/response delimiters");
      const DelimiterSet delims{specials[0], specials[1], specials[2]};
      const std::set<TokenId> banned(specials.begin(), specials.end());
      const auto emb = oracle_->embeddings();
      for (std::size_t i = 0; i < tuples_.size(); ++i) {
        const auto s = structure_with_surrogate_delimiters(
            tuples_[i].injected, delims, emb, banned,
            [&](TokenId t) { return oracle_->detokenize(std::span<const TokenId>(&t, 1)); });
        texts[i] = tuples_[i].target.data + s.text();
      }
    } else {
      const auto z = make_separator(kind);
      for (std::size_t i = 0; i < tuples_.size(); ++i)
        texts[i] = contaminate(tuples_[i].target, tuples_[i].injected, z).text;
    }
    return texts_.emplace(attack, std::move(texts)).first->second;
  }

  void write_traces(const std::string& name, const std::vector<GcgTrace>& traces) {
    fs::create_directories(out_ / "traces");
    std::string body;
    for (std::size_t i = 0; i < traces.size(); ++i) body += trace_to_jsonl(traces[i], i);
    write_file_atomic(out_ / "traces" / (name + ".jsonl"), body);
  }

  void asv_pass() {
    for (const auto& p : cfg_.prevention) {
      const auto tmpl = prevention_template(p);
      for (const auto& attack : cfg_.attacks) {
        const auto name = p == "none" ? attack : attack + "+" + p;
        persist(asv_texts(*oracle_, tuples_, texts_for(attack), name, cfg_.max_tokens, tmpl.render,
                          cfg_.concurrency)
                    .records);
      }
    }
  }

  std::vector<double> score_all(const Detector& d, const std::vector<std::string>& texts) {
    std::vector<double> s(texts.size());
    parallel_for(texts.size(), cfg_.concurrency, [&](std::size_t i) { s[i] = d.score(texts[i]); });
    return s;
  }

  const std::vector<std::string>& clean_set() {
    if (!clean_) {
      const auto& x = bench_->x.data;
      clean_.emplace();
      for (std::size_t i : select_tuples(x.size(), cfg_.sample.clean, substream_seed(cfg_.seed, "clean")))
        clean_->push_back(x[i]);
    }
    return *clean_;
  }

  /// Scores the clean set, sets the threshold, returns fpr records.
  std::vector<SampleRecord> calibrate(const std::string& name, Detector& d) {
    const auto& clean = clean_set();
    const auto scores = score_all(d, clean);
    d.set_threshold(calibrate_threshold(scores, cfg_.threshold));
    like_.detectors[name].threshold = d.threshold();
    calibrated_.insert(name);
    std::vector<SampleRecord> recs(clean.size());
    for (std::size_t i = 0; i < clean.size(); ++i) {
      auto& r = recs[i];
      r.sample_id = "fpr/" + name + "/" + std::to_string(i);
      r.stage = "fpr";
      r.detector = name;
      r.score = scores[i];
      r.label = scores[i] >= d.threshold() ? 1 : 0;
    }
    return recs;
  }

  void detection_pass() {
    for (auto& [name, d] : detectors_) {
      persist(calibrate(name, *d));
      for (const auto& attack : cfg_.attacks) {
        const auto& texts = texts_for(attack);
        const auto scores = score_all(*d, texts);
        std::vector<SampleRecord> recs(texts.size());
        for (std::size_t i = 0; i < texts.size(); ++i) {
          auto& r = recs[i];
          r.sample_id = "fnr/" + name + "/" + attack + "/" + std::to_string(i);
          r.stage = "fnr";
          r.attack = attack;
          r.detector = name;
          r.task_id = tuples_[i].injected.task_id;
          r.score = scores[i];
          r.label = scores[i] >= d->threshold() ? 1 : 0;
        }
        persist(recs);
      }
    }
  }

  void adaptive_pass() {
    auto it = std::find_if(detectors_.begin(), detectors_.end(),
                           [](const auto& e) { return e.second->kind() == "focus"; });
    const auto& [name, det] = *it;
    if (!calibrated_.contains(name)) persist(calibrate(name, *det));
    const auto& focus = static_cast<const FocusDetector&>(*det);
    const EvasionObjective evasion(focus);
    const std::size_t n = std::min(cfg_.sample.adaptive_tuples, tuples_.size());
    for (const auto span : cfg_.adaptive_spans) {
      const std::string attack = "gcg_adaptive/" + std::string(to_string(span));
      std::vector<GcgTrace> traces(n);
      std::vector<SampleRecord> recs(n);
      parallel_for(n, cfg_.concurrency, [&](std::size_t i) {
        auto g = cfg_.gcg;
        g.span = span;
        g.seed = substream_seed(cfg_.seed, "gcg_adaptive/" + std::to_string(i));
        const AttackObjective attack_loss(*oracle_, tuples_[i]);
        const AdaptiveObjective objective(evasion, attack_loss, g.alpha);
        traces[i] = gcg_optimize(tuples_[i], *oracle_, g, objective, cfg_.max_tokens);
        // Both flags are re-derived from the final text and must agree with
        // what the optimizer recorded.
        const auto flags = evaluate_adaptive_success(traces[i], focus, *oracle_, tuples_[i], cfg_.max_tokens);
        if (flags != *traces[i].recorded_flags)
          throw ContractError("adaptive flags changed on recomputation for tuple " + std::to_string(i));
        auto& r = recs[i];
        r.sample_id = "adaptive/" + attack + "/" + std::to_string(i);
        r.stage = "adaptive";
        r.attack = attack;
        r.detector = name;
        r.task_id = tuples_[i].injected.task_id;
        r.raw_response = traces[i].contaminated.text;
        r.score = *traces[i].final_evasion;
        r.label = flags.evaded ? 0 : 1;
        r.evaded = flags.evaded;
        r.attack_succeeded = flags.attack_succeeded;
      });
      write_traces("gcg_adaptive_" + std::string(to_string(span)), traces);
      persist(recs);
    }
  }

  void win_rate_pass() {
    const auto reference = cached(make_oracle(cfg_.win_rate->reference));
    const auto judge = cached(make_oracle(cfg_.win_rate->judge));
    const auto& samples = bench_->pr.samples;
    std::vector<std::string> prompts;
    for (std::size_t i :
         select_tuples(samples.size(), cfg_.sample.win_rate_prompts, substream_seed(cfg_.seed, "win_rate_prompts")))
      prompts.push_back(render_prompt(samples[i].instruction, samples[i].data));
    std::vector<SampleRecord> recs;
    (void)pieval::win_rate(*oracle_, *reference, *judge, prompts, substream_seed(cfg_.seed, "win_rate"),
                           cfg_.max_tokens, &recs, cfg_.concurrency);
    persist(recs);
  }

  RunOutput finish() {
    records_file_.close();
    RunOutput out;
    out.report = aggregate(records_, like_);
    write_file_atomic(out_ / "report.json", report_to_json(out.report).dump(2) + "\n");
    write_file_atomic(out_ / "report.md", render_report(out.report, ReportFormat::markdown));
    write_file_atomic(out_ / "report.csv", render_report(out.report, ReportFormat::csv));
    for (const auto& c : cached_) {
      out_manifest_.cache_hits += c->hits();
      out_manifest_.cache_misses += c->misses();
    }
    for (const auto& entry : fs::recursive_directory_iterator(out_)) {
      if (!entry.is_regular_file() || entry.path().filename() == "manifest.json") continue;
      out_manifest_.digests[fs::relative(entry.path(), out_).generic_string()] = sha256_hex(read_file(entry.path()));
    }
    write_file_atomic(out_ / "manifest.json", out_manifest_.to_json().dump(2) + "\n");
    out.manifest = out_manifest_;
    return out;
  }

  const RunConfig& cfg_;
  fs::path out_;
  std::ofstream records_file_;
  RunManifest out_manifest_;
  std::optional<Benchmark> bench_;
  std::shared_ptr<const ResponseCache> cache_;
  std::vector<std::shared_ptr<const CachedOracle>> cached_;
  OraclePtr oracle_;
  std::vector<std::pair<std::string, DetectorPtr>> detectors_;
  std::vector<InjectionTuple> tuples_;
  std::map<std::string, std::vector<std::string>> texts_;
  std::optional<std::vector<std::string>> clean_;
  std::set<std::string> calibrated_;
  std::vector<SampleRecord> records_;
  EvalReport like_;
};

}  // namespace

RunOutput plan_and_execute(const RunConfig& config, const fs::path& out_dir) {
  config.validate();
  return Run(config, out_dir).execute();
}

// Report serialization.

ordered_json report_to_json(const EvalReport& r) {
  ordered_json j;
  j["model"] = r.model;
  j["utility_by_task"] = r.utility_by_task;
  j["utility_overall"] = r.utility_overall ? ordered_json(*r.utility_overall) : ordered_json(nullptr);
  j["asv_by_attack"] = r.asv_by_attack;
  j["detectors"] = ordered_json::object();
  for (const auto& [name, d] : r.detectors)
    j["detectors"][name] = {{"threshold", number(d.threshold)},
                            {"fpr", d.fpr},
                            {"fnr_by_attack", d.fnr_by_attack},
                            {"auc_by_attack", d.auc_by_attack}};
  j["adaptive"] = ordered_json::object();
  for (const auto& [name, a] : r.adaptive)
    j["adaptive"][name] = {{"n", a.n},
                           {"evaded", a.evaded},
                           {"attack_succeeded", a.attack_succeeded},
                           {"evaded_and_succeeded", a.evaded_and_succeeded},
                           {"fnr", a.fnr}};
  if (r.win_rate)
    j["win_rate"] = {{"value", r.win_rate->value ? ordered_json(*r.win_rate->value) : ordered_json(nullptr)},
                     {"n", r.win_rate->n},
                     {"wins", r.win_rate->wins},
                     {"excluded", r.win_rate->excluded}};
  else
    j["win_rate"] = nullptr;
  j["counts"] = r.counts;
  return j;
}

EvalReport report_from_json(const json& j) {
  EvalReport r;
  r.model = j.at("model").get<std::string>();
  r.utility_by_task = j.at("utility_by_task").get<std::map<std::string, double>>();
  if (!j.at("utility_overall").is_null()) r.utility_overall = j["utility_overall"].get<double>();
  r.asv_by_attack = j.at("asv_by_attack").get<std::map<std::string, double>>();
  for (const auto& [name, d] : j.at("detectors").items()) {
    auto& s = r.detectors[name];
    s.threshold = number_from(d.at("threshold"));
    s.fpr = d.at("fpr").get<double>();
    s.fnr_by_attack = d.at("fnr_by_attack").get<std::map<std::string, double>>();
    s.auc_by_attack = d.at("auc_by_attack").get<std::map<std::string, double>>();
  }
  for (const auto& [name, a] : j.at("adaptive").items())
    r.adaptive[name] = {a.at("n").get<std::size_t>(), a.at("evaded").get<std::size_t>(),
                        a.at("attack_succeeded").get<std::size_t>(), a.at("evaded_and_succeeded").get<std::size_t>(),
                        a.at("fnr").get<double>()};
  if (!j.at("win_rate").is_null()) {
    const auto& w = j["win_rate"];
    WinRate wr;
    if (!w.at("value").is_null()) wr.value = w["value"].get<double>();
    wr.n = w.at("n").get<std::size_t>();
    wr.wins = w.at("wins").get<std::size_t>();
    wr.excluded = w.at("excluded").get<std::size_t>();
    r.win_rate = wr;
  }
  r.counts = j.at("counts").get<std::map<std::string, std::size_t>>();
  return r;
}

ReportFormat parse_report_format(std::string_view name) {
  if (name == "markdown" || name == "md") return ReportFormat::markdown;
  if (name == "csv") return ReportFormat::csv;
  throw ConfigError("unknown report format \"" + std::string(name) + "\"");
}

namespace {

std::string csv_field(std::string_view v) {
  if (v.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(v);
  std::string out = "\"";
  for (char c : v) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string render_csv(const EvalReport& r) {
  std::string out = "section,key,subkey,value\n";
  auto row = [&](std::string_view section, std::string_view key, std::string_view sub, std::string_view value) {
    out += csv_field(section) + "," + csv_field(key) + "," + csv_field(sub) + "," + csv_field(value) + "\n";
  };
  auto count = [](std::size_t n) { return std::to_string(n); };
  if (!r.model.empty()) row("model", "", "", r.model);
  for (const auto& [k, v] : r.utility_by_task) row("utility", k, "", fmt_exact(v));
  if (r.utility_overall) row("utility_overall", "", "", fmt_exact(*r.utility_overall));
  for (const auto& [k, v] : r.asv_by_attack) row("asv", k, "", fmt_exact(v));
  for (const auto& [name, d] : r.detectors) {
    row("threshold", name, "", fmt_exact(d.threshold));
    row("fpr", name, "", fmt_exact(d.fpr));
    for (const auto& [a, v] : d.fnr_by_attack) row("fnr", name, a, fmt_exact(v));
    for (const auto& [a, v] : d.auc_by_attack) row("auc", name, a, fmt_exact(v));
  }
  for (const auto& [name, a] : r.adaptive) {
    row("adaptive_n", name, "", count(a.n));
    row("adaptive_evaded", name, "", count(a.evaded));
    row("adaptive_attack_succeeded", name, "", count(a.attack_succeeded));
    row("adaptive_evaded_and_succeeded", name, "", count(a.evaded_and_succeeded));
    row("adaptive_fnr", name, "", fmt_exact(a.fnr));
  }
  if (r.win_rate) {
    row("win_rate", "", "", r.win_rate->value ? fmt_exact(*r.win_rate->value) : "");
    row("win_rate_n", "", "", count(r.win_rate->n));
    row("win_rate_wins", "", "", count(r.win_rate->wins));
    row("win_rate_excluded", "", "", count(r.win_rate->excluded));
  }
  for (const auto& [stage, n] : r.counts) row("count", stage, "", count(n));
  return out;
}

std::string render_markdown(const EvalReport& r) {
  std::ostringstream md;
  md << "# Evaluation report\n\nModel: `" << r.model << "`\n\n";

  md << "## Utility\n\n| Task | Utility |\n|---|---|\n";
  for (const auto& [k, v] : r.utility_by_task) md << "| " << k << " | " << fmt_short(v) << " |\n";
  if (r.utility_overall) md << "| overall | " << fmt_short(*r.utility_overall) << " |\n";

  md << "\n## Attack success value\n\n| Model |";
  for (const auto& [a, v] : r.asv_by_attack) md << ' ' << a << " |";
  md << "\n|---|";
  for (std::size_t i = 0; i < r.asv_by_attack.size(); ++i) md << "---|";
  md << '\n';
  if (!r.asv_by_attack.empty()) {
    md << "| " << r.model << " |";
    for (const auto& [a, v] : r.asv_by_attack) md << ' ' << fmt_short(v) << " |";
    md << '\n';
  }

  std::set<std::string> attacks;
  for (const auto& [name, d] : r.detectors)
    for (const auto& [a, v] : d.fnr_by_attack) attacks.insert(a);
  md << "\n## Detection\n\n| Detector | Threshold | FPR |";
  for (const auto& a : attacks) md << " FNR " << a << " |";
  for (const auto& a : attacks) md << " AUC " << a << " |";
  md << "\n|---|---|---|";
  for (std::size_t i = 0; i < 2 * attacks.size(); ++i) md << "---|";
  md << '\n';
  auto cell = [](const std::map<std::string, double>& m, const std::string& k) {
    const auto it = m.find(k);
    return it == m.end() ? std::string("-") : fmt_short(it->second);
  };
  for (const auto& [name, d] : r.detectors) {
    md << "| " << name << " | " << fmt_short(d.threshold) << " | " << fmt_short(d.fpr) << " |";
    for (const auto& a : attacks) md << ' ' << cell(d.fnr_by_attack, a) << " |";
    for (const auto& a : attacks) md << ' ' << cell(d.auc_by_attack, a) << " |";
    md << '\n';
  }

  md << "\n## Adaptive attacks\n\n| Attack | n | Evaded | Attack succeeded | Evaded and succeeded | FNR |\n"
        "|---|---|---|---|---|---|\n";
  for (const auto& [name, a] : r.adaptive)
    md << "| " << name << " | " << a.n << " | " << a.evaded << " | " << a.attack_succeeded << " | "
       << a.evaded_and_succeeded << " | " << fmt_short(a.fnr) << " |\n";

  md << "\n## Win rate\n\n| Win rate | n | Wins | Excluded |\n|---|---|---|---|\n";
  if (r.win_rate)
    md << "| " << (r.win_rate->value ? fmt_short(*r.win_rate->value) : "-") << " | " << r.win_rate->n << " | "
       << r.win_rate->wins << " | " << r.win_rate->excluded << " |\n";
  return md.str();
}

std::vector<std::string> split_csv_line(std::string_view csv, std::size_t& at, std::size_t line) {
  std::vector<std::string> fields(1);
  bool quoted = false;
  while (at < csv.size()) {
    const char c = csv[at++];
    if (quoted) {
      if (c == '"') {
        if (at < csv.size() && csv[at] == '"') {
          fields.back() += '"';
          ++at;
        } else {
          quoted = false;
        }
      } else {
        fields.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.emplace_back();
    } else if (c == '\n') {
      return fields;
    } else {
      fields.back() += c;
    }
  }
  if (quoted) throw ParseError(line, "unterminated quoted field");
  return fields;
}

double parse_double(const std::string& s, std::size_t line) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || *end != '\0') throw ParseError(line, "not a number: \"" + s + "\"");
  return v;
}

std::size_t parse_count(const std::string& s, std::size_t line) {
  std::size_t pos = 0;
  try {
    const auto v = std::stoull(s, &pos);
    if (pos == s.size()) return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
  }
  throw ParseError(line, "not a count: \"" + s + "\"");
}

}  // namespace

std::string render_report(const EvalReport& report, ReportFormat format) {
  return format == ReportFormat::csv ? render_csv(report) : render_markdown(report);
}

EvalReport parse_report_csv(std::string_view csv) {
  EvalReport r;
  std::size_t at = 0, line = 1;
  const auto header = split_csv_line(csv, at, line);
  if (header != std::vector<std::string>{"section", "key", "subkey", "value"})
    throw ParseError(1, "unexpected report csv header");
  auto wr = [&]() -> WinRate& {
    if (!r.win_rate) r.win_rate.emplace();
    return *r.win_rate;
  };
  while (at < csv.size()) {
    ++line;
    const auto f = split_csv_line(csv, at, line);
    if (f.size() != 4) throw ParseError(line, "expected 4 fields, got " + std::to_string(f.size()));
    const auto& [section, key, sub, value] = std::tie(f[0], f[1], f[2], f[3]);
    if (section == "model") r.model = value;
    else if (section == "utility") r.utility_by_task[key] = parse_double(value, line);
    else if (section == "utility_overall") r.utility_overall = parse_double(value, line);
    else if (section == "asv") r.asv_by_attack[key] = parse_double(value, line);
    else if (section == "threshold") r.detectors[key].threshold = parse_double(value, line);
    else if (section == "fpr") r.detectors[key].fpr = parse_double(value, line);
    else if (section == "fnr") r.detectors[key].fnr_by_attack[sub] = parse_double(value, line);
    else if (section == "auc") r.detectors[key].auc_by_attack[sub] = parse_double(value, line);
    else if (section == "adaptive_n") r.adaptive[key].n = parse_count(value, line);
    else if (section == "adaptive_evaded") r.adaptive[key].evaded = parse_count(value, line);
    else if (section == "adaptive_attack_succeeded") r.adaptive[key].attack_succeeded = parse_count(value, line);
    else if (section == "adaptive_evaded_and_succeeded") r.adaptive[key].evaded_and_succeeded = parse_count(value, line);
    else if (section == "adaptive_fnr") r.adaptive[key].fnr = parse_double(value, line);
    else if (section == "win_rate") {
      if (!value.empty()) wr().value = parse_double(value, line);
      else wr();
    } else if (section == "win_rate_n") wr().n = parse_count(value, line);
    else if (section == "win_rate_wins") wr().wins = parse_count(value, line);
    else if (section == "win_rate_excluded") wr().excluded = parse_count(value, line);
    else if (section == "count") r.counts[key] = parse_count(value, line);
    else throw ParseError(line, "unknown section \"" + section + "\"");
  }
  return r;
}

}  // namespace pieval
