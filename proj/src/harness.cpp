#include "cmcl/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include "cmcl/checkpoint.hpp"
#include "cmcl/gradcheck.hpp"

namespace cmcl {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config parsing
// ---------------------------------------------------------------------------

namespace {

std::string join_path(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

/// Typed access to one JSON object that rejects unknown keys.
class Fields {
 public:
  Fields(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(path_, "expected an object");
  }

  bool has(const std::string& key) const { return obj_.contains(key); }

  const json& raw(const std::string& key) {
    if (!obj_.contains(key)) throw ConfigError(join_path(path_, key), "missing required field");
    seen_.insert(key);
    return obj_.at(key);
  }

  double number(const std::string& key) {
    const json& v = raw(key);
    if (!v.is_number()) throw ConfigError(join_path(path_, key), "expected a number");
    return v.get<double>();
  }
  double number(const std::string& key, double fallback) {
    return has(key) ? number(key) : fallback;
  }

  std::uint64_t count(const std::string& key) {
    const json& v = raw(key);
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
      throw ConfigError(join_path(path_, key), "expected a non-negative integer");
    }
    return v.get<std::uint64_t>();
  }
  std::uint64_t count(const std::string& key, std::uint64_t fallback) {
    return has(key) ? count(key) : fallback;
  }

  bool boolean(const std::string& key, bool fallback) {
    if (!has(key)) return fallback;
    const json& v = raw(key);
    if (!v.is_boolean()) throw ConfigError(join_path(path_, key), "expected true or false");
    return v.get<bool>();
  }

  std::string text(const std::string& key) {
    const json& v = raw(key);
    if (!v.is_string()) throw ConfigError(join_path(path_, key), "expected a string");
    return v.get<std::string>();
  }
  std::string text(const std::string& key, const std::string& fallback) {
    return has(key) ? text(key) : fallback;
  }

  std::vector<double> numbers(const std::string& key) {
    const json& v = raw(key);
    if (!v.is_array()) throw ConfigError(join_path(path_, key), "expected an array of numbers");
    std::vector<double> out;
    for (const json& e : v) {
      if (!e.is_number()) throw ConfigError(join_path(path_, key), "expected an array of numbers");
      out.push_back(e.get<double>());
    }
    return out;
  }

  std::vector<std::uint64_t> counts(const std::string& key) {
    const json& v = raw(key);
    if (!v.is_array()) throw ConfigError(join_path(path_, key), "expected an array of integers");
    std::vector<std::uint64_t> out;
    for (const json& e : v) {
      if (!e.is_number_integer() || e.get<std::int64_t>() < 0) {
        throw ConfigError(join_path(path_, key), "expected an array of non-negative integers");
      }
      out.push_back(e.get<std::uint64_t>());
    }
    return out;
  }

  Fields child(const std::string& key) { return Fields(raw(key), join_path(path_, key)); }

  std::string path(const std::string& key) const { return join_path(path_, key); }

  /// Throws on keys that were never read.
  void finish() const {
    for (const auto& [key, value] : obj_.items()) {
      if (!seen_.count(key)) throw ConfigError(join_path(path_, key), "unknown field");
    }
  }

 private:
  const json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

GeneratorKind parse_kind(const std::string& s, const std::string& field) {
  if (s == "rotated-gaussians") return GeneratorKind::RotatedGaussians;
  if (s == "spurious-feature") return GeneratorKind::SpuriousFeature;
  throw ConfigError(field, "unknown generator '" + s + "'");
}

const char* kind_name(GeneratorKind k) {
  return k == GeneratorKind::RotatedGaussians ? "rotated-gaussians" : "spurious-feature";
}

HullMode parse_hull(const std::string& s, const std::string& field) {
  if (s == "interpolated") return HullMode::Interpolated;
  if (s == "extrapolated") return HullMode::Extrapolated;
  if (s == "unconstrained") return HullMode::Unconstrained;
  throw ConfigError(field, "unknown hull mode '" + s + "'");
}

const char* hull_name(HullMode h) {
  switch (h) {
    case HullMode::Interpolated:
      return "interpolated";
    case HullMode::Extrapolated:
      return "extrapolated";
    case HullMode::Unconstrained:
      return "unconstrained";
  }
  return "unconstrained";
}

ScenarioSpec parse_scenario(Fields f) {
  ScenarioSpec s;
  s.name = f.text("name", s.name);
  s.kind = parse_kind(f.text("kind"), f.path("kind"));
  s.class_count = f.count("class_count", s.class_count);
  s.samples_per_domain = f.count("samples_per_domain", s.samples_per_domain);
  s.source_params = f.numbers("source_params");
  s.unseen_param = f.number("unseen_param");
  s.hull = parse_hull(f.text("hull", "unconstrained"), f.path("hull"));
  s.noise = f.number("noise", s.noise);
  s.signal = f.number("signal", s.signal);
  s.input_dim = f.count("input_dim", s.input_dim);
  s.seed = f.count("seed", s.seed);
  f.finish();
  if (s.name.empty() || s.name.find_first_of("/\\") != std::string::npos) {
    throw ConfigError(f.path("name"), "must be a non-empty name without path separators");
  }
  return s;
}

OptimizerSpec parse_optimizer(Fields f, OptimizerSpec o) {
  const std::string kind = f.text("kind", o.kind == OptimizerKind::MomentumSgd ? "sgd" : "adamw");
  if (kind == "sgd") {
    o.kind = OptimizerKind::MomentumSgd;
  } else if (kind == "adamw") {
    o.kind = OptimizerKind::AdamW;
  } else {
    throw ConfigError(f.path("kind"), "expected 'sgd' or 'adamw'");
  }
  o.lr = f.number("lr", o.lr);
  o.momentum = f.number("momentum", o.momentum);
  o.beta1 = f.number("beta1", o.beta1);
  o.beta2 = f.number("beta2", o.beta2);
  o.eps = f.number("eps", o.eps);
  o.weight_decay = f.number("weight_decay", o.weight_decay);
  f.finish();
  return o;
}

ModelSpec parse_model(Fields f) {
  ModelSpec m;
  if (f.has("hidden")) {
    m.hidden.clear();
    for (std::uint64_t w : f.counts("hidden")) m.hidden.push_back(static_cast<std::size_t>(w));
  }
  m.feature_dim = f.count("feature_dim", m.feature_dim);
  m.relu_last = f.boolean("relu_last", m.relu_last);
  f.finish();
  return m;
}

TrainConfig parse_train(Fields f) {
  TrainConfig t;
  t.outer_iters = f.count("outer_iters", t.outer_iters);
  t.stage_a_iters = f.count("stage_a_iters", t.stage_a_iters);
  t.stage_b_iters = f.count("stage_b_iters", t.stage_b_iters);
  t.stage_c_iters = f.count("stage_c_iters", t.stage_c_iters);
  t.lambda_mean = f.number("lambda_mean", t.lambda_mean);
  t.lambda_cov = f.number("lambda_cov", t.lambda_cov);
  t.ema_alpha = f.number("ema_alpha", t.ema_alpha);
  t.batch_size = f.count("batch_size", t.batch_size);
  t.eval_every = f.count("eval_every", t.eval_every);
  t.probe_rows = f.count("probe_rows", t.probe_rows);
  if (f.has("extractor_optimizer")) {
    t.extractor_optimizer = parse_optimizer(f.child("extractor_optimizer"), t.extractor_optimizer);
  }
  if (f.has("classifier_optimizer")) {
    t.classifier_optimizer =
        parse_optimizer(f.child("classifier_optimizer"), t.classifier_optimizer);
  }
  if (f.has("model")) t.model = parse_model(f.child("model"));
  f.finish();
  return t;
}

json optimizer_to_json(const OptimizerSpec& o) {
  return {{"kind", o.kind == OptimizerKind::MomentumSgd ? "sgd" : "adamw"},
          {"lr", o.lr},
          {"momentum", o.momentum},
          {"beta1", o.beta1},
          {"beta2", o.beta2},
          {"eps", o.eps},
          {"weight_decay", o.weight_decay}};
}

}  // namespace

RunConfig parse_run_config(const json& doc) {
  Fields root(doc, "");
  const json& version = root.raw("schema_version");
  if (!version.is_number_integer() || version.get<int>() != kSchemaVersion) {
    throw ConfigError("schema_version", "expected " + std::to_string(kSchemaVersion));
  }
  RunConfig cfg;
  cfg.scenario = parse_scenario(root.child("scenario"));
  if (root.has("train")) cfg.train = parse_train(root.child("train"));
  const std::string protocol = root.text("protocol", "fixed-unseen");
  if (protocol == "fixed-unseen") {
    cfg.protocol = Protocol::FixedUnseen;
  } else if (protocol == "leave-one-domain-out") {
    cfg.protocol = Protocol::LeaveOneDomainOut;
  } else {
    throw ConfigError("protocol", "expected 'fixed-unseen' or 'leave-one-domain-out'");
  }
  cfg.val_fraction = root.number("val_fraction", cfg.val_fraction);
  if (root.has("seeds")) cfg.seeds = root.counts("seeds");
  root.finish();

  if (cfg.seeds.empty()) throw ConfigError("seeds", "at least one seed is required");
  if (std::set<std::uint64_t>(cfg.seeds.begin(), cfg.seeds.end()).size() != cfg.seeds.size()) {
    throw ConfigError("seeds", "seeds must be distinct");
  }
  try {
    cfg.scenario.validate();
  } catch (const ValidationError& e) {
    throw ConfigError("scenario." + e.field(), e.what());
  }
  try {
    cfg.train.validate();
  } catch (const ValidationError& e) {
    throw ConfigError(e.field(), e.what());
  }
  if (!(cfg.val_fraction > 0.0 && cfg.val_fraction < 1.0)) {
    throw ConfigError("val_fraction", "must lie strictly between 0 and 1");
  }
  return cfg;
}

RunConfig parse_run_config_text(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    // Convert the byte position into a 1-based line number.
    const std::size_t upto = std::min<std::size_t>(e.byte, text.size());
    const auto line = static_cast<std::size_t>(
        1 + std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(upto), '\n'));
    throw ConfigError("", e.what(), line);
  }
  return parse_run_config(doc);
}

json run_config_to_json(const RunConfig& cfg) {
  const ScenarioSpec& s = cfg.scenario;
  const TrainConfig& t = cfg.train;
  return {
      {"schema_version", kSchemaVersion},
      {"scenario",
       {{"name", s.name},
        {"kind", kind_name(s.kind)},
        {"class_count", s.class_count},
        {"samples_per_domain", s.samples_per_domain},
        {"source_params", s.source_params},
        {"unseen_param", s.unseen_param},
        {"hull", hull_name(s.hull)},
        {"noise", s.noise},
        {"signal", s.signal},
        {"input_dim", s.input_dim},
        {"seed", s.seed}}},
      {"train",
       {{"outer_iters", t.outer_iters},
        {"stage_a_iters", t.stage_a_iters},
        {"stage_b_iters", t.stage_b_iters},
        {"stage_c_iters", t.stage_c_iters},
        {"lambda_mean", t.lambda_mean},
        {"lambda_cov", t.lambda_cov},
        {"ema_alpha", t.ema_alpha},
        {"batch_size", t.batch_size},
        {"eval_every", t.eval_every},
        {"probe_rows", t.probe_rows},
        {"extractor_optimizer", optimizer_to_json(t.extractor_optimizer)},
        {"classifier_optimizer", optimizer_to_json(t.classifier_optimizer)},
        {"model",
         {{"hidden", t.model.hidden},
          {"feature_dim", t.model.feature_dim},
          {"relu_last", t.model.relu_last}}}}},
      {"protocol", cfg.protocol == Protocol::FixedUnseen ? "fixed-unseen" : "leave-one-domain-out"},
      {"val_fraction", cfg.val_fraction},
      {"seeds", cfg.seeds}};
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError(assignment, "override must look like key.path=value");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
    if (key.empty()) throw ConfigError(path, "empty path component in override");
    if (!node->is_object()) throw ConfigError(path, "override descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

// ---------------------------------------------------------------------------
// Registered scenarios
// ---------------------------------------------------------------------------

std::vector<std::string> registered_scenarios() { return {"spurious", "rotated"}; }

RunConfig registered_scenario(const std::string& name) {
  RunConfig cfg;
  TrainConfig& t = cfg.train;
  if (name == "spurious") {
    ScenarioSpec& s = cfg.scenario;
    s.name = "spurious";
    s.kind = GeneratorKind::SpuriousFeature;
    s.class_count = 2;
    s.samples_per_domain = 2000;
    s.source_params = {0.9, 0.7, 0.5};
    s.unseen_param = -0.9;
    s.hull = HullMode::Extrapolated;
    s.noise = 1.0;
    s.signal = 2.0;
    s.input_dim = 6;
    t.model = {{32}, 16, true};
    t.outer_iters = 150;
    t.stage_a_iters = 1;
    t.stage_b_iters = 8;
    t.stage_c_iters = 6;
    t.lambda_mean = 0.001;
    t.lambda_cov = 0.01;
    t.ema_alpha = 0.001;
    t.batch_size = 64;
    // Heads on momentum SGD: AdamW's fixed-size steps keep the domain heads
    // jittering, which swamps the alignment diagnostic at this scale.
    t.extractor_optimizer = OptimizerSpec{OptimizerKind::MomentumSgd, 0.05, 0.9, 0.9, 0.999, 1e-8, 5e-3};
    t.classifier_optimizer = OptimizerSpec{OptimizerKind::MomentumSgd, 0.2, 0.9, 0.9, 0.999, 1e-8, 5e-4};
    cfg.seeds = {0, 1, 2, 3, 4};
  } else if (name == "rotated") {
    ScenarioSpec& s = cfg.scenario;
    s.name = "rotated";
    s.kind = GeneratorKind::RotatedGaussians;
    s.class_count = 4;
    s.samples_per_domain = 1200;
    s.source_params = {0.0, 30.0, 60.0};
    s.unseen_param = 45.0;
    s.hull = HullMode::Interpolated;
    s.noise = 0.6;
    s.signal = 2.0;
    s.input_dim = 4;
    t.model = {{32}, 16, true};
    t.outer_iters = 100;
    t.extractor_optimizer = OptimizerSpec{OptimizerKind::MomentumSgd, 0.05, 0.9, 0.9, 0.999, 1e-8, 5e-3};
    t.classifier_optimizer = OptimizerSpec{OptimizerKind::MomentumSgd, 0.2, 0.9, 0.9, 0.999, 1e-8, 5e-4};
    cfg.seeds = {0, 1, 2};
  } else {
    std::string known;
    for (const auto& n : registered_scenarios()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("scenario", "unknown scenario '" + name + "' (known: " + known + ")");
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

namespace {

double sample_std(const std::vector<double>& v, double mean) {
  if (v.size() < 2) return 0.0;
  double s = 0.0;
  for (double x : v) s += (x - mean) * (x - mean);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

std::optional<double> median_of(std::vector<double> v) {
  if (v.empty()) return std::nullopt;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> optional_from(const json& v) {
  if (v.is_null()) return std::nullopt;
  return v.get<double>();
}

}  // namespace

void RunResult::aggregate() {
  aggregates.clear();
  std::vector<std::pair<std::string, std::string>> keys;
  for (const RunRow& r : rows) {
    const auto key = std::make_pair(r.method, r.held_out);
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) keys.push_back(key);
  }
  for (const auto& [method, held_out] : keys) {
    std::vector<double> target, online, ratios;
    for (const RunRow& r : rows) {
      if (r.method != method || r.held_out != held_out) continue;
      target.push_back(r.acc_target);
      online.push_back(r.acc_online);
      if (r.align_at_10 && r.align_final && *r.align_at_10 > 0.0) {
        ratios.push_back(*r.align_final / *r.align_at_10);
      }
    }
    RunAggregate a;
    a.method = method;
    a.held_out = held_out;
    a.runs = target.size();
    a.mean_acc_target = mean_of(target);
    a.std_acc_target = sample_std(target, a.mean_acc_target);
    a.mean_acc_online = mean_of(online);
    a.std_acc_online = sample_std(online, a.mean_acc_online);
    a.median_align_ratio = median_of(ratios);
    aggregates.push_back(a);
  }
}

json run_result_to_json(const RunResult& result) {
  json rows = json::array();
  for (const RunRow& r : result.rows) {
    rows.push_back({{"seed", r.seed},
                    {"method", r.method},
                    {"held_out", r.held_out},
                    {"acc_online", r.acc_online},
                    {"acc_target", r.acc_target},
                    {"best_outer_iter", r.best_outer_iter},
                    {"align_at_10", optional_json(r.align_at_10)},
                    {"align_final", optional_json(r.align_final)}});
  }
  json aggs = json::array();
  for (const RunAggregate& a : result.aggregates) {
    aggs.push_back({{"method", a.method},
                    {"held_out", a.held_out},
                    {"runs", a.runs},
                    {"mean_acc_target", a.mean_acc_target},
                    {"std_acc_target", a.std_acc_target},
                    {"mean_acc_online", a.mean_acc_online},
                    {"std_acc_online", a.std_acc_online},
                    {"median_align_ratio", optional_json(a.median_align_ratio)}});
  }
  return {{"schema_version", kSchemaVersion},
          {"scenario", result.scenario},
          {"rows", rows},
          {"aggregates", aggs}};
}

RunResult run_result_from_json(const json& doc) {
  RunResult result;
  try {
    result.scenario = doc.at("scenario").get<std::string>();
    for (const json& r : doc.at("rows")) {
      result.rows.push_back({r.at("seed").get<std::uint64_t>(), r.at("method").get<std::string>(),
                             r.at("held_out").get<std::string>(), r.at("acc_online").get<double>(),
                             r.at("acc_target").get<double>(),
                             r.at("best_outer_iter").get<std::size_t>(),
                             optional_from(r.at("align_at_10")),
                             optional_from(r.at("align_final"))});
    }
  } catch (const json::exception& e) {
    throw ValidationError("summary", e.what());
  }
  result.aggregate();
  const json& stored = doc.at("aggregates");
  if (!stored.is_array() || stored.size() != result.aggregates.size()) {
    throw ValidationError("summary.aggregates", "aggregate count does not match rows");
  }
  auto close = [](double a, double b) { return std::abs(a - b) <= 1e-12; };
  for (std::size_t i = 0; i < stored.size(); ++i) {
    const RunAggregate& a = result.aggregates[i];
    const json& s = stored[i];
    const auto ratio = optional_from(s.at("median_align_ratio"));
    const bool ok = s.at("method") == a.method && s.at("held_out") == a.held_out &&
                    s.at("runs").get<std::size_t>() == a.runs &&
                    close(s.at("mean_acc_target").get<double>(), a.mean_acc_target) &&
                    close(s.at("std_acc_target").get<double>(), a.std_acc_target) &&
                    close(s.at("mean_acc_online").get<double>(), a.mean_acc_online) &&
                    close(s.at("std_acc_online").get<double>(), a.std_acc_online) &&
                    ratio.has_value() == a.median_align_ratio.has_value() &&
                    (!ratio || close(*ratio, *a.median_align_ratio));
    if (!ok) {
      throw ValidationError("summary.aggregates[" + std::to_string(i) + "]",
                            "stored aggregate disagrees with per-seed rows");
    }
  }
  return result;
}

RunResult load_run_result(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError("summary", e.what());
  }
  return run_result_from_json(doc);
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

namespace {

struct Job {
  std::uint64_t seed;
  std::size_t held_out;
  std::string method;
};

std::optional<double> align_at_outer(const std::vector<MetricsRow>& metrics, std::size_t outer) {
  std::optional<double> v;
  for (const MetricsRow& r : metrics) {
    if (r.outer_iter == outer) v = r.align_symkl;
  }
  return v;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

template <typename Fn>
void run_parallel(std::size_t count, unsigned jobs, Fn&& fn) {
  std::vector<std::exception_ptr> errors(count);
  auto body = [&](std::size_t i) {
    try {
      fn(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  if (jobs <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> workers;
    for (unsigned w = 0; w < std::min<std::size_t>(jobs, count); ++w) {
      workers.emplace_back([&] {
        for (std::size_t i = next++; i < count; i = next++) body(i);
      });
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

RunResult run_experiment(const RunConfig& cfg, const ExperimentOptions& options) {
  cfg.scenario.validate();
  cfg.train.validate();
  const std::size_t domains = cfg.scenario.source_count() + 1;
  std::vector<std::size_t> held_out;
  if (cfg.protocol == Protocol::FixedUnseen) {
    held_out = {domains - 1};
  } else {
    for (std::size_t d = 0; d < domains; ++d) held_out.push_back(d);
  }

  std::vector<Job> jobs;
  for (std::uint64_t seed : cfg.seeds) {
    for (std::size_t h : held_out) {
      for (const std::string& m : options.methods) {
        if (m != "cmcl" && m != "erm") throw ConfigError("method", "unknown method '" + m + "'");
        jobs.push_back({seed, h, m});
      }
    }
  }

  std::vector<RunRow> rows(jobs.size());
  run_parallel(jobs.size(), options.jobs, [&](std::size_t j) {
    const Job& job = jobs[j];
    ScenarioSpec scenario = cfg.scenario;
    scenario.seed = job.seed;
    const std::vector<DomainDataset> all = generate(scenario);

    std::vector<DomainDataset> train_sets, val_sets;
    const Rng split_root = Rng(job.seed).substream("split");
    for (std::size_t d = 0; d < all.size(); ++d) {
      if (d == job.held_out) continue;
      auto [tr, va] = split_train_val(all[d], cfg.val_fraction, split_root.substream(d).key());
      train_sets.push_back(std::move(tr));
      val_sets.push_back(std::move(va));
    }
    TrainConfig tc = job.method == "erm" ? cfg.train.erm_baseline() : cfg.train;
    tc.seed = job.seed;
    const TrainResult result = train(tc, train_sets, val_sets);

    const DomainDataset& unseen = all[job.held_out];
    RunRow row;
    row.seed = job.seed;
    row.method = job.method;
    row.held_out = unseen.name;
    row.acc_target = accuracy(result.best.ema.extractor(), result.best.ema.global_classifier(), unseen);
    row.acc_online = accuracy(result.best.model.extractor, result.best.model.global_classifier, unseen);
    row.best_outer_iter = result.best_outer_iter;
    row.align_at_10 = align_at_outer(result.metrics, 10);
    if (!result.metrics.empty()) row.align_final = result.metrics.back().align_symkl;
    rows[j] = row;

    if (options.write_files) {
      const auto dir = options.out_dir / cfg.scenario.name / ("seed_" + std::to_string(job.seed)) /
                       unseen.name / job.method;
      std::filesystem::create_directories(dir);
      std::ostringstream csv;
      write_metrics_csv(csv, result.metrics);
      write_text(dir / "metrics.csv", csv.str());
      checkpoint_save(result.model, result.ema, dir / "checkpoint.bin");
      checkpoint_save(result.best.model, result.best.ema, dir / "best.bin");
      dataset_write(unseen, dir / "heldout.cmds");
      RunResult single{cfg.scenario.name, {row}, {}};
      single.aggregate();
      write_text(dir / "summary.json", run_result_to_json(single).dump(2) + "\n");
    }
  });

  RunResult result{cfg.scenario.name, std::move(rows), {}};
  result.aggregate();
  return result;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

namespace {

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("--config", "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json load_config_json(const std::filesystem::path& path) {
  const std::string text = read_text(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error&) {
    parse_run_config_text(text);  // rethrows with a line number
    throw;
  }
}

RunConfig resolve_config(json doc, const CommonOptions& opts) {
  for (const std::string& o : opts.overrides) apply_override(doc, o);
  RunConfig cfg = parse_run_config(doc);
  if (opts.seed) cfg.seeds = {*opts.seed};
  return cfg;
}

template <typename Fn>
int guard(std::ostream& err, Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ValidationError& e) {
    err << "error: invalid field '" << e.field() << "': " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(digits) << v;
  return ss.str();
}

void print_result_table(const RunResult& r, std::ostream& out) {
  out << "seed  method  held_out                    acc_target  acc_online  align@10    align_final\n";
  for (const RunRow& row : r.rows) {
    out << std::left << std::setw(6) << row.seed << std::setw(8) << row.method << std::setw(28)
        << row.held_out << std::setw(12) << fixed(row.acc_target) << std::setw(12)
        << fixed(row.acc_online) << std::setw(12)
        << (row.align_at_10 ? fixed(*row.align_at_10, 6) : "-")
        << (row.align_final ? fixed(*row.align_final, 6) : "-") << std::right << '\n';
  }
  out << "\nmethod  held_out                    runs  mean_target  std_target  mean_online  align_ratio\n";
  for (const RunAggregate& a : r.aggregates) {
    out << std::left << std::setw(8) << a.method << std::setw(28) << a.held_out << std::setw(6)
        << a.runs << std::setw(13) << fixed(a.mean_acc_target) << std::setw(12)
        << fixed(a.std_acc_target) << std::setw(13) << fixed(a.mean_acc_online)
        << (a.median_align_ratio ? fixed(*a.median_align_ratio) : "-") << std::right << '\n';
  }
}

}  // namespace

int cmd_train(const CommonOptions& opts, std::ostream& out, std::ostream& err) {
  return guard(err, [&] {
    if (!opts.config) throw ConfigError("--config", "train requires a config file");
    const RunConfig cfg = resolve_config(load_config_json(*opts.config), opts);
    ExperimentOptions eo;
    eo.out_dir = opts.out;
    eo.jobs = opts.jobs;
    const RunResult result = run_experiment(cfg, eo);
    const auto dir = opts.out / cfg.scenario.name;
    std::filesystem::create_directories(dir);
    write_text(dir / "summary.json", run_result_to_json(result).dump(2) + "\n");
    write_text(dir / "config.json", run_config_to_json(cfg).dump(2) + "\n");
    print_result_table(result, out);
    out << "summary written to " << (dir / "summary.json").string() << '\n';
    return kExitOk;
  });
}

int cmd_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& dataset,
             std::ostream& out, std::ostream& err) {
  return guard(err, [&]() -> int {
    std::optional<Checkpoint> loaded;
    DomainDataset ds;
    try {
      loaded = checkpoint_load(checkpoint);
      ds = dataset_read(dataset);
    } catch (const FormatError& e) {
      err << "error: " << e.what() << '\n';
      return kExitConfig;
    } catch (const VersionError& e) {
      err << "error: " << e.what() << '\n';
      return kExitConfig;
    }
    const Checkpoint& ckpt = *loaded;
    if (ds.input_dim() != ckpt.model.extractor.input_dim() ||
        ds.class_count != ckpt.model.class_count()) {
      err << "error: dataset " << ds.name << " (input_dim " << ds.input_dim() << ", K "
          << ds.class_count << ") is incompatible with checkpoint (input_dim "
          << ckpt.model.extractor.input_dim() << ", K " << ckpt.model.class_count() << ")\n";
      return kExitConfig;
    }
    const double target = accuracy(ckpt.ema.extractor(), ckpt.ema.global_classifier(), ds);
    const double online = accuracy(ckpt.model.extractor, ckpt.model.global_classifier, ds);
    const json report = {{"dataset", ds.name},
                         {"examples", ds.size()},
                         {"accuracy_target", target},
                         {"accuracy_online", online}};
    out << report.dump(2) << '\n';
    return kExitOk;
  });
}

// ---------------------------------------------------------------------------
// Gradient check suite
// ---------------------------------------------------------------------------

namespace {

struct ToyProblem {
  CmclModel model;
  std::vector<DomainBatch> batches;
  double lambda_mean = 1.0;
  double lambda_cov = 1.0;
};

Tensor normal_tensor(Tensor::Shape shape, double scale, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = scale * rng.normal();
  return t;
}

/// Smallest |pre-activation| feeding a ReLU anywhere in the toy problem.
double kink_margin(const ToyProblem& p) {
  double margin = std::numeric_limits<double>::infinity();
  const auto& layers = p.model.extractor.layers();
  for (const DomainBatch& b : p.batches) {
    Tensor h = b.x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      Tensor pre({h.rows(), layers[i].weight.rows()});
      for (std::size_t r = 0; r < h.rows(); ++r) {
        for (std::size_t o = 0; o < pre.cols(); ++o) {
          double s = layers[i].bias[o];
          for (std::size_t c = 0; c < h.cols(); ++c) s += layers[i].weight(o, c) * h(r, c);
          pre(r, o) = s;
        }
      }
      const bool has_relu = i + 1 < layers.size() || p.model.extractor.relu_last();
      if (has_relu) {
        for (double& v : pre.storage()) {
          margin = std::min(margin, std::abs(v));
          v = std::max(v, 0.0);
        }
      }
      h = std::move(pre);
    }
  }
  return margin;
}

ToyProblem make_toy(Rng& rng) {
  const std::size_t n = 2 + rng.uniform_int(2);
  const std::size_t d = rng.uniform_int(2) ? 5 : 2;
  const std::size_t k = rng.uniform_int(2) ? 4 : 2;
  const std::size_t b = rng.uniform_int(2) ? 8 : 3;
  constexpr std::size_t kInput = 3, kHidden = 4;
  while (true) {
    ToyProblem p;
    std::vector<AffineLayer> layers;
    layers.push_back({normal_tensor({kHidden, kInput}, 0.8, rng), normal_tensor({kHidden}, 0.3, rng)});
    layers.push_back({normal_tensor({d, kHidden}, 0.8, rng), normal_tensor({d}, 0.3, rng)});
    p.model.extractor = FeatureExtractor(kInput, std::move(layers), false);
    for (std::size_t j = 0; j < n; ++j) p.model.domain_classifiers.push_back({normal_tensor({k, d}, 0.7, rng)});
    p.model.global_classifier = {normal_tensor({k, d}, 0.7, rng)};
    for (std::size_t i = 0; i < n; ++i) {
      DomainBatch batch;
      batch.domain_index = i;
      batch.x = normal_tensor({b, kInput}, 1.0, rng);
      // Shift domains apart so moment terms are far from zero.
      for (std::size_t r = 0; r < b; ++r) batch.x(r, 0) += 0.5 * static_cast<double>(i);
      for (std::size_t r = 0; r < b; ++r) batch.y.push_back(static_cast<int>(rng.uniform_int(k)));
      p.batches.push_back(std::move(batch));
    }
    p.lambda_mean = rng.uniform(0.1, 2.0);
    p.lambda_cov = rng.uniform(0.1, 2.0);
    if (kink_margin(p) > 1e-3) return p;
  }
}

struct LossCase {
  const char* name;
  Trainable groups;
  std::function<Var(const BoundModel&, std::span<const Var>, const ToyProblem&)> loss;
};

const std::vector<LossCase>& loss_cases() {
  static const std::vector<LossCase> cases = {
      {"loss_ce", Trainable::all(),
       [](const BoundModel& m, std::span<const Var> z, const ToyProblem& p) {
         return loss_ce(m, z, p.batches);
       }},
      {"loss_mean", Trainable{true, false, false},
       [](const BoundModel&, std::span<const Var> z, const ToyProblem&) { return loss_mean(z); }},
      {"loss_cov", Trainable{true, false, false},
       [](const BoundModel&, std::span<const Var> z, const ToyProblem&) { return loss_cov(z); }},
      {"loss_mm", Trainable{true, false, false},
       [](const BoundModel&, std::span<const Var> z, const ToyProblem& p) {
         return loss_mm(z, p.lambda_mean, p.lambda_cov);
       }},
      {"loss_dsc", Trainable{false, true, false},
       [](const BoundModel& m, std::span<const Var> z, const ToyProblem& p) {
         return loss_dsc(m, z, p.batches);
       }},
      {"loss_cdl", Trainable{true, false, true},
       [](const BoundModel& m, std::span<const Var> z, const ToyProblem& p) {
         return loss_cdl(m, z, p.batches);
       }},
      {"loss_cemm", Trainable::all(),
       [](const BoundModel& m, std::span<const Var> z, const ToyProblem& p) {
         return add(loss_ce(m, z, p.batches), loss_mm(z, p.lambda_mean, p.lambda_cov));
       }},
  };
  return cases;
}

}  // namespace

std::vector<GradcheckLossReport> run_gradcheck(const GradcheckOptions& opts) {
  std::optional<ScopedGradientFault> fault;
  if (!opts.inject_fault.empty()) fault.emplace(opts.inject_fault);
  std::vector<GradcheckLossReport> reports;
  const Rng root(opts.seed);
  for (const LossCase& lc : loss_cases()) {
    GradcheckLossReport report;
    report.loss = lc.name;
    const Rng loss_rng = root.substream(lc.name);
    for (std::size_t c = 0; c < opts.configs_per_loss; ++c) {
      Rng rng = loss_rng.substream(c);
      const ToyProblem p = make_toy(rng);
      const ScalarFn f = [&](Tape& tape, Var theta) {
        const BoundModel m = bind_flat(tape, theta, p.model, lc.groups);
        const auto z = domain_features(m, tape, p.batches);
        return lc.loss(m, z, p);
      };
      GradCheckReport r;
      try {
        r = gradient_check(f, flatten_parameters(p.model, lc.groups), opts.h, opts.tol);
      } catch (const ProbeError& e) {
        r.passed = false;
        r.max_rel_error = std::numeric_limits<double>::infinity();
        r.worst_coordinate = e.coordinate();
      }
      ++report.configs;
      if (!r.passed) ++report.failures;
      if (r.max_rel_error > report.max_rel_error || c == 0) {
        report.max_rel_error = r.max_rel_error;
        report.worst_config = c;
        report.worst_coordinate = r.worst_coordinate;
      }
    }
    reports.push_back(report);
  }
  return reports;
}

int cmd_gradcheck(const GradcheckOptions& opts, std::ostream& out, std::ostream& err) {
  return guard(err, [&] {
    const auto reports = run_gradcheck(opts);
    bool ok = true;
    out << "gradient check: h=" << opts.h << " tol=" << opts.tol
        << " configs/loss=" << opts.configs_per_loss;
    if (!opts.inject_fault.empty()) out << " fault-injected-op=" << opts.inject_fault;
    out << '\n';
    for (const auto& r : reports) {
      const bool pass = r.failures == 0;
      ok = ok && pass;
      std::ostringstream err_str;
      err_str << std::scientific << std::setprecision(3) << r.max_rel_error;
      out << (pass ? "PASS " : "FAIL ") << std::left << std::setw(10) << r.loss << std::right
          << " max_rel_error=" << err_str.str() << " failures=" << r.failures << "/" << r.configs;
      if (!pass) {
        out << " worst_config=" << r.worst_config << " coordinate=" << r.worst_coordinate;
        if (!opts.inject_fault.empty()) out << " op=" << opts.inject_fault;
      }
      out << '\n';
    }
    return ok ? kExitOk : kExitFailure;
  });
}

int cmd_benchmark(const std::string& scenario, const CommonOptions& opts,
                  const std::vector<std::uint64_t>& seeds, std::ostream& out, std::ostream& err) {
  return guard(err, [&] {
    json doc = opts.config ? load_config_json(*opts.config)
                           : run_config_to_json(registered_scenario(scenario));
    RunConfig cfg = resolve_config(std::move(doc), opts);
    if (!seeds.empty()) cfg.seeds = seeds;
    ExperimentOptions eo;
    eo.out_dir = opts.out;
    eo.jobs = opts.jobs;
    eo.methods = {"cmcl", "erm"};
    const RunResult result = run_experiment(cfg, eo);
    const auto dir = opts.out / cfg.scenario.name;
    std::filesystem::create_directories(dir);
    write_text(dir / "benchmark.json", run_result_to_json(result).dump(2) + "\n");
    std::ostringstream csv;
    csv << "seed,method,held_out,acc_target,acc_online,align_at_10,align_final\n";
    for (const RunRow& r : result.rows) {
      csv << r.seed << ',' << r.method << ',' << r.held_out << ',' << format_metric(r.acc_target)
          << ',' << format_metric(r.acc_online) << ','
          << (r.align_at_10 ? format_metric(*r.align_at_10) : "") << ','
          << (r.align_final ? format_metric(*r.align_final) : "") << '\n';
    }
    write_text(dir / "benchmark.csv", csv.str());
    print_result_table(result, out);
    return kExitOk;
  });
}

int cmd_gen_data(const std::string& scenario, const CommonOptions& opts, std::ostream& out,
                 std::ostream& err) {
  return guard(err, [&] {
    json doc = opts.config ? load_config_json(*opts.config)
                           : run_config_to_json(registered_scenario(scenario));
    for (const std::string& o : opts.overrides) apply_override(doc, o);
    const RunConfig cfg = parse_run_config(doc);
    ScenarioSpec spec = cfg.scenario;
    if (opts.seed) spec.seed = *opts.seed;
    std::filesystem::create_directories(opts.out);
    for (const DomainDataset& ds : generate(spec)) {
      const auto path = opts.out / (ds.name + ".cmds");
      dataset_write(ds, path);
      out << path.string() << "  examples=" << ds.size() << " input_dim=" << ds.input_dim()
          << " classes=" << ds.class_count << '\n';
    }
    return kExitOk;
  });
}

}  // namespace cmcl
