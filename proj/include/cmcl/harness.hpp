#pragma once

// Experiment orchestration behind the `cmcl` command-line tool: JSON run
// configuration, multi-seed / leave-one-domain-out runs, result summaries,
// and the verification commands.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cmcl/data.hpp"
#include "cmcl/errors.hpp"
#include "cmcl/trainer.hpp"

namespace cmcl {

inline constexpr int kSchemaVersion = 1;

enum class Protocol { FixedUnseen, LeaveOneDomainOut };

/// Configuration problem: bad JSON, missing/unknown field or invalid value.
/// `field` is a dotted path; `line` is set for JSON syntax errors.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& what, std::optional<std::size_t> line = {})
      : Error(format(field, what, line)), field_(std::move(field)), line_(line) {}
  const std::string& field() const { return field_; }
  std::optional<std::size_t> line() const { return line_; }

 private:
  static std::string format(const std::string& field, const std::string& what,
                            std::optional<std::size_t> line) {
    std::string s = "config error";
    if (line) s += " at line " + std::to_string(*line);
    if (!field.empty()) s += " in field '" + field + "'";
    return s + ": " + what;
  }
  std::string field_;
  std::optional<std::size_t> line_;
};

struct RunConfig {
  ScenarioSpec scenario;
  TrainConfig train;
  Protocol protocol = Protocol::FixedUnseen;
  double val_fraction = 0.1;
  std::vector<std::uint64_t> seeds{0};
};

/// Parses a JSON run configuration. Throws ConfigError.
RunConfig parse_run_config(const nlohmann::json& doc);
RunConfig parse_run_config_text(const std::string& text);
nlohmann::json run_config_to_json(const RunConfig& cfg);

/// Sets `doc[a][b][c] = value` for an override "a.b.c=value". The value is
/// parsed as JSON when possible and taken as a string otherwise.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// Built-in scenarios ("spurious", "rotated") with their benchmark settings.
std::vector<std::string> registered_scenarios();
RunConfig registered_scenario(const std::string& name);

struct RunRow {
  std::uint64_t seed = 0;
  std::string method;
  std::string held_out;
  double acc_online = 0.0;
  double acc_target = 0.0;
  std::size_t best_outer_iter = 0;
  std::optional<double> align_at_10;
  std::optional<double> align_final;
};

struct RunAggregate {
  std::string method;
  std::string held_out;
  std::size_t runs = 0;
  double mean_acc_target = 0.0;
  double std_acc_target = 0.0;
  double mean_acc_online = 0.0;
  double std_acc_online = 0.0;
  /// Median over runs of align_final / align_at_10, when available.
  std::optional<double> median_align_ratio;
};

struct RunResult {
  std::string scenario;
  std::vector<RunRow> rows;
  std::vector<RunAggregate> aggregates;

  /// Recomputes aggregates from rows.
  void aggregate();
};

nlohmann::json run_result_to_json(const RunResult& result);
/// Throws ValidationError when stored aggregates disagree with the rows (tolerance 1e-12).
RunResult run_result_from_json(const nlohmann::json& doc);
RunResult load_run_result(const std::filesystem::path& path);

struct ExperimentOptions {
  std::filesystem::path out_dir = "runs";
  /// Methods to run: "cmcl" uses the config as is, "erm" its degenerate baseline.
  std::vector<std::string> methods{"cmcl"};
  unsigned jobs = 1;
  bool write_files = true;
};

/// Trains every (seed, held-out domain, method) combination on identical
/// data per (seed, held-out domain) and evaluates the best-validation
/// checkpoint on the held-out domain. Writes per-run metrics.csv,
/// checkpoint.bin, best.bin and summary.json under
/// out_dir/<scenario>/seed_<s>/<held-out>/<method>/.
RunResult run_experiment(const RunConfig& cfg, const ExperimentOptions& options);

// ---------------------------------------------------------------------------
// Commands. Each returns a process exit code: 0 success, 2 config or usage
// error, 3 numeric failure, 1 anything else.
// ---------------------------------------------------------------------------

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;

struct CommonOptions {
  std::optional<std::filesystem::path> config;
  std::optional<std::uint64_t> seed;
  std::filesystem::path out = "runs";
  std::vector<std::string> overrides;
  unsigned jobs = 1;
};

int cmd_train(const CommonOptions& opts, std::ostream& out, std::ostream& err);
int cmd_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& dataset,
             std::ostream& out, std::ostream& err);

struct GradcheckOptions {
  std::size_t configs_per_loss = 20;
  double h = 1e-6;
  double tol = 1e-5;
  std::uint64_t seed = 0;
  /// Tape op whose backward rule is corrupted (negative control); empty for none.
  std::string inject_fault;
};

struct GradcheckLossReport {
  std::string loss;
  std::size_t configs = 0;
  std::size_t failures = 0;
  double max_rel_error = 0.0;
  std::size_t worst_config = 0;
  std::size_t worst_coordinate = 0;
};

std::vector<GradcheckLossReport> run_gradcheck(const GradcheckOptions& opts);
int cmd_gradcheck(const GradcheckOptions& opts, std::ostream& out, std::ostream& err);

/// Benchmarks CMCL against the ERM baseline on a registered scenario or a config file.
int cmd_benchmark(const std::string& scenario, const CommonOptions& opts,
                  const std::vector<std::uint64_t>& seeds, std::ostream& out, std::ostream& err);

/// Writes every domain of a scenario as CMDS files under out/.
int cmd_gen_data(const std::string& scenario, const CommonOptions& opts, std::ostream& out,
                 std::ostream& err);

}  // namespace cmcl
