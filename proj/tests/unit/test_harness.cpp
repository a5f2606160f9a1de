#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "cmcl/checkpoint.hpp"
#include "cmcl/harness.hpp"
#include "test_util.hpp"

using namespace cmcl;
using nlohmann::json;

namespace {

json minimal_config() {
  return json::parse(R"({
    "schema_version": 1,
    "scenario": {
      "name": "mini",
      "kind": "rotated-gaussians",
      "class_count": 2,
      "samples_per_domain": 80,
      "source_params": [0, 30],
      "unseen_param": 15,
      "hull": "interpolated",
      "input_dim": 3
    },
    "train": {
      "outer_iters": 3, "stage_b_iters": 2, "stage_c_iters": 2, "batch_size": 16,
      "model": {"hidden": [6], "feature_dim": 4}
    },
    "seeds": [0]
  })");
}

std::filesystem::path write_json(const std::filesystem::path& dir, const json& doc) {
  const auto path = dir / "config.json";
  std::ofstream(path) << doc.dump(2);
  return path;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("config parsing") {
  const RunConfig cfg = parse_run_config(minimal_config());
  CHECK(cfg.scenario.name == "mini");
  CHECK(cfg.scenario.hull == HullMode::Interpolated);
  CHECK(cfg.train.outer_iters == 3);
  CHECK(cfg.train.model.hidden == std::vector<std::size_t>{6});
  CHECK(cfg.train.stage_a_iters == 1);  // default

  // Round trip through JSON.
  CHECK(run_config_to_json(parse_run_config(run_config_to_json(cfg))) == run_config_to_json(cfg));

  auto missing = minimal_config();
  missing["scenario"].erase("kind");
  try {
    parse_run_config(missing);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "scenario.kind");
  }

  auto unknown = minimal_config();
  unknown["train"]["learning_rate"] = 0.1;
  try {
    parse_run_config(unknown);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "train.learning_rate");
  }

  auto negative = minimal_config();
  negative["train"]["batch_size"] = -4;
  CHECK_THROWS_AS(parse_run_config(negative), ConfigError);

  auto version = minimal_config();
  version["schema_version"] = 2;
  CHECK_THROWS_AS(parse_run_config(version), ConfigError);

  auto hull = minimal_config();
  hull["scenario"]["unseen_param"] = 45;
  try {
    parse_run_config(hull);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "scenario.unseen_param");
  }

  try {
    parse_run_config_text("{\n  \"schema_version\": 1,\n  \"scenario\": {,\n}");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    REQUIRE(e.line().has_value());
    CHECK(*e.line() == 3);
  }
}

TEST_CASE("overrides") {
  json doc = minimal_config();
  apply_override(doc, "train.outer_iters=7");
  apply_override(doc, "train.extractor_optimizer.lr=0.5");
  apply_override(doc, "scenario.name=renamed");
  apply_override(doc, "scenario.source_params=[0, 40]");
  const RunConfig cfg = parse_run_config(doc);
  CHECK(cfg.train.outer_iters == 7);
  CHECK(cfg.train.extractor_optimizer.lr == 0.5);
  CHECK(cfg.scenario.name == "renamed");
  CHECK(cfg.scenario.source_params == std::vector<double>{0, 40});
  CHECK_THROWS_AS(apply_override(doc, "no_equals_sign"), ConfigError);
  CHECK_THROWS_AS(apply_override(doc, "train..lr=1"), ConfigError);
}

TEST_CASE("registered scenarios") {
  const RunConfig sp = registered_scenario("spurious");
  CHECK(sp.scenario.source_params == std::vector<double>{0.9, 0.7, 0.5});
  CHECK(sp.scenario.unseen_param == -0.9);
  CHECK(sp.scenario.samples_per_domain == 2000);
  CHECK(sp.train.model.feature_dim == 16);
  CHECK(sp.seeds.size() == 5);
  CHECK_NOTHROW(parse_run_config(run_config_to_json(sp)));
  CHECK_NOTHROW(parse_run_config(run_config_to_json(registered_scenario("rotated"))));
  CHECK_THROWS_AS(registered_scenario("nope"), ConfigError);
}

TEST_CASE("run results") {
  RunResult r;
  r.scenario = "s";
  r.rows = {{0, "cmcl", "s.unseen", 0.5, 0.6, 3, 0.2, 0.1},
            {1, "cmcl", "s.unseen", 0.7, 0.9, 2, 0.4, 0.1},
            {2, "cmcl", "s.unseen", 0.6, 0.75, 1, 0.1, 0.08},
            {0, "erm", "s.unseen", 0.5, 0.5, 1, std::nullopt, std::nullopt}};
  r.aggregate();
  REQUIRE(r.aggregates.size() == 2);
  const RunAggregate& a = r.aggregates[0];
  CHECK(a.runs == 3);
  CHECK(std::abs(a.mean_acc_target - (0.6 + 0.9 + 0.75) / 3) <= 1e-12);
  const double m = a.mean_acc_target;
  const double sd = std::sqrt(((0.6 - m) * (0.6 - m) + (0.9 - m) * (0.9 - m) + (0.75 - m) * (0.75 - m)) / 2);
  CHECK(std::abs(a.std_acc_target - sd) <= 1e-12);
  CHECK(*a.median_align_ratio == doctest::Approx(0.5));  // ratios 0.5, 0.25, 0.8
  CHECK(r.aggregates[1].std_acc_target == 0.0);
  CHECK_FALSE(r.aggregates[1].median_align_ratio.has_value());

  const json doc = run_result_to_json(r);
  const RunResult back = run_result_from_json(doc);
  CHECK(back.rows.size() == 4);
  CHECK(run_result_to_json(back) == doc);

  json tampered = doc;
  tampered["aggregates"][0]["mean_acc_target"] = 0.76;
  CHECK_THROWS_AS(run_result_from_json(tampered), ValidationError);
}

TEST_CASE("run_experiment") {
  test::TempDir dir;
  RunConfig cfg = parse_run_config(minimal_config());
  cfg.seeds = {3, 4};
  cfg.protocol = Protocol::LeaveOneDomainOut;
  ExperimentOptions eo;
  eo.out_dir = dir.path;
  eo.methods = {"cmcl", "erm"};
  eo.jobs = 2;
  const RunResult r = run_experiment(cfg, eo);
  CHECK(r.rows.size() == 2 * 2 * 3);  // seeds x methods x held-out domains
  CHECK(r.aggregates.size() == 2 * 3);
  for (const RunAggregate& a : r.aggregates) {
    double s = 0;
    for (const RunRow& row : r.rows)
      if (row.method == a.method && row.held_out == a.held_out) s += row.acc_target;
    CHECK(std::abs(a.mean_acc_target - s / 2.0) <= 1e-12);
  }
  const auto run_dir = dir.path / "mini" / "seed_3" / "mini.source1" / "erm";
  CHECK(std::filesystem::exists(run_dir / "metrics.csv"));
  CHECK(std::filesystem::exists(run_dir / "best.bin"));
  CHECK(load_run_result(run_dir / "summary.json").rows.size() == 1);

  // ERM rows carry no stage B / C metrics.
  const std::string erm_csv = slurp(run_dir / "metrics.csv");
  CHECK(erm_csv.find(",B,") == std::string::npos);
  CHECK(erm_csv.find(",C,") == std::string::npos);

  // Parallel and sequential runs agree.
  eo.jobs = 1;
  eo.out_dir = dir.path / "seq";
  CHECK(run_result_to_json(run_experiment(cfg, eo)) == run_result_to_json(r));
}

TEST_CASE("cmd_train") {
  test::TempDir dir;
  std::ostringstream out, err;
  CommonOptions opts;
  opts.out = dir.path / "runs";

  SUBCASE("missing field exits 2 and names it") {
    json doc = minimal_config();
    doc["scenario"].erase("source_params");
    opts.config = write_json(dir.path, doc);
    CHECK(cmd_train(opts, out, err) == kExitConfig);
    CHECK(err.str().find("scenario.source_params") != std::string::npos);
  }
  SUBCASE("syntax error exits 2 with a line") {
    opts.config = dir.path / "broken.json";
    std::ofstream(*opts.config) << "{\n\"schema_version\": 1,\n oops\n}";
    CHECK(cmd_train(opts, out, err) == kExitConfig);
    CHECK(err.str().find("line 3") != std::string::npos);
  }
  SUBCASE("zero outer iterations writes a header-only metrics file") {
    opts.config = write_json(dir.path, minimal_config());
    opts.overrides = {"train.outer_iters=0"};
    CHECK(cmd_train(opts, out, err) == kExitOk);
    CHECK(slurp(opts.out / "mini" / "seed_0" / "mini.unseen" / "cmcl" / "metrics.csv") ==
          std::string(kMetricsHeader) + "\n");
  }
  SUBCASE("rerun gives byte-identical metrics") {
    opts.config = write_json(dir.path, minimal_config());
    opts.seed = 5;
    REQUIRE(cmd_train(opts, out, err) == kExitOk);
    const auto csv = opts.out / "mini" / "seed_5" / "mini.unseen" / "cmcl" / "metrics.csv";
    const std::string first = slurp(csv);
    REQUIRE(cmd_train(opts, out, err) == kExitOk);
    CHECK(slurp(csv) == first);
    CHECK(first.size() > std::string(kMetricsHeader).size() + 1);
  }
  SUBCASE("numeric failure exits 3") {
    opts.config = write_json(dir.path, minimal_config());
    opts.overrides = {"train.extractor_optimizer.lr=1e300"};
    CHECK(cmd_train(opts, out, err) == kExitNumeric);
    CHECK(err.str().find("outer iteration") != std::string::npos);
  }
  SUBCASE("no config is a usage error") {
    CHECK(cmd_train(opts, out, err) == kExitConfig);
  }
}

TEST_CASE("cmd_eval") {
  test::TempDir dir;
  ScenarioSpec s;
  s.name = "ev";
  s.class_count = 4;
  s.samples_per_domain = 4000;
  s.source_params = {0};
  s.input_dim = 3;
  const DomainDataset ds = generate(s)[0];
  dataset_write(ds, dir.path / "ev.cmds");

  Rng rng(1);
  CmclModel zero = CmclModel::create({{5}, 3, true}, 3, 4, 2, rng);
  checkpoint_save(zero, EmaState::from_online(zero, 0.5), dir.path / "zero.bin");
  std::ostringstream out, err;
  REQUIRE(cmd_eval(dir.path / "zero.bin", dir.path / "ev.cmds", out, err) == kExitOk);
  const json report = json::parse(out.str());
  // Uniform posteriors: argmax ties go to class 0, so exactly 1/K on balanced data.
  CHECK(std::abs(report["accuracy_target"].get<double>() - 0.25) < 3 * std::sqrt(0.25 * 0.75 / 4000));

  CmclModel wide = CmclModel::create({{5}, 3, true}, 5, 4, 2, rng);
  checkpoint_save(wide, EmaState::from_online(wide, 0.5), dir.path / "wide.bin");
  std::ostringstream o2, e2;
  CHECK(cmd_eval(dir.path / "wide.bin", dir.path / "ev.cmds", o2, e2) == kExitConfig);
  CHECK(e2.str().find("incompatible") != std::string::npos);

  std::ofstream(dir.path / "junk.bin") << "not a checkpoint";
  std::ostringstream o3, e3;
  CHECK(cmd_eval(dir.path / "junk.bin", dir.path / "ev.cmds", o3, e3) == kExitConfig);
}

TEST_CASE("cmd_eval after a converged toy run beats chance") {
  test::TempDir dir;
  json doc = minimal_config();
  doc["train"]["outer_iters"] = 30;
  RunConfig cfg = parse_run_config(doc);
  ExperimentOptions eo;
  eo.out_dir = dir.path;
  run_experiment(cfg, eo);
  const auto run = dir.path / "mini" / "seed_0" / "mini.unseen" / "cmcl";
  std::ostringstream out, err;
  REQUIRE(cmd_eval(run / "checkpoint.bin", run / "heldout.cmds", out, err) == kExitOk);
  CHECK(json::parse(out.str())["accuracy_online"].get<double>() > 0.5);
}

TEST_CASE("gradcheck and gen-data commands") {
  GradcheckOptions g;
  g.configs_per_loss = 2;
  std::ostringstream out, err;
  CHECK(cmd_gradcheck(g, out, err) == kExitOk);
  CHECK(out.str().find("max_rel_error=") != std::string::npos);
  CHECK(out.str().find("loss_cdl") != std::string::npos);

  g.inject_fault = "batch_mean";
  std::ostringstream o2;
  CHECK(cmd_gradcheck(g, o2, err) == kExitFailure);
  CHECK(o2.str().find("FAIL loss_mean") != std::string::npos);
  CHECK(o2.str().find("op=batch_mean") != std::string::npos);

  test::TempDir dir;
  CommonOptions opts;
  opts.out = dir.path;
  opts.overrides = {"scenario.samples_per_domain=100"};
  std::ostringstream o3;
  REQUIRE(cmd_gen_data("rotated", opts, o3, err) == kExitOk);
  const DomainDataset ds = dataset_read(dir.path / "rotated.unseen.cmds");
  CHECK(ds.size() == 100);
  CHECK(ds.class_count == 4);
}
