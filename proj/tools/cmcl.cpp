// cmcl: train, evaluate, gradient-check and benchmark from the command line.

#include <iostream>

#include <CLI11.hpp>

#include "cmcl/harness.hpp"

namespace {

void add_common(CLI::App* cmd, cmcl::CommonOptions& opts, std::string& config, std::uint64_t& seed) {
  cmd->add_option("--config", config, "JSON run configuration");
  cmd->add_option("--seed", seed, "Run a single seed instead of the configured list");
  cmd->add_option("--out", opts.out, "Output directory")->capture_default_str();
  cmd->add_option("--override", opts.overrides, "Config override key.path=value (repeatable)");
  cmd->add_option("--jobs", opts.jobs, "Parallel training runs")->check(CLI::PositiveNumber);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-domain moment and likelihood training for domain generalization"};
  app.require_subcommand(1);

  cmcl::CommonOptions opts;
  std::string config;
  std::uint64_t seed = 0;

  auto* train = app.add_subcommand("train", "Train on a config; writes metrics, checkpoints, summary");
  add_common(train, opts, config, seed);

  std::string checkpoint, dataset;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a CMDS dataset (prints JSON)");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--dataset", dataset, "CMDS dataset file")->required();

  cmcl::GradcheckOptions gc;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every loss gradient");
  gradcheck->add_option("--configs", gc.configs_per_loss, "Random configurations per loss")
      ->capture_default_str();
  gradcheck->add_option("--seed", gc.seed, "Seed for the random configurations");
  gradcheck->add_option("--inject-fault", gc.inject_fault,
                        "Corrupt the backward rule of this op (negative control)");

  std::string scenario = "spurious";
  std::vector<std::uint64_t> seeds;
  auto* bench = app.add_subcommand("benchmark", "CMCL against the pooled ERM baseline");
  bench->add_option("--scenario", scenario, "Registered scenario")->capture_default_str();
  add_common(bench, opts, config, seed);
  bench->add_option("--seeds", seeds, "Seeds to run (overrides the scenario list)");

  auto* gen = app.add_subcommand("gen-data", "Write a scenario's domains as CMDS files");
  gen->add_option("--scenario", scenario, "Registered scenario")->capture_default_str();
  add_common(gen, opts, config, seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : cmcl::kExitConfig;
  }

  auto finish = [&](CLI::App* cmd) {
    if (cmd->count("--config")) opts.config = config;
    if (cmd->count("--seed")) opts.seed = seed;
  };

  if (*train) {
    finish(train);
    return cmcl::cmd_train(opts, std::cout, std::cerr);
  }
  if (*eval) return cmcl::cmd_eval(checkpoint, dataset, std::cout, std::cerr);
  if (*gradcheck) return cmcl::cmd_gradcheck(gc, std::cout, std::cerr);
  if (*bench) {
    finish(bench);
    return cmcl::cmd_benchmark(scenario, opts, seeds, std::cout, std::cerr);
  }
  finish(gen);
  return cmcl::cmd_gen_data(scenario, opts, std::cout, std::cerr);
}
