#include <iostream>

#include <CLI11.hpp>

#include "sdopf/checkpoint.hpp"
#include "sdopf/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"sdopf: constrained-RL dispatch for multi-stage stochastic dynamic optimal power flow"};
  app.require_subcommand(1);

  std::string config_path, case_path, checkpoint_path, csv_path;
  std::string out_dir_override, baseline_override;
  std::uint64_t seed_override = 0;
  bool has_seed = false;
  int horizon = 4, steps = 16, instances = 20;

  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "run config (JSON)")->required();
    sub->add_option("--out", out_dir_override, "override output directory");
    sub->add_option("--seed", seed_override, "override seed")->each([&](const std::string&) {
      has_seed = true;
    });
  };

  CLI::App* train = app.add_subcommand("train", "run the training loop and write metrics/checkpoint");
  add_config(train);
  train->add_option("--baseline", baseline_override, "override baseline kind (crl|penalty|dc3|td3)");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a frozen policy on held-out scenarios");
  add_config(eval);
  eval->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();

  CLI::App* pf = app.add_subcommand("pf", "one-shot Newton power-flow solve");
  pf->add_option("--case", case_path, "case file")->required();

  CLI::App* oracle = app.add_subcommand("oracle", "multi-period OPF with known demands");
  add_config(oracle);
  oracle->add_option("--horizon", horizon, "number of periods");
  oracle->add_option("--csv", csv_path, "output CSV path")->required();

  CLI::App* rollout = app.add_subcommand("env-rollout", "dump an environment trace as CSV");
  add_config(rollout);
  rollout->add_option("--steps", steps, "steps to roll");
  rollout->add_option("--csv", csv_path, "output CSV path")->required();

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every primitive");
  gradcheck->add_option("--instances", instances, "random instances per op");

  CLI11_PARSE(app, argc, argv);

  try {
    auto load_cfg = [&] {
      sdopf::RunConfig cfg = sdopf::load_run_config(config_path);
      if (!out_dir_override.empty()) cfg.out_dir = out_dir_override;
      if (has_seed) {
        cfg.seed = seed_override;
        cfg.trainer.seed = seed_override;
      }
      if (!baseline_override.empty()) cfg.baseline = baseline_override;
      return cfg;
    };
    if (train->parsed()) return sdopf::cmd_train(load_cfg(), std::cout);
    if (eval->parsed()) return sdopf::cmd_eval(load_cfg(), checkpoint_path, std::cout);
    if (pf->parsed()) return sdopf::cmd_pf(case_path, std::cout);
    if (oracle->parsed()) return sdopf::cmd_oracle(load_cfg(), horizon, csv_path, std::cout);
    if (rollout->parsed()) return sdopf::cmd_env_rollout(load_cfg(), steps, csv_path, std::cout);
    if (gradcheck->parsed()) return sdopf::cmd_gradcheck(instances, std::cout);
  } catch (const sdopf::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const sdopf::CaseError& e) {
    std::cerr << "case error: " << e.what() << "\n";
    return 1;
  } catch (const sdopf::CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
