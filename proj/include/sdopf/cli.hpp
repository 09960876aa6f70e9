#pragma once

#include <functional>
#include <iosfwd>
#include <string>

#include "sdopf/oracle.hpp"
#include "sdopf/trainer.hpp"

namespace sdopf {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EvalOptions {
  int episodes = 4;
  int steps_per_episode = 0;  // 0 = full episode length
  int oracle_block = 8;
  bool with_oracle = true;
  OracleOptions oracle;
  int threads = 1;
};

struct RunConfig {
  std::string case_path;
  std::string out_dir = "out";
  std::uint64_t seed = 1;
  std::string baseline = "crl";
  ScenarioConfig scenario;
  TrainerConfig trainer;
  NetConfig nets;
  EvalOptions eval;
};

RunConfig load_run_config(const std::string& path);
RunConfig parse_run_config(const std::string& text, const std::string& origin);

BaselineKind baseline_from_string(const std::string& s);

using Policy = std::function<ActionBlock(const EnvState&)>;

Policy actor_policy(std::shared_ptr<ActorNet> actor);
Policy random_policy(const GridCase& gc, int horizon, std::uint64_t seed);

struct EvalReport {
  long steps = 0;
  long pf_failures = 0;
  double mean_reward = 0.0;
  double feas_vm_rate = 0.0;
  double feas_slack_rate = 0.0;
  double mean_vm = 0.0;
  std::vector<double> episode_rewards;
  double episode_reward_mean = 0.0;
  double episode_reward_std = 0.0;
};

/// Rolls a frozen policy over held-out scenarios. Episodes fan out over
/// `threads` workers and merge in seed order.
EvalReport evaluate_policy(const GridCase& gc, const ScenarioConfig& scenario,
                           const EnvConfig& env, const Policy& policy, int episodes,
                           int steps_per_episode, std::uint64_t seed_base, int threads = 1);

/// Oracle rewards on the same scenarios (receding-block solves); pairs with
/// EvalReport::episode_rewards for the optimal gap.
std::vector<double> oracle_episode_rewards(const GridCase& gc, const ScenarioConfig& scenario,
                                           int episodes, int steps_per_episode,
                                           std::uint64_t seed_base, int block_len,
                                           const OracleOptions& opts);

int cmd_train(const RunConfig& cfg, std::ostream& out);
int cmd_eval(const RunConfig& cfg, const std::string& checkpoint_path, std::ostream& out);
int cmd_pf(const std::string& case_path, std::ostream& out);
int cmd_oracle(const RunConfig& cfg, int horizon, const std::string& csv_path, std::ostream& out);
int cmd_env_rollout(const RunConfig& cfg, int steps, const std::string& csv_path,
                    std::ostream& out);
int cmd_gradcheck(int instances, std::ostream& out);

NamedParams gather_params(TrainedArtifacts& art);

}  // namespace sdopf
