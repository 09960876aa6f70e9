#include "sdopf/cli.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "sdopf/checkpoint.hpp"
#include "sdopf/gradcheck.hpp"
#include "sdopf/powerflow.hpp"

namespace sdopf {

using nlohmann::json;

namespace {

void require_keys(const json& j, const std::set<std::string>& allowed, const std::string& where,
                  const std::string& origin) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw ConfigError(origin + ": unknown key '" + it.key() + "' in " + where);
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

BaselineKind baseline_from_string(const std::string& s) {
  if (s == "crl") return BaselineKind::crl;
  if (s == "penalty") return BaselineKind::penalty;
  if (s == "dc3") return BaselineKind::dc3;
  if (s == "td3") return BaselineKind::td3;
  throw ConfigError("unknown baseline kind '" + s + "' (expected crl|penalty|dc3|td3)");
}

RunConfig parse_run_config(const std::string& text, const std::string& origin) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(origin + ": parse error: " + e.what());
  }
  require_keys(j, {"case", "out_dir", "seed", "baseline", "scenario", "trainer", "nets", "eval"},
               "run config", origin);
  RunConfig cfg;
  if (!j.contains("case")) throw ConfigError(origin + ": missing 'case'");
  cfg.case_path = j["case"].get<std::string>();
  cfg.out_dir = j.value("out_dir", cfg.out_dir);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.baseline = j.value("baseline", cfg.baseline);
  baseline_from_string(cfg.baseline);

  if (j.contains("scenario")) {
    const json& s = j["scenario"];
    require_keys(s, {"episode_len", "diurnal_harmonics", "noise_sigma", "wind_buses",
                     "wind_scale", "seed"},
                 "scenario", origin);
    cfg.scenario.episode_len = s.value("episode_len", cfg.scenario.episode_len);
    cfg.scenario.diurnal_harmonics = s.value("diurnal_harmonics", cfg.scenario.diurnal_harmonics);
    cfg.scenario.noise_sigma = s.value("noise_sigma", cfg.scenario.noise_sigma);
    cfg.scenario.wind_scale = s.value("wind_scale", cfg.scenario.wind_scale);
    cfg.scenario.seed = s.value("seed", cfg.scenario.seed);
    if (s.contains("wind_buses"))
      for (int b : s["wind_buses"].get<std::vector<int>>())
        cfg.scenario.wind_buses.push_back(b - 1);  // file ids are 1-based
  }
  if (j.contains("trainer")) {
    const json& t = j["trainer"];
    require_keys(t,
                 {"gamma", "tau", "policy_delay", "dual_period", "batch_size", "max_iterations",
                  "exploration_steps", "horizon", "buffer_capacity", "actor_lr", "critic_lr",
                  "alpha0", "step_scale_lambda", "step_scale_mu", "alpha_growth",
                  "alpha_growth_factor", "alpha_cap", "penalty_beta", "r_fail", "action_noise",
                  "action_noise_final", "actor_warmup", "alpha_balance_p", "alpha_balance_q"},
                 "trainer", origin);
    auto& c = cfg.trainer;
    c.gamma = t.value("gamma", c.gamma);
    c.tau = t.value("tau", c.tau);
    c.policy_delay = t.value("policy_delay", c.policy_delay);
    c.dual_period = t.value("dual_period", c.dual_period);
    c.batch_size = t.value("batch_size", c.batch_size);
    c.max_iterations = t.value("max_iterations", c.max_iterations);
    c.exploration_steps = t.value("exploration_steps", c.exploration_steps);
    c.horizon = t.value("horizon", c.horizon);
    c.buffer_capacity = t.value("buffer_capacity", c.buffer_capacity);
    c.actor_lr = t.value("actor_lr", c.actor_lr);
    c.critic_lr = t.value("critic_lr", c.critic_lr);
    c.alpha0 = t.value("alpha0", c.alpha0);
    c.step_scale_lambda = t.value("step_scale_lambda", c.step_scale_lambda);
    c.step_scale_mu = t.value("step_scale_mu", c.step_scale_mu);
    c.alpha_growth = t.value("alpha_growth", c.alpha_growth);
    c.alpha_growth_factor = t.value("alpha_growth_factor", c.alpha_growth_factor);
    c.alpha_cap = t.value("alpha_cap", c.alpha_cap);
    c.penalty_beta = t.value("penalty_beta", c.penalty_beta);
    c.action_noise = t.value("action_noise", c.action_noise);
    c.action_noise_final = t.value("action_noise_final", c.action_noise_final);
    c.actor_warmup = t.value("actor_warmup", c.actor_warmup);
    c.alpha_family[0] = t.value("alpha_balance_p", c.alpha_family[0]);
    c.alpha_family[1] = t.value("alpha_balance_q", c.alpha_family[1]);
    c.env.r_fail = t.value("r_fail", c.env.r_fail);
  }
  if (j.contains("nets")) {
    const json& n = j["nets"];
    require_keys(n,
                 {"cheb_order", "temporal_channels", "gcn_channels", "hidden", "normalize_gso",
                  "smoothing_noise", "p_head_bias", "q_head_bias"},
                 "nets", origin);
    auto& c = cfg.nets;
    c.cheb_order = n.value("cheb_order", c.cheb_order);
    c.temporal_channels = n.value("temporal_channels", c.temporal_channels);
    c.gcn_channels = n.value("gcn_channels", c.gcn_channels);
    c.hidden = n.value("hidden", c.hidden);
    c.normalize_gso = n.value("normalize_gso", c.normalize_gso);
    c.smoothing_noise = n.value("smoothing_noise", c.smoothing_noise);
    c.p_head_bias = n.value("p_head_bias", c.p_head_bias);
    c.q_head_bias = n.value("q_head_bias", c.q_head_bias);
  }
  if (j.contains("eval")) {
    const json& e = j["eval"];
    require_keys(e,
                 {"episodes", "steps_per_episode", "oracle_block", "with_oracle",
                  "oracle_restarts", "oracle_max_inner", "oracle_tol", "threads"},
                 "eval", origin);
    auto& c = cfg.eval;
    c.episodes = e.value("episodes", c.episodes);
    c.steps_per_episode = e.value("steps_per_episode", c.steps_per_episode);
    c.oracle_block = e.value("oracle_block", c.oracle_block);
    c.with_oracle = e.value("with_oracle", c.with_oracle);
    c.oracle.restarts = e.value("oracle_restarts", c.oracle.restarts);
    c.oracle.max_inner = e.value("oracle_max_inner", c.oracle.max_inner);
    c.oracle.tol = e.value("oracle_tol", c.oracle.tol);
    c.threads = e.value("threads", c.threads);
  }
  cfg.trainer.seed = cfg.seed;
  cfg.nets.horizon = cfg.trainer.horizon;
  cfg.trainer.env.horizon = cfg.trainer.horizon;
  if (const char* env_threads = std::getenv("SDOPF_THREADS"))
    cfg.eval.threads = std::max(1, std::atoi(env_threads));
  if (const char* env_out = std::getenv("SDOPF_OUT_DIR")) cfg.out_dir = env_out;
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open run config: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path);
}

Policy actor_policy(std::shared_ptr<ActorNet> actor) {
  return [actor](const EnvState& st) { return actor->act(st); };
}

Policy random_policy(const GridCase& gc, int horizon, std::uint64_t seed) {
  const int width = ActionBlock::width(gc);
  auto rng = std::make_shared<std::mt19937_64>(seed);
  return [rng, horizon, width](const EnvState&) {
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    ActionBlock block;
    block.a_hat.resize(horizon, width);
    for (int i = 0; i < horizon; ++i)
      for (int j = 0; j < width; ++j) block.a_hat(i, j) = uni(*rng);
    return block;
  };
}

namespace {

std::uint64_t eval_scenario_seed(std::uint64_t seed_base, int episode) {
  return seed_base + 10000 + static_cast<std::uint64_t>(episode);
}

struct EpisodeStats {
  long steps = 0, vm_ok = 0, slack_ok = 0, pf_failures = 0;
  double reward_sum = 0.0, vm_sum = 0.0;
};

EpisodeStats run_episode(const GridCase& gc, const ScenarioConfig& sc_cfg, const EnvConfig& env,
                         const Policy& policy, int steps, std::uint64_t scenario_seed) {
  EpisodeStats st;
  Scenario scenario = generate_scenario(gc, sc_cfg, scenario_seed);
  EnvState state = make_initial_state(gc, env);
  for (int t = 0; t < steps && state.t < scenario.episode_len; ++t) {
    ActionBlock block = policy(state);
    auto [next, r, info] = env_step(state, block, scenario, gc, env);
    ++st.steps;
    st.reward_sum += r;
    st.vm_ok += info.feasible_vm ? 1 : 0;
    st.slack_ok += info.feasible_slack ? 1 : 0;
    if (info.pf_converged) st.vm_sum += info.vm.mean();
    state = next;
    if (!info.pf_converged) {
      // Solver failure: restore a fresh operating point and keep counting,
      // so every episode reports the same number of samples.
      ++st.pf_failures;
      const int resume_t = next.t;
      state = make_initial_state(gc, env);
      state.t = resume_t;
    }
  }
  return st;
}

}  // namespace

EvalReport evaluate_policy(const GridCase& gc, const ScenarioConfig& scenario,
                           const EnvConfig& env, const Policy& policy, int episodes,
                           int steps_per_episode, std::uint64_t seed_base, int threads) {
  const int steps = steps_per_episode > 0 ? steps_per_episode : scenario.episode_len;
  std::vector<EpisodeStats> stats(episodes);
  if (threads <= 1) {
    for (int e = 0; e < episodes; ++e)
      stats[e] = run_episode(gc, scenario, env, policy, steps, eval_scenario_seed(seed_base, e));
  } else {
    std::vector<std::future<EpisodeStats>> futures;
    futures.reserve(episodes);
    for (int e = 0; e < episodes; ++e)
      futures.push_back(std::async(std::launch::async, [&, e] {
        return run_episode(gc, scenario, env, policy, steps, eval_scenario_seed(seed_base, e));
      }));
    for (int e = 0; e < episodes; ++e) stats[e] = futures[e].get();  // merged in seed order
  }

  EvalReport rep;
  long vm_ok = 0, slack_ok = 0;
  double vm_sum = 0.0;
  for (const auto& st : stats) {
    rep.steps += st.steps;
    rep.pf_failures += st.pf_failures;
    vm_ok += st.vm_ok;
    slack_ok += st.slack_ok;
    vm_sum += st.vm_sum;
    rep.episode_rewards.push_back(st.steps > 0 ? st.reward_sum / st.steps : 0.0);
    rep.mean_reward += st.reward_sum;
  }
  if (rep.steps > 0) {
    rep.mean_reward /= rep.steps;
    rep.feas_vm_rate = static_cast<double>(vm_ok) / rep.steps;
    rep.feas_slack_rate = static_cast<double>(slack_ok) / rep.steps;
    rep.mean_vm = vm_sum / rep.steps;
  }
  const int ne = static_cast<int>(rep.episode_rewards.size());
  if (ne > 0) {
    rep.episode_reward_mean =
        std::accumulate(rep.episode_rewards.begin(), rep.episode_rewards.end(), 0.0) / ne;
    double var = 0.0;
    for (double r : rep.episode_rewards) {
      const double d = r - rep.episode_reward_mean;
      var += d * d;
    }
    rep.episode_reward_std = ne > 1 ? std::sqrt(var / (ne - 1)) : 0.0;
  }
  return rep;
}

std::vector<double> oracle_episode_rewards(const GridCase& gc, const ScenarioConfig& scenario,
                                           int episodes, int steps_per_episode,
                                           std::uint64_t seed_base, int block_len,
                                           const OracleOptions& opts) {
  const int steps = steps_per_episode > 0 ? steps_per_episode : scenario.episode_len;
  std::vector<double> rewards;
  for (int e = 0; e < episodes; ++e) {
    Scenario sc = generate_scenario(gc, scenario, eval_scenario_seed(seed_base, e));
    Eigen::VectorXd soc0(gc.n_bess);
    EnvConfig env_defaults;
    soc0.setConstant(env_defaults.initial_soc);
    OracleSolution sol = solve_receding(gc, sc, steps, block_len, soc0, opts);
    rewards.push_back(-sol.objective / steps);  // per-step reward scale
  }
  return rewards;
}

NamedParams gather_params(TrainedArtifacts& art) {
  NamedParams all;
  auto append = [&all](NamedParams np, const std::string& prefix) {
    for (auto& [name, v] : np) all.emplace_back(prefix + name, v);
  };
  append(art.actor->named_params(), "");
  append(art.predictor->named_params(), "");
  append(art.critic1->named_params(), "q1/");
  append(art.critic2->named_params(), "q2/");
  append(art.target1->named_params(), "t1/");
  append(art.target2->named_params(), "t2/");
  return all;
}

int cmd_train(const RunConfig& cfg, std::ostream& out) {
  GridCase gc = load_case(cfg.case_path);
  TrainerConfig tc = cfg.trainer;
  tc.kind = baseline_from_string(cfg.baseline);
  ScenarioStream stream = make_scenario_stream(gc, cfg.scenario, cfg.scenario.seed);

  std::filesystem::create_directories(cfg.out_dir);
  TrainedArtifacts art = train(tc, cfg.nets, gc, stream);

  write_metrics_csv(cfg.out_dir + "/metrics.csv", art.metrics);
  NamedParams params = gather_params(art);
  save_checkpoint(cfg.out_dir + "/checkpoint.bin", params);

  // Summary over the last 10% of steps.
  const std::size_t tail = std::max<std::size_t>(1, art.metrics.size() / 10);
  double reward = 0.0, vm = 0.0, slack = 0.0;
  for (std::size_t i = art.metrics.size() - tail; i < art.metrics.size(); ++i) {
    reward += art.metrics[i].reward;
    vm += art.metrics[i].feasible_vm;
    slack += art.metrics[i].feasible_slack;
  }
  json summary;
  summary["final_reward_mean"] = reward / tail;
  summary["feasible_vm_rate"] = vm / tail;
  summary["feasible_slack_rate"] = slack / tail;
  summary["r_lambda_norm"] = art.metrics.empty() ? 0.0 : art.metrics.back().r_lambda_norm;
  summary["r_mu_norm"] = art.metrics.empty() ? 0.0 : art.metrics.back().r_mu_norm;
  summary["pf_failures"] = art.pf_failures;
  summary["train_seconds"] = art.train_seconds;
  summary["steps"] = art.metrics.size();
  std::ofstream(cfg.out_dir + "/summary.json") << summary.dump(2) << "\n";

  json manifest;
  manifest["version"] = "sdopf 0.1.0";
  manifest["case"] = cfg.case_path;
  manifest["baseline"] = cfg.baseline;
  manifest["seed"] = cfg.seed;
  manifest["scenario_seed"] = cfg.scenario.seed;
  manifest["actor_params"] = art.actor->param_count();
  {
    std::ifstream cfg_in(cfg.case_path);
    std::stringstream ss;
    ss << cfg_in.rdbuf();
    manifest["case_hash"] = fnv1a(ss.str());
  }
  std::ofstream(cfg.out_dir + "/manifest.json") << manifest.dump(2) << "\n";

  out << "train: " << art.metrics.size() << " steps in " << art.train_seconds << " s, "
      << "final mean reward " << summary["final_reward_mean"].get<double>() << ", pf failures "
      << art.pf_failures << "\n";
  out << "wrote " << cfg.out_dir << "/metrics.csv, checkpoint.bin, summary.json, manifest.json\n";
  return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint_path, std::ostream& out) {
  GridCase gc = load_case(cfg.case_path);
  TrainerConfig tc = cfg.trainer;
  tc.max_iterations = 0;
  Trainer shell(tc, cfg.nets, gc, make_scenario_stream(gc, cfg.scenario, cfg.scenario.seed));
  TrainedArtifacts art = shell.run();
  NamedParams params = gather_params(art);
  load_checkpoint(checkpoint_path, params);

  EvalReport rep = evaluate_policy(gc, cfg.scenario, tc.env, actor_policy(art.actor),
                                   cfg.eval.episodes, cfg.eval.steps_per_episode, cfg.seed,
                                   cfg.eval.threads);
  out << "eval: steps=" << rep.steps << " mean_reward=" << fmt(rep.mean_reward)
      << " feasible_vm_rate=" << fmt(rep.feas_vm_rate)
      << " feasible_slack_rate=" << fmt(rep.feas_slack_rate) << " pf_failures=" << rep.pf_failures
      << "\n";
  if (cfg.eval.with_oracle) {
    std::vector<double> oracle = oracle_episode_rewards(gc, cfg.scenario, cfg.eval.episodes,
                                                        cfg.eval.steps_per_episode, cfg.seed,
                                                        cfg.eval.oracle_block, cfg.eval.oracle);
    const double gap = optimal_gap(rep.episode_rewards, oracle);
    out << "optimal_gap_percent=" << fmt(gap) << "\n";
  }
  return 0;
}

int cmd_pf(const std::string& case_path, std::ostream& out) {
  GridCase gc = load_case(case_path);
  // Mid-box dispatch on non-slack generators, storage idle, base demands.
  Eigen::VectorXd g_p = 0.5 * (gc.gen_p_min + gc.gen_p_max);
  Eigen::VectorXd g_q = 0.5 * (gc.gen_q_min + gc.gen_q_max);
  g_p(gc.slack_gen) = 0.0;
  g_q(gc.slack_gen) = 0.0;
  Eigen::VectorXd p = expand_to_nodes(gc.maps, g_p, DeviceKind::Gen) - gc.d_p_base;
  Eigen::VectorXd q = expand_to_nodes(gc.maps, g_q, DeviceKind::Gen) - gc.d_q_base;
  PowerFlowSpec spec = PowerFlowSpec::all_pq(gc, p, q);
  NewtonResult res = newton_solve(gc, spec, flat_start(gc.n_bus));
  out << "pf: case=" << gc.name << " converged=" << (res.converged ? "yes" : "no")
      << " iterations=" << res.iterations << " mismatch_inf_norm=" << fmt(res.mismatch) << "\n";
  Eigen::VectorXd vm = res.v.cwiseAbs();
  out << "vm_min=" << fmt(vm.minCoeff()) << " vm_max=" << fmt(vm.maxCoeff()) << "\n";
  return res.converged ? 0 : 2;
}

int cmd_oracle(const RunConfig& cfg, int horizon, const std::string& csv_path,
               std::ostream& out) {
  GridCase gc = load_case(cfg.case_path);
  Scenario sc = generate_scenario(gc, cfg.scenario, cfg.scenario.seed);
  OracleProblem prob;
  prob.gc = &gc;
  prob.d_p = sc.d_p.topRows(horizon);
  prob.d_q = sc.d_q.topRows(horizon);
  EnvConfig env_defaults;
  prob.soc0 = Eigen::VectorXd::Constant(gc.n_bess, env_defaults.initial_soc);
  OracleSolution sol = solve_multiperiod(prob, cfg.eval.oracle);

  std::ofstream csv(csv_path);
  if (!csv) throw ConfigError("cannot open oracle output: " + csv_path);
  csv << "t";
  for (int g = 0; g < gc.n_gen; ++g) csv << ",g_p" << g + 1;
  for (int g = 0; g < gc.n_gen; ++g) csv << ",g_q" << g + 1;
  for (int b = 0; b < gc.n_bess; ++b) csv << ",p_ch" << b + 1;
  for (int b = 0; b < gc.n_bess; ++b) csv << ",p_dis" << b + 1;
  for (int b = 0; b < gc.n_bess; ++b) csv << ",soc" << b + 1;
  csv << "\n";
  for (std::size_t t = 0; t < sol.actions.size(); ++t) {
    csv << t;
    const auto& a = sol.actions[t];
    for (int g = 0; g < gc.n_gen; ++g) csv << "," << fmt(a.g_p(g));
    for (int g = 0; g < gc.n_gen; ++g) csv << "," << fmt(a.g_q(g));
    for (int b = 0; b < gc.n_bess; ++b) csv << "," << fmt(a.p_ch(b));
    for (int b = 0; b < gc.n_bess; ++b) csv << "," << fmt(a.p_dis(b));
    for (int b = 0; b < gc.n_bess; ++b) csv << "," << fmt(sol.soc(static_cast<int>(t), b));
    csv << "\n";
  }
  out << "oracle: objective=" << fmt(sol.objective) << " converged=" << (sol.converged ? "yes" : "no")
      << " kkt_stationarity=" << fmt(sol.kkt_stationarity) << " kkt_primal=" << fmt(sol.kkt_primal)
      << " kkt_complementarity=" << fmt(sol.kkt_complementarity) << "\n";
  return sol.converged ? 0 : 2;
}

int cmd_env_rollout(const RunConfig& cfg, int steps, const std::string& csv_path,
                    std::ostream& out) {
  GridCase gc = load_case(cfg.case_path);
  Scenario sc = generate_scenario(gc, cfg.scenario, cfg.scenario.seed);
  EnvConfig env = cfg.trainer.env;
  env.horizon = cfg.trainer.horizon;
  EnvState state = make_initial_state(gc, env);
  Policy policy = random_policy(gc, cfg.trainer.horizon, cfg.seed);

  std::ofstream csv(csv_path);
  if (!csv) throw ConfigError("cannot open rollout output: " + csv_path);
  csv << "t";
  for (int b = 0; b < gc.n_bess; ++b) csv << ",soc" << b + 1;
  csv << ",reward";
  for (int i = 0; i < gc.n_bus; ++i) csv << ",vm" << i + 1;
  csv << ",slack_g_p\n";
  int written = 0;
  for (int t = 0; t < steps; ++t) {
    auto [next, r, info] = env_step(state, policy(state), sc, gc, env);
    csv << t;
    for (int b = 0; b < gc.n_bess; ++b) csv << "," << fmt(next.soc(gc.bess_buses[b]));
    csv << "," << fmt(r);
    for (int i = 0; i < gc.n_bus; ++i) csv << "," << fmt(info.vm(i));
    csv << "," << fmt(info.slack_g_p) << "\n";
    ++written;
    state = next;
    if (info.done) break;
  }
  out << "env-rollout: wrote " << written << " rows to " << csv_path << "\n";
  return 0;
}

int cmd_gradcheck(int instances, std::ostream& out) {
  ad::SuiteResult res = ad::run_gradcheck_suite(instances, 20240817, 1e-5, &out);
  return res.passed ? 0 : 2;
}

}  // namespace sdopf
