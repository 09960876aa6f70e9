#pragma once

#include <random>
#include <string>

#include "sdopf/env.hpp"
#include "sdopf/trainer.hpp"

namespace sdopf::testing {

inline GridCase two_bus_bess_case() {
  std::string text = R"({
    "name": "twobus_bess", "dt_over_ecap": 0.005,
    "buses": [
      {"id": 1, "v_min": 0.9, "v_max": 1.1, "d_p": 0.0, "d_q": 0.0},
      {"id": 2, "v_min": 0.9, "v_max": 1.1, "d_p": 0.3, "d_q": 0.1}
    ],
    "branches": [{"from": 1, "to": 2, "r": 0.038461538461538464, "x": 0.19230769230769232, "b_shunt": 0.0}],
    "generators": [
      {"bus": 1, "p_min": 0.0, "p_max": 2.0, "q_min": -1.0, "q_max": 1.0,
       "cost_a": 0.1, "cost_b": 1.0, "cost_c": 0.0, "is_slack": true},
      {"bus": 2, "p_min": 0.0, "p_max": 1.0, "q_min": -0.5, "q_max": 0.5,
       "cost_a": 0.2, "cost_b": 2.0, "cost_c": 0.0, "is_slack": false}
    ],
    "bess": [{"bus": 2, "p_ch_rated": 0.4, "p_dis_rated": 0.4, "eta_ch": 0.98, "eta_dis": 0.98,
              "soc_min": 0.1, "soc_max": 0.9}]
  })";
  return parse_case(text, "twobus_bess");
}

inline ScenarioConfig quiet_scenario(int len = 24) {
  ScenarioConfig cfg;
  cfg.episode_len = len;
  cfg.diurnal_harmonics = 0;
  cfg.noise_sigma = 0.0;
  return cfg;
}

inline NetConfig tiny_nets(int horizon = 2) {
  NetConfig cfg;
  cfg.cheb_order = 2;
  cfg.temporal_channels = 3;
  cfg.gcn_channels = 3;
  cfg.hidden = 8;
  cfg.horizon = horizon;
  return cfg;
}

inline TrainerConfig tiny_trainer(int horizon = 2) {
  TrainerConfig cfg;
  cfg.batch_size = 8;
  cfg.buffer_capacity = 64;
  cfg.exploration_steps = 10;
  cfg.horizon = horizon;
  cfg.max_iterations = 40;
  cfg.dual_period = 16;
  cfg.seed = 3;
  return cfg;
}

/// Rolls random actions through the environment to stock transitions the
/// way the training loop does.
inline std::vector<Transition> make_transitions(const GridCase& gc, int count, int horizon,
                                                std::uint64_t seed) {
  EnvConfig env;
  env.horizon = horizon;
  ScenarioConfig scfg = quiet_scenario(count + horizon + 4);
  scfg.noise_sigma = 0.05;
  Scenario sc = generate_scenario(gc, scfg, seed);
  EnvState state = make_initial_state(gc, env);
  std::mt19937_64 rng(seed + 1);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::vector<Transition> out;
  for (int k = 0; k < count; ++k) {
    ActionBlock block;
    block.a_hat.resize(horizon, ActionBlock::width(gc));
    for (int i = 0; i < horizon; ++i)
      for (int j = 0; j < block.a_hat.cols(); ++j) block.a_hat(i, j) = uni(rng);
    const int tau = state.t;
    auto [next, r, info] = env_step(state, block, sc, gc, env);
    Transition tr;
    tr.x_prev = state;
    tr.block = block;
    tr.r = r;
    tr.x_next = next;
    tr.done = !info.pf_converged;
    tr.d_p = sc.d_p.middleRows(tau, horizon);
    tr.d_q = sc.d_q.middleRows(tau, horizon);
    out.push_back(std::move(tr));
    state = next;
  }
  return out;
}

}  // namespace sdopf::testing
