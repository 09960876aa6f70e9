#include "sdopf/env.hpp"

#include <cmath>
#include <random>

namespace sdopf {

double diurnal_profile(int t, int episode_len, int harmonics) {
  // Base level chosen so peaks press against the swing-generator box on the
  // shipped cases; harmonics add the intraday shape.
  double p = 1.12;
  for (int h = 1; h <= harmonics; ++h) {
    const double phase = 2.0 * M_PI * 0.37 * h;
    p += (0.15 / h) * std::sin(2.0 * M_PI * h * t / episode_len + phase);
  }
  return p;
}

Scenario generate_scenario(const GridCase& gc, const ScenarioConfig& cfg, std::uint64_t seed) {
  constexpr int kMargin = 16;  // horizon lookahead kept available past the episode
  const int rows = cfg.episode_len + kMargin;
  Scenario sc;
  sc.episode_len = cfg.episode_len;
  sc.seed = seed;
  sc.d_p.resize(rows, gc.n_bus);
  sc.d_q.resize(rows, gc.n_bus);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);

  std::vector<double> wind(cfg.wind_buses.size(), cfg.wind_scale / 2.0);
  const double half_var = 0.5 * cfg.noise_sigma * cfg.noise_sigma;
  for (int t = 0; t < rows; ++t) {
    const double prof = diurnal_profile(t, cfg.episode_len, cfg.diurnal_harmonics);
    for (int i = 0; i < gc.n_bus; ++i) {
      // Mean-one lognormal multiplier; degenerates to 1 when sigma = 0.
      double noise = (cfg.noise_sigma > 0.0)
                         ? std::exp(cfg.noise_sigma * gauss(rng) - half_var)
                         : 1.0;
      sc.d_p(t, i) = gc.d_p_base(i) * prof * noise;
      sc.d_q(t, i) = gc.d_q_base(i) * prof * noise;
    }
    for (size_t w = 0; w < cfg.wind_buses.size(); ++w) {
      wind[w] = std::clamp(wind[w] + 0.15 * cfg.wind_scale * uni(rng), 0.0, cfg.wind_scale);
      sc.d_p(t, cfg.wind_buses[w]) -= wind[w];
    }
  }
  return sc;
}

PhysicalAction denormalize(const Eigen::VectorXd& a_hat_row, const GridCase& gc) {
  const int g = gc.n_gen, b = gc.n_bess;
  if (a_hat_row.size() != 2 * g + 2 * b)
    throw std::invalid_argument("denormalize: action row has wrong width");
  if ((a_hat_row.array() < 0.0).any() || (a_hat_row.array() > 1.0).any())
    throw std::invalid_argument("denormalize: normalized action outside [0,1]");
  PhysicalAction a;
  Eigen::VectorXd gp_hat = a_hat_row.segment(0, g);
  Eigen::VectorXd gq_hat = a_hat_row.segment(g, g);
  a.g_p = (Eigen::VectorXd::Ones(g) - gp_hat).cwiseProduct(gc.gen_p_min) +
          gp_hat.cwiseProduct(gc.gen_p_max);
  a.g_q = (Eigen::VectorXd::Ones(g) - gq_hat).cwiseProduct(gc.gen_q_min) +
          gq_hat.cwiseProduct(gc.gen_q_max);
  a.p_ch = a_hat_row.segment(2 * g, b).cwiseProduct(gc.bess.p_ch_rated);
  a.p_dis = a_hat_row.segment(2 * g + b, b).cwiseProduct(gc.bess.p_dis_rated);
  return a;
}

Eigen::VectorXd soc_step(const Eigen::VectorXd& soc, const Eigen::VectorXd& p_ch,
                         const Eigen::VectorXd& p_dis, const BessParams& bess) {
  return soc + bess.dt_over_ecap * (bess.eta_ch * p_ch - p_dis / bess.eta_dis);
}

std::pair<double, double> clamp_action_for_soc(double soc_i, double p_ch_i, double p_dis_i,
                                               double tol) {
  if (soc_i >= 1.0 - tol) p_ch_i = 0.0;
  if (soc_i <= tol) p_dis_i = 0.0;
  return {p_ch_i, p_dis_i};
}

double reward(const PhysicalAction& action, const GridCase& gc) {
  double fuel = 0.0;
  for (int g = 0; g < gc.n_gen; ++g) {
    const double p = action.g_p(g);
    fuel += gc.cost_a(g) * p * p + gc.cost_b(g) * p + gc.cost_c(g);
  }
  double ess = 0.0;
  for (int b = 0; b < gc.n_bess; ++b) {
    ess += (1.0 - gc.bess.eta_ch) * action.p_ch(b) +
           (1.0 / gc.bess.eta_dis - 1.0) * action.p_dis(b);
  }
  return -fuel - ess;
}

EnvState make_initial_state(const GridCase& gc, const EnvConfig& cfg) {
  EnvState st;
  st.v_history.assign(cfg.horizon, flat_start(gc.n_bus));
  st.soc = Eigen::VectorXd::Zero(gc.n_bus);
  for (int b = 0; b < gc.n_bess; ++b) st.soc(gc.bess_buses[b]) = cfg.initial_soc;
  st.t = 0;
  return st;
}

std::tuple<EnvState, double, EnvStepInfo> env_step(const EnvState& state, const ActionBlock& block,
                                                   const Scenario& scenario, const GridCase& gc,
                                                   const EnvConfig& cfg) {
  EnvStepInfo info;
  if (block.a_hat.rows() < 1 || block.a_hat.cols() != ActionBlock::width(gc))
    throw std::invalid_argument("env_step: action block has wrong shape");
  if (state.t >= scenario.episode_len)
    throw std::invalid_argument("env_step: episode already finished");

  PhysicalAction act = denormalize(block.a_hat.row(0).transpose(), gc);

  // SOC pipeline: clamp at the rails, step, then project into bounds.
  Eigen::VectorXd soc_b(gc.n_bess);
  for (int b = 0; b < gc.n_bess; ++b) soc_b(b) = state.soc(gc.bess_buses[b]);
  for (int b = 0; b < gc.n_bess; ++b) {
    auto [ch, dis] = clamp_action_for_soc(soc_b(b), act.p_ch(b), act.p_dis(b), cfg.soc_clamp_tol);
    act.p_ch(b) = ch;
    act.p_dis(b) = dis;
  }
  Eigen::VectorXd soc_next = soc_step(soc_b, act.p_ch, act.p_dis, gc.bess);
  for (int b = 0; b < gc.n_bess; ++b)
    soc_next(b) = std::clamp(soc_next(b), gc.bess.soc_min(b), gc.bess.soc_max(b));

  // Non-slack device setpoints are fixed; the slack bus absorbs the residual.
  const Eigen::VectorXd d_p = scenario.d_p.row(state.t).transpose();
  const Eigen::VectorXd d_q = scenario.d_q.row(state.t).transpose();
  Eigen::VectorXd g_p_sched = act.g_p, g_q_sched = act.g_q;
  g_p_sched(gc.slack_gen) = 0.0;  // slack action is ignored; realized below
  g_q_sched(gc.slack_gen) = 0.0;
  Eigen::VectorXd p_inj = expand_to_nodes(gc.maps, g_p_sched, DeviceKind::Gen) +
                          expand_to_nodes(gc.maps, act.p_dis - act.p_ch, DeviceKind::Bess) - d_p;
  Eigen::VectorXd q_inj = expand_to_nodes(gc.maps, g_q_sched, DeviceKind::Gen) - d_q;

  PowerFlowSpec spec = PowerFlowSpec::all_pq(gc, p_inj, q_inj);
  NewtonResult pf = newton_solve(gc, spec, state.v_history.front(), cfg.newton);
  if (!pf.converged) {
    // The warm start can sit outside the attraction basin after a sharp
    // setpoint change; retry once from flat before declaring failure.
    NewtonResult retry = newton_solve(gc, spec, flat_start(gc.n_bus), cfg.newton);
    if (retry.converged) pf = retry;
  }

  EnvState next = state;
  next.t = state.t + 1;
  for (int b = 0; b < gc.n_bess; ++b) next.soc(gc.bess_buses[b]) = soc_next(b);

  if (!pf.converged) {
    info.pf_converged = false;
    info.done = true;
    info.feasible_vm = false;
    info.feasible_slack = false;
    info.vm = pf.v.cwiseAbs();
    info.applied = act;
    // History shifts with the previous frame repeated; no solved voltage exists.
    for (int k = state.horizon() - 1; k > 0; --k) next.v_history[k] = state.v_history[k - 1];
    return {next, cfg.r_fail, info};
  }

  for (int k = state.horizon() - 1; k > 0; --k) next.v_history[k] = state.v_history[k - 1];
  next.v_history[0] = pf.v;

  // Realized slack generation closes the nodal balance at the slack bus.
  Eigen::VectorXcd s = complex_injections(pf.v, gc.Y);
  const int sb = gc.slack_bus;
  double bess_net_slack = 0.0;
  for (int b = 0; b < gc.n_bess; ++b)
    if (gc.bess_buses[b] == sb) bess_net_slack += act.p_dis(b) - act.p_ch(b);
  info.slack_g_p = s(sb).real() + d_p(sb) - bess_net_slack;
  info.slack_g_q = s(sb).imag() + d_q(sb);
  act.g_p(gc.slack_gen) = info.slack_g_p;
  act.g_q(gc.slack_gen) = info.slack_g_q;

  info.vm = pf.v.cwiseAbs();
  info.feasible_vm = ((info.vm.array() >= gc.v_min.array() - cfg.feas_tol) &&
                      (info.vm.array() <= gc.v_max.array() + cfg.feas_tol))
                         .all();
  info.feasible_slack = info.slack_g_p >= gc.gen_p_min(gc.slack_gen) - cfg.feas_tol &&
                        info.slack_g_p <= gc.gen_p_max(gc.slack_gen) + cfg.feas_tol;
  info.applied = act;
  info.done = (next.t >= scenario.episode_len);

  return {next, reward(act, gc), info};
}

}  // namespace sdopf
