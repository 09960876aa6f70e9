#pragma once

#include <cstdint>
#include <vector>

#include "sdopf/grid.hpp"
#include "sdopf/powerflow.hpp"

namespace sdopf {

/// RL state: sliding window of voltage phasors (index 0 is the newest
/// frame) plus the current SOC expanded to all buses (zero off storage
/// buses).
struct EnvState {
  std::vector<Eigen::VectorXcd> v_history;  // size T, each length N
  Eigen::VectorXd soc;                      // length N
  int t = 0;

  int horizon() const { return static_cast<int>(v_history.size()); }
};

/// Horizon-stacked normalized actions in [0,1]. Row layout per step:
/// [g_p (G) | g_q (G) | p_ch (B) | p_dis (B)].
struct ActionBlock {
  Eigen::MatrixXd a_hat;  // T x (2G + 2B)

  static int width(const GridCase& gc) { return 2 * gc.n_gen + 2 * gc.n_bess; }
};

struct PhysicalAction {
  Eigen::VectorXd g_p, g_q;      // length G, p.u.
  Eigen::VectorXd p_ch, p_dis;   // length B, p.u.
};

struct ScenarioConfig {
  int episode_len = 192;
  int diurnal_harmonics = 2;
  double noise_sigma = 0.05;
  std::vector<int> wind_buses;  // 0-based
  double wind_scale = 0.0;
  std::uint64_t seed = 0;
};

/// Demand/wind realization for one episode plus a horizon margin of extra
/// rows so constraint evaluation near the episode end always has future
/// demands available.
struct Scenario {
  Eigen::MatrixXd d_p;  // (episode_len + margin) x N
  Eigen::MatrixXd d_q;
  int episode_len = 0;
  std::uint64_t seed = 0;

  int rows() const { return static_cast<int>(d_p.rows()); }
};

struct EnvConfig {
  double r_fail = -100.0;
  double soc_clamp_tol = 1e-9;
  double feas_tol = 1e-6;
  double initial_soc = 0.5;
  int horizon = 4;  // history window T
  NewtonOptions newton;
};

struct EnvStepInfo {
  bool pf_converged = true;
  bool done = false;
  bool feasible_vm = true;
  bool feasible_slack = true;
  double slack_g_p = 0.0;
  double slack_g_q = 0.0;
  Eigen::VectorXd vm;            // solved magnitudes
  PhysicalAction applied;        // after clamping, slack entries realized
};

/// Diurnal multiplier used by the scenario generator; exposed so tests can
/// reproduce expected means.
double diurnal_profile(int t, int episode_len, int harmonics);

Scenario generate_scenario(const GridCase& gc, const ScenarioConfig& cfg, std::uint64_t seed);

/// Affine denormalization of one action row onto physical ranges.
PhysicalAction denormalize(const Eigen::VectorXd& a_hat_row, const GridCase& gc);

/// SOC recursion before any clamping or projection.
Eigen::VectorXd soc_step(const Eigen::VectorXd& soc, const Eigen::VectorXd& p_ch,
                         const Eigen::VectorXd& p_dis, const BessParams& bess);

/// Zeroes charging at full SOC and discharging at empty SOC.
std::pair<double, double> clamp_action_for_soc(double soc_i, double p_ch_i, double p_dis_i,
                                               double tol = 1e-9);

/// Negated fuel cost plus charge/discharge conversion losses.
double reward(const PhysicalAction& action, const GridCase& gc);

EnvState make_initial_state(const GridCase& gc, const EnvConfig& cfg);

/// One environment transition: applies the first row of the block, steps
/// the SOC with clamping and projection, solves the power flow with the
/// slack bus balancing, and shifts the history window.
std::tuple<EnvState, double, EnvStepInfo> env_step(const EnvState& state, const ActionBlock& block,
                                                   const Scenario& scenario, const GridCase& gc,
                                                   const EnvConfig& cfg);

}  // namespace sdopf
