#pragma once

#include <cstdint>
#include <vector>

#include "sdopf/env.hpp"
#include "sdopf/grid.hpp"

namespace sdopf {

struct OracleError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Deterministic multi-period OPF over a known demand horizon.
struct OracleProblem {
  const GridCase* gc = nullptr;
  Eigen::MatrixXd d_p;    // T x N
  Eigen::MatrixXd d_q;
  Eigen::VectorXd soc0;   // length B, SOC entering the first step
};

struct OracleOptions {
  double tol = 1e-6;
  int max_outer = 60;
  int max_inner = 20000;
  double alpha0 = 100.0;
  double alpha_growth = 4.0;
  double alpha_cap = 1e7;
  int restarts = 5;
  std::uint64_t seed = 0;
  bool verbose = false;
  double vm_margin = 1e-4;  // shrink voltage box so replayed solutions stay feasible
};

struct OracleSolution {
  std::vector<PhysicalAction> actions;   // per step, slack generator included
  std::vector<Eigen::VectorXcd> v;       // per step voltage phasors
  Eigen::MatrixXd soc;                   // T x B, end-of-step state of charge
  double objective = 0.0;                // total fuel + conversion losses
  double kkt_stationarity = 0.0;
  double kkt_primal = 0.0;
  double kkt_complementarity = 0.0;
  bool converged = false;
  int outer_iterations = 0;
  Eigen::VectorXd x_raw;  // stacked decision vector, reusable as a warm start
};

/// Augmented-Lagrangian outer loop over the power-balance and SOC-recursion
/// equalities with spectral projected-gradient inner solves on the
/// box-constrained variables. Slack bus voltage is pinned at 1 p.u., zero
/// angle, matching the environment convention.
OracleSolution solve_multiperiod(const OracleProblem& prob, const OracleOptions& opts = {},
                                 const Eigen::VectorXd* warm_start = nullptr);

/// Solves a long horizon in consecutive blocks, stitching SOC continuity.
OracleSolution solve_receding(const GridCase& gc, const Scenario& scenario, int steps,
                              int block_len, const Eigen::VectorXd& soc0,
                              const OracleOptions& opts = {});

/// Maps a physical action back to the normalized block row (inverse of
/// denormalize; degenerate ranges map to 0.5 / 0).
Eigen::VectorXd normalize_action(const PhysicalAction& action, const GridCase& gc);

/// Mean percentage shortfall of the policy versus the oracle over episodes:
/// (oracle - policy) / |oracle| * 100. Episodes with near-zero oracle reward
/// are skipped.
double optimal_gap(const std::vector<double>& policy_episode_rewards,
                   const std::vector<double>& oracle_episode_rewards);

}  // namespace sdopf
