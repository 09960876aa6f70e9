#pragma once

#include <vector>

#include "sdopf/grid.hpp"

namespace sdopf {

enum class BusType { Slack, PV, PQ };

/// One-shot solve request: scheduled net injections per bus plus the bus
/// classification. The environment uses the all-PQ form (only the slack
/// balances); PV handling stays available for other callers.
struct PowerFlowSpec {
  Eigen::VectorXd p_sched;   // length N, net scheduled active injection
  Eigen::VectorXd q_sched;   // length N, net scheduled reactive injection
  Eigen::VectorXd pv_bus_vm; // length N, |v| target, used at PV buses only
  std::vector<BusType> bus_type;

  static PowerFlowSpec all_pq(const GridCase& gc, const Eigen::VectorXd& p,
                              const Eigen::VectorXd& q);
};

struct NewtonOptions {
  double tol = 1e-8;
  int max_iter = 20;
};

struct NewtonResult {
  Eigen::VectorXcd v;                  // best iterate
  bool converged = false;
  bool singular = false;               // Jacobian factorization failed
  int iterations = 0;
  double mismatch = 0.0;               // final infinity-norm over solved equations
  std::vector<double> mismatch_history;
};

/// Complex nodal injections s_i = v_i * conj((Y v)_i); the real part is the
/// active injection and the imaginary part the reactive injection.
Eigen::VectorXcd complex_injections(const Eigen::VectorXcd& v, const Eigen::MatrixXcd& y);

/// Active/reactive mismatch: scheduled minus computed injection at every bus.
std::pair<Eigen::VectorXd, Eigen::VectorXd> pf_residual(const Eigen::VectorXcd& v,
                                                        const GridCase& gc,
                                                        const Eigen::VectorXd& p_sched,
                                                        const Eigen::VectorXd& q_sched);

/// Dense polar-form injection Jacobian blocks evaluated at v: derivatives of
/// the computed P and Q injections with respect to angles and magnitudes.
struct InjectionJacobian {
  Eigen::MatrixXd dp_dth, dp_dvm, dq_dth, dq_dvm;  // each N x N
};
InjectionJacobian injection_jacobian(const Eigen::VectorXcd& v, const Eigen::MatrixXcd& y);

/// Newton-Raphson polar power flow with dense LU. Fixed iteration order,
/// deterministic for identical inputs.
NewtonResult newton_solve(const GridCase& gc, const PowerFlowSpec& spec,
                          const Eigen::VectorXcd& v0, const NewtonOptions& opts = {});

/// Flat 1 p.u. / zero angle profile.
Eigen::VectorXcd flat_start(int n_bus);

}  // namespace sdopf
