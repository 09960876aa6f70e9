#include "sdopf/powerflow.hpp"

#include <cmath>

#include <Eigen/LU>

namespace sdopf {

Eigen::VectorXcd flat_start(int n_bus) { return Eigen::VectorXcd::Ones(n_bus); }

PowerFlowSpec PowerFlowSpec::all_pq(const GridCase& gc, const Eigen::VectorXd& p,
                                    const Eigen::VectorXd& q) {
  PowerFlowSpec spec;
  spec.p_sched = p;
  spec.q_sched = q;
  spec.pv_bus_vm = Eigen::VectorXd::Ones(gc.n_bus);
  spec.bus_type.assign(gc.n_bus, BusType::PQ);
  spec.bus_type[gc.slack_bus] = BusType::Slack;
  return spec;
}

Eigen::VectorXcd complex_injections(const Eigen::VectorXcd& v, const Eigen::MatrixXcd& y) {
  return v.cwiseProduct((y * v).conjugate());
}

std::pair<Eigen::VectorXd, Eigen::VectorXd> pf_residual(const Eigen::VectorXcd& v,
                                                        const GridCase& gc,
                                                        const Eigen::VectorXd& p_sched,
                                                        const Eigen::VectorXd& q_sched) {
  Eigen::VectorXcd s = complex_injections(v, gc.Y);
  return {p_sched - s.real(), q_sched - s.imag()};
}

InjectionJacobian injection_jacobian(const Eigen::VectorXcd& v, const Eigen::MatrixXcd& y) {
  const int n = static_cast<int>(v.size());
  InjectionJacobian jac;
  jac.dp_dth.setZero(n, n);
  jac.dp_dvm.setZero(n, n);
  jac.dq_dth.setZero(n, n);
  jac.dq_dvm.setZero(n, n);

  Eigen::VectorXd vm = v.cwiseAbs();
  Eigen::VectorXd th(n);
  for (int i = 0; i < n; ++i) th(i) = std::arg(v(i));
  Eigen::VectorXcd s = complex_injections(v, y);

  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < n; ++k) {
      const double g = y(i, k).real();
      const double b = y(i, k).imag();
      if (i == k) {
        jac.dp_dth(i, i) = -s(i).imag() - b * vm(i) * vm(i);
        jac.dq_dth(i, i) = s(i).real() - g * vm(i) * vm(i);
        jac.dp_dvm(i, i) = s(i).real() / vm(i) + g * vm(i);
        jac.dq_dvm(i, i) = s(i).imag() / vm(i) - b * vm(i);
      } else {
        const double tik = th(i) - th(k);
        const double c = std::cos(tik), si = std::sin(tik);
        jac.dp_dth(i, k) = vm(i) * vm(k) * (g * si - b * c);
        jac.dq_dth(i, k) = -vm(i) * vm(k) * (g * c + b * si);
        jac.dp_dvm(i, k) = vm(i) * (g * c + b * si);
        jac.dq_dvm(i, k) = vm(i) * (g * si - b * c);
      }
    }
  }
  return jac;
}

NewtonResult newton_solve(const GridCase& gc, const PowerFlowSpec& spec,
                          const Eigen::VectorXcd& v0, const NewtonOptions& opts) {
  const int n = gc.n_bus;
  NewtonResult res;

  // Unknown layout: angles at all non-slack buses, then magnitudes at PQ buses.
  std::vector<int> ang_buses, mag_buses;
  for (int i = 0; i < n; ++i) {
    if (spec.bus_type[i] == BusType::Slack) continue;
    ang_buses.push_back(i);
    if (spec.bus_type[i] == BusType::PQ) mag_buses.push_back(i);
  }
  const int na = static_cast<int>(ang_buses.size());
  const int nm = static_cast<int>(mag_buses.size());
  const int neq = na + nm;

  Eigen::VectorXd vm = v0.cwiseAbs();
  Eigen::VectorXd th(n);
  for (int i = 0; i < n; ++i) th(i) = std::arg(v0(i));
  th(gc.slack_bus) = 0.0;
  vm(gc.slack_bus) = 1.0;
  for (int i = 0; i < n; ++i)
    if (spec.bus_type[i] == BusType::PV) vm(i) = spec.pv_bus_vm(i);

  auto assemble_v = [&]() {
    Eigen::VectorXcd v(n);
    for (int i = 0; i < n; ++i) v(i) = std::polar(vm(i), th(i));
    return v;
  };

  auto mismatch_vec = [&](const Eigen::VectorXcd& v) {
    Eigen::VectorXcd s = complex_injections(v, gc.Y);
    Eigen::VectorXd f(neq);
    for (int a = 0; a < na; ++a) f(a) = spec.p_sched(ang_buses[a]) - s(ang_buses[a]).real();
    for (int m = 0; m < nm; ++m) f(na + m) = spec.q_sched(mag_buses[m]) - s(mag_buses[m]).imag();
    return f;
  };

  Eigen::VectorXcd v = assemble_v();
  Eigen::VectorXd f = mismatch_vec(v);
  res.mismatch = (neq > 0) ? f.lpNorm<Eigen::Infinity>() : 0.0;
  res.mismatch_history.push_back(res.mismatch);
  res.v = v;
  if (res.mismatch <= opts.tol || neq == 0) {
    res.converged = true;
    return res;
  }

  Eigen::MatrixXd jac(neq, neq);
  for (int it = 1; it <= opts.max_iter; ++it) {
    InjectionJacobian blocks = injection_jacobian(v, gc.Y);
    for (int a = 0; a < na; ++a) {
      for (int a2 = 0; a2 < na; ++a2) jac(a, a2) = blocks.dp_dth(ang_buses[a], ang_buses[a2]);
      for (int m = 0; m < nm; ++m) jac(a, na + m) = blocks.dp_dvm(ang_buses[a], mag_buses[m]);
    }
    for (int m = 0; m < nm; ++m) {
      for (int a2 = 0; a2 < na; ++a2) jac(na + m, a2) = blocks.dq_dth(mag_buses[m], ang_buses[a2]);
      for (int m2 = 0; m2 < nm; ++m2)
        jac(na + m, na + m2) = blocks.dq_dvm(mag_buses[m], mag_buses[m2]);
    }

    Eigen::PartialPivLU<Eigen::MatrixXd> lu(jac);
    // PartialPivLU has no rank query; detect singularity from the solution.
    Eigen::VectorXd dx = lu.solve(f);
    if (!dx.allFinite()) {
      res.singular = true;
      res.iterations = it;
      return res;
    }

    for (int a = 0; a < na; ++a) th(ang_buses[a]) += dx(a);
    for (int m = 0; m < nm; ++m) vm(mag_buses[m]) += dx(na + m);

    v = assemble_v();
    f = mismatch_vec(v);
    const double norm = f.lpNorm<Eigen::Infinity>();
    res.mismatch_history.push_back(norm);
    res.iterations = it;
    if (norm < res.mismatch) {
      res.mismatch = norm;
      res.v = v;
    }
    if (norm <= opts.tol) {
      res.converged = true;
      res.mismatch = norm;
      res.v = v;
      return res;
    }
    if (!v.allFinite()) {
      res.singular = true;
      return res;
    }
  }
  return res;  // not converged; best iterate retained
}

}  // namespace sdopf
