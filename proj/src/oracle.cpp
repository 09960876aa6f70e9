#include "sdopf/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

#include "sdopf/powerflow.hpp"

namespace sdopf {

namespace {

constexpr double kInf = 1e30;

/// Per-step variable layout inside the stacked decision vector.
struct Layout {
  int g, b, n, stride;
  int gp, gq, ch, dis, vm, th, soc;

  explicit Layout(const GridCase& gc)
      : g(gc.n_gen), b(gc.n_bess), n(gc.n_bus) {
    gp = 0;
    gq = g;
    ch = 2 * g;
    dis = 2 * g + b;
    vm = 2 * g + 2 * b;
    th = vm + n;
    soc = th + n;
    stride = soc + b;
  }
};

struct Problem {
  const GridCase& gc;
  const OracleProblem& prob;
  Layout lay;
  int horizon;
  int nvar;
  int ncon;  // stacked equalities: per step [P (N), Q (N), soc (B)]
  Eigen::VectorXd lo, hi;

  Problem(const OracleProblem& p, const OracleOptions& opts)
      : gc(*p.gc), prob(p), lay(*p.gc), horizon(static_cast<int>(p.d_p.rows())) {
    nvar = horizon * lay.stride;
    ncon = horizon * (2 * lay.n + lay.b);
    lo.setConstant(nvar, -kInf);
    hi.setConstant(nvar, kInf);
    for (int t = 0; t < horizon; ++t) {
      const int o = t * lay.stride;
      for (int i = 0; i < lay.g; ++i) {
        lo(o + lay.gp + i) = gc.gen_p_min(i);
        hi(o + lay.gp + i) = gc.gen_p_max(i);
        lo(o + lay.gq + i) = gc.gen_q_min(i);
        hi(o + lay.gq + i) = gc.gen_q_max(i);
      }
      for (int i = 0; i < lay.b; ++i) {
        lo(o + lay.ch + i) = 0.0;
        hi(o + lay.ch + i) = gc.bess.p_ch_rated(i);
        lo(o + lay.dis + i) = 0.0;
        hi(o + lay.dis + i) = gc.bess.p_dis_rated(i);
        lo(o + lay.soc + i) = gc.bess.soc_min(i);
        hi(o + lay.soc + i) = gc.bess.soc_max(i);
      }
      for (int i = 0; i < lay.n; ++i) {
        lo(o + lay.vm + i) = gc.v_min(i) + opts.vm_margin;
        hi(o + lay.vm + i) = gc.v_max(i) - opts.vm_margin;
        lo(o + lay.th + i) = -M_PI;
        hi(o + lay.th + i) = M_PI;
      }
      // Slack phasor pinned to the environment convention.
      lo(o + lay.vm + gc.slack_bus) = 1.0;
      hi(o + lay.vm + gc.slack_bus) = 1.0;
      lo(o + lay.th + gc.slack_bus) = 0.0;
      hi(o + lay.th + gc.slack_bus) = 0.0;
    }
    for (int i = 0; i < nvar; ++i)
      if (lo(i) > hi(i)) throw OracleError("oracle: contradictory variable bounds");
  }

  Eigen::VectorXd project(const Eigen::VectorXd& x) const {
    return x.cwiseMax(lo).cwiseMin(hi);
  }

  double objective(const Eigen::VectorXd& x, Eigen::VectorXd* grad) const {
    double f = 0.0;
    if (grad) grad->setZero(nvar);
    for (int t = 0; t < horizon; ++t) {
      const int o = t * lay.stride;
      for (int i = 0; i < lay.g; ++i) {
        const double p = x(o + lay.gp + i);
        f += gc.cost_a(i) * p * p + gc.cost_b(i) * p + gc.cost_c(i);
        if (grad) (*grad)(o + lay.gp + i) += 2.0 * gc.cost_a(i) * p + gc.cost_b(i);
      }
      for (int i = 0; i < lay.b; ++i) {
        f += (1.0 - gc.bess.eta_ch) * x(o + lay.ch + i) +
             (1.0 / gc.bess.eta_dis - 1.0) * x(o + lay.dis + i);
        if (grad) {
          (*grad)(o + lay.ch + i) += 1.0 - gc.bess.eta_ch;
          (*grad)(o + lay.dis + i) += 1.0 / gc.bess.eta_dis - 1.0;
        }
      }
    }
    return f;
  }

  Eigen::VectorXcd voltages(const Eigen::VectorXd& x, int t) const {
    const int o = t * lay.stride;
    Eigen::VectorXcd v(lay.n);
    for (int i = 0; i < lay.n; ++i) v(i) = std::polar(x(o + lay.vm + i), x(o + lay.th + i));
    return v;
  }

  Eigen::VectorXd equalities(const Eigen::VectorXd& x) const {
    Eigen::VectorXd h(ncon);
    const double dte = gc.bess.dt_over_ecap;
    for (int t = 0; t < horizon; ++t) {
      const int o = t * lay.stride;
      const int co = t * (2 * lay.n + lay.b);
      Eigen::VectorXcd v = voltages(x, t);
      Eigen::VectorXcd s = complex_injections(v, gc.Y);
      Eigen::VectorXd gp = x.segment(o + lay.gp, lay.g);
      Eigen::VectorXd gq = x.segment(o + lay.gq, lay.g);
      Eigen::VectorXd ch = x.segment(o + lay.ch, lay.b);
      Eigen::VectorXd dis = x.segment(o + lay.dis, lay.b);
      Eigen::VectorXd inj_p = gc.maps.m_g * gp + gc.maps.m_b * (dis - ch) -
                              prob.d_p.row(t).transpose() - s.real();
      Eigen::VectorXd inj_q = gc.maps.m_g * gq - prob.d_q.row(t).transpose() - s.imag();
      h.segment(co, lay.n) = inj_p;
      h.segment(co + lay.n, lay.n) = inj_q;
      Eigen::VectorXd soc_prev =
          (t == 0) ? prob.soc0 : Eigen::VectorXd(x.segment((t - 1) * lay.stride + lay.soc, lay.b));
      h.segment(co + 2 * lay.n, lay.b) =
          x.segment(o + lay.soc, lay.b) - soc_prev -
          dte * (gc.bess.eta_ch * ch - dis / gc.bess.eta_dis);
    }
    return h;
  }

  /// Gradient of lam' h(x) for a stacked multiplier-like vector lam.
  void add_equality_gradient(const Eigen::VectorXd& x, const Eigen::VectorXd& lam,
                             Eigen::VectorXd& grad) const {
    const double dte = gc.bess.dt_over_ecap;
    for (int t = 0; t < horizon; ++t) {
      const int o = t * lay.stride;
      const int co = t * (2 * lay.n + lay.b);
      Eigen::VectorXd wp = lam.segment(co, lay.n);
      Eigen::VectorXd wq = lam.segment(co + lay.n, lay.n);
      Eigen::VectorXd ws = lam.segment(co + 2 * lay.n, lay.b);

      grad.segment(o + lay.gp, lay.g) += gc.maps.m_g.transpose() * wp;
      grad.segment(o + lay.gq, lay.g) += gc.maps.m_g.transpose() * wq;
      grad.segment(o + lay.ch, lay.b) -= gc.maps.m_b.transpose() * wp;
      grad.segment(o + lay.dis, lay.b) += gc.maps.m_b.transpose() * wp;

      Eigen::VectorXcd v = voltages(x, t);
      InjectionJacobian jac = injection_jacobian(v, gc.Y);
      grad.segment(o + lay.th, lay.n) -=
          jac.dp_dth.transpose() * wp + jac.dq_dth.transpose() * wq;
      grad.segment(o + lay.vm, lay.n) -=
          jac.dp_dvm.transpose() * wp + jac.dq_dvm.transpose() * wq;

      grad.segment(o + lay.soc, lay.b) += ws;
      if (t > 0) grad.segment((t - 1) * lay.stride + lay.soc, lay.b) -= ws;
      grad.segment(o + lay.ch, lay.b) -= dte * gc.bess.eta_ch * ws;
      grad.segment(o + lay.dis, lay.b) += (dte / gc.bess.eta_dis) * ws;
    }
  }

  Eigen::MatrixXd equality_jacobian(const Eigen::VectorXd& x) const {
    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(ncon, nvar);
    const double dte = gc.bess.dt_over_ecap;
    for (int t = 0; t < horizon; ++t) {
      const int o = t * lay.stride;
      const int co = t * (2 * lay.n + lay.b);
      jac.block(co, o + lay.gp, lay.n, lay.g) = gc.maps.m_g;
      jac.block(co, o + lay.ch, lay.n, lay.b) = -gc.maps.m_b;
      jac.block(co, o + lay.dis, lay.n, lay.b) = gc.maps.m_b;
      jac.block(co + lay.n, o + lay.gq, lay.n, lay.g) = gc.maps.m_g;
      InjectionJacobian pf = injection_jacobian(voltages(x, t), gc.Y);
      jac.block(co, o + lay.th, lay.n, lay.n) = -pf.dp_dth;
      jac.block(co, o + lay.vm, lay.n, lay.n) = -pf.dp_dvm;
      jac.block(co + lay.n, o + lay.th, lay.n, lay.n) = -pf.dq_dth;
      jac.block(co + lay.n, o + lay.vm, lay.n, lay.n) = -pf.dq_dvm;
      for (int i = 0; i < lay.b; ++i) {
        jac(co + 2 * lay.n + i, o + lay.soc + i) = 1.0;
        if (t > 0) jac(co + 2 * lay.n + i, (t - 1) * lay.stride + lay.soc + i) = -1.0;
        jac(co + 2 * lay.n + i, o + lay.ch + i) = -dte * gc.bess.eta_ch;
        jac(co + 2 * lay.n + i, o + lay.dis + i) = dte / gc.bess.eta_dis;
      }
    }
    return jac;
  }

  /// Inverse diagonal of the Gauss-Newton Hessian; equalizes the step
  /// scales of voltage, generation and storage coordinates.
  Eigen::VectorXd jacobi_metric(const Eigen::VectorXd& x, double alpha) const {
    Eigen::MatrixXd jac = equality_jacobian(x);
    Eigen::VectorXd diag = Eigen::VectorXd::Constant(nvar, 1e-3);
    for (int t = 0; t < horizon; ++t) {
      const int o = t * lay.stride;
      for (int i = 0; i < lay.g; ++i) diag(o + lay.gp + i) += 2.0 * gc.cost_a(i);
    }
    for (int i = 0; i < nvar; ++i) diag(i) += alpha * jac.col(i).squaredNorm();
    return diag.cwiseInverse();
  }

  double augmented(const Eigen::VectorXd& x, const Eigen::VectorXd& lam, double alpha,
                   Eigen::VectorXd* grad) const {
    double f = objective(x, grad);
    Eigen::VectorXd h = equalities(x);
    f += lam.dot(h) + 0.5 * alpha * h.squaredNorm();
    if (grad) {
      Eigen::VectorXd w = lam + alpha * h;
      add_equality_gradient(x, w, *grad);
    }
    return f;
  }
};

/// Inner solver: projected Levenberg-Marquardt on the box. The Hessian
/// model is the objective diagonal plus alpha J'J with J the equality
/// Jacobian; adaptive damping interpolates toward a scaled gradient step
/// whenever the Gauss-Newton system is near singular.
struct SpgResult {
  Eigen::VectorXd x;
  double pg_norm = 0.0;
};

SpgResult spg_minimize(const Problem& pb, const Eigen::VectorXd& x0,
                       const Eigen::VectorXd& lam, double alpha, double tol, int max_iter,
                       int* iters_used = nullptr) {
  Eigen::VectorXd x = pb.project(x0);
  Eigen::VectorXd grad(pb.nvar);
  double f = pb.augmented(x, lam, alpha, &grad);
  double pg_norm = (x - pb.project(x - grad)).lpNorm<Eigen::Infinity>();
  double mu = 1e-4;

  for (int it = 0; it < max_iter && pg_norm > tol; ++it) {
    if (iters_used) ++*iters_used;

    Eigen::MatrixXd jac = pb.equality_jacobian(x);
    std::vector<int> free_idx;
    free_idx.reserve(pb.nvar);
    for (int i = 0; i < pb.nvar; ++i) {
      const bool at_lo = x(i) <= pb.lo(i) + 1e-12 && grad(i) > 0.0;
      const bool at_hi = x(i) >= pb.hi(i) - 1e-12 && grad(i) < 0.0;
      if (!at_lo && !at_hi && pb.hi(i) > pb.lo(i)) free_idx.push_back(i);
    }
    if (free_idx.empty()) break;
    const int nf = static_cast<int>(free_idx.size());
    Eigen::MatrixXd jf(jac.rows(), nf);
    for (int k = 0; k < nf; ++k) jf.col(k) = jac.col(free_idx[k]);
    Eigen::MatrixXd h_base = alpha * (jf.transpose() * jf);
    Eigen::VectorXd gf(nf);
    for (int k = 0; k < nf; ++k) {
      gf(k) = grad(free_idx[k]);
      const int within = free_idx[k] % pb.lay.stride;
      if (within >= pb.lay.gp && within < pb.lay.gp + pb.lay.g)
        h_base(k, k) += 2.0 * pb.gc.cost_a(within - pb.lay.gp);
    }
    Eigen::VectorXd diag_scale(nf);
    for (int k = 0; k < nf; ++k) diag_scale(k) = std::max(h_base(k, k), 1e-8);

    bool accepted = false;
    Eigen::VectorXd x_new, g_new(pb.nvar);
    double f_new = 0.0, pg_new = 0.0;
    bool have_g_new = false;
    for (int attempt = 0; attempt < 40; ++attempt) {
      Eigen::MatrixXd h = h_base;
      for (int k = 0; k < nf; ++k) h(k, k) += mu * diag_scale(k);
      Eigen::VectorXd df = h.ldlt().solve(-gf);
      if (df.allFinite()) {
        Eigen::VectorXd d = Eigen::VectorXd::Zero(pb.nvar);
        for (int k = 0; k < nf; ++k) d(free_idx[k]) = df(k);
        x_new = pb.project(x + d);
        have_g_new = false;
        f_new = pb.augmented(x_new, lam, alpha, nullptr);
        if ((x_new - x).lpNorm<Eigen::Infinity>() > 1e-16) {
          if (f_new < f) {
            accepted = true;
            break;
          }
          // Tie at the resolution of f: take the step only if it strictly
          // reduces the projected gradient, which rules out cycling.
          if (f_new <= f + 1e-13 * (1.0 + std::abs(f))) {
            f_new = pb.augmented(x_new, lam, alpha, &g_new);
            have_g_new = true;
            pg_new = (x_new - pb.project(x_new - g_new)).lpNorm<Eigen::Infinity>();
            if (pg_new < 0.95 * pg_norm) {
              accepted = true;
              break;
            }
          }
        }
      }
      mu *= 4.0;
      if (mu > 1e14) break;
    }
    if (!accepted) break;
    mu = std::max(mu / 3.0, 1e-10);
    x = x_new;
    if (have_g_new) {
      grad = g_new;
      f = f_new;
      pg_norm = pg_new;
    } else {
      f = pb.augmented(x, lam, alpha, &grad);
      pg_norm = (x - pb.project(x - grad)).lpNorm<Eigen::Infinity>();
    }
  }
  return {x, pg_norm};
}

// Near-feasible start: capacity-proportional dispatch, storage idle, and a
// Newton power-flow solve per step so the voltage variables begin on the
// power-flow manifold. A far-from-feasible start tends to strand the
// augmented Lagrangian in spurious stationary points.
Eigen::VectorXd initial_point(const Problem& pb, std::mt19937_64* rng) {
  const auto& lay = pb.lay;
  const GridCase& gc = pb.gc;
  Eigen::VectorXd x(pb.nvar);
  const double p_cap = gc.gen_p_max.sum();
  for (int t = 0; t < pb.horizon; ++t) {
    const int o = t * lay.stride;
    const Eigen::VectorXd d_p = pb.prob.d_p.row(t).transpose();
    const Eigen::VectorXd d_q = pb.prob.d_q.row(t).transpose();
    const double share = p_cap > 0 ? std::max(d_p.sum(), 0.0) * 1.02 / p_cap : 0.0;

    Eigen::VectorXd g_p(lay.g), g_q(lay.g);
    for (int i = 0; i < lay.g; ++i) {
      g_p(i) = std::clamp(share * gc.gen_p_max(i), gc.gen_p_min(i), gc.gen_p_max(i));
      g_q(i) = std::clamp(d_q.sum() / lay.g, gc.gen_q_min(i), gc.gen_q_max(i));
    }
    Eigen::VectorXd g_p_pf = g_p, g_q_pf = g_q;
    g_p_pf(gc.slack_gen) = 0.0;
    g_q_pf(gc.slack_gen) = 0.0;
    PowerFlowSpec spec = PowerFlowSpec::all_pq(
        gc, gc.maps.m_g * g_p_pf - d_p, gc.maps.m_g * g_q_pf - d_q);
    NewtonResult pf = newton_solve(gc, spec, flat_start(lay.n));
    if (pf.converged) {
      Eigen::VectorXcd s = complex_injections(pf.v, gc.Y);
      g_p(gc.slack_gen) = std::clamp(s(gc.slack_bus).real() + d_p(gc.slack_bus),
                                     gc.gen_p_min(gc.slack_gen), gc.gen_p_max(gc.slack_gen));
      g_q(gc.slack_gen) = std::clamp(s(gc.slack_bus).imag() + d_q(gc.slack_bus),
                                     gc.gen_q_min(gc.slack_gen), gc.gen_q_max(gc.slack_gen));
      for (int i = 0; i < lay.n; ++i) {
        x(o + lay.vm + i) = std::abs(pf.v(i));
        x(o + lay.th + i) = std::arg(pf.v(i));
      }
    } else {
      for (int i = 0; i < lay.n; ++i) {
        x(o + lay.vm + i) = 1.0;
        x(o + lay.th + i) = 0.0;
      }
    }
    for (int i = 0; i < lay.g; ++i) {
      x(o + lay.gp + i) = g_p(i);
      x(o + lay.gq + i) = g_q(i);
    }
    for (int i = 0; i < lay.b; ++i) {
      x(o + lay.ch + i) = 0.0;
      x(o + lay.dis + i) = 0.0;
      x(o + lay.soc + i) = std::clamp(pb.prob.soc0(i), gc.bess.soc_min(i), gc.bess.soc_max(i));
    }
  }
  if (rng) {
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    for (int i = 0; i < pb.nvar; ++i) {
      const double range = std::min(pb.hi(i) - pb.lo(i), 1.0);
      if (range > 0.0 && range < kInf) x(i) += 0.2 * range * uni(*rng);
    }
  }
  return pb.project(x);
}

/// Least-squares multiplier estimate on the free coordinates: minimizes
/// || grad f + J' lam || directly, sidestepping the finite-difference floor
/// of the ascent iterates.
Eigen::VectorXd refine_multipliers(const Problem& pb, const Eigen::VectorXd& x,
                                   const Eigen::VectorXd& lam0) {
  Eigen::VectorXd g_obj(pb.nvar);
  pb.objective(x, &g_obj);
  Eigen::MatrixXd jac = pb.equality_jacobian(x);
  std::vector<int> free_idx;
  for (int i = 0; i < pb.nvar; ++i) {
    const double span = pb.hi(i) - pb.lo(i);
    if (span <= 0) continue;
    const double margin = std::min(1e-9, 0.499 * span);
    if (x(i) > pb.lo(i) + margin && x(i) < pb.hi(i) - margin) free_idx.push_back(i);
  }
  if (free_idx.empty()) return lam0;
  const int nf = static_cast<int>(free_idx.size());
  Eigen::MatrixXd jf(jac.rows(), nf);
  Eigen::VectorXd gf(nf);
  for (int k = 0; k < nf; ++k) {
    jf.col(k) = jac.col(free_idx[k]);
    gf(k) = g_obj(free_idx[k]);
  }
  Eigen::MatrixXd normal = jf * jf.transpose();
  normal.diagonal().array() += 1e-12;
  Eigen::VectorXd lam = normal.ldlt().solve(-(jf * gf));
  return lam.allFinite() ? lam : lam0;
}

OracleSolution extract_solution(const Problem& pb, const Eigen::VectorXd& x,
                                const Eigen::VectorXd& lam, int outer_iters) {
  const auto& lay = pb.lay;
  OracleSolution sol;
  sol.x_raw = x;
  sol.outer_iterations = outer_iters;
  sol.objective = pb.objective(x, nullptr);
  sol.soc.resize(pb.horizon, lay.b);
  for (int t = 0; t < pb.horizon; ++t) {
    const int o = t * lay.stride;
    PhysicalAction a;
    a.g_p = x.segment(o + lay.gp, lay.g);
    a.g_q = x.segment(o + lay.gq, lay.g);
    a.p_ch = x.segment(o + lay.ch, lay.b);
    a.p_dis = x.segment(o + lay.dis, lay.b);
    sol.actions.push_back(a);
    sol.v.push_back(pb.voltages(x, t));
    sol.soc.row(t) = x.segment(o + lay.soc, lay.b).transpose();
  }

  Eigen::VectorXd grad(pb.nvar);
  pb.objective(x, &grad);
  pb.add_equality_gradient(x, lam, grad);
  sol.kkt_stationarity = (x - pb.project(x - grad)).lpNorm<Eigen::Infinity>();
  sol.kkt_primal = pb.equalities(x).lpNorm<Eigen::Infinity>();
  double comp = 0.0;
  for (int i = 0; i < pb.nvar; ++i) {
    const double lo_slack = x(i) - pb.lo(i);
    const double hi_slack = pb.hi(i) - x(i);
    comp = std::max(comp, std::abs(std::min(std::max(grad(i), 0.0), lo_slack)));
    comp = std::max(comp, std::abs(std::min(std::max(-grad(i), 0.0), hi_slack)));
  }
  sol.kkt_complementarity = comp;
  return sol;
}

OracleSolution solve_once(const Problem& pb, const OracleOptions& opts, std::mt19937_64* rng,
                          const Eigen::VectorXd* warm = nullptr) {
  Eigen::VectorXd x = warm ? pb.project(*warm) : initial_point(pb, rng);
  Eigen::VectorXd lam = Eigen::VectorXd::Zero(pb.ncon);
  double alpha = opts.alpha0;
  double prev_h_norm = kInf;

  int outer = 0;
  int total_inner = 0;
  for (outer = 1; outer <= opts.max_outer; ++outer) {
    const double inner_tol = std::max(opts.tol * 0.5, 1e-10);
    SpgResult inner = spg_minimize(pb, x, lam, alpha, inner_tol, opts.max_inner, &total_inner);
    x = inner.x;
    if (opts.verbose)
      std::fprintf(stderr, "  outer %d: alpha=%g h=%g pg=%g inner_total=%d\n", outer, alpha,
                   pb.equalities(x).lpNorm<Eigen::Infinity>(), inner.pg_norm, total_inner);
    Eigen::VectorXd h = pb.equalities(x);
    const double h_norm = h.lpNorm<Eigen::Infinity>();
    // Once the residual sits far below tolerance, further ascent steps only
    // inject noise into the multipliers.
    if (h_norm > 0.01 * opts.tol) lam += alpha * h;
    // The multiplier update makes the plain-Lagrangian gradient at (x, lam)
    // equal the augmented gradient the inner solve just drove down.
    if (h_norm <= opts.tol && inner.pg_norm <= opts.tol) break;
    // Multiplier refinement keeps stationarity in check separately, so the
    // penalty can keep growing whenever the residual stalls above tolerance.
    if (h_norm > opts.tol && h_norm > 0.5 * prev_h_norm)
      alpha = std::min(alpha * opts.alpha_growth, opts.alpha_cap);
    prev_h_norm = h_norm;
  }
  auto stationarity_with = [&](const Eigen::VectorXd& xv, const Eigen::VectorXd& mult) {
    Eigen::VectorXd grad(pb.nvar);
    pb.objective(xv, &grad);
    pb.add_equality_gradient(xv, mult, grad);
    return (xv - pb.project(xv - grad)).lpNorm<Eigen::Infinity>();
  };
  Eigen::VectorXd lam_best = lam;
  {
    Eigen::VectorXd lam_lsq = refine_multipliers(pb, x, lam);
    if (stationarity_with(x, lam_lsq) < stationarity_with(x, lam)) lam_best = lam_lsq;
  }
  // Polish rounds: re-minimize with the refined multipliers, then refit.
  for (int polish = 0; polish < 3; ++polish) {
    if (stationarity_with(x, lam_best) <= opts.tol &&
        pb.equalities(x).lpNorm<Eigen::Infinity>() <= opts.tol)
      break;
    SpgResult inner = spg_minimize(pb, x, lam_best, alpha, opts.tol * 0.3, opts.max_inner);
    x = inner.x;
    Eigen::VectorXd lam_lsq = refine_multipliers(pb, x, lam_best);
    if (stationarity_with(x, lam_lsq) < stationarity_with(x, lam_best)) lam_best = lam_lsq;
  }
  OracleSolution sol = extract_solution(pb, x, lam_best, outer);
  sol.converged = sol.kkt_primal <= opts.tol && sol.kkt_stationarity <= opts.tol &&
                  sol.kkt_complementarity <= opts.tol;
  if (opts.verbose && !sol.converged) {
    Eigen::VectorXd grad(pb.nvar);
    pb.augmented(x, lam, alpha, &grad);
    Eigen::VectorXd pg = x - pb.project(x - grad);
    for (int k = 0; k < 5; ++k) {
      int imax = 0;
      pg.cwiseAbs().maxCoeff(&imax);
      const int t = imax / pb.lay.stride, w = imax % pb.lay.stride;
      std::fprintf(stderr, "  stuck[%d]: t=%d within=%d x=%g lo=%g hi=%g grad=%g pg=%g\n", k, t,
                   w, x(imax), pb.lo(imax), pb.hi(imax), grad(imax), pg(imax));
      pg(imax) = 0.0;
    }
  }
  return sol;
}

}  // namespace

OracleSolution solve_multiperiod(const OracleProblem& prob, const OracleOptions& opts,
                                 const Eigen::VectorXd* warm) {
  if (prob.d_p.rows() < 1) throw OracleError("oracle: empty horizon");
  if (!prob.d_p.allFinite() || !prob.d_q.allFinite())
    throw OracleError("oracle: demands must be finite");
  Problem pb(prob, opts);

  if (warm && warm->size() == pb.nvar) {
    OracleSolution warm_sol = solve_once(pb, opts, nullptr, warm);
    if (warm_sol.converged) return warm_sol;
  }
  OracleSolution best = solve_once(pb, opts, nullptr);
  std::mt19937_64 rng(opts.seed + 17);
  for (int r = 1; r < opts.restarts; ++r) {
    OracleSolution cand = solve_once(pb, opts, &rng);
    const bool better = (cand.converged && !best.converged) ||
                        (cand.converged == best.converged && cand.objective < best.objective);
    if (better) best = cand;
  }
  return best;
}

OracleSolution solve_receding(const GridCase& gc, const Scenario& scenario, int steps,
                              int block_len, const Eigen::VectorXd& soc0,
                              const OracleOptions& opts) {
  OracleSolution total;
  total.converged = true;
  total.objective = 0.0;
  Eigen::VectorXd soc = soc0;
  int t0 = 0;
  Eigen::VectorXd warm;
  int warm_len = -1;
  while (t0 < steps) {
    const int len = std::min(block_len, steps - t0);
    OracleProblem prob;
    prob.gc = &gc;
    prob.d_p = scenario.d_p.middleRows(t0, len);
    prob.d_q = scenario.d_q.middleRows(t0, len);
    prob.soc0 = soc;
    OracleSolution block =
        solve_multiperiod(prob, opts, (warm_len == len) ? &warm : nullptr);
    total.objective += block.objective;
    total.converged = total.converged && block.converged;
    total.kkt_primal = std::max(total.kkt_primal, block.kkt_primal);
    total.kkt_stationarity = std::max(total.kkt_stationarity, block.kkt_stationarity);
    total.kkt_complementarity = std::max(total.kkt_complementarity, block.kkt_complementarity);
    for (int t = 0; t < len; ++t) {
      total.actions.push_back(block.actions[t]);
      total.v.push_back(block.v[t]);
    }
    soc = block.soc.row(len - 1).transpose();
    if (block.x_raw.size() > 0) {
      // Tile the last step of this block as the initial guess for the next.
      const int stride = static_cast<int>(block.x_raw.size()) / len;
      warm.resize(block.x_raw.size());
      for (int t = 0; t < len; ++t)
        warm.segment(t * stride, stride) = block.x_raw.tail(stride);
      warm_len = len;
    }
    t0 += len;
  }
  total.soc.resize(static_cast<int>(total.actions.size()), gc.n_bess);
  return total;
}

Eigen::VectorXd normalize_action(const PhysicalAction& action, const GridCase& gc) {
  const int g = gc.n_gen, b = gc.n_bess;
  Eigen::VectorXd row(2 * g + 2 * b);
  for (int i = 0; i < g; ++i) {
    const double range = gc.gen_p_max(i) - gc.gen_p_min(i);
    row(i) = range > 0 ? std::clamp((action.g_p(i) - gc.gen_p_min(i)) / range, 0.0, 1.0) : 0.5;
    const double qrange = gc.gen_q_max(i) - gc.gen_q_min(i);
    row(g + i) =
        qrange > 0 ? std::clamp((action.g_q(i) - gc.gen_q_min(i)) / qrange, 0.0, 1.0) : 0.5;
  }
  for (int i = 0; i < b; ++i) {
    row(2 * g + i) = gc.bess.p_ch_rated(i) > 0
                         ? std::clamp(action.p_ch(i) / gc.bess.p_ch_rated(i), 0.0, 1.0)
                         : 0.0;
    row(2 * g + b + i) = gc.bess.p_dis_rated(i) > 0
                             ? std::clamp(action.p_dis(i) / gc.bess.p_dis_rated(i), 0.0, 1.0)
                             : 0.0;
  }
  return row;
}

double optimal_gap(const std::vector<double>& policy_episode_rewards,
                   const std::vector<double>& oracle_episode_rewards) {
  if (policy_episode_rewards.size() != oracle_episode_rewards.size())
    throw std::invalid_argument("optimal_gap: episode count mismatch");
  double total = 0.0;
  int counted = 0;
  for (std::size_t i = 0; i < policy_episode_rewards.size(); ++i) {
    const double oracle = oracle_episode_rewards[i];
    if (std::abs(oracle) < 1e-9) continue;
    total += (oracle - policy_episode_rewards[i]) / std::abs(oracle) * 100.0;
    ++counted;
  }
  return counted > 0 ? total / counted : 0.0;
}

}  // namespace sdopf
