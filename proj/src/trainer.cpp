#include "sdopf/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace sdopf {

using ad::Mat;
using ad::Value;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

Eigen::VectorXd bess_slice(const Eigen::VectorXd& nodal, const GridCase& gc) {
  Eigen::VectorXd out(gc.n_bess);
  for (int b = 0; b < gc.n_bess; ++b) out(b) = nodal(gc.bess_buses[b]);
  return out;
}

double violation_sum(const EnvStepInfo& info, const GridCase& gc) {
  double v = 0.0;
  for (int i = 0; i < gc.n_bus; ++i) {
    v += std::max(0.0, info.vm(i) - gc.v_max(i));
    v += std::max(0.0, gc.v_min(i) - info.vm(i));
  }
  v += std::max(0.0, info.slack_g_p - gc.gen_p_max(gc.slack_gen));
  v += std::max(0.0, gc.gen_p_min(gc.slack_gen) - info.slack_g_p);
  return v;
}

struct ConstraintGraph {
  // Per horizon offset; r4 only exists at the applied step (offset 0).
  std::vector<Value> r1, r2, r3, r4, m1, m2, m3, m4;
};

// Residual families of the augmented Lagrangian over the action block and
// the voltage-magnitude forecast. The realized next-state voltage and SOC
// samples enter as constants; future SOC values roll forward through the
// recursion so bound violations stay differentiable in the actions.
ConstraintGraph build_constraint_graph(const std::vector<const Transition*>& batch,
                                       const Value& actions, const Value& vm_pred,
                                       const GridCase& gc, int horizon) {
  const int nb = static_cast<int>(batch.size());
  const int n = gc.n_bus, g = gc.n_gen, b = gc.n_bess;
  const int d = 2 * g + 2 * b;

  Mat soc_prev(nb, b), soc_next(nb, b), vm_next(nb, n);
  Mat ang_re(nb, n), ang_im(nb, n);
  for (int s = 0; s < nb; ++s) {
    soc_prev.row(s) = bess_slice(batch[s]->x_prev.soc, gc).transpose();
    soc_next.row(s) = bess_slice(batch[s]->x_next.soc, gc).transpose();
    const Eigen::VectorXcd& v_real = batch[s]->x_next.v_history.front();
    vm_next.row(s) = v_real.cwiseAbs().transpose();
    // Realized angles enter the balance terms as constants; the magnitude
    // forecast replaces |v| per step while the phase is held at the latest
    // solved operating point.
    for (int i = 0; i < n; ++i) {
      const double theta = std::arg(v_real(i));
      ang_re(s, i) = std::cos(theta);
      ang_im(s, i) = std::sin(theta);
    }
  }
  Value angles = ad::constant_complex(ang_re, ang_im);
  // Y is complex symmetric, so right-multiplying by Y equals applying Y^T.
  Value y_t = ad::constant_complex(gc.Y.real(), gc.Y.imag());
  Value mg_t = ad::constant(gc.maps.m_g.transpose());
  Value mb_t = ad::constant(gc.maps.m_b.transpose());
  Value gp_min = ad::constant(gc.gen_p_min.transpose());
  Value gp_range = ad::constant((gc.gen_p_max - gc.gen_p_min).transpose());
  Value gq_min = ad::constant(gc.gen_q_min.transpose());
  Value gq_range = ad::constant((gc.gen_q_max - gc.gen_q_min).transpose());
  Value ch_rated = ad::constant(gc.bess.p_ch_rated.transpose());
  Value dis_rated = ad::constant(gc.bess.p_dis_rated.transpose());
  Value neg_soc_max = ad::constant(-gc.bess.soc_max.transpose());
  Value neg_soc_min = ad::constant(-gc.bess.soc_min.transpose());
  Value neg_v_max = ad::constant(-gc.v_max.transpose());
  Value neg_v_min = ad::constant(-gc.v_min.transpose());
  Value soc_prev_c = ad::constant(soc_prev);
  Value soc_next_c = ad::constant(soc_next);
  Value vm_next_c = ad::constant(vm_next);

  ConstraintGraph cg;
  Value soc_roll;  // realized SOC rolled through the recursion for offsets >= 1
  for (int j = 0; j < horizon; ++j) {
    std::vector<int> gp_idx(g), gq_idx(g), ch_idx(b), dis_idx(b), vm_idx(n);
    for (int k = 0; k < g; ++k) gp_idx[k] = j * d + k;
    for (int k = 0; k < g; ++k) gq_idx[k] = j * d + g + k;
    for (int k = 0; k < b; ++k) ch_idx[k] = j * d + 2 * g + k;
    for (int k = 0; k < b; ++k) dis_idx[k] = j * d + 2 * g + b + k;
    for (int k = 0; k < n; ++k) vm_idx[k] = j * n + k;

    Value g_p = ad::add_rowvec(ad::mul_rowvec(ad::gather_cols(actions, gp_idx), gp_range), gp_min);
    Value g_q = ad::add_rowvec(ad::mul_rowvec(ad::gather_cols(actions, gq_idx), gq_range), gq_min);
    Value p_ch = ad::mul_rowvec(ad::gather_cols(actions, ch_idx), ch_rated);
    Value p_dis = ad::mul_rowvec(ad::gather_cols(actions, dis_idx), dis_rated);
    Value vm = ad::gather_cols(vm_pred, vm_idx);

    Mat dpj(nb, n), dqj(nb, n);
    for (int s = 0; s < nb; ++s) {
      dpj.row(s) = batch[s]->d_p.row(j);
      dqj.row(s) = batch[s]->d_q.row(j);
    }

    // Phasor forecast: predicted magnitudes on the realized angles.
    Value v_fc = ad::mul(angles, ad::make_complex(vm, ad::constant(Mat::Zero(nb, n))));
    Value s_fc = ad::mul(v_fc, ad::conj(ad::complex_matmul(v_fc, y_t)));
    Value p_inj = ad::real_part(s_fc);
    Value q_inj = ad::imag_part(s_fc);

    Value dev_p = ad::add(ad::matmul(g_p, mg_t), ad::matmul(ad::sub(p_dis, p_ch), mb_t));
    cg.r1.push_back(ad::sub(ad::sub(dev_p, ad::constant(dpj)), p_inj));
    cg.r2.push_back(ad::sub(ad::sub(ad::matmul(g_q, mg_t), ad::constant(dqj)), q_inj));

    Value delta = ad::scale(ad::sub(ad::scale(p_ch, gc.bess.eta_ch),
                                    ad::scale(p_dis, 1.0 / gc.bess.eta_dis)),
                            gc.bess.dt_over_ecap);
    Value soc_val;
    if (j == 0) {
      soc_val = ad::add(soc_prev_c, delta);
      cg.r3.push_back(ad::sub(soc_next_c, soc_val));
      cg.r4.push_back(ad::sub(vm, vm_next_c));
      soc_roll = soc_next_c;
    } else {
      soc_roll = ad::add(soc_roll, delta);
      soc_val = soc_roll;
      cg.r3.push_back(Value());
      cg.r4.push_back(Value());
    }
    cg.m1.push_back(ad::relu_plus(ad::add_rowvec(soc_val, neg_soc_max)));
    cg.m2.push_back(ad::relu_plus(ad::neg(ad::add_rowvec(soc_val, neg_soc_min))));
    cg.m3.push_back(ad::relu_plus(ad::add_rowvec(vm, neg_v_max)));
    cg.m4.push_back(ad::relu_plus(ad::neg(ad::add_rowvec(vm, neg_v_min))));
  }
  return cg;
}

Eigen::VectorXd batch_mean_rows(const Value& v) {
  return v->re.colwise().mean().transpose();
}

double stacked_norm(const std::vector<Eigen::VectorXd>& families) {
  double sq = 0.0;
  for (const auto& f : families) sq += f.squaredNorm();
  return std::sqrt(sq);
}

}  // namespace

// ---------------------------------------------------------------------------
// ReplayBuffer

ReplayBuffer::ReplayBuffer(std::size_t capacity, std::uint64_t seed)
    : capacity_(capacity), rng_(seed) {
  data_.reserve(capacity);
}

void ReplayBuffer::push(Transition t) {
  if (data_.size() < capacity_) {
    data_.push_back(std::move(t));
  } else {
    data_[head_] = std::move(t);
    head_ = (head_ + 1) % capacity_;
  }
}

std::vector<const Transition*> ReplayBuffer::sample(int n) {
  std::vector<const Transition*> out;
  out.reserve(n);
  std::uniform_int_distribution<std::size_t> dist(0, data_.size() - 1);
  for (int i = 0; i < n; ++i) out.push_back(&data_[dist(rng_)]);
  return out;
}

// ---------------------------------------------------------------------------
// DualState / residuals

DualState DualState::zeros(const GridCase& gc, int horizon, double alpha0) {
  std::array<double, 8> ones{1, 1, 1, 1, 1, 1, 1, 1};
  return zeros(gc, horizon, alpha0, ones);
}

DualState DualState::zeros(const GridCase& gc, int horizon, double alpha0,
                           const std::array<double, 8>& family_scale) {
  DualState ds;
  const int n = gc.n_bus, b = gc.n_bess;
  for (int t = 0; t < horizon; ++t) {
    ds.lambda1.push_back(Eigen::VectorXd::Zero(n));
    ds.lambda2.push_back(Eigen::VectorXd::Zero(n));
    ds.lambda3.push_back(Eigen::VectorXd::Zero(b));
    ds.lambda4.push_back(Eigen::VectorXd::Zero(n));
    ds.mu1.push_back(Eigen::VectorXd::Zero(b));
    ds.mu2.push_back(Eigen::VectorXd::Zero(b));
    ds.mu3.push_back(Eigen::VectorXd::Zero(n));
    ds.mu4.push_back(Eigen::VectorXd::Zero(n));
    std::array<double, 8> a;
    for (int f = 0; f < 8; ++f) a[f] = alpha0 * family_scale[f];
    ds.alpha.push_back(a);
  }
  return ds;
}

double ResidualValues::lambda_norm() const {
  double sq = 0.0;
  for (const auto* fam : {&r1, &r2, &r3, &r4})
    for (const auto& v : *fam) sq += v.squaredNorm();
  return std::sqrt(sq);
}

double ResidualValues::mu_norm() const {
  double sq = 0.0;
  for (const auto* fam : {&m1, &m2, &m3, &m4})
    for (const auto& v : *fam) sq += v.squaredNorm();
  return std::sqrt(sq);
}

ResidualValues constraint_residuals(const Transition& tr, const Eigen::MatrixXd& vm_pred,
                                    const GridCase& gc) {
  ad::NoGradGuard ng;
  const int horizon = static_cast<int>(tr.block.a_hat.rows());
  if (vm_pred.rows() != horizon || vm_pred.cols() != gc.n_bus)
    throw std::invalid_argument("constraint_residuals: vm_pred must be T x N");
  if (tr.d_p.rows() < horizon)
    throw std::invalid_argument("constraint_residuals: demand horizon missing");

  Eigen::VectorXd block_flat = flatten_block(tr.block);
  Mat vm_flat(1, horizon * gc.n_bus);
  for (int t = 0; t < horizon; ++t)
    for (int i = 0; i < gc.n_bus; ++i) vm_flat(0, t * gc.n_bus + i) = vm_pred(t, i);

  std::vector<const Transition*> batch{&tr};
  ConstraintGraph cg = build_constraint_graph(batch, ad::constant(block_flat.transpose()),
                                              ad::constant(vm_flat), gc, horizon);
  ResidualValues rv;
  auto take = [](const std::vector<Value>& vs, std::vector<Eigen::VectorXd>& out) {
    for (const auto& v : vs)
      out.push_back(v ? Eigen::VectorXd(v->re.row(0).transpose()) : Eigen::VectorXd());
  };
  take(cg.r1, rv.r1);
  take(cg.r2, rv.r2);
  take(cg.r3, rv.r3);
  take(cg.r4, rv.r4);
  take(cg.m1, rv.m1);
  take(cg.m2, rv.m2);
  take(cg.m3, rv.m3);
  take(cg.m4, rv.m4);
  return rv;
}

// ---------------------------------------------------------------------------
// Trainer

ScenarioStream make_scenario_stream(const GridCase& gc, const ScenarioConfig& cfg,
                                    std::uint64_t seed_base) {
  const GridCase* gcp = &gc;
  return [gcp, cfg, seed_base](int episode) {
    return generate_scenario(*gcp, cfg, splitmix64(seed_base + static_cast<std::uint64_t>(episode)));
  };
}

Trainer::Trainer(const TrainerConfig& cfg, const NetConfig& nets, const GridCase& gc,
                 ScenarioStream stream)
    : cfg_(cfg), net_cfg_(nets), gc_(gc), stream_(std::move(stream)),
      duals_(DualState::zeros(gc, cfg.horizon, cfg.alpha0, cfg.alpha_family)),
      buffer_(cfg.buffer_capacity, splitmix64(cfg.seed + 5)),
      explore_rng_(splitmix64(cfg.seed + 6)) {
  net_cfg_.horizon = cfg_.horizon;
  cfg_.env.horizon = cfg_.horizon;
  actor_ = std::make_shared<ActorNet>(gc, net_cfg_, splitmix64(cfg.seed + 1));
  predictor_ = std::make_shared<PredictorNet>(gc, net_cfg_, splitmix64(cfg.seed + 2));
  critic1_ = std::make_shared<CriticNet>(gc, net_cfg_, splitmix64(cfg.seed + 3));
  critic2_ = std::make_shared<CriticNet>(gc, net_cfg_, splitmix64(cfg.seed + 4));
  target1_ = std::make_shared<CriticNet>(gc, net_cfg_, splitmix64(cfg.seed + 3));
  target2_ = std::make_shared<CriticNet>(gc, net_cfg_, splitmix64(cfg.seed + 4));
  c1_params_ = critic1_->params();
  c2_params_ = critic2_->params();
  t1_params_ = target1_->params();
  t2_params_ = target2_->params();
  for (auto& p : t1_params_) p->requires_grad = false;
  for (auto& p : t2_params_) p->requires_grad = false;

  ad::AdamConfig actor_adam{cfg.actor_lr};
  ad::AdamConfig critic_adam{cfg.critic_lr};
  std::vector<Value> actor_params = actor_->params();
  actor_opt_ = std::make_unique<ad::Adam>(actor_params, actor_adam);
  predictor_opt_ = std::make_unique<ad::Adam>(predictor_->params(), actor_adam);
  critic1_opt_ = std::make_unique<ad::Adam>(c1_params_, critic_adam);
  critic2_opt_ = std::make_unique<ad::Adam>(c2_params_, critic_adam);

  duals_.step_scale_lambda = cfg.step_scale_lambda;
  duals_.step_scale_mu = cfg.step_scale_mu;
}

std::pair<double, double> Trainer::critic_update(const std::vector<const Transition*>& batch) {
  const int nb = static_cast<int>(batch.size());
  std::vector<const EnvState*> prev, next;
  prev.reserve(nb);
  next.reserve(nb);
  Mat actions(nb, cfg_.horizon * actor_->action_width());
  for (int i = 0; i < nb; ++i) {
    prev.push_back(&batch[i]->x_prev);
    next.push_back(&batch[i]->x_next);
    actions.row(i) = flatten_block(batch[i]->block).transpose();
  }

  Mat y(nb, 1);
  {
    ad::NoGradGuard ng;
    Value next_actions = actor_->forward(next);
    if (net_cfg_.smoothing_noise > 0.0) {
      std::normal_distribution<double> gauss(0.0, net_cfg_.smoothing_noise);
      for (Eigen::Index i = 0; i < next_actions->re.rows(); ++i)
        for (Eigen::Index j = 0; j < next_actions->re.cols(); ++j)
          next_actions->re(i, j) =
              std::clamp(next_actions->re(i, j) + gauss(explore_rng_), 0.0, 1.0);
    }
    Value q1n = target1_->forward(next, next_actions);
    Value q2n = target2_->forward(next, next_actions);
    // Bootstrap through terminations: with strictly negative running
    // rewards, cutting the target at failures would make crashing the
    // cheapest continuation.
    for (int i = 0; i < nb; ++i)
      y(i, 0) = batch[i]->r + cfg_.gamma * std::min(q1n->re(i, 0), q2n->re(i, 0));
  }

  Value y_const = ad::constant(y);
  Value actions_const = ad::constant(actions);
  auto regress = [&](CriticNet& critic, ad::Adam& opt) {
    opt.zero_grad();
    Value q = critic.forward(prev, actions_const);
    Value diff = ad::sub(y_const, q);
    Value loss = ad::mean(ad::mul(diff, diff));
    ad::backward(loss);
    opt.step();
    opt.zero_grad();
    return loss->scalar();
  };
  const double l1 = regress(*critic1_, *critic1_opt_);
  const double l2 = regress(*critic2_, *critic2_opt_);
  return {l1, l2};
}

Trainer::LossParts Trainer::build_actor_loss(const std::vector<const Transition*>& batch,
                                             bool with_constraints) {
  const int nb = static_cast<int>(batch.size());
  std::vector<const EnvState*> prev;
  prev.reserve(nb);
  for (const auto* tr : batch) prev.push_back(&tr->x_prev);

  Value actions = actor_->forward(prev);
  Value q = critic1_->forward(prev, actions);
  LossParts parts;
  parts.loss = ad::neg(ad::mean(q));
  if (!with_constraints) return parts;

  Value vm_pred = predictor_->forward(prev);
  ConstraintGraph cg = build_constraint_graph(batch, actions, vm_pred, gc_, cfg_.horizon);

  Value total = parts.loss;
  auto add_family = [&](const Value& r, const Eigen::VectorXd& multiplier, double alpha) {
    if (!r) return;
    Value lam = ad::constant(multiplier.transpose());
    total = ad::add(total, ad::mean(ad::row_sum(ad::mul_rowvec(r, lam))));
    total = ad::add(total, ad::scale(ad::mean(ad::row_sum(ad::mul(r, r))), alpha / 2.0));
  };
  for (int j = 0; j < cfg_.horizon; ++j) {
    const auto& a = duals_.alpha[j];
    add_family(cg.r1[j], duals_.lambda1[j], a[0]);
    add_family(cg.r2[j], duals_.lambda2[j], a[1]);
    add_family(cg.r3[j], duals_.lambda3[j], a[2]);
    add_family(cg.m1[j], duals_.mu1[j], a[3]);
    add_family(cg.m2[j], duals_.mu2[j], a[4]);
    add_family(cg.r4[j], duals_.lambda4[j], a[5]);
    add_family(cg.m3[j], duals_.mu3[j], a[6]);
    add_family(cg.m4[j], duals_.mu4[j], a[7]);
  }
  parts.loss = total;

  auto collect = [&](const std::vector<Value>& vs, std::vector<Eigen::VectorXd>& out) {
    for (const auto& v : vs) out.push_back(v ? batch_mean_rows(v) : Eigen::VectorXd());
  };
  collect(cg.r1, parts.avg_r1);
  collect(cg.r2, parts.avg_r2);
  collect(cg.r3, parts.avg_r3);
  collect(cg.r4, parts.avg_r4);
  collect(cg.m1, parts.avg_m1);
  collect(cg.m2, parts.avg_m2);
  collect(cg.m3, parts.avg_m3);
  collect(cg.m4, parts.avg_m4);
  double lsq = 0.0, msq = 0.0;
  for (const auto* fam : {&parts.avg_r1, &parts.avg_r2, &parts.avg_r3, &parts.avg_r4})
    lsq += stacked_norm(*fam) * stacked_norm(*fam);
  for (const auto* fam : {&parts.avg_m1, &parts.avg_m2, &parts.avg_m3, &parts.avg_m4})
    msq += stacked_norm(*fam) * stacked_norm(*fam);
  parts.lambda_norm = std::sqrt(lsq);
  parts.mu_norm = std::sqrt(msq);
  return parts;
}

ad::Value Trainer::actor_loss_graph(const std::vector<const Transition*>& batch) {
  const bool with_constraints =
      cfg_.kind == BaselineKind::crl || cfg_.kind == BaselineKind::dc3;
  return build_actor_loss(batch, with_constraints).loss;
}

double Trainer::predictor_update(const std::vector<const Transition*>& batch) {
  // Supervised tie: regress the magnitude forecast onto the realized
  // magnitudes of the applied step (the only row with a ground truth).
  const int nb = static_cast<int>(batch.size());
  std::vector<const EnvState*> prev;
  prev.reserve(nb);
  Mat target(nb, gc_.n_bus);
  for (int i = 0; i < nb; ++i) {
    prev.push_back(&batch[i]->x_prev);
    target.row(i) = batch[i]->x_next.v_history.front().cwiseAbs().transpose();
  }
  predictor_opt_->zero_grad();
  Value vm_pred = predictor_->forward(prev);
  std::vector<int> row0(gc_.n_bus);
  for (int i = 0; i < gc_.n_bus; ++i) row0[i] = i;
  Value diff = ad::sub(ad::gather_cols(vm_pred, row0), ad::constant(target));
  Value loss = ad::mean(ad::mul(diff, diff));
  ad::backward(loss);
  predictor_opt_->step();
  predictor_opt_->zero_grad();
  return loss->scalar();
}

double Trainer::actor_update(const std::vector<const Transition*>& batch) {
  const bool with_constraints =
      cfg_.kind == BaselineKind::crl || cfg_.kind == BaselineKind::dc3;
  actor_opt_->zero_grad();
  predictor_opt_->zero_grad();
  critic1_opt_->zero_grad();

  LossParts parts = build_actor_loss(batch, with_constraints);
  ad::backward(parts.loss);
  actor_opt_->step();
  if (with_constraints) predictor_opt_->step();
  actor_opt_->zero_grad();
  predictor_opt_->zero_grad();
  critic1_opt_->zero_grad();

  if (with_constraints) {
    last_lambda_norm_ = parts.lambda_norm;
    last_mu_norm_ = parts.mu_norm;
  }
  return parts.loss->scalar();
}

void apply_dual_ascent(DualState& duals, const ResidualValues& avg) {
  for (int j = 0; j < duals.horizon(); ++j) {
    const auto& a = duals.alpha[j];
    auto ascend_eq = [&](Eigen::VectorXd& lam, const Eigen::VectorXd& r, double alpha) {
      if (r.size() == 0) return;
      lam += duals.step_scale_lambda * alpha * r;
    };
    auto ascend_ineq = [&](Eigen::VectorXd& mu, const Eigen::VectorXd& r, double alpha) {
      if (r.size() == 0) return;
      mu = (mu + duals.step_scale_mu * alpha * r).cwiseMax(0.0);
    };
    ascend_eq(duals.lambda1[j], avg.r1[j], a[0]);
    ascend_eq(duals.lambda2[j], avg.r2[j], a[1]);
    ascend_eq(duals.lambda3[j], avg.r3[j], a[2]);
    ascend_eq(duals.lambda4[j], avg.r4[j], a[5]);
    ascend_ineq(duals.mu1[j], avg.m1[j], a[3]);
    ascend_ineq(duals.mu2[j], avg.m2[j], a[4]);
    ascend_ineq(duals.mu3[j], avg.m3[j], a[6]);
    ascend_ineq(duals.mu4[j], avg.m4[j], a[7]);
  }
}

void Trainer::dual_update(const std::vector<const Transition*>& batch, long step) {
  ad::NoGradGuard ng;
  const int nb = static_cast<int>(batch.size());
  std::vector<const EnvState*> prev;
  prev.reserve(nb);
  for (const auto* tr : batch) prev.push_back(&tr->x_prev);
  Value actions = actor_->forward(prev);
  Value vm_pred = predictor_->forward(prev);
  ConstraintGraph cg = build_constraint_graph(batch, actions, vm_pred, gc_, cfg_.horizon);

  ResidualValues avg;
  auto collect = [&](const std::vector<Value>& vs, std::vector<Eigen::VectorXd>& out) {
    for (const auto& v : vs) out.push_back(v ? batch_mean_rows(v) : Eigen::VectorXd());
  };
  collect(cg.r1, avg.r1);
  collect(cg.r2, avg.r2);
  collect(cg.r3, avg.r3);
  collect(cg.r4, avg.r4);
  collect(cg.m1, avg.m1);
  collect(cg.m2, avg.m2);
  collect(cg.m3, avg.m3);
  collect(cg.m4, avg.m4);
  apply_dual_ascent(duals_, avg);

  const double lambda_norm = avg.lambda_norm();
  last_lambda_norm_ = lambda_norm;
  last_mu_norm_ = avg.mu_norm();

  if (cfg_.alpha_growth && prev_dual_lambda_norm_ >= 0.0 &&
      lambda_norm > 0.9 * prev_dual_lambda_norm_) {
    for (auto& a : duals_.alpha)
      for (double& v : a) v = std::min(v * cfg_.alpha_growth_factor, cfg_.alpha_cap);
  }
  prev_dual_lambda_norm_ = lambda_norm;
  (void)step;
}

TrainedArtifacts Trainer::run() {
  const auto t_start = std::chrono::steady_clock::now();
  TrainedArtifacts art;
  art.metrics.reserve(cfg_.max_iterations);

  int episode = 0;
  Scenario scenario = stream_(episode);
  EnvState state = make_initial_state(gc_, cfg_.env);
  std::uniform_real_distribution<double> uni(0.0, 1.0);

  double last_actor_loss = 0.0, last_c1 = 0.0, last_c2 = 0.0;
  const int width = actor_->action_width();

  for (long step = 1; step <= cfg_.max_iterations; ++step) {
    ActionBlock block;
    if (step <= cfg_.exploration_steps) {
      block.a_hat.resize(cfg_.horizon, width);
      for (int i = 0; i < cfg_.horizon; ++i)
        for (int j = 0; j < width; ++j) block.a_hat(i, j) = uni(explore_rng_);
    } else {
      block = actor_->act(state);
      double noise = cfg_.action_noise;
      if (cfg_.action_noise_final >= 0.0 && cfg_.max_iterations > cfg_.exploration_steps) {
        const double frac = static_cast<double>(step - cfg_.exploration_steps) /
                            (cfg_.max_iterations - cfg_.exploration_steps);
        noise = cfg_.action_noise + frac * (cfg_.action_noise_final - cfg_.action_noise);
      }
      if (noise > 0.0) {
        std::uniform_real_distribution<double> jitter(-noise, noise);
        for (int i = 0; i < block.a_hat.rows(); ++i)
          for (int j = 0; j < block.a_hat.cols(); ++j)
            block.a_hat(i, j) = std::clamp(block.a_hat(i, j) + jitter(explore_rng_), 0.0, 1.0);
      }
    }

    const int tau = state.t;
    auto [next, r, info] = env_step(state, block, scenario, gc_, cfg_.env);
    double stored_r = r;
    if (cfg_.kind == BaselineKind::penalty && info.pf_converged)
      stored_r -= cfg_.penalty_beta * violation_sum(info, gc_);

    Transition tr;
    tr.x_prev = state;
    tr.block = block;
    tr.r = stored_r;
    tr.x_next = next;
    tr.done = !info.pf_converged;
    tr.d_p = scenario.d_p.middleRows(tau, cfg_.horizon);
    tr.d_q = scenario.d_q.middleRows(tau, cfg_.horizon);
    buffer_.push(std::move(tr));

    if (buffer_.size() >= static_cast<std::size_t>(cfg_.batch_size)) {
      auto batch = buffer_.sample(cfg_.batch_size);
      std::tie(last_c1, last_c2) = critic_update(batch);
      if (cfg_.kind == BaselineKind::crl || cfg_.kind == BaselineKind::dc3)
        predictor_update(batch);
      if (step % cfg_.policy_delay == 0 && step > cfg_.actor_warmup) {
        last_actor_loss = actor_update(batch);
        soft_update(t1_params_, c1_params_, cfg_.tau);
        soft_update(t2_params_, c2_params_, cfg_.tau);
      }
      // Dual ascent waits for the policy phase: multipliers fitted to the
      // random policy's residual pattern would persist as a dispatch bias.
      if (cfg_.kind == BaselineKind::crl && step > cfg_.exploration_steps &&
          step % cfg_.dual_period == 0) {
        auto dual_batch = buffer_.sample(cfg_.batch_size);
        dual_update(dual_batch, step);
        art.dual_events.push_back({step, last_lambda_norm_, last_mu_norm_, duals_});
      }
    }

    MetricsRow row;
    row.step = step;
    row.reward = stored_r;
    row.critic_loss_1 = last_c1;
    row.critic_loss_2 = last_c2;
    row.actor_loss = last_actor_loss;
    row.r_lambda_norm = last_lambda_norm_;
    row.r_mu_norm = last_mu_norm_;
    row.feasible_vm = info.feasible_vm ? 1 : 0;
    row.feasible_slack = info.feasible_slack ? 1 : 0;
    art.metrics.push_back(row);

    if (!info.pf_converged) ++art.pf_failures;
    state = next;
    if (info.done) {
      ++episode;
      scenario = stream_(episode);
      state = make_initial_state(gc_, cfg_.env);
    }
  }

  // Saddle-distance proxy against the final multipliers, stepping at each
  // dual event (diagnostic; the toy verification covers the formal claim).
  auto dual_distance = [&](const DualState& a, const DualState& b) {
    double v = 0.0;
    for (int j = 0; j < a.horizon(); ++j) {
      const auto& al = a.alpha[j];
      auto term = [&](const Eigen::VectorXd& x, const Eigen::VectorXd& y, double alpha,
                      double scale) {
        const double s = scale * alpha;
        if (s > 0.0) v += (x - y).squaredNorm() / s;
      };
      term(a.lambda1[j], b.lambda1[j], al[0], a.step_scale_lambda);
      term(a.lambda2[j], b.lambda2[j], al[1], a.step_scale_lambda);
      term(a.lambda3[j], b.lambda3[j], al[2], a.step_scale_lambda);
      term(a.lambda4[j], b.lambda4[j], al[5], a.step_scale_lambda);
      term(a.mu1[j], b.mu1[j], al[3], a.step_scale_mu);
      term(a.mu2[j], b.mu2[j], al[4], a.step_scale_mu);
      term(a.mu3[j], b.mu3[j], al[6], a.step_scale_mu);
      term(a.mu4[j], b.mu4[j], al[7], a.step_scale_mu);
    }
    return v;
  };
  DualState initial = DualState::zeros(gc_, cfg_.horizon, cfg_.alpha0, cfg_.alpha_family);
  initial.step_scale_lambda = cfg_.step_scale_lambda;
  initial.step_scale_mu = cfg_.step_scale_mu;
  std::size_t event_idx = 0;
  double current_v = dual_distance(initial, duals_);
  for (auto& row : art.metrics) {
    while (event_idx < art.dual_events.size() && art.dual_events[event_idx].step <= row.step) {
      current_v = dual_distance(art.dual_events[event_idx].snapshot, duals_);
      ++event_idx;
    }
    row.v_proxy = current_v;
  }

  art.actor = actor_;
  art.predictor = predictor_;
  art.critic1 = critic1_;
  art.critic2 = critic2_;
  art.target1 = target1_;
  art.target2 = target2_;
  art.duals = duals_;
  art.train_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return art;
}

TrainedArtifacts train(const TrainerConfig& cfg, const NetConfig& nets, const GridCase& gc,
                       const ScenarioStream& stream) {
  Trainer trainer(cfg, nets, gc, stream);
  return trainer.run();
}

TrainedArtifacts baseline_trainer(BaselineKind kind, TrainerConfig cfg, const NetConfig& nets,
                                  const GridCase& gc, const ScenarioStream& stream) {
  cfg.kind = kind;
  return train(cfg, nets, gc, stream);
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open metrics file: " + path);
  out << "step,reward,critic_loss_1,critic_loss_2,actor_loss,r_lambda_norm,r_mu_norm,"
         "v_proxy,feasible_vm,feasible_slack\n";
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%ld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d,%d\n",
                  r.step, r.reward, r.critic_loss_1, r.critic_loss_2, r.actor_loss,
                  r.r_lambda_norm, r.r_mu_norm, r.v_proxy, r.feasible_vm, r.feasible_slack);
    out << buf;
  }
}

// ---------------------------------------------------------------------------
// Lemma-style dual convergence monitor

std::vector<double> lemma1_monitor(const DualTrace& trace, const Eigen::VectorXd& lambda_star,
                                   const Eigen::VectorXd& mu_star) {
  std::vector<double> v;
  v.reserve(trace.lambda.size());
  for (std::size_t k = 0; k < trace.lambda.size(); ++k) {
    double val = (trace.lambda[k] - lambda_star).squaredNorm() / trace.alpha_lambda;
    val += (trace.mu[k] - mu_star).squaredNorm() / trace.alpha_mu;
    v.push_back(val);
  }
  return v;
}

int lemma1_check_decrease(const DualTrace& trace, const Eigen::VectorXd& lambda_star,
                          const Eigen::VectorXd& mu_star, double tol) {
  std::vector<double> v = lemma1_monitor(trace, lambda_star, mu_star);
  for (std::size_t k = 0; k + 1 < v.size(); ++k) {
    const double bound = v[k] - trace.alpha_lambda * trace.r_lambda[k].squaredNorm() -
                         trace.alpha_mu * trace.r_mu[k].squaredNorm();
    if (v[k + 1] > bound + tol) return static_cast<int>(k);
  }
  return -1;
}

DualTrace toy_saddle_trace(int iters, double alpha_lambda, double alpha_mu) {
  DualTrace trace;
  trace.alpha_lambda = alpha_lambda;
  trace.alpha_mu = alpha_mu;
  Eigen::VectorXd lam = Eigen::VectorXd::Zero(1);
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(1);
  trace.lambda.push_back(lam);
  trace.mu.push_back(mu);
  for (int k = 0; k < iters; ++k) {
    // Exact primal minimizers of the augmented Lagrangian for
    // min x^2 + y^2 s.t. x = 1, y >= 1.
    const double x = (alpha_lambda - lam(0)) / (2.0 + alpha_lambda);
    const double y = std::min((mu(0) + alpha_mu) / (2.0 + alpha_mu), 1.0);
    Eigen::VectorXd rl(1), rm(1);
    rl(0) = x - 1.0;
    rm(0) = std::max(1.0 - y, 0.0);
    lam = lam + alpha_lambda * rl;
    mu = (mu + alpha_mu * rm).cwiseMax(0.0);
    trace.r_lambda.push_back(rl);
    trace.r_mu.push_back(rm);
    trace.lambda.push_back(lam);
    trace.mu.push_back(mu);
  }
  return trace;
}

}  // namespace sdopf
