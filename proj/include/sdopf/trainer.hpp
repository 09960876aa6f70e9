#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <vector>

#include "sdopf/env.hpp"
#include "sdopf/nets.hpp"

namespace sdopf {

struct Transition {
  EnvState x_prev;
  ActionBlock block;
  double r = 0.0;
  EnvState x_next;
  bool done = false;       // power-flow failure termination
  Eigen::MatrixXd d_p;     // T x N realized demand slice for the block window
  Eigen::MatrixXd d_q;
};

/// FIFO ring buffer with seeded uniform sampling.
class ReplayBuffer {
 public:
  ReplayBuffer(std::size_t capacity, std::uint64_t seed);

  void push(Transition t);
  std::vector<const Transition*> sample(int n);
  std::size_t size() const { return data_.size(); }
  const Transition& at(std::size_t i) const { return data_[(head_ + i) % data_.size()]; }

 private:
  std::size_t capacity_;
  std::vector<Transition> data_;
  std::size_t head_ = 0;  // oldest element when full
  std::mt19937_64 rng_;
};

/// Multipliers and penalty coefficients of the augmented Lagrangian, one set
/// per horizon offset. Penalty families: 0 active balance, 1 reactive
/// balance, 2 SOC recursion, 3 SOC upper, 4 SOC lower, 5 voltage tie,
/// 6 voltage upper, 7 voltage lower.
struct DualState {
  std::vector<Eigen::VectorXd> lambda1, lambda2;  // length N
  std::vector<Eigen::VectorXd> lambda3;           // length B
  std::vector<Eigen::VectorXd> lambda4;           // length N
  std::vector<Eigen::VectorXd> mu1, mu2;          // length B
  std::vector<Eigen::VectorXd> mu3, mu4;          // length N
  std::vector<std::array<double, 8>> alpha;
  double step_scale_lambda = 1.0;
  double step_scale_mu = 1.0;

  static DualState zeros(const GridCase& gc, int horizon, double alpha0);
  static DualState zeros(const GridCase& gc, int horizon, double alpha0,
                         const std::array<double, 8>& family_scale);
  int horizon() const { return static_cast<int>(lambda1.size()); }
};

/// Concrete residual values for one transition, per horizon offset.
/// Inequality entries are already rectified.
struct ResidualValues {
  std::vector<Eigen::VectorXd> r1, r2, r3, r4, m1, m2, m3, m4;

  double lambda_norm() const;
  double mu_norm() const;
};

enum class BaselineKind { crl, penalty, dc3, td3 };

struct TrainerConfig {
  double gamma = 0.99;
  double tau = 0.005;
  int policy_delay = 2;       // pu
  int dual_period = 500;      // du
  int batch_size = 100;
  int max_iterations = 10000;
  int exploration_steps = 38400;  // 200 episodes of the default episode length
  double action_noise = 0.0;  // uniform jitter on policy actions after exploration
  double action_noise_final = -1.0;  // linear decay target; <0 keeps it constant
  int actor_warmup = 0;       // extra steps of critic-only training
  int horizon = 4;            // T
  std::size_t buffer_capacity = 500;
  std::uint64_t seed = 1;
  double actor_lr = 1e-3;
  double critic_lr = 1e-3;
  double alpha0 = 1.0;
  // Per-family multipliers on alpha0, ordered as the DualState families.
  std::array<double, 8> alpha_family{1, 1, 1, 1, 1, 1, 1, 1};
  double step_scale_lambda = 1.0;
  double step_scale_mu = 1.0;
  bool alpha_growth = false;
  double alpha_growth_factor = 1.5;
  double alpha_cap = 100.0;
  BaselineKind kind = BaselineKind::crl;
  double penalty_beta = 1.0;  // reward shaping weight for the penalty baseline
  EnvConfig env;
};

struct MetricsRow {
  long step = 0;
  double reward = 0.0;
  double critic_loss_1 = 0.0;
  double critic_loss_2 = 0.0;
  double actor_loss = 0.0;
  double r_lambda_norm = 0.0;
  double r_mu_norm = 0.0;
  double v_proxy = 0.0;
  int feasible_vm = 1;
  int feasible_slack = 1;
};

struct DualEvent {
  long step = 0;
  double r_lambda_norm = 0.0;
  double r_mu_norm = 0.0;
  DualState snapshot;
};

struct TrainedArtifacts {
  std::shared_ptr<ActorNet> actor;
  std::shared_ptr<PredictorNet> predictor;
  std::shared_ptr<CriticNet> critic1, critic2, target1, target2;
  DualState duals;
  std::vector<MetricsRow> metrics;
  std::vector<DualEvent> dual_events;
  long pf_failures = 0;
  double train_seconds = 0.0;
};

using ScenarioStream = std::function<Scenario(int episode_index)>;

ScenarioStream make_scenario_stream(const GridCase& gc, const ScenarioConfig& cfg,
                                    std::uint64_t seed_base);

/// Evaluates the augmented-Lagrangian residual families for one stored
/// transition given a voltage-magnitude forecast (forward-only).
ResidualValues constraint_residuals(const Transition& tr, const Eigen::MatrixXd& vm_pred,
                                    const GridCase& gc);

/// One dual-ascent step on batch-averaged residuals: multipliers move by
/// step_scale * alpha * residual, inequality multipliers projected onto the
/// nonnegative orthant.
void apply_dual_ascent(DualState& duals, const ResidualValues& avg);

/// Training driver implementing the sampled primal-dual loop: per-step
/// critic regression on the clipped double-Q target, delayed actor and
/// predictor updates on the augmented Lagrangian, periodic dual ascent.
class Trainer {
 public:
  Trainer(const TrainerConfig& cfg, const NetConfig& nets, const GridCase& gc,
          ScenarioStream stream);

  TrainedArtifacts run();

  // Exposed for unit tests.
  std::pair<double, double> critic_update(const std::vector<const Transition*>& batch);
  double actor_update(const std::vector<const Transition*>& batch);
  double predictor_update(const std::vector<const Transition*>& batch);
  void dual_update(const std::vector<const Transition*>& batch, long step);
  ad::Value actor_loss_graph(const std::vector<const Transition*>& batch);

  ActorNet& actor() { return *actor_; }
  PredictorNet& predictor() { return *predictor_; }
  CriticNet& critic1() { return *critic1_; }
  DualState& duals() { return duals_; }
  ReplayBuffer& buffer() { return buffer_; }
  const TrainerConfig& config() const { return cfg_; }

  /// Latest batch-averaged residual norms seen by an actor or dual update.
  double last_lambda_norm() const { return last_lambda_norm_; }
  double last_mu_norm() const { return last_mu_norm_; }

 private:
  struct LossParts {
    ad::Value loss;
    std::vector<Eigen::VectorXd> avg_r1, avg_r2, avg_r3, avg_r4, avg_m1, avg_m2, avg_m3, avg_m4;
    double lambda_norm = 0.0;
    double mu_norm = 0.0;
  };
  LossParts build_actor_loss(const std::vector<const Transition*>& batch, bool with_constraints);

  TrainerConfig cfg_;
  NetConfig net_cfg_;
  const GridCase& gc_;
  ScenarioStream stream_;
  std::shared_ptr<ActorNet> actor_;
  std::shared_ptr<PredictorNet> predictor_;
  std::shared_ptr<CriticNet> critic1_, critic2_, target1_, target2_;
  std::vector<ad::Value> t1_params_, t2_params_, c1_params_, c2_params_;
  std::unique_ptr<ad::Adam> actor_opt_, predictor_opt_, critic1_opt_, critic2_opt_;
  DualState duals_;
  ReplayBuffer buffer_;
  std::mt19937_64 explore_rng_;
  double last_lambda_norm_ = 0.0;
  double last_mu_norm_ = 0.0;
  double prev_dual_lambda_norm_ = -1.0;
};

TrainedArtifacts train(const TrainerConfig& cfg, const NetConfig& nets, const GridCase& gc,
                       const ScenarioStream& stream);

/// Baseline wrapper: penalty shaping, squared-penalty-only (dc3 style) and
/// unconstrained TD3 share the same loop with different loss terms.
TrainedArtifacts baseline_trainer(BaselineKind kind, TrainerConfig cfg, const NetConfig& nets,
                                  const GridCase& gc, const ScenarioStream& stream);

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows);

// ---------------------------------------------------------------------------
// Dual-ascent convergence monitor (saddle-point distance series).

struct DualTrace {
  std::vector<Eigen::VectorXd> lambda;    // iterates k = 0..K
  std::vector<Eigen::VectorXd> mu;
  std::vector<Eigen::VectorXd> r_lambda;  // residual after primal solve k+1
  std::vector<Eigen::VectorXd> r_mu;
  double alpha_lambda = 1.0;
  double alpha_mu = 1.0;
};

/// V^k = (1/a_l)||l^k - l*||^2 + (1/a_m)||m^k - m*||^2 for each stored
/// iterate.
std::vector<double> lemma1_monitor(const DualTrace& trace, const Eigen::VectorXd& lambda_star,
                                   const Eigen::VectorXd& mu_star);

/// Checks V^{k+1} <= V^k - a_l ||r_l^{k+1}||^2 - a_m ||r_m^{k+1}||^2 at every
/// iterate within tol; returns the first violating index or -1.
int lemma1_check_decrease(const DualTrace& trace, const Eigen::VectorXd& lambda_star,
                          const Eigen::VectorXd& mu_star, double tol = 1e-9);

/// Convex toy instance with closed-form primal solves:
/// min x^2 + y^2  s.t.  x = 1 (multiplier lambda), y >= 1 (multiplier mu).
/// Saddle point: x*=y*=1, lambda*=-2, mu*=2.
DualTrace toy_saddle_trace(int iters, double alpha_lambda, double alpha_mu);

}  // namespace sdopf
