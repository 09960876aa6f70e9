#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sdopf/autodiff.hpp"
#include "sdopf/env.hpp"
#include "sdopf/grid.hpp"

namespace sdopf {

struct NetConfig {
  int cheb_order = 3;        // graph-filter tap count K
  int temporal_channels = 8; // K_t
  int gcn_channels = 8;      // branch feature width
  int hidden = 256;          // dense layer width
  int horizon = 4;           // history / forecast window T
  bool normalize_gso = true; // scale S = Y by its spectral-radius estimate
  double smoothing_noise = 0.0;  // optional Gaussian smoothing on target actions
  double p_head_bias = 0.0;  // additive init on the active-power head logits
  double q_head_bias = 0.0;  // additive init on the reactive head logits
};

using NamedParams = std::vector<std::pair<std::string, ad::Value>>;

struct DenseLayer {
  ad::Value w, b;
  ad::Value apply(const ad::Value& x) const;
};

/// Spectral-radius estimate of a complex square matrix via power iteration
/// with a deterministic start vector.
double spectral_radius_estimate(const Eigen::MatrixXcd& m, int iters = 60);

/// Builds the graph shift operator from the case admittance matrix.
ad::Value make_gso(const GridCase& gc, const NetConfig& cfg);

/// Complex-valued spatio-temporal graph-convolutional policy. Two
/// independent graph branches feed the active-power heads (g_p, p_ch,
/// p_dis) and the reactive head (g_q); sigmoid output keeps every entry of
/// the T x (2G+2B) block inside (0,1).
class ActorNet {
 public:
  ActorNet(const GridCase& gc, const NetConfig& cfg, std::uint64_t seed);

  ad::Value forward(const std::vector<const EnvState*>& states) const;
  ActionBlock act(const EnvState& state) const;  // forward-only, single state

  NamedParams named_params();
  std::vector<ad::Value> params();
  long param_count() const;

  const NetConfig& config() const { return cfg_; }
  int action_width() const { return action_width_; }

 private:
  struct Branch {
    std::vector<ad::Value> taps;
    DenseLayer d1, d2, out;
  };

  NetConfig cfg_;
  int n_bus_, n_gen_, n_bess_, action_width_;
  ad::Value gso_;
  ad::Value gamma_;                 // temporal kernel, complex 2T x K_t
  std::vector<ad::Value> trunk_taps_;
  Branch p_branch_, q_branch_;
  std::vector<int> assemble_perm_;  // branch outputs -> block layout
};

/// Same trunk as the actor with a single head; output is the denormalized
/// voltage-magnitude forecast, inside [v_min, v_max] by construction.
class PredictorNet {
 public:
  PredictorNet(const GridCase& gc, const NetConfig& cfg, std::uint64_t seed);

  ad::Value forward(const std::vector<const EnvState*>& states) const;  // B x (T*N)
  Eigen::MatrixXd predict(const EnvState& state) const;                 // T x N

  NamedParams named_params();
  std::vector<ad::Value> params();

 private:
  NetConfig cfg_;
  int n_bus_;
  ad::Value gso_;
  ad::Value gamma_;
  std::vector<ad::Value> trunk_taps_;
  std::vector<ad::Value> head_taps_;
  DenseLayer d1_, d2_, out_;
  ad::Value vmin_tiled_, vrange_tiled_;  // 1 x (T*N) constants
};

/// Three 256-unit ReLU layers over the flattened (state, action block)
/// encoding, scalar output.
class CriticNet {
 public:
  CriticNet(const GridCase& gc, const NetConfig& cfg, std::uint64_t seed);

  /// actions: B x (T*D) tensor (differentiable or constant).
  ad::Value forward(const std::vector<const EnvState*>& states, const ad::Value& actions) const;
  double value(const EnvState& state, const ActionBlock& block) const;

  NamedParams named_params();
  std::vector<ad::Value> params();
  int input_width() const { return input_width_; }

 private:
  NetConfig cfg_;
  int n_bus_, input_width_;
  DenseLayer d1_, d2_, d3_, out_;
};

/// Stacks per-sample complex inputs (voltage history and SOC channels) for
/// the graph nets: (B*N) x 2T.
ad::Value stack_graph_input(const std::vector<const EnvState*>& states, int n_bus, int horizon);

/// Real encoding of states for the critic: [re v | im v | soc] per sample.
Eigen::MatrixXd encode_states(const std::vector<const EnvState*>& states, int n_bus, int horizon);

/// Flattens an action block row-major (t-major) to match net output layout.
Eigen::VectorXd flatten_block(const ActionBlock& block);
ActionBlock unflatten_block(const Eigen::VectorXd& flat, int horizon, int width);

double clipped_target(double r, double gamma, double q1, double q2);

/// In-place Polyak update: target <- tau*online + (1-tau)*target.
void soft_update(std::vector<ad::Value>& target, const std::vector<ad::Value>& online, double tau);

}  // namespace sdopf
