#include "sdopf/nets.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace sdopf {

using ad::Mat;
using ad::Value;

namespace {

class Init {
 public:
  explicit Init(std::uint64_t seed) : rng_(seed) {}

  Mat uniform(Eigen::Index rows, Eigen::Index cols, double bound) {
    Mat m(rows, cols);
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = dist(rng_);
    return m;
  }

  DenseLayer dense(Eigen::Index in, Eigen::Index out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    return {ad::param(uniform(in, out, bound)), ad::param(uniform(1, out, bound))};
  }

  Value complex_param(Eigen::Index rows, Eigen::Index cols, Eigen::Index fan_in) {
    const double bound = 1.0 / std::sqrt(2.0 * static_cast<double>(fan_in));
    Mat re = uniform(rows, cols, bound);
    Mat im = uniform(rows, cols, bound);
    return ad::param_complex(std::move(re), std::move(im));
  }

 private:
  std::mt19937_64 rng_;
};

std::vector<Value> trunk_tap_params(Init& init, int k, int in_ch, int out_ch) {
  std::vector<Value> taps;
  for (int i = 0; i < k; ++i) taps.push_back(init.complex_param(in_ch, out_ch, in_ch * k));
  return taps;
}

}  // namespace

ad::Value DenseLayer::apply(const ad::Value& x) const {
  return ad::add_rowvec(ad::matmul(x, w), b);
}

double spectral_radius_estimate(const Eigen::MatrixXcd& m, int iters) {
  const Eigen::Index n = m.rows();
  if (n == 0) return 1.0;
  Eigen::VectorXcd x = Eigen::VectorXcd::Ones(n);
  for (Eigen::Index i = 0; i < n; ++i) x(i) += cplx(0.0, 0.3 + 0.1 * static_cast<double>(i % 7));
  x /= x.norm();
  double lambda = 1.0;
  for (int it = 0; it < iters; ++it) {
    Eigen::VectorXcd y = m * x;
    const double norm = y.norm();
    if (norm == 0.0) return 1.0;
    lambda = norm;
    x = y / norm;
  }
  return lambda;
}

ad::Value make_gso(const GridCase& gc, const NetConfig& cfg) {
  Eigen::MatrixXcd s = gc.Y;
  if (cfg.normalize_gso) {
    const double rho = spectral_radius_estimate(s);
    if (rho > 0.0) s /= rho;
  }
  return ad::constant_complex(s.real(), s.imag());
}

ad::Value stack_graph_input(const std::vector<const EnvState*>& states, int n_bus, int horizon) {
  const int nb = static_cast<int>(states.size());
  Mat re = Mat::Zero(static_cast<Eigen::Index>(nb) * n_bus, 2 * horizon);
  Mat im = Mat::Zero(static_cast<Eigen::Index>(nb) * n_bus, 2 * horizon);
  for (int b = 0; b < nb; ++b) {
    const EnvState& st = *states[b];
    for (int tau = 0; tau < horizon; ++tau) {
      const Eigen::VectorXcd& v = st.v_history[tau];
      for (int i = 0; i < n_bus; ++i) {
        re(b * n_bus + i, 2 * tau) = v(i).real();
        im(b * n_bus + i, 2 * tau) = v(i).imag();
        re(b * n_bus + i, 2 * tau + 1) = st.soc(i);
      }
    }
  }
  return ad::constant_complex(std::move(re), std::move(im));
}

Eigen::MatrixXd encode_states(const std::vector<const EnvState*>& states, int n_bus, int horizon) {
  const int nb = static_cast<int>(states.size());
  Mat x(nb, 2 * horizon * n_bus + n_bus);
  for (int b = 0; b < nb; ++b) {
    const EnvState& st = *states[b];
    for (int tau = 0; tau < horizon; ++tau)
      for (int i = 0; i < n_bus; ++i) {
        x(b, tau * n_bus + i) = st.v_history[tau](i).real();
        x(b, horizon * n_bus + tau * n_bus + i) = st.v_history[tau](i).imag();
      }
    for (int i = 0; i < n_bus; ++i) x(b, 2 * horizon * n_bus + i) = st.soc(i);
  }
  return x;
}

Eigen::VectorXd flatten_block(const ActionBlock& block) {
  const int t = static_cast<int>(block.a_hat.rows());
  const int d = static_cast<int>(block.a_hat.cols());
  Eigen::VectorXd flat(t * d);
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < d; ++j) flat(i * d + j) = block.a_hat(i, j);
  return flat;
}

ActionBlock unflatten_block(const Eigen::VectorXd& flat, int horizon, int width) {
  ActionBlock block;
  block.a_hat.resize(horizon, width);
  for (int i = 0; i < horizon; ++i)
    for (int j = 0; j < width; ++j) block.a_hat(i, j) = flat(i * width + j);
  return block;
}

double clipped_target(double r, double gamma, double q1, double q2) {
  return r + gamma * std::min(q1, q2);
}

void soft_update(std::vector<ad::Value>& target, const std::vector<ad::Value>& online,
                 double tau) {
  if (target.size() != online.size())
    throw std::invalid_argument("soft_update: parameter list size mismatch");
  for (size_t i = 0; i < target.size(); ++i) {
    auto& t = target[i];
    const auto& o = online[i];
    if (t->rows() != o->rows() || t->cols() != o->cols() || t->is_complex() != o->is_complex())
      throw std::invalid_argument("soft_update: parameter shape mismatch");
    t->re = tau * o->re + (1.0 - tau) * t->re;
    if (t->is_complex()) t->im = tau * o->im + (1.0 - tau) * t->im;
  }
}

// ---------------------------------------------------------------------------
// ActorNet

ActorNet::ActorNet(const GridCase& gc, const NetConfig& cfg, std::uint64_t seed)
    : cfg_(cfg), n_bus_(gc.n_bus), n_gen_(gc.n_gen), n_bess_(gc.n_bess),
      action_width_(ActionBlock::width(gc)), gso_(make_gso(gc, cfg)) {
  Init init(seed);
  const int t = cfg.horizon, kt = cfg.temporal_channels, c = cfg.gcn_channels;
  gamma_ = init.complex_param(2 * t, kt, 2 * t);
  trunk_taps_ = trunk_tap_params(init, cfg.cheb_order, kt, c);

  auto make_branch = [&](int head_cols) {
    Branch br;
    br.taps = trunk_tap_params(init, cfg.cheb_order, c, c);
    const int flat = 2 * n_bus_ * c;
    br.d1 = init.dense(flat, cfg.hidden);
    br.d2 = init.dense(cfg.hidden, cfg.hidden);
    br.out = init.dense(cfg.hidden, head_cols);
    return br;
  };
  const int g = n_gen_, b = n_bess_;
  p_branch_ = make_branch(t * (g + 2 * b));
  q_branch_ = make_branch(t * g);
  // Head-bias initialization breaks the sigmoid's rail symmetry: active
  // power can default low, reactive support high. A head railed the wrong
  // way early sees vanishing gradients and rarely recovers.
  p_branch_.out.b->re.array() += cfg.p_head_bias;
  q_branch_.out.b->re.array() += cfg.q_head_bias;

  // Concatenated branch outputs are [p-branch | q-branch]; map them onto the
  // block layout [g_p | g_q | p_ch | p_dis] per step.
  const int p_cols = t * (g + 2 * b);
  assemble_perm_.resize(t * action_width_);
  for (int ti = 0; ti < t; ++ti) {
    for (int gi = 0; gi < g; ++gi) {
      assemble_perm_[ti * action_width_ + gi] = ti * (g + 2 * b) + gi;
      assemble_perm_[ti * action_width_ + g + gi] = p_cols + ti * g + gi;
    }
    for (int bi = 0; bi < b; ++bi) {
      assemble_perm_[ti * action_width_ + 2 * g + bi] = ti * (g + 2 * b) + g + bi;
      assemble_perm_[ti * action_width_ + 2 * g + b + bi] = ti * (g + 2 * b) + g + b + bi;
    }
  }
}

ad::Value ActorNet::forward(const std::vector<const EnvState*>& states) const {
  Value x = stack_graph_input(states, n_bus_, cfg_.horizon);
  Value feat = ad::crelu(ad::graph_filter(trunk_taps_, gso_, ad::temporal_conv(gamma_, x), n_bus_));
  auto run_branch = [&](const Branch& br) {
    Value h = ad::crelu(ad::graph_filter(br.taps, gso_, feat, n_bus_));
    Value flat = ad::flatten_blocks(h, n_bus_);
    Value z = ad::relu(br.d1.apply(flat));
    z = ad::relu(br.d2.apply(z));
    return ad::sigmoid(br.out.apply(z));
  };
  Value p_out = run_branch(p_branch_);
  Value q_out = run_branch(q_branch_);
  return ad::gather_cols(ad::concat_cols(p_out, q_out), assemble_perm_);
}

ActionBlock ActorNet::act(const EnvState& state) const {
  ad::NoGradGuard ng;
  std::vector<const EnvState*> states{&state};
  Value out = forward(states);
  return unflatten_block(out->re.row(0).transpose(), cfg_.horizon, action_width_);
}

NamedParams ActorNet::named_params() {
  NamedParams np;
  np.emplace_back("actor/gamma", gamma_);
  for (size_t k = 0; k < trunk_taps_.size(); ++k)
    np.emplace_back("actor/trunk_tap" + std::to_string(k), trunk_taps_[k]);
  auto branch = [&np](const char* prefix, Branch& br) {
    for (size_t k = 0; k < br.taps.size(); ++k)
      np.emplace_back(std::string(prefix) + "/tap" + std::to_string(k), br.taps[k]);
    np.emplace_back(std::string(prefix) + "/d1_w", br.d1.w);
    np.emplace_back(std::string(prefix) + "/d1_b", br.d1.b);
    np.emplace_back(std::string(prefix) + "/d2_w", br.d2.w);
    np.emplace_back(std::string(prefix) + "/d2_b", br.d2.b);
    np.emplace_back(std::string(prefix) + "/out_w", br.out.w);
    np.emplace_back(std::string(prefix) + "/out_b", br.out.b);
  };
  branch("actor/p", p_branch_);
  branch("actor/q", q_branch_);
  return np;
}

std::vector<Value> ActorNet::params() {
  std::vector<Value> ps;
  for (auto& [name, v] : named_params()) ps.push_back(v);
  return ps;
}

long ActorNet::param_count() const {
  long count = 0;
  auto add = [&count](const Value& v) {
    count += static_cast<long>(v->re.size()) * (v->is_complex() ? 2 : 1);
  };
  add(gamma_);
  for (const auto& t : trunk_taps_) add(t);
  for (const Branch* br : {&p_branch_, &q_branch_}) {
    for (const auto& t : br->taps) add(t);
    for (const DenseLayer* d : {&br->d1, &br->d2, &br->out}) {
      add(d->w);
      add(d->b);
    }
  }
  return count;
}

// ---------------------------------------------------------------------------
// PredictorNet

PredictorNet::PredictorNet(const GridCase& gc, const NetConfig& cfg, std::uint64_t seed)
    : cfg_(cfg), n_bus_(gc.n_bus), gso_(make_gso(gc, cfg)) {
  Init init(seed);
  const int t = cfg.horizon, kt = cfg.temporal_channels, c = cfg.gcn_channels;
  gamma_ = init.complex_param(2 * t, kt, 2 * t);
  trunk_taps_ = trunk_tap_params(init, cfg.cheb_order, kt, c);
  head_taps_ = trunk_tap_params(init, cfg.cheb_order, c, c);
  const int flat = 2 * n_bus_ * c;
  d1_ = init.dense(flat, cfg.hidden);
  d2_ = init.dense(cfg.hidden, cfg.hidden);
  out_ = init.dense(cfg.hidden, t * n_bus_);

  Mat vmin(1, t * n_bus_), vrange(1, t * n_bus_);
  for (int ti = 0; ti < t; ++ti)
    for (int i = 0; i < n_bus_; ++i) {
      vmin(0, ti * n_bus_ + i) = gc.v_min(i);
      vrange(0, ti * n_bus_ + i) = gc.v_max(i) - gc.v_min(i);
    }
  vmin_tiled_ = ad::constant(std::move(vmin));
  vrange_tiled_ = ad::constant(std::move(vrange));
}

ad::Value PredictorNet::forward(const std::vector<const EnvState*>& states) const {
  Value x = stack_graph_input(states, n_bus_, cfg_.horizon);
  Value feat = ad::crelu(ad::graph_filter(trunk_taps_, gso_, ad::temporal_conv(gamma_, x), n_bus_));
  Value h = ad::crelu(ad::graph_filter(head_taps_, gso_, feat, n_bus_));
  Value flat = ad::flatten_blocks(h, n_bus_);
  Value z = ad::relu(d1_.apply(flat));
  z = ad::relu(d2_.apply(z));
  Value normalized = ad::sigmoid(out_.apply(z));
  return ad::add_rowvec(ad::mul_rowvec(normalized, vrange_tiled_), vmin_tiled_);
}

Eigen::MatrixXd PredictorNet::predict(const EnvState& state) const {
  ad::NoGradGuard ng;
  std::vector<const EnvState*> states{&state};
  Value out = forward(states);
  Eigen::MatrixXd vm(cfg_.horizon, n_bus_);
  for (int t = 0; t < cfg_.horizon; ++t)
    for (int i = 0; i < n_bus_; ++i) vm(t, i) = out->re(0, t * n_bus_ + i);
  return vm;
}

NamedParams PredictorNet::named_params() {
  NamedParams np;
  np.emplace_back("predictor/gamma", gamma_);
  for (size_t k = 0; k < trunk_taps_.size(); ++k)
    np.emplace_back("predictor/trunk_tap" + std::to_string(k), trunk_taps_[k]);
  for (size_t k = 0; k < head_taps_.size(); ++k)
    np.emplace_back("predictor/head_tap" + std::to_string(k), head_taps_[k]);
  np.emplace_back("predictor/d1_w", d1_.w);
  np.emplace_back("predictor/d1_b", d1_.b);
  np.emplace_back("predictor/d2_w", d2_.w);
  np.emplace_back("predictor/d2_b", d2_.b);
  np.emplace_back("predictor/out_w", out_.w);
  np.emplace_back("predictor/out_b", out_.b);
  return np;
}

std::vector<Value> PredictorNet::params() {
  std::vector<Value> ps;
  for (auto& [name, v] : named_params()) ps.push_back(v);
  return ps;
}

// ---------------------------------------------------------------------------
// CriticNet

CriticNet::CriticNet(const GridCase& gc, const NetConfig& cfg, std::uint64_t seed)
    : cfg_(cfg), n_bus_(gc.n_bus) {
  Init init(seed);
  const int state_width = 2 * cfg.horizon * gc.n_bus + gc.n_bus;
  input_width_ = state_width + cfg.horizon * ActionBlock::width(gc);
  d1_ = init.dense(input_width_, cfg.hidden);
  d2_ = init.dense(cfg.hidden, cfg.hidden);
  d3_ = init.dense(cfg.hidden, cfg.hidden);
  out_ = init.dense(cfg.hidden, 1);
}

ad::Value CriticNet::forward(const std::vector<const EnvState*>& states,
                             const ad::Value& actions) const {
  Value st = ad::constant(encode_states(states, n_bus_, cfg_.horizon));
  Value x = ad::concat_cols(st, actions);
  if (x->cols() != input_width_)
    throw std::invalid_argument("critic_forward: input width mismatch");
  Value z = ad::relu(d1_.apply(x));
  z = ad::relu(d2_.apply(z));
  z = ad::relu(d3_.apply(z));
  return out_.apply(z);
}

double CriticNet::value(const EnvState& state, const ActionBlock& block) const {
  ad::NoGradGuard ng;
  std::vector<const EnvState*> states{&state};
  Value a = ad::constant(flatten_block(block).transpose());
  return forward(states, a)->re(0, 0);
}

NamedParams CriticNet::named_params() {
  return {
      {"critic/d1_w", d1_.w}, {"critic/d1_b", d1_.b}, {"critic/d2_w", d2_.w},
      {"critic/d2_b", d2_.b}, {"critic/d3_w", d3_.w}, {"critic/d3_b", d3_.b},
      {"critic/out_w", out_.w}, {"critic/out_b", out_.b},
  };
}

std::vector<Value> CriticNet::params() {
  std::vector<Value> ps;
  for (auto& [name, v] : named_params()) ps.push_back(v);
  return ps;
}

}  // namespace sdopf
