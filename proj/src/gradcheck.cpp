#include "sdopf/gradcheck.hpp"

#include <chrono>
#include <cmath>
#include <ostream>
#include <random>

#include "sdopf/nets.hpp"

namespace sdopf::ad {

namespace {

double rel_err(double analytic, double numeric) {
  const double denom = std::max({1e-3, std::abs(analytic), std::abs(numeric)});
  return std::abs(analytic - numeric) / denom;
}

}  // namespace

GradCheckResult gradcheck(const std::function<Value()>& build_loss,
                          const std::vector<std::pair<std::string, Value>>& params, double h) {
  GradCheckResult res;
  for (auto& [name, p] : params) p->zero_grad();
  Value loss = build_loss();
  backward(loss);

  for (auto& [name, p] : params) {
    p->ensure_grad();
    Mat gre = p->gre;
    Mat gim = p->gim;
    auto probe = [&](Mat& plane, const Mat& analytic) {
      for (Eigen::Index i = 0; i < plane.rows(); ++i)
        for (Eigen::Index j = 0; j < plane.cols(); ++j) {
          const double orig = plane(i, j);
          double fp, fm;
          {
            NoGradGuard ng;
            plane(i, j) = orig + h;
            fp = build_loss()->scalar();
            plane(i, j) = orig - h;
            fm = build_loss()->scalar();
            plane(i, j) = orig;
          }
          const double numeric = (fp - fm) / (2.0 * h);
          const double err = rel_err(analytic(i, j), numeric);
          ++res.coords_checked;
          if (err > res.max_rel_err) {
            res.max_rel_err = err;
            res.worst_param = name;
          }
        }
    };
    probe(p->re, gre);
    if (p->is_complex()) probe(p->im, gim);
  }
  for (auto& [name, p] : params) p->zero_grad();
  return res;
}

namespace {

class Rand {
 public:
  explicit Rand(std::uint64_t seed) : rng_(seed) {}

  // Values bounded away from zero so kinks (relu, magnitude) stay further
  // than the finite-difference step from the sample point.
  Mat away_from_zero(Eigen::Index r, Eigen::Index c) {
    Mat m(r, c);
    std::uniform_real_distribution<double> mag(0.1, 1.0);
    std::bernoulli_distribution sign(0.5);
    for (Eigen::Index i = 0; i < r; ++i)
      for (Eigen::Index j = 0; j < c; ++j) m(i, j) = (sign(rng_) ? 1.0 : -1.0) * mag(rng_);
    return m;
  }

  Mat uniform(Eigen::Index r, Eigen::Index c, double lo, double hi) {
    Mat m(r, c);
    std::uniform_real_distribution<double> dist(lo, hi);
    for (Eigen::Index i = 0; i < r; ++i)
      for (Eigen::Index j = 0; j < c; ++j) m(i, j) = dist(rng_);
    return m;
  }

  int dim() {
    std::uniform_int_distribution<int> d(2, 4);
    return d(rng_);
  }

  std::uint64_t next() { return rng_(); }

 private:
  std::mt19937_64 rng_;
};

struct Case {
  std::string name;
  std::function<Value()> build;
  std::vector<std::pair<std::string, Value>> params;
};

std::vector<Case> make_primitive_cases(Rand& rnd) {
  std::vector<Case> cases;
  const int r = rnd.dim(), c = rnd.dim(), k = rnd.dim();

  auto real_pair = [&](const char* name, auto op) {
    Value a = param(rnd.away_from_zero(r, c));
    Value b = param(rnd.away_from_zero(r, c));
    cases.push_back({name, [=] { return square_norm(op(a, b)); }, {{"a", a}, {"b", b}}});
  };
  real_pair("add", [](const Value& a, const Value& b) { return add(a, b); });
  real_pair("sub", [](const Value& a, const Value& b) { return sub(a, b); });
  real_pair("mul", [](const Value& a, const Value& b) { return mul(a, b); });

  {
    Value a = param_complex(rnd.away_from_zero(r, c), rnd.away_from_zero(r, c));
    Value b = param_complex(rnd.away_from_zero(r, c), rnd.away_from_zero(r, c));
    cases.push_back(
        {"mul_complex", [=] { return square_norm(mul(a, b)); }, {{"a", a}, {"b", b}}});
  }
  {
    Value a = param(rnd.away_from_zero(r, k));
    Value b = param(rnd.away_from_zero(k, c));
    cases.push_back({"matmul", [=] { return square_norm(matmul(a, b)); }, {{"a", a}, {"b", b}}});
  }
  {
    Value a = param_complex(rnd.away_from_zero(r, k), rnd.away_from_zero(r, k));
    Value b = param_complex(rnd.away_from_zero(k, c), rnd.away_from_zero(k, c));
    cases.push_back(
        {"complex_matmul", [=] { return square_norm(complex_matmul(a, b)); },
         {{"a", a}, {"b", b}}});
  }
  {
    Value a = param_complex(rnd.away_from_zero(r, c), rnd.away_from_zero(r, c));
    cases.push_back({"conj", [=] { return square_norm(conj(a)); }, {{"a", a}}});
    cases.push_back({"real_part", [=] { return square_norm(real_part(a)); }, {{"a", a}}});
    cases.push_back({"imag_part", [=] { return square_norm(imag_part(a)); }, {{"a", a}}});
    cases.push_back({"magnitude", [=] { return sum(magnitude(a)); }, {{"a", a}}});
    cases.push_back({"square_norm", [=] { return square_norm(a); }, {{"a", a}}});
    cases.push_back({"crelu", [=] { return square_norm(crelu(a)); }, {{"a", a}}});
  }
  {
    Value re = param(rnd.away_from_zero(r, c));
    Value im = param(rnd.away_from_zero(r, c));
    cases.push_back({"make_complex", [=] { return square_norm(make_complex(re, im)); },
                     {{"re", re}, {"im", im}}});
  }
  {
    Value a = param(rnd.away_from_zero(r, c));
    cases.push_back({"neg_scale", [=] { return square_norm(scale(neg(a), 0.7)); }, {{"a", a}}});
    cases.push_back({"relu", [=] { return square_norm(relu(a)); }, {{"a", a}}});
    cases.push_back({"relu_plus", [=] { return square_norm(relu_plus(a)); }, {{"a", a}}});
    cases.push_back({"sigmoid", [=] { return square_norm(sigmoid(a)); }, {{"a", a}}});
    cases.push_back({"tanh", [=] { return square_norm(tanh_op(a)); }, {{"a", a}}});
    cases.push_back({"sum", [=] { return mul(sum(a), sum(a)); }, {{"a", a}}});
    cases.push_back({"mean", [=] { return mul(mean(a), mean(a)); }, {{"a", a}}});
    cases.push_back({"row_sum", [=] { return square_norm(row_sum(a)); }, {{"a", a}}});
  }
  {
    Value a = param(rnd.away_from_zero(r, c));
    Value bias = param(rnd.away_from_zero(1, c));
    cases.push_back({"add_rowvec", [=] { return square_norm(add_rowvec(a, bias)); },
                     {{"a", a}, {"bias", bias}}});
    cases.push_back({"mul_rowvec", [=] { return square_norm(mul_rowvec(a, bias)); },
                     {{"a", a}, {"bias", bias}}});
  }
  {
    Value a = param(rnd.away_from_zero(r, c));
    Value b = param(rnd.away_from_zero(r, k));
    cases.push_back({"concat_cols", [=] { return square_norm(concat_cols(a, b)); },
                     {{"a", a}, {"b", b}}});
    std::vector<int> idx{0, c - 1, 0, 1};
    cases.push_back(
        {"gather_cols", [=] { return square_norm(gather_cols(a, idx)); }, {{"a", a}}});
  }
  {
    const int n = 3, f = rnd.dim(), nb = 2;
    Value s = constant_complex(rnd.away_from_zero(n, n), rnd.away_from_zero(n, n));
    Value x = param_complex(rnd.away_from_zero(nb * n, f), rnd.away_from_zero(nb * n, f));
    cases.push_back(
        {"block_shift", [=] { return square_norm(block_shift(s, x, n)); }, {{"x", x}}});
    cases.push_back(
        {"flatten_blocks", [=] { return square_norm(flatten_blocks(x, n)); }, {{"x", x}}});

    std::vector<Value> taps;
    std::vector<std::pair<std::string, Value>> gf_params{{"x", x}};
    for (int t = 0; t < 3; ++t) {
      taps.push_back(param_complex(rnd.away_from_zero(f, 2), rnd.away_from_zero(f, 2)));
      gf_params.emplace_back("tap" + std::to_string(t), taps.back());
    }
    cases.push_back(
        {"graph_filter", [=] { return square_norm(graph_filter(taps, s, x, n)); }, gf_params});

    Value kernel = param_complex(rnd.away_from_zero(f, 2), rnd.away_from_zero(f, 2));
    cases.push_back({"temporal_conv", [=] { return square_norm(temporal_conv(kernel, x)); },
                     {{"kernel", kernel}, {"x", x}}});
  }
  return cases;
}

GridCase tiny_case() {
  GridCase gc;
  gc.n_bus = 3;
  gc.n_gen = 2;
  gc.n_bess = 1;
  gc.slack_bus = 0;
  gc.slack_gen = 0;
  gc.gen_buses = {0, 1};
  gc.bess_buses = {2};
  Branch b1{0, 1, cplx(1.0, -4.0), cplx(0, 0.01), cplx(0, 0.01)};
  Branch b2{1, 2, cplx(0.8, -3.0), {}, {}};
  gc.branches = {b1, b2};
  gc.Y = build_admittance(gc.branches, 3);
  gc.gen_p_min = Eigen::VectorXd::Zero(2);
  gc.gen_p_max = Eigen::VectorXd::Constant(2, 2.0);
  gc.gen_q_min = Eigen::VectorXd::Constant(2, -1.0);
  gc.gen_q_max = Eigen::VectorXd::Constant(2, 1.0);
  gc.v_min = Eigen::VectorXd::Constant(3, 0.94);
  gc.v_max = Eigen::VectorXd::Constant(3, 1.06);
  gc.cost_a = Eigen::VectorXd::Constant(2, 0.1);
  gc.cost_b = Eigen::VectorXd::Constant(2, 1.0);
  gc.cost_c = Eigen::VectorXd::Zero(2);
  gc.d_p_base = Eigen::VectorXd::Constant(3, 0.2);
  gc.d_q_base = Eigen::VectorXd::Constant(3, 0.05);
  gc.bess.p_ch_rated = Eigen::VectorXd::Constant(1, 0.5);
  gc.bess.p_dis_rated = Eigen::VectorXd::Constant(1, 0.5);
  gc.bess.soc_min = Eigen::VectorXd::Zero(1);
  gc.bess.soc_max = Eigen::VectorXd::Ones(1);
  gc.maps.m_g = Eigen::MatrixXd::Zero(3, 2);
  gc.maps.m_g(0, 0) = 1;
  gc.maps.m_g(1, 1) = 1;
  gc.maps.m_b = Eigen::MatrixXd::Zero(3, 1);
  gc.maps.m_b(2, 0) = 1;
  return gc;
}

EnvState random_state(Rand& rnd, const GridCase& gc, int horizon) {
  EnvState st;
  for (int t = 0; t < horizon; ++t) {
    Mat re = rnd.uniform(gc.n_bus, 1, 0.9, 1.1);
    Mat im = rnd.uniform(gc.n_bus, 1, -0.2, 0.2);
    Eigen::VectorXcd v(gc.n_bus);
    for (int i = 0; i < gc.n_bus; ++i) v(i) = cplx(re(i, 0), im(i, 0));
    st.v_history.push_back(v);
  }
  st.soc = Eigen::VectorXd::Zero(gc.n_bus);
  for (int b = 0; b < gc.n_bess; ++b)
    st.soc(gc.bess_buses[b]) = rnd.uniform(1, 1, 0.2, 0.8)(0, 0);
  return st;
}

std::vector<Case> make_net_cases(Rand& rnd) {
  std::vector<Case> cases;
  static GridCase gc = tiny_case();
  NetConfig cfg;
  cfg.cheb_order = 2;
  cfg.temporal_channels = 3;
  cfg.gcn_channels = 3;
  cfg.hidden = 8;
  cfg.horizon = 2;

  auto state = std::make_shared<EnvState>(random_state(rnd, gc, cfg.horizon));
  auto actor = std::make_shared<ActorNet>(gc, cfg, rnd.next());
  cases.push_back({"actor_forward",
                   [actor, state] {
                     std::vector<const EnvState*> sts{state.get()};
                     return square_norm(actor->forward(sts));
                   },
                   actor->named_params()});

  auto pred = std::make_shared<PredictorNet>(gc, cfg, rnd.next());
  cases.push_back({"predictor_forward",
                   [pred, state] {
                     std::vector<const EnvState*> sts{state.get()};
                     return square_norm(pred->forward(sts));
                   },
                   pred->named_params()});

  auto critic = std::make_shared<CriticNet>(gc, cfg, rnd.next());
  auto action = std::make_shared<Mat>(rnd.uniform(1, cfg.horizon * ActionBlock::width(gc), 0.0, 1.0));
  Value action_param = param(*action);
  auto critic_params = critic->named_params();
  critic_params.emplace_back("action", action_param);
  cases.push_back({"critic_forward",
                   [critic, state, action_param] {
                     std::vector<const EnvState*> sts{state.get()};
                     return square_norm(critic->forward(sts, action_param));
                   },
                   critic_params});
  return cases;
}

}  // namespace

SuiteResult run_gradcheck_suite(int instances, std::uint64_t seed, double threshold,
                                std::ostream* log) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult suite;
  suite.passed = true;
  for (int inst = 0; inst < instances; ++inst) {
    Rand rnd(seed + 7919 * static_cast<std::uint64_t>(inst));
    std::vector<Case> cases = make_primitive_cases(rnd);
    std::vector<Case> nets = make_net_cases(rnd);
    cases.insert(cases.end(), nets.begin(), nets.end());
    for (auto& c : cases) {
      GradCheckResult r = gradcheck(c.build, c.params);
      ++suite.cases;
      if (r.max_rel_err > suite.worst) {
        suite.worst = r.max_rel_err;
        suite.worst_case = c.name + "/" + r.worst_param;
      }
      if (r.max_rel_err > threshold) {
        suite.passed = false;
        if (log)
          *log << "gradcheck FAIL " << c.name << " (" << r.worst_param
               << "): rel err = " << r.max_rel_err << "\n";
      }
    }
  }
  suite.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (log)
    *log << "gradcheck: " << suite.cases << " cases, worst rel err " << suite.worst << " ("
         << suite.worst_case << "), " << suite.seconds << " s\n";
  return suite;
}

}  // namespace sdopf::ad
