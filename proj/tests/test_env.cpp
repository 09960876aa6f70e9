#include <doctest.h>

#include <random>

#include "sdopf/env.hpp"

using namespace sdopf;

namespace {

const std::string kIeee14 = std::string(SDOPF_DATA_DIR) + "/cases/ieee14.json";

GridCase two_bus_bess_case() {
  std::string text = R"({
    "name": "twobus_bess", "dt_over_ecap": 0.005,
    "buses": [
      {"id": 1, "v_min": 0.9, "v_max": 1.1, "d_p": 0.0, "d_q": 0.0},
      {"id": 2, "v_min": 0.9, "v_max": 1.1, "d_p": 0.3, "d_q": 0.1}
    ],
    "branches": [{"from": 1, "to": 2, "r": 0.038461538461538464, "x": 0.19230769230769232, "b_shunt": 0.0}],
    "generators": [
      {"bus": 1, "p_min": 0.0, "p_max": 2.0, "q_min": -1.0, "q_max": 1.0,
       "cost_a": 0.1, "cost_b": 1.0, "cost_c": 0.0, "is_slack": true},
      {"bus": 2, "p_min": 0.0, "p_max": 1.0, "q_min": -0.5, "q_max": 0.5,
       "cost_a": 0.2, "cost_b": 2.0, "cost_c": 0.0, "is_slack": false}
    ],
    "bess": [{"bus": 2, "p_ch_rated": 0.4, "p_dis_rated": 0.4, "eta_ch": 0.98, "eta_dis": 0.98,
              "soc_min": 0.1, "soc_max": 0.9}]
  })";
  return parse_case(text, "twobus_bess");
}

ScenarioConfig quiet_scenario(int len = 24) {
  ScenarioConfig cfg;
  cfg.episode_len = len;
  cfg.diurnal_harmonics = 0;
  cfg.noise_sigma = 0.0;
  return cfg;
}

}  // namespace

TEST_CASE("denormalize endpoints, midpoint and rated scaling") {
  GridCase gc = two_bus_bess_case();
  const int d = ActionBlock::width(gc);
  Eigen::VectorXd row = Eigen::VectorXd::Zero(d);

  SUBCASE("zero maps to lower bounds") {
    PhysicalAction a = denormalize(row, gc);
    CHECK(a.g_p(0) == gc.gen_p_min(0));
    CHECK(a.g_q(1) == gc.gen_q_min(1));
    CHECK(a.p_ch(0) == 0.0);
  }
  SUBCASE("one maps to upper bounds") {
    row.setOnes();
    PhysicalAction a = denormalize(row, gc);
    CHECK(a.g_p(0) == gc.gen_p_max(0));
    CHECK(a.g_q(1) == gc.gen_q_max(1));
    CHECK(a.p_dis(0) == gc.bess.p_dis_rated(0));
  }
  SUBCASE("half maps to the midpoint") {
    row.setConstant(0.5);
    PhysicalAction a = denormalize(row, gc);
    CHECK(a.g_p(0) == doctest::Approx(0.5 * (gc.gen_p_min(0) + gc.gen_p_max(0))).epsilon(1e-15));
  }
  SUBCASE("charging scales by rated power") {
    row(2 * gc.n_gen) = 0.25;  // p_ch entry, rated 0.4
    PhysicalAction a = denormalize(row, gc);
    CHECK(a.p_ch(0) == doctest::Approx(0.1).epsilon(1e-15));
  }
  SUBCASE("out-of-range entries are rejected") {
    row(0) = 1.5;
    CHECK_THROWS_AS(denormalize(row, gc), std::invalid_argument);
  }
}

TEST_CASE("soc_step recursion") {
  BessParams bess;
  bess.dt_over_ecap = 0.005;
  bess.eta_ch = 0.98;
  bess.eta_dis = 0.98;
  Eigen::VectorXd soc(1), ch(1), dis(1);
  soc << 0.5;

  SUBCASE("zero powers leave SOC unchanged") {
    ch << 0.0;
    dis << 0.0;
    CHECK(soc_step(soc, ch, dis, bess)(0) == 0.5);
  }
  SUBCASE("charging example") {
    ch << 10.0;
    dis << 0.0;
    CHECK(soc_step(soc, ch, dis, bess)(0) == doctest::Approx(0.549).epsilon(1e-12));
  }
  SUBCASE("discharging example") {
    ch << 0.0;
    dis << 9.8;
    CHECK(soc_step(soc, ch, dis, bess)(0) == doctest::Approx(0.45).epsilon(1e-12));
  }
}

TEST_CASE("clamp_action_for_soc rails") {
  auto [ch1, dis1] = clamp_action_for_soc(1.0, 5.0, 2.0);
  CHECK(ch1 == 0.0);
  CHECK(dis1 == 2.0);
  auto [ch2, dis2] = clamp_action_for_soc(0.0, 5.0, 2.0);
  CHECK(ch2 == 5.0);
  CHECK(dis2 == 0.0);
  auto [ch3, dis3] = clamp_action_for_soc(0.5, 5.0, 2.0);
  CHECK(ch3 == 5.0);
  CHECK(dis3 == 2.0);
}

TEST_CASE("reward composition") {
  GridCase gc = two_bus_bess_case();
  PhysicalAction a;
  a.g_p = Eigen::VectorXd::Zero(2);
  a.g_q = Eigen::VectorXd::Zero(2);
  a.p_ch = Eigen::VectorXd::Zero(1);
  a.p_dis = Eigen::VectorXd::Zero(1);

  SUBCASE("all-zero action with zero constant cost gives zero") {
    CHECK(reward(a, gc) == 0.0);
  }
  SUBCASE("single affine generator term") {
    GridCase g1 = gc;
    g1.cost_a << 0.0, 0.0;
    g1.cost_b << 1.0, 0.0;
    g1.bess.eta_ch = 1.0;
    g1.bess.eta_dis = 1.0;
    a.g_p(0) = 2.0;
    a.p_ch(0) = 0.3;  // lossless storage contributes nothing
    CHECK(reward(a, g1) == doctest::Approx(-2.0).epsilon(1e-15));
  }
  SUBCASE("fuel plus conversion losses") {
    GridCase g1 = gc;
    g1.cost_a << 0.1, 0.0;
    g1.cost_b << 1.0, 0.0;
    a.g_p(0) = 2.0;
    a.p_ch(0) = 10.0;
    a.p_dis(0) = 9.8;
    CHECK(reward(a, g1) == doctest::Approx(-2.8).epsilon(1e-12));
  }
}

TEST_CASE("generate_scenario") {
  GridCase gc = two_bus_bess_case();

  SUBCASE("zero noise gives the pure diurnal profile, identical across seeds") {
    ScenarioConfig cfg = quiet_scenario();
    cfg.diurnal_harmonics = 2;
    Scenario a = generate_scenario(gc, cfg, 1);
    Scenario b = generate_scenario(gc, cfg, 99);
    CHECK((a.d_p - b.d_p).cwiseAbs().maxCoeff() == 0.0);
    for (int t = 0; t < 5; ++t)
      CHECK(a.d_p(t, 1) ==
            doctest::Approx(gc.d_p_base(1) * diurnal_profile(t, cfg.episode_len, 2)).epsilon(1e-14));
  }
  SUBCASE("same seed reproduces the scenario") {
    ScenarioConfig cfg = quiet_scenario();
    cfg.noise_sigma = 0.2;
    cfg.wind_buses = {0};
    cfg.wind_scale = 0.1;
    Scenario a = generate_scenario(gc, cfg, 42);
    Scenario b = generate_scenario(gc, cfg, 42);
    CHECK((a.d_p - b.d_p).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a.d_q - b.d_q).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("Monte-Carlo mean matches base times profile within 2%") {
    ScenarioConfig cfg = quiet_scenario(8);
    cfg.diurnal_harmonics = 2;
    cfg.noise_sigma = 0.1;
    const int peak_t = 2;
    double sum = 0.0;
    const int n = 1000;
    for (int s = 0; s < n; ++s) sum += generate_scenario(gc, cfg, 1000 + s).d_p(peak_t, 1);
    const double expect = gc.d_p_base(1) * diurnal_profile(peak_t, cfg.episode_len, 2);
    CHECK(sum / n == doctest::Approx(expect).epsilon(0.02));
  }
}

TEST_CASE("env_step null dynamics") {
  GridCase gc = two_bus_bess_case();
  gc.d_p_base.setZero();
  gc.d_q_base.setZero();
  gc.cost_c.setZero();
  gc.gen_p_min.setZero();
  gc.gen_q_min.setZero();
  gc.gen_q_max.setZero();
  gc.gen_p_max(1) = 0.0;  // non-slack gen pinned to zero output
  EnvConfig env;
  env.horizon = 3;
  Scenario sc = generate_scenario(gc, quiet_scenario(), 1);
  sc.d_p.setZero();
  sc.d_q.setZero();
  EnvState st = make_initial_state(gc, env);
  ActionBlock block;
  block.a_hat = Eigen::MatrixXd::Zero(env.horizon, ActionBlock::width(gc));
  auto [next, r, info] = env_step(st, block, sc, gc, env);
  CHECK(info.pf_converged);
  CHECK(r == doctest::Approx(0.0).epsilon(1e-12));
  CHECK((next.v_history[0] - flat_start(2)).cwiseAbs().maxCoeff() < 1e-9);
  CHECK(next.soc(1) == st.soc(1));
}

TEST_CASE("env_step matches a hand-composed pipeline on two buses") {
  GridCase gc = two_bus_bess_case();
  EnvConfig env;
  env.horizon = 2;
  Scenario sc = generate_scenario(gc, quiet_scenario(), 3);
  EnvState st = make_initial_state(gc, env);
  ActionBlock block;
  block.a_hat.resize(env.horizon, ActionBlock::width(gc));
  block.a_hat << 0.3, 0.6, 0.4, 0.7, 0.2, 0.1,
                 0.9, 0.9, 0.9, 0.9, 0.9, 0.9;  // future row unused

  auto [next, r, info] = env_step(st, block, sc, gc, env);
  REQUIRE(info.pf_converged);

  // Oracle: compose the module operations directly.
  PhysicalAction act = denormalize(block.a_hat.row(0).transpose(), gc);
  Eigen::VectorXd soc_b(1);
  soc_b << st.soc(1);
  Eigen::VectorXd soc_ref = soc_step(soc_b, act.p_ch, act.p_dis, gc.bess);
  CHECK(next.soc(1) == doctest::Approx(soc_ref(0)).epsilon(1e-15));

  Eigen::VectorXd g_p = act.g_p, g_q = act.g_q;
  g_p(0) = 0.0;
  g_q(0) = 0.0;
  Eigen::VectorXd p = expand_to_nodes(gc.maps, g_p, DeviceKind::Gen) +
                      expand_to_nodes(gc.maps, act.p_dis - act.p_ch, DeviceKind::Bess) -
                      sc.d_p.row(0).transpose();
  Eigen::VectorXd q = expand_to_nodes(gc.maps, g_q, DeviceKind::Gen) - sc.d_q.row(0).transpose();
  NewtonResult pf = newton_solve(gc, PowerFlowSpec::all_pq(gc, p, q), flat_start(2));
  REQUIRE(pf.converged);
  CHECK((next.v_history[0] - pf.v).cwiseAbs().maxCoeff() < 1e-12);

  Eigen::VectorXcd s = complex_injections(pf.v, gc.Y);
  PhysicalAction realized = act;
  realized.g_p(0) = s(0).real() + sc.d_p(0, 0);
  realized.g_q(0) = s(0).imag() + sc.d_q(0, 0);
  CHECK(r == doctest::Approx(reward(realized, gc)).epsilon(1e-12));
  CHECK(info.slack_g_p == doctest::Approx(realized.g_p(0)).epsilon(1e-12));

  SUBCASE("sliding window shifts the history") {
    CHECK((next.v_history[1] - st.v_history[0]).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("reward ignores the unused future rows") {
    ActionBlock other = block;
    other.a_hat.row(1).setConstant(0.05);
    auto [n2, r2, i2] = env_step(st, other, sc, gc, env);
    CHECK(r2 == r);
    CHECK((n2.v_history[0] - next.v_history[0]).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("env_step clamps charging at full SOC") {
  GridCase gc = two_bus_bess_case();
  gc.bess.soc_max(0) = 1.0;
  EnvConfig env;
  env.horizon = 2;
  Scenario sc = generate_scenario(gc, quiet_scenario(), 5);
  EnvState st = make_initial_state(gc, env);
  st.soc(1) = 1.0;
  ActionBlock block;
  block.a_hat = Eigen::MatrixXd::Constant(env.horizon, ActionBlock::width(gc), 0.5);
  block.a_hat(0, 2 * gc.n_gen) = 1.0;      // charge hard
  block.a_hat(0, 2 * gc.n_gen + 1) = 0.0;  // no discharge
  auto [next, r, info] = env_step(st, block, sc, gc, env);
  CHECK(info.applied.p_ch(0) == 0.0);
  CHECK(next.soc(1) == 1.0);
}

TEST_CASE("SOC stays inside bounds under fuzzed actions") {
  GridCase gc = two_bus_bess_case();
  EnvConfig env;
  env.horizon = 2;
  ScenarioConfig scfg = quiet_scenario(64);
  scfg.noise_sigma = 0.1;
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  int episodes = 0;
  Scenario sc = generate_scenario(gc, scfg, episodes);
  EnvState st = make_initial_state(gc, env);
  for (int k = 0; k < 2000; ++k) {
    ActionBlock block;
    block.a_hat.resize(env.horizon, ActionBlock::width(gc));
    for (int i = 0; i < block.a_hat.rows(); ++i)
      for (int j = 0; j < block.a_hat.cols(); ++j) block.a_hat(i, j) = uni(rng);
    auto [next, r, info] = env_step(st, block, sc, gc, env);
    CHECK(next.soc(1) >= gc.bess.soc_min(0));
    CHECK(next.soc(1) <= gc.bess.soc_max(0));
    st = next;
    if (info.done) {
      sc = generate_scenario(gc, scfg, ++episodes);
      st = make_initial_state(gc, env);
    }
  }
}
