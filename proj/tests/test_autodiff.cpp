#include <doctest.h>

#include <random>

#include "sdopf/autodiff.hpp"
#include "sdopf/gradcheck.hpp"

using namespace sdopf;
using ad::Mat;
using ad::Value;

TEST_CASE("crelu applies relu to each part") {
  Mat re(1, 2), im(1, 2);
  re << 1.0, -1.0;
  im << -2.0, 3.0;
  Value z = ad::constant_complex(re, im);
  Value y = ad::crelu(z);
  CHECK(y->re(0, 0) == 1.0);
  CHECK(y->im(0, 0) == 0.0);
  CHECK(y->re(0, 1) == 0.0);
  CHECK(y->im(0, 1) == 3.0);
}

TEST_CASE("gradient of sum of squares") {
  Mat x(2, 1);
  x << 1.0, 2.0;
  Value p = ad::param(x);
  Value loss = ad::square_norm(p);
  ad::backward(loss);
  CHECK(p->gre(0, 0) == 2.0);
  CHECK(p->gre(1, 0) == 4.0);
}

TEST_CASE("backward on identity seeds unit gradient") {
  Value p = ad::param(Mat::Constant(1, 1, 3.0));
  Value loss = ad::scale(p, 1.0);
  ad::backward(loss);
  CHECK(p->gre(0, 0) == 1.0);
}

TEST_CASE("shared subexpressions accumulate gradients") {
  Value x = ad::param(Mat::Constant(1, 1, 2.0));
  // loss = x^2 + 3x: grad = 2x + 3 = 7
  Value loss = ad::add(ad::mul(x, x), ad::scale(x, 3.0));
  ad::backward(loss);
  CHECK(x->gre(0, 0) == 7.0);
}

TEST_CASE("backward rejects non-scalar losses") {
  Value p = ad::param(Mat::Zero(2, 2));
  CHECK_THROWS_AS(ad::backward(p), std::invalid_argument);
  Value c = ad::param_complex(Mat::Zero(1, 1), Mat::Zero(1, 1));
  CHECK_THROWS_AS(ad::backward(c), std::invalid_argument);
}

TEST_CASE("shape and dtype mismatches are rejected") {
  Value a = ad::constant(Mat::Zero(2, 2));
  Value b = ad::constant(Mat::Zero(2, 3));
  CHECK_THROWS_AS(ad::add(a, b), std::invalid_argument);
  Value c = ad::constant_complex(Mat::Zero(2, 2), Mat::Zero(2, 2));
  CHECK_THROWS_AS(ad::add(a, c), std::invalid_argument);
  CHECK_THROWS_AS(ad::matmul(c, c), std::invalid_argument);
  CHECK_THROWS_AS(ad::complex_matmul(a, a), std::invalid_argument);
  CHECK_THROWS_AS(ad::relu(c), std::invalid_argument);
  CHECK_THROWS_AS(ad::crelu(a), std::invalid_argument);
}

TEST_CASE("graph_filter structure") {
  const int n = 3, f = 2;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  auto rnd = [&](int r, int c) {
    Mat m(r, c);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) m(i, j) = uni(rng);
    return m;
  };
  Value s = ad::constant_complex(rnd(n, n), rnd(n, n));
  Value x = ad::constant_complex(rnd(n, f), rnd(n, f));

  SUBCASE("single tap applies no graph mixing") {
    Value h0 = ad::constant_complex(rnd(f, f), rnd(f, f));
    Value out = ad::graph_filter({h0}, s, x, n);
    Value ref = ad::complex_matmul(x, h0);
    CHECK((out->re - ref->re).cwiseAbs().maxCoeff() < 1e-14);
    CHECK((out->im - ref->im).cwiseAbs().maxCoeff() < 1e-14);
  }
  SUBCASE("identity shift collapses taps to their sum") {
    Value ident = ad::constant_complex(Mat::Identity(n, n), Mat::Zero(n, n));
    Value h0 = ad::constant_complex(rnd(f, f), rnd(f, f));
    Value h1 = ad::constant_complex(rnd(f, f), rnd(f, f));
    Value h2 = ad::constant_complex(rnd(f, f), rnd(f, f));
    Value out = ad::graph_filter({h0, h1, h2}, ident, x, n);
    Value hsum = ad::add(ad::add(h0, h1), h2);
    Value ref = ad::complex_matmul(x, hsum);
    CHECK((out->re - ref->re).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((out->im - ref->im).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("two taps match a naive double-loop evaluation") {
    Value h0 = ad::constant_complex(rnd(f, f), rnd(f, f));
    Value h1 = ad::constant_complex(rnd(f, f), rnd(f, f));
    Value out = ad::graph_filter({h0, h1}, s, x, n);

    using C = std::complex<double>;
    Eigen::MatrixXcd sc(n, n), xc(n, f), h0c(f, f), h1c(f, f);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) sc(i, j) = C(s->re(i, j), s->im(i, j));
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < f; ++j) xc(i, j) = C(x->re(i, j), x->im(i, j));
    for (int i = 0; i < f; ++i)
      for (int j = 0; j < f; ++j) {
        h0c(i, j) = C(h0->re(i, j), h0->im(i, j));
        h1c(i, j) = C(h1->re(i, j), h1->im(i, j));
      }
    Eigen::MatrixXcd ref = Eigen::MatrixXcd::Zero(n, f);
    for (int i = 0; i < n; ++i)
      for (int o = 0; o < f; ++o) {
        for (int ff = 0; ff < f; ++ff) {
          ref(i, o) += xc(i, ff) * h0c(ff, o);
          C shifted(0, 0);
          for (int k = 0; k < n; ++k) shifted += sc(i, k) * xc(k, ff);
          ref(i, o) += shifted * h1c(ff, o);
        }
      }
    for (int i = 0; i < n; ++i)
      for (int o = 0; o < f; ++o) {
        CHECK(out->re(i, o) == doctest::Approx(ref(i, o).real()).epsilon(1e-12));
        CHECK(out->im(i, o) == doctest::Approx(ref(i, o).imag()).epsilon(1e-12));
      }
  }
}

TEST_CASE("temporal_conv selector and zero kernels") {
  const int n = 3, two_t = 4, kt = 2;
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  Mat xre(n, two_t), xim(n, two_t);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < two_t; ++j) {
      xre(i, j) = uni(rng);
      xim(i, j) = uni(rng);
    }
  Value x = ad::constant_complex(xre, xim);

  SUBCASE("one-hot kernel reproduces the selected frame") {
    Mat kre = Mat::Zero(two_t, kt), kim = Mat::Zero(two_t, kt);
    kre(0, 0) = 1.0;  // select channel 0 of the newest frame
    Value out = ad::temporal_conv(ad::constant_complex(kre, kim), x);
    for (int i = 0; i < n; ++i) {
      CHECK(out->re(i, 0) == xre(i, 0));
      CHECK(out->im(i, 0) == xim(i, 0));
    }
  }
  SUBCASE("zero kernel gives zero output") {
    Value out = ad::temporal_conv(ad::constant_complex(Mat::Zero(two_t, kt), Mat::Zero(two_t, kt)), x);
    CHECK(out->re.cwiseAbs().maxCoeff() == 0.0);
    CHECK(out->im.cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("random kernel matches per-node dot products") {
    Mat kre(two_t, kt), kim(two_t, kt);
    for (int i = 0; i < two_t; ++i)
      for (int j = 0; j < kt; ++j) {
        kre(i, j) = uni(rng);
        kim(i, j) = uni(rng);
      }
    Value out = ad::temporal_conv(ad::constant_complex(kre, kim), x);
    for (int i = 0; i < n; ++i)
      for (int o = 0; o < kt; ++o) {
        std::complex<double> acc(0, 0);
        for (int j = 0; j < two_t; ++j)
          acc += std::complex<double>(xre(i, j), xim(i, j)) *
                 std::complex<double>(kre(j, o), kim(j, o));
        CHECK(out->re(i, o) == doctest::Approx(acc.real()).epsilon(1e-12));
        CHECK(out->im(i, o) == doctest::Approx(acc.imag()).epsilon(1e-12));
      }
  }
}

TEST_CASE("finite-difference agreement for representative graphs") {
  SUBCASE("sigmoid dense stack") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> uni(-0.8, 0.8);
    Mat w(3, 4), x(2, 3);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 4; ++j) w(i, j) = uni(rng);
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 3; ++j) x(i, j) = uni(rng);
    Value wp = ad::param(w);
    Value xc = ad::constant(x);
    auto build = [&] { return ad::sum(ad::sigmoid(ad::matmul(xc, wp))); };
    auto res = ad::gradcheck(build, {{"w", wp}});
    CHECK(res.max_rel_err < 1e-5);
  }
  SUBCASE("complex parameter through crelu and magnitude") {
    Mat re(2, 2), im(2, 2);
    re << 0.4, -0.7, 0.9, 0.3;
    im << -0.5, 0.6, 0.2, -0.8;
    Value h = ad::param_complex(re, im);
    Mat xre(2, 2), xim(2, 2);
    xre << 0.3, 0.8, -0.4, 0.5;
    xim << 0.7, -0.2, 0.6, 0.4;
    Value x = ad::constant_complex(xre, xim);
    auto build = [&] { return ad::square_norm(ad::crelu(ad::complex_matmul(x, h))); };
    auto res = ad::gradcheck(build, {{"h", h}});
    CHECK(res.max_rel_err < 1e-5);
  }
}

TEST_CASE("relu family takes the zero branch at the kink") {
  Value x = ad::param(Mat::Zero(1, 1));
  Value loss = ad::sum(ad::relu(x));
  ad::backward(loss);
  CHECK(x->gre(0, 0) == 0.0);

  Value z = ad::param_complex(Mat::Zero(1, 1), Mat::Zero(1, 1));
  Value closs = ad::sum(ad::real_part(ad::crelu(z)));
  ad::backward(closs);
  CHECK(z->gre(0, 0) == 0.0);
  // Magnitude at the origin also takes the zero branch.
  Value m = ad::sum(ad::magnitude(z));
  ad::backward(m);
  CHECK(z->gre(0, 0) == 0.0);
  CHECK(z->gim(0, 0) == 0.0);
}

TEST_CASE("adam_step") {
  SUBCASE("zero gradient leaves parameters unchanged") {
    Value p = ad::param(Mat::Constant(2, 2, 1.5));
    p->ensure_grad();
    ad::AdamConfig cfg;
    ad::AdamState state;
    ad::adam_step({p}, cfg, state);
    CHECK((p->re.array() == 1.5).all());
  }
  SUBCASE("first step magnitude is about the learning rate") {
    Value p = ad::param(Mat::Zero(1, 1));
    p->ensure_grad();
    p->gre(0, 0) = 1.0;
    ad::AdamConfig cfg;
    ad::AdamState state;
    ad::adam_step({p}, cfg, state);
    CHECK(p->re(0, 0) == doctest::Approx(-cfg.lr).epsilon(1e-6));
  }
  SUBCASE("three-step trace on a quadratic matches a reference implementation") {
    // Minimize f(w) = 0.5 w^2 from w = 1.
    Value p = ad::param(Mat::Constant(1, 1, 1.0));
    ad::AdamConfig cfg;
    ad::AdamState state;
    double w_ref = 1.0, m = 0.0, v = 0.0;
    for (int t = 1; t <= 3; ++t) {
      p->zero_grad();
      Value loss = ad::scale(ad::square_norm(p), 0.5);
      ad::backward(loss);
      ad::adam_step({p}, cfg, state);

      const double g = w_ref;  // d/dw 0.5 w^2
      m = cfg.beta1 * m + (1 - cfg.beta1) * g;
      v = cfg.beta2 * v + (1 - cfg.beta2) * g * g;
      const double mhat = m / (1 - std::pow(cfg.beta1, t));
      const double vhat = v / (1 - std::pow(cfg.beta2, t));
      w_ref -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
      CHECK(p->re(0, 0) == doctest::Approx(w_ref).epsilon(1e-12));
    }
  }
}

TEST_CASE("NoGradGuard suppresses graph construction") {
  Value p = ad::param(Mat::Constant(1, 1, 2.0));
  ad::NoGradGuard ng;
  Value y = ad::mul(p, p);
  CHECK_FALSE(y->requires_grad);
  CHECK(y->parents.empty());
}

TEST_CASE("deterministic forward and backward") {
  auto run = [] {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    Mat w(4, 4), x(4, 4);
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) {
        w(i, j) = uni(rng);
        x(i, j) = uni(rng);
      }
    Value wp = ad::param(w);
    Value loss = ad::square_norm(ad::tanh_op(ad::matmul(ad::constant(x), wp)));
    ad::backward(loss);
    return std::make_pair(loss->scalar(), Mat(wp->gre));
  };
  auto [l1, g1] = run();
  auto [l2, g2] = run();
  CHECK(l1 == l2);
  CHECK((g1 - g2).cwiseAbs().maxCoeff() == 0.0);
}
