#include <cmath>
#include <random>

#include "doctest.h"
#include "regime/errors.hpp"
#include "regime/hmm.hpp"
#include "regime/stats.hpp"
#include "test_util.hpp"
#include "oracles/hmm.hpp"

using namespace regime;
using namespace regime::hmm;

using namespace oracle::hmm;

TEST_CASE("log_normalize examples") {
  std::vector<double> a{0.0, 0.0};
  auto r = log_normalize(a);
  CHECK(r[0] == doctest::Approx(-std::log(2.0)));
  std::vector<double> b{0.0, std::log(3.0)};
  auto rb = log_normalize(b);
  CHECK(rb[0] == doctest::Approx(std::log(0.25)));
  CHECK(rb[1] == doctest::Approx(std::log(0.75)));
  std::vector<double> c{7.0, 7.0 + std::log(3.0)};
  auto rc = log_normalize(c);
  CHECK(rc[0] == doctest::Approx(rb[0]).epsilon(1e-14));
  std::vector<double> big{1000.0, 1000.0};
  CHECK(log_normalize(big)[0] == doctest::Approx(-std::log(2.0)));
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> partial{-inf, 0.0};
  CHECK(log_normalize(partial)[1] == 0.0);
  std::vector<double> none{-inf, -inf};
  CHECK_THROWS_AS(log_normalize(none), DomainError);
}

TEST_CASE("single state forward") {
  HmmParams p;
  p.pi = Vector::Ones(1);
  p.P = Matrix::Ones(1, 1);
  p.means = {Vector::Constant(1, 0.5)};
  p.covs = {Matrix::Constant(1, 1, 2.0)};
  Matrix x(3, 1);
  x << 0.1, -1.0, 2.0;
  auto f = forward(p, x);
  double ll = 0;
  for (int t = 0; t < 3; ++t) ll += -0.5 * std::log(2 * M_PI * 2.0) - 0.25 * (x(t, 0) - 0.5) * (x(t, 0) - 0.5);
  CHECK(f.loglik == doctest::Approx(ll).epsilon(1e-13));
  for (int t = 0; t < 3; ++t) CHECK(f.log_filtered(t, 0) == 0.0);
}

TEST_CASE("two-state worked example matches enumeration") {
  HmmParams p = two_state(0.0, 1.0, 0.9);
  Matrix x(2, 1);
  x << 0, 1;
  auto f = forward(p, x);
  auto e = testutil::enumerate_paths(p.pi, p.P, emission_loglik(p, x));
  CHECK(testutil::max_abs(f.log_filtered.array().exp().matrix() - e.filtered) < 1e-12);
  CHECK(f.loglik == doctest::Approx(e.loglik).epsilon(1e-13));

  HmmParams ident = two_state(0.0, 8.0, 1.0);
  Matrix y(4, 1);
  y << 0.2, 1.0, -0.5, 5.0;
  auto g = smoothed_marginals(ident, y);
  for (int t = 0; t < 4; ++t) CHECK(g.gamma(t, 0) > 0.99);
  auto eg = testutil::enumerate_paths(ident.pi, ident.P, emission_loglik(ident, y));
  CHECK(testutil::max_abs(g.gamma - eg.gamma) < 1e-10);
}

TEST_CASE("forward, backward and marginals match path enumeration") {
  std::mt19937_64 gen(17);
  for (int rep = 0; rep < 60; ++rep) {
    const int K = 1 + rep % 3, T = 1 + rep % 6, D = 1 + rep % 2;
    HmmParams p = random_params(gen, K, D);
    Matrix x = random_obs(gen, T, D);
    const Matrix ll = emission_loglik(p, x);
    auto e = testutil::enumerate_paths(p.pi, p.P, ll);
    auto m = smoothed_marginals(p, x);
    CHECK(std::fabs(m.loglik - e.loglik) < 1e-10);
    CHECK(testutil::max_abs(m.gamma - e.gamma) < 1e-10);
    for (int t = 0; t + 1 < T; ++t) CHECK(testutil::max_abs(m.xi[static_cast<std::size_t>(t)] - e.xi[static_cast<std::size_t>(t)]) < 1e-10);
    auto f = forward(p, x);
    CHECK(testutil::max_abs(f.log_filtered.array().exp().matrix() - e.filtered) < 1e-10);

    // Backward messages against suffix enumeration: p(x_{t+1:T} | z_t = k).
    Matrix b = backward(p, x);
    CHECK(b.row(T - 1).cwiseAbs().maxCoeff() == 0.0);
    for (int t = 0; t + 1 < T; ++t) {
      for (int k = 0; k < K; ++k) {
        Vector start = Vector::Zero(K);
        start[k] = 1.0;
        Matrix suffix = ll.bottomRows(T - t - 1);
        // Suffix likelihood given z_t = k: initial distribution P(k, .).
        auto es = testutil::enumerate_paths(p.P.row(k).transpose(), p.P, suffix);
        CHECK(std::fabs(b(t, k) - es.loglik) < 1e-10);
      }
    }

    // Recomposition and normalization invariants.
    for (int t = 0; t < T; ++t) {
      CHECK(std::fabs(m.gamma.row(t).sum() - 1.0) < 1e-10);
      Vector lg = f.log_filtered.row(t).transpose() + b.row(t).transpose();
      const double lse = log_sum_exp(std::span<const double>(lg.data(), static_cast<std::size_t>(K)));
      CHECK(testutil::max_abs((lg.array() - lse).exp().matrix().transpose() - m.gamma.row(t)) < 1e-10);
    }
    for (int t = 0; t + 1 < T; ++t) {
      const Matrix& xi = m.xi[static_cast<std::size_t>(t)];
      CHECK(std::fabs(xi.sum() - 1.0) < 1e-10);
      CHECK(testutil::max_abs(xi.rowwise().sum().transpose() - m.gamma.row(t)) < 1e-10);
      CHECK(testutil::max_abs(xi.colwise().sum() - m.gamma.row(t + 1)) < 1e-10);
    }

    // Pointwise MAP agrees with the enumerated marginals.
    auto path = modal_path(m);
    for (int t = 0; t < T; ++t) {
      Eigen::Index best;
      e.gamma.row(t).maxCoeff(&best);
      if (std::fabs(e.gamma.row(t).maxCoeff() - e.gamma(t, path[static_cast<std::size_t>(t)])) > 1e-9) CHECK(path[static_cast<std::size_t>(t)] == best);
    }
  }
}

TEST_CASE("identical emissions give constant backward messages") {
  HmmParams p = two_state(1.0, 1.0, 0.7);
  Matrix x(4, 1);
  x << 0.3, 2.0, -1.0, 0.0;
  Matrix b = backward(p, x);
  for (int t = 0; t < 4; ++t) CHECK(b(t, 0) == doctest::Approx(b(t, 1)).epsilon(1e-13));
}

TEST_CASE("marginals are equivariant under relabeling states") {
  std::mt19937_64 gen(3);
  HmmParams p = random_params(gen, 3, 1);
  Matrix x = random_obs(gen, 5, 1);
  std::vector<int> perm{2, 0, 1};
  HmmParams q = p;
  for (int a = 0; a < 3; ++a) {
    q.pi[perm[static_cast<std::size_t>(a)]] = p.pi[a];
    q.means[static_cast<std::size_t>(perm[static_cast<std::size_t>(a)])] = p.means[static_cast<std::size_t>(a)];
    q.covs[static_cast<std::size_t>(perm[static_cast<std::size_t>(a)])] = p.covs[static_cast<std::size_t>(a)];
    for (int b = 0; b < 3; ++b) q.P(perm[static_cast<std::size_t>(a)], perm[static_cast<std::size_t>(b)]) = p.P(a, b);
  }
  auto mp = smoothed_marginals(p, x);
  auto mq = smoothed_marginals(q, x);
  for (int t = 0; t < 5; ++t)
    for (int a = 0; a < 3; ++a) CHECK(mq.gamma(t, perm[static_cast<std::size_t>(a)]) == doctest::Approx(mp.gamma(t, a)).epsilon(1e-12));
}

TEST_CASE("modal path ties and one-hot rows") {
  PosteriorMarginals m;
  m.gamma = Matrix(3, 2);
  m.gamma << 1, 0, 0.5, 0.5, 0, 1;
  CHECK(modal_path(m) == std::vector<int>{0, 0, 1});
}

TEST_CASE("zero-probability observation is a numerical error") {
  HmmParams p = two_state(0.0, 1.0, 0.9);
  Matrix ll = Matrix::Constant(2, 2, -std::numeric_limits<double>::infinity());
  CHECK_THROWS_AS(forward_from_loglik(p.pi, p.P, ll), NumericalError);
}

TEST_CASE("EM with one state gives the grand mean and covariance") {
  std::mt19937_64 gen(1);
  std::vector<Matrix> seqs{random_obs(gen, 20, 2), random_obs(gen, 15, 2)};
  auto res = em_fit_pooled(seqs, 1, {});
  Matrix all(35, 2);
  all << seqs[0], seqs[1];
  Vector mean = all.colwise().mean().transpose();
  Matrix c = all.rowwise() - mean.transpose();
  Matrix cov = c.transpose() * c / 35.0;
  CHECK(testutil::max_abs(res.params.means[0] - mean) < 1e-12);
  CHECK(testutil::max_abs(res.params.covs[0] - cov) < 1e-12);
  CHECK(res.iterations <= 2);
}

TEST_CASE("EM is monotone and recovers a separated two-state chain") {
  Rng rng(77);
  const double mu0 = 0.0, mu1 = 6.0, p00 = 0.9, p11 = 0.8;
  std::vector<Matrix> seqs;
  for (int s = 0; s < 20; ++s) {
    Matrix x(50, 1);
    int z = rng.bernoulli(0.5) ? 1 : 0;
    for (int t = 0; t < 50; ++t) {
      if (t > 0) z = rng.bernoulli(z == 0 ? p00 : p11) ? z : 1 - z;
      x(t, 0) = rng.normal(z == 0 ? mu0 : mu1, 1.0);
    }
    seqs.push_back(x);
  }
  EmOptions opts;
  opts.seed = 5;
  opts.threads = 2;
  auto res = em_fit_pooled(seqs, 2, opts);
  for (std::size_t i = 1; i < res.loglik_trace.size(); ++i) CHECK(res.loglik_trace[i] >= res.loglik_trace[i - 1] - 1e-8);
  const int lo = res.params.means[0][0] < res.params.means[1][0] ? 0 : 1;
  const int hi = 1 - lo;
  CHECK(std::fabs(res.params.means[static_cast<std::size_t>(lo)][0] - mu0) < 0.2);
  CHECK(std::fabs(res.params.means[static_cast<std::size_t>(hi)][0] - mu1) < 0.2);
  CHECK(std::fabs(res.params.P(lo, lo) - p00) < 0.05);
  CHECK(std::fabs(res.params.P(hi, hi) - p11) < 0.05);

  opts.threads = 1;
  auto again = em_fit_pooled(seqs, 2, opts);
  CHECK(again.loglik_trace == res.loglik_trace);
}
