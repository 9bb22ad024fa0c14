#include <cmath>
#include <random>

#include "doctest.h"
#include "regime/errors.hpp"
#include "regime/lds.hpp"
#include "test_util.hpp"
#include "oracles/lds.hpp"

using namespace regime;
using namespace regime::lds;
using testutil::condition;

using namespace oracle::lds;

TEST_CASE("scalar filter example") {
  auto prm = scalar(1, 1, 1, 1, 0, 1);
  auto f = kalman_filter(prm, seq({2.0}));
  CHECK(f.filtered[0].mean[0] == doctest::Approx(4.0 / 3.0).epsilon(1e-14));
  CHECK(f.filtered[0].cov(0, 0) == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
  Joint j = joint_of(prm, 1);
  auto c = condition(j.mean, j.cov, j.z(0), j.xs(1), Vector::Constant(1, 2.0));
  CHECK(c.mean[0] == doctest::Approx(4.0 / 3.0).epsilon(1e-12));
  CHECK(c.cov(0, 0) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("uninformative and exact observation limits") {
  auto prm = scalar(0.7, 1, 0, 1e12, 2.0, 1.0);
  auto f = kalman_filter(prm, seq({5, -3, 8, 1}));
  double expect = 2.0;
  for (int t = 0; t < 4; ++t) {
    expect *= 0.7;
    CHECK(f.filtered[static_cast<std::size_t>(t)].mean[0] == doctest::Approx(expect).epsilon(1e-9));
  }

  std::mt19937_64 gen(1);
  LdsParams sys = random_system(gen, 2, 2);
  sys.C = Matrix::Identity(2, 2);
  sys.R = 1e-12 * Matrix::Identity(2, 2);
  Sequence obs;
  for (int t = 0; t < 5; ++t) obs.push_back(random_matrix(gen, 2, 1, 3.0));
  auto g = kalman_filter(sys, obs);
  for (int t = 0; t < 5; ++t) CHECK((g.filtered[static_cast<std::size_t>(t)].mean - obs[static_cast<std::size_t>(t)]).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("filter, smoother and log-likelihood match joint-Gaussian conditioning") {
  std::mt19937_64 gen(42);
  for (int rep = 0; rep < 30; ++rep) {
    const int d = 1 + rep % 3, p = 1 + (rep / 3) % 3, T = 1 + rep % 5;
    LdsParams prm = random_system(gen, d, p);
    Sequence obs;
    for (int t = 0; t < T; ++t) obs.push_back(random_matrix(gen, p, 1, 2.0));
    for (bool joseph : {false, true}) {
      auto f = kalman_filter(prm, obs, {joseph});
      auto sm = rts_smooth(prm, f);
      Joint j = joint_of(prm, T);
      Vector all(T * p);
      for (int t = 0; t < T; ++t) all.segment(t * p, p) = obs[static_cast<std::size_t>(t)];
      for (int t = 0; t < T; ++t) {
        auto cf = condition(j.mean, j.cov, j.z(t), j.xs(t + 1), all.head((t + 1) * p));
        CHECK(testutil::max_abs(f.filtered[static_cast<std::size_t>(t)].mean - cf.mean) < 1e-8);
        CHECK(testutil::max_abs(f.filtered[static_cast<std::size_t>(t)].cov - cf.cov) < 1e-8);
        auto cs = condition(j.mean, j.cov, j.z(t), j.xs(T), all);
        CHECK(testutil::max_abs(sm[static_cast<std::size_t>(t)].mean - cs.mean) < 1e-8);
        CHECK(testutil::max_abs(sm[static_cast<std::size_t>(t)].cov - cs.cov) < 1e-8);
        CHECK(testutil::max_abs(sm[static_cast<std::size_t>(t)].cov - sm[static_cast<std::size_t>(t)].cov.transpose()) <= 1e-10);
        CHECK(testutil::max_abs(f.filtered[static_cast<std::size_t>(t)].cov - f.filtered[static_cast<std::size_t>(t)].cov.transpose()) <= 1e-10);
        // Smoothing never increases the marginal covariance.
        CHECK(min_eigenvalue(f.filtered[static_cast<std::size_t>(t)].cov - sm[static_cast<std::size_t>(t)].cov) > -1e-9);
      }
      std::vector<int> xi = j.xs(T);
      Vector mx(T * p);
      Matrix Sx(T * p, T * p);
      for (int a = 0; a < T * p; ++a) {
        mx[a] = j.mean[xi[static_cast<std::size_t>(a)]];
        for (int b = 0; b < T * p; ++b) Sx(a, b) = j.cov(xi[static_cast<std::size_t>(a)], xi[static_cast<std::size_t>(b)]);
      }
      CHECK(f.loglik == doctest::Approx(mvn_logpdf(all, mx, Sx)).epsilon(1e-10));
    }
  }
}

TEST_CASE("innovation gain equals the information-form gain") {
  std::mt19937_64 gen(5);
  for (int rep = 0; rep < 20; ++rep) {
    const int d = 1 + rep % 3, p = 1 + (rep / 3) % 3;
    Matrix S = random_spd(gen, d);
    Matrix C = random_matrix(gen, p, d, 1.0);
    Matrix R = random_spd(gen, p);
    Matrix innov = S * C.transpose() * (R + C * S * C.transpose()).inverse();
    Matrix info = (S.inverse() + C.transpose() * R.inverse() * C).inverse() * C.transpose() * R.inverse();
    CHECK(testutil::max_abs(innov - info) < 1e-9);
  }
}

TEST_CASE("smoother base case and errors") {
  auto prm = scalar(0.5, 1, 1, 1, 0, 1);
  auto f = kalman_filter(prm, seq({1.0}));
  auto s = rts_smooth(prm, f);
  CHECK(s[0].mean[0] == f.filtered[0].mean[0]);
  CHECK(s[0].cov(0, 0) == f.filtered[0].cov(0, 0));

  auto bad = scalar(1, 1, 1, -5, 0, 1);
  CHECK_THROWS_AS(kalman_filter(bad, seq({1.0})), NumericalError);
  CHECK_THROWS_AS(kalman_filter(prm, Sequence{}), LengthError);

  auto singular = scalar(0, 1, 0, 1, 0, 1);  // predicted covariance is 0
  auto fs = kalman_filter(singular, seq({1.0, 2.0}));
  CHECK_THROWS_AS(rts_smooth(singular, fs), NumericalError);
}

TEST_CASE("tobit sampler: uncensored data are reproduced exactly") {
  auto prm = scalar(0.9, 1, 0.5, 0.3, 0, 1);
  Sequence y = seq({1.5, 0.2, 3.0, 0.7});
  auto chain = scan_sampler_dtm(prm, y, {0.0, 25, 3});
  for (const auto& draw : chain.draws)
    for (std::size_t t = 0; t < y.size(); ++t) CHECK(draw[t][0] == y[t][0]);
  CHECK_THROWS_AS(scan_sampler_dtm(prm, seq({1.0, -0.1}), {0.0, 1, 1}), DomainError);
}

TEST_CASE("tobit sampler matches the rejection oracle on a T=2 scalar system") {
  auto prm = scalar(0.8, 1, 1, 0.5, 0, 1);
  auto chain = scan_sampler_dtm(prm, seq({1.0, 0.0}), {0.0, 40000, 17});
  std::vector<double> x2;
  for (std::size_t i = 1000; i < chain.draws.size(); ++i) {
    CHECK(chain.draws[i][0][0] == 1.0);
    x2.push_back(chain.draws[i][1][0]);
  }
  for (double v : x2) CHECK(v <= 0.0);

  std::mt19937_64 gen(99);
  std::normal_distribution<double> nd;
  std::vector<double> kept;
  while (kept.size() < 20000) {
    const double z0 = nd(gen);
    const double z1 = 0.8 * z0 + nd(gen);
    const double x1 = z1 + std::sqrt(0.5) * nd(gen);
    if (std::fabs(x1 - 1.0) > 0.01) continue;
    const double z2 = 0.8 * z1 + nd(gen);
    const double xx2 = z2 + std::sqrt(0.5) * nd(gen);
    if (xx2 <= 0.0) kept.push_back(xx2);
  }
  const double se_mean = std::hypot(testutil::batch_se(x2), std::sqrt(testutil::var(kept) / kept.size()));
  CHECK(std::fabs(testutil::mean(x2) - testutil::mean(kept)) < 3 * se_mean);

  std::vector<double> sq2, sqk;
  const double m2 = testutil::mean(x2), mk = testutil::mean(kept);
  for (double v : x2) sq2.push_back((v - m2) * (v - m2));
  for (double v : kept) sqk.push_back((v - mk) * (v - mk));
  const double se_var = std::hypot(testutil::batch_se(sq2), std::sqrt(testutil::var(sqk) / sqk.size()));
  CHECK(std::fabs(testutil::mean(sq2) - testutil::mean(sqk)) < 3 * se_var);
}

TEST_CASE("tobit sampler matches a truncated conditional Gaussian in several dimensions") {
  std::mt19937_64 gen(8);
  LdsParams prm = random_system(gen, 2, 2);
  prm.initial.mean.setZero();
  const int T = 3;
  // Censored (0) and observed (positive) entries mixed across time and coordinates.
  Sequence y{Vector(2), Vector(2), Vector(2)};
  y[0] << 0.0, 0.8;
  y[1] << 0.4, 0.0;
  y[2] << 0.0, 0.0;
  auto chain = scan_sampler_dtm(prm, y, {0.0, 30000, 5});

  Joint j = joint_of(prm, T);
  std::vector<int> all = j.xs(T), cens, obs;
  Vector obs_vals(2);
  int oi = 0;
  for (int t = 0; t < T; ++t)
    for (int i = 0; i < 2; ++i) {
      const int idx = all[static_cast<std::size_t>(t * 2 + i)];
      if (y[static_cast<std::size_t>(t)][i] > 0) {
        obs.push_back(idx);
        obs_vals[oi++] = y[static_cast<std::size_t>(t)][i];
      } else {
        cens.push_back(idx);
      }
    }
  auto c = condition(j.mean, j.cov, cens, obs, obs_vals);
  Eigen::LLT<Matrix> llt(c.cov);
  Matrix L = llt.matrixL();
  std::normal_distribution<double> nd;
  std::vector<std::vector<double>> oracle(cens.size());
  while (oracle[0].size() < 40000) {
    Vector z(static_cast<Eigen::Index>(cens.size()));
    for (auto& v : z) v = nd(gen);
    Vector s = c.mean + L * z;
    if ((s.array() <= 0.0).all())
      for (std::size_t k = 0; k < cens.size(); ++k) oracle[k].push_back(s[static_cast<Eigen::Index>(k)]);
  }

  std::vector<std::vector<double>> sampled(cens.size());
  for (std::size_t it = 1000; it < chain.draws.size(); ++it) {
    std::size_t k = 0;
    for (int t = 0; t < T; ++t)
      for (int i = 0; i < 2; ++i)
        if (y[static_cast<std::size_t>(t)][i] == 0.0) sampled[k++].push_back(chain.draws[it][static_cast<std::size_t>(t)][i]);
        else CHECK(chain.draws[it][static_cast<std::size_t>(t)][i] == y[static_cast<std::size_t>(t)][i]);
  }
  for (std::size_t k = 0; k < cens.size(); ++k) {
    const double se = std::hypot(testutil::batch_se(sampled[k]), std::sqrt(testutil::var(oracle[k]) / oracle[k].size()));
    CHECK(std::fabs(testutil::mean(sampled[k]) - testutil::mean(oracle[k])) < 4 * se);
    CHECK(testutil::var(sampled[k]) == doctest::Approx(testutil::var(oracle[k])).epsilon(0.08));
  }
  // A cross-time covariance, which only comes out right if the scan updates
  // propagate changes between blocks.
  auto cov = [](const std::vector<double>& a, const std::vector<double>& b) {
    const double ma = testutil::mean(a), mb = testutil::mean(b);
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - ma) * (b[i] - mb);
    return s / static_cast<double>(a.size() - 1);
  };
  const double sd = std::sqrt(testutil::var(oracle[0]) * testutil::var(oracle[3]));
  CHECK(std::fabs(cov(sampled[0], sampled[3]) - cov(oracle[0], oracle[3])) < 0.08 * sd);
}

TEST_CASE("tobit sampler is translation equivariant") {
  const double c = 2.5;
  auto base = scalar(1.0, 1, 0.4, 0.3, 0.0, 1.0);
  auto shifted = scalar(1.0, 1, 0.4, 0.3, c, 1.0);
  Sequence y = seq({0.0, 1.2, 0.0, 0.0, 0.6});
  Sequence ys = y;
  for (auto& v : ys) v.array() += c;
  auto a = scan_sampler_dtm(base, y, {0.0, 200, 11});
  auto b = scan_sampler_dtm(shifted, ys, {c, 200, 11});
  for (std::size_t it = 0; it < a.draws.size(); ++it)
    for (std::size_t t = 0; t < y.size(); ++t)
      CHECK(b.draws[it][t][0] == doctest::Approx(a.draws[it][t][0] + c).epsilon(1e-9));
}

TEST_CASE("tobit sampler is reproducible for a fixed seed") {
  auto prm = scalar(0.9, 1, 0.5, 0.3, 0, 1);
  Sequence y = seq({0.0, 0.0, 1.0, 0.0});
  auto a = scan_sampler_dtm(prm, y, {0.0, 50, 123});
  auto b = scan_sampler_dtm(prm, y, {0.0, 50, 123});
  for (std::size_t it = 0; it < a.draws.size(); ++it)
    for (std::size_t t = 0; t < y.size(); ++t) CHECK(a.draws[it][t][0] == b.draws[it][t][0]);
}
