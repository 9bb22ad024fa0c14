#pragma once

#include <cmath>
#include <random>

#include "regime/errors.hpp"
#include "regime/hmm.hpp"
#include "regime/stats.hpp"
#include "../test_util.hpp"

namespace oracle::hmm {

using namespace regime;
using namespace regime::hmm;

inline HmmParams random_params(std::mt19937_64& gen, int K, int D) {
  std::gamma_distribution<double> ga(1.0);
  std::normal_distribution<double> nd;
  HmmParams p;
  p.pi = Vector(K);
  for (auto& v : p.pi) v = ga(gen) + 0.05;
  p.pi /= p.pi.sum();
  p.P = Matrix(K, K);
  for (int j = 0; j < K; ++j) {
    for (int k = 0; k < K; ++k) p.P(j, k) = ga(gen) + 0.05;
    p.P.row(j) /= p.P.row(j).sum();
  }
  for (int k = 0; k < K; ++k) {
    Vector m(D);
    for (auto& v : m) v = 1.5 * nd(gen);
    Matrix b(D, D);
    for (int i = 0; i < D; ++i)
      for (int j = 0; j < D; ++j) b(i, j) = 0.4 * nd(gen);
    p.means.push_back(m);
    p.covs.push_back(b * b.transpose() + 0.5 * Matrix::Identity(D, D));
  }
  return p;
}

inline Matrix random_obs(std::mt19937_64& gen, int T, int D) {
  std::normal_distribution<double> nd(0.0, 2.0);
  Matrix x(T, D);
  for (int t = 0; t < T; ++t)
    for (int d = 0; d < D; ++d) x(t, d) = nd(gen);
  return x;
}

inline HmmParams two_state(double mu0, double mu1, double stay) {
  HmmParams p;
  p.pi = Vector::Constant(2, 0.5);
  p.P = Matrix(2, 2);
  p.P << stay, 1 - stay, 1 - stay, stay;
  p.means = {Vector::Constant(1, mu0), Vector::Constant(1, mu1)};
  p.covs = {Matrix::Identity(1, 1), Matrix::Identity(1, 1)};
  return p;
}

}  // namespace oracle::hmm
