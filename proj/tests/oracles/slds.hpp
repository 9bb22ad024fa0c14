#pragma once

#include <cmath>
#include <random>

#include "regime/errors.hpp"
#include "regime/slds.hpp"
#include "../test_util.hpp"

namespace oracle::slds {

using namespace regime;
using namespace regime::slds;

inline Matrix random_matrix(std::mt19937_64& gen, Eigen::Index r, Eigen::Index c, double scale) {
  std::normal_distribution<double> nd(0.0, scale);
  Matrix m(r, c);
  for (auto& v : m.reshaped()) v = nd(gen);
  return m;
}

inline Matrix random_pd(std::mt19937_64& gen, Eigen::Index d, double floor) {
  const Matrix B = random_matrix(gen, d, d, 0.5);
  return B * B.transpose() + floor * Matrix::Identity(d, d);
}

inline SldsParams random_params(std::mt19937_64& gen, int K, int d, int D) {
  SldsParams p;
  for (int k = 0; k < K; ++k) {
    p.regimes.push_back({random_matrix(gen, d, d, 0.4), random_pd(gen, d, 0.2), random_matrix(gen, D, d, 1.0),
                         random_pd(gen, D, 0.3)});
  }
  std::uniform_real_distribution<double> u(0.2, 1.0);
  p.P = Matrix(K, K);
  for (auto& v : p.P.reshaped()) v = u(gen);
  for (int k = 0; k < K; ++k) p.P.row(k) /= p.P.row(k).sum();
  p.pi = Vector::Constant(K, 1.0 / K);
  p.initial = {random_matrix(gen, d, 1, 1.0), random_pd(gen, d, 0.5)};
  return p;
}

inline Sequence random_series(std::mt19937_64& gen, int T, int D) {
  Sequence y;
  for (int t = 0; t < T; ++t) y.push_back(random_matrix(gen, D, 1, 1.0));
  return y;
}

// Joint Gaussian over (x_0, x_1..x_T, y_1..y_T) for a fixed regime path.
inline std::pair<Vector, Matrix> joint_moments(const SldsParams& p, const std::vector<int>& z) {
  const auto d = p.state_dim(), D = p.obs_dim();
  const auto T = static_cast<int>(z.size());
  const int nx = d * (T + 1), n = nx + D * T;
  const int noise = d * (T + 1) + D * T;
  Matrix G = Matrix::Zero(n, noise);
  Vector mean = Vector::Zero(n);
  mean.head(d) = p.initial.mean;
  G.block(0, 0, d, d) = Eigen::LLT<Matrix>(p.initial.cov).matrixL();
  for (int t = 1; t <= T; ++t) {
    const auto& r = p.regimes[static_cast<std::size_t>(z[static_cast<std::size_t>(t - 1)])];
    mean.segment(t * d, d) = r.A * mean.segment((t - 1) * d, d);
    G.middleRows(t * d, d) = r.A * G.middleRows((t - 1) * d, d);
    G.block(t * d, t * d, d, d) += Eigen::LLT<Matrix>(r.Q).matrixL();
    const int yr = nx + (t - 1) * D;
    mean.segment(yr, D) = r.C * mean.segment(t * d, d);
    G.middleRows(yr, D) = r.C * G.middleRows(t * d, d);
    G.block(yr, d * (T + 1) + (t - 1) * D, D, D) += Eigen::LLT<Matrix>(r.R).matrixL();
  }
  return {mean, G * G.transpose()};
}

inline double exact_path_logpost(const SldsParams& p, const std::vector<int>& z, const Sequence& y) {
  double lp = std::log(p.pi[z[0]]);
  for (std::size_t t = 1; t < z.size(); ++t) lp += std::log(p.P(z[t - 1], z[t]));
  return lp + forward_messages_x(z, y, p).moments.loglik;
}

struct Switching {
  Sequence y;
  std::vector<int> z;
};

inline Switching simulate_switching(std::uint64_t seed, int T) {
  Rng rng(seed);
  const double A[2] = {0.95, -0.7}, Q[2] = {0.05, 1.0};
  Switching s;
  int z = 0;
  double x = 0.0;
  for (int t = 0; t < T; ++t) {
    if (t > 0 && rng.bernoulli(0.03)) z = 1 - z;
    x = A[z] * x + std::sqrt(Q[z]) * rng.normal();
    s.z.push_back(z);
    s.y.push_back(Vector::Constant(1, x + 0.1 * rng.normal()));
  }
  double mean = 0.0;
  for (const auto& v : s.y) mean += v[0];
  mean /= T;
  for (auto& v : s.y) v[0] -= mean;
  return s;
}

}  // namespace oracle::slds
