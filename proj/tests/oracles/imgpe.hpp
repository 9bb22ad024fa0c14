#pragma once

#include <cmath>
#include <numbers>
#include <random>

#include "regime/errors.hpp"
#include "regime/imgpe.hpp"
#include "../test_util.hpp"

namespace oracle::imgpe {

using namespace regime;
using namespace regime::imgpe;

inline ExpertKernel random_kernel(std::mt19937_64& gen) {
  std::uniform_real_distribution<double> u(-1.5, 1.5);
  return {u(gen), u(gen) - 1.0, u(gen)};
}

inline void random_cluster(std::mt19937_64& gen, int n, Vector& t, Vector& y) {
  std::normal_distribution<double> nd;
  t = Vector(n);
  y = Vector(n);
  for (int i = 0; i < n; ++i) {
    t[i] = 3.0 * nd(gen);
    y[i] = nd(gen);
  }
}

// Values drawn from the expert itself, so the kernel matrix is not asked to
// explain white noise with a near-singular covariance.
inline ExpertKernel random_state(std::mt19937_64& gen, int n, Vector& t, Vector& y) {
  random_cluster(gen, n, t, y);
  const ExpertKernel k = random_kernel(gen);
  const Matrix L = Eigen::LLT<Matrix>(kernel_matrix(k, t)).matrixL();
  y = L * y;
  return k;
}

struct Bands {
  Vector t, y;
  std::vector<int> band;
};

inline Bands two_bands(std::uint64_t seed, int n) {
  Rng rng(seed);
  Bands b;
  b.t = Vector(n);
  b.y = Vector(n);
  for (int i = 0; i < n; ++i) {
    b.t[i] = i;
    b.band.push_back(i % 2);
    b.y[i] = (i % 2 ? 10.0 : 0.0) + rng.normal(0.0, 0.3);
  }
  return b;
}

}  // namespace oracle::imgpe
