#pragma once

#include <cmath>
#include <random>

#include "regime/errors.hpp"
#include "regime/lds.hpp"
#include "../test_util.hpp"

namespace oracle::lds {

using namespace regime;
using namespace regime::lds;
using testutil::condition;

// Stacked (z_1..z_T, x_1..x_T) Gaussian, built as a linear map of the
// primitive noises (z_0, w_1..w_T, v_1..v_T).
struct Joint {
  Vector mean;
  Matrix cov;
  int d, p, T;
  std::vector<int> z(int t) const {  // t is 0-based
    std::vector<int> idx;
    for (int i = 0; i < d; ++i) idx.push_back(t * d + i);
    return idx;
  }
  std::vector<int> x(int t) const {
    std::vector<int> idx;
    for (int i = 0; i < p; ++i) idx.push_back(T * d + t * p + i);
    return idx;
  }
  std::vector<int> xs(int upto) const {
    std::vector<int> idx;
    for (int t = 0; t < upto; ++t)
      for (int i : x(t)) idx.push_back(i);
    return idx;
  }
};

inline Joint joint_of(const LdsParams& prm, int T) {
  const int d = prm.state_dim(), p = prm.obs_dim();
  const int ne = d + T * d + T * p;
  const int ny = T * d + T * p;
  Matrix H = Matrix::Zero(ny, ne);
  Matrix Se = Matrix::Zero(ne, ne);
  Se.topLeftCorner(d, d) = prm.initial.cov;
  for (int t = 0; t < T; ++t) {
    Se.block(d + t * d, d + t * d, d, d) = prm.Q;
    Se.block(d + T * d + t * p, d + T * d + t * p, p, p) = prm.R;
  }
  Vector me = Vector::Zero(ne);
  me.head(d) = prm.initial.mean;
  for (int t = 0; t < T; ++t) {
    Matrix Ap = Matrix::Identity(d, d);
    for (int k = 0; k <= t; ++k) Ap = prm.A * Ap;
    H.block(t * d, 0, d, d) = Ap;  // A^{t+1} z_0
    for (int s = 0; s <= t; ++s) {
      Matrix As = Matrix::Identity(d, d);
      for (int k = 0; k < t - s; ++k) As = prm.A * As;
      H.block(t * d, d + s * d, d, d) = As;
    }
    H.block(T * d + t * p, 0, p, ne) = prm.C * H.block(t * d, 0, d, ne);
    H.block(T * d + t * p, d + T * d + t * p, p, p) = Matrix::Identity(p, p);
  }
  return {H * me, H * Se * H.transpose(), d, p, T};
}

inline Matrix random_matrix(std::mt19937_64& gen, int r, int c, double scale) {
  std::normal_distribution<double> nd(0.0, scale);
  Matrix m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = nd(gen);
  return m;
}

inline Matrix random_spd(std::mt19937_64& gen, int n) {
  Matrix b = random_matrix(gen, n, n, 1.0);
  return b * b.transpose() + 0.5 * Matrix::Identity(n, n);
}

inline LdsParams random_system(std::mt19937_64& gen, int d, int p) {
  LdsParams prm;
  Matrix A = random_matrix(gen, d, d, 1.0);
  Eigen::EigenSolver<Matrix> es(A);
  const double rho = es.eigenvalues().cwiseAbs().maxCoeff();
  prm.A = A * (0.9 / std::max(rho, 1e-3));
  prm.C = random_matrix(gen, p, d, 1.0);
  prm.Q = random_spd(gen, d);
  prm.R = random_spd(gen, p);
  prm.initial = {random_matrix(gen, d, 1, 1.0), random_spd(gen, d)};
  return prm;
}

inline LdsParams scalar(double A, double C, double Q, double R, double m0, double s0) {
  LdsParams prm;
  prm.A = Matrix::Constant(1, 1, A);
  prm.C = Matrix::Constant(1, 1, C);
  prm.Q = Matrix::Constant(1, 1, Q);
  prm.R = Matrix::Constant(1, 1, R);
  prm.initial = {Vector::Constant(1, m0), Matrix::Constant(1, 1, s0)};
  return prm;
}

inline Sequence seq(std::initializer_list<double> v) {
  Sequence s;
  for (double x : v) s.push_back(Vector::Constant(1, x));
  return s;
}

}  // namespace oracle::lds
