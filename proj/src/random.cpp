#include "regime/random.hpp"

#include <algorithm>
#include <boost/math/distributions/normal.hpp>
#include <cmath>
#include <limits>
#include <vector>

#include "regime/errors.hpp"
#include "regime/stats.hpp"

namespace regime {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

Rng Rng::substream(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t h = splitmix64(seed);
  for (std::uint64_t t : tags) h = splitmix64(h ^ splitmix64(t + 0x632be59bd9b4e019ULL));
  return Rng(h);
}

double Rng::uniform() {
  double u;
  do {
    u = unif_(engine_);
  } while (u <= 0.0);
  return u;
}

int Rng::binomial(int n, double p) {
  if (n <= 0 || p <= 0.0) return 0;
  if (p >= 1.0) return n;
  return std::binomial_distribution<int>(n, p)(engine_);
}

double Rng::gamma(double shape, double scale) {
  return std::gamma_distribution<double>(shape, scale)(engine_);
}

double Rng::log_gamma_draw(double shape) {
  if (shape >= 1.0) return std::log(gamma(shape));
  // Gamma(a) = Gamma(a + 1) * U^(1/a)
  return std::log(gamma(shape + 1.0)) + std::log(uniform()) / shape;
}

int Rng::categorical_log(std::span<const double> log_weights) {
  std::vector<double> p(log_weights.begin(), log_weights.end());
  const double lse = log_sum_exp(p);
  if (!std::isfinite(lse)) throw NumericalError("categorical_log: all weights are zero");
  double u = uniform();
  int last_positive = -1;
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double w = std::exp(p[k] - lse);
    if (w > 0.0) last_positive = static_cast<int>(k);
    if (u < w) return static_cast<int>(k);
    u -= w;
  }
  return last_positive;
}

int Rng::categorical(std::span<const double> weights) {
  double total = 0.0;
  for (double w : weights) total += w;
  if (!(total > 0.0)) throw NumericalError("categorical: all weights are zero");
  double u = uniform() * total;
  int last_positive = -1;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    if (weights[k] > 0.0) last_positive = static_cast<int>(k);
    if (u < weights[k]) return static_cast<int>(k);
    u -= weights[k];
  }
  return last_positive;
}

Vector Rng::dirichlet(const Vector& alpha) {
  const Eigen::Index k = alpha.size();
  std::vector<double> logs(static_cast<std::size_t>(k));
  for (Eigen::Index i = 0; i < k; ++i) {
    if (!(alpha[i] > 0.0)) throw DomainError("dirichlet: concentration must be positive");
    logs[static_cast<std::size_t>(i)] = log_gamma_draw(alpha[i]);
  }
  const double lse = log_sum_exp(logs);
  Vector out(k);
  for (Eigen::Index i = 0; i < k; ++i) out[i] = std::exp(logs[static_cast<std::size_t>(i)] - lse);
  out /= out.sum();
  return out;
}

double Rng::truncated_normal_upper(double mean, double sd, double upper) {
  if (!(sd > 0.0)) return std::min(mean, upper);
  const double b = (upper - mean) / sd;
  // Standard normal truncated to (-inf, b] is the negation of one truncated to [-b, inf).
  const double a = -b;
  double x;
  if (a < 5.0) {
    static const boost::math::normal_distribution<double> std_normal;
    const double upper_mass = boost::math::cdf(std_normal, b);
    const double u = uniform() * upper_mass;
    x = -boost::math::quantile(std_normal, std::max(u, std::numeric_limits<double>::min()));
    x = std::max(x, a);
  } else {
    // Exponential rejection for the far tail (Robert 1995).
    const double lambda = 0.5 * (a + std::sqrt(a * a + 4.0));
    while (true) {
      const double z = a - std::log(uniform()) / lambda;
      if (std::log(uniform()) <= -0.5 * (z - lambda) * (z - lambda)) {
        x = z;
        break;
      }
    }
  }
  return mean - sd * x;
}

Vector Rng::mvn_chol(const Vector& mean, const Matrix& lower_chol) {
  Vector z(mean.size());
  for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = normal();
  return mean + lower_chol * z;
}

Vector Rng::mvn(const Vector& mean, const Matrix& cov) {
  const Matrix s = symmetrize(cov);
  Eigen::LLT<Matrix> llt(s);
  if (llt.info() == Eigen::Success) return mvn_chol(mean, llt.matrixL());
  // Semidefinite covariance (e.g. a noiseless state): use the eigen square root.
  Eigen::SelfAdjointEigenSolver<Matrix> eig(s);
  if (eig.info() != Eigen::Success || eig.eigenvalues().minCoeff() < -1e-9 * (1.0 + s.norm())) {
    throw NumericalError("mvn sample: covariance is not positive semidefinite");
  }
  const Matrix root = eig.eigenvectors() * eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
  return mvn_chol(mean, root);
}

Matrix Rng::wishart(double dof, const Matrix& scale) {
  const Eigen::Index d = scale.rows();
  if (!(dof > static_cast<double>(d) - 1.0)) throw DomainError("wishart: dof must exceed dim - 1");
  const Matrix chol = checked_llt(symmetrize(scale), "wishart scale").matrixL();
  Matrix a = Matrix::Zero(d, d);
  for (Eigen::Index i = 0; i < d; ++i) {
    a(i, i) = std::sqrt(chi_squared(dof - static_cast<double>(i)));
    for (Eigen::Index j = 0; j < i; ++j) a(i, j) = normal();
  }
  const Matrix la = chol * a;
  return symmetrize(la * la.transpose());
}

Matrix Rng::inverse_wishart(double dof, const Matrix& scale) {
  const Matrix scale_inv = checked_llt(symmetrize(scale), "inverse_wishart scale")
                               .solve(Matrix::Identity(scale.rows(), scale.cols()));
  const Matrix w = wishart(dof, symmetrize(scale_inv));
  return symmetrize(checked_llt(w, "inverse_wishart draw").solve(Matrix::Identity(w.rows(), w.cols())));
}

}  // namespace regime
