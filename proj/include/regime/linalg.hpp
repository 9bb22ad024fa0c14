#pragma once

#include <Eigen/Dense>
#include <string>

namespace regime {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Gaussian belief over a latent vector: (mean, covariance).
struct GaussianBelief {
  Vector mean;
  Matrix cov;
};

inline Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

/// Cholesky factor of a symmetric PD matrix; throws NumericalError with
/// `context` in the message when the factorization fails.
Eigen::LLT<Matrix> checked_llt(const Matrix& m, const std::string& context);

/// log|M| from a successful Cholesky factorization.
double log_det(const Eigen::LLT<Matrix>& llt);

/// Multivariate normal log density.
double mvn_logpdf(const Vector& x, const Vector& mean, const Matrix& cov);
double mvn_logpdf(const Vector& x, const Vector& mean, const Eigen::LLT<Matrix>& cov_llt);

/// Smallest eigenvalue of a symmetric matrix.
double min_eigenvalue(const Matrix& m);

}  // namespace regime
