#include "regime/linalg.hpp"

#include <cmath>
#include <numbers>

#include "regime/errors.hpp"

namespace regime {

Eigen::LLT<Matrix> checked_llt(const Matrix& m, const std::string& context) {
  Eigen::LLT<Matrix> llt(m);
  if (llt.info() != Eigen::Success || !m.allFinite()) {
    throw NumericalError(context + ": matrix is not positive definite");
  }
  return llt;
}

double log_det(const Eigen::LLT<Matrix>& llt) {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

double mvn_logpdf(const Vector& x, const Vector& mean, const Eigen::LLT<Matrix>& cov_llt) {
  const Vector diff = x - mean;
  const Vector w = cov_llt.matrixL().solve(diff);
  const double d = static_cast<double>(x.size());
  return -0.5 * (d * std::log(2.0 * std::numbers::pi) + log_det(cov_llt) + w.squaredNorm());
}

double mvn_logpdf(const Vector& x, const Vector& mean, const Matrix& cov) {
  return mvn_logpdf(x, mean, checked_llt(cov, "mvn_logpdf"));
}

double min_eigenvalue(const Matrix& m) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(m), Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

}  // namespace regime
