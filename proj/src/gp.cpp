#include "regime/gp.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include "regime/errors.hpp"

namespace regime::gp {

double KernelParams::signal_var() const { return std::exp(log_signal_var); }

double KernelParams::lengthscale(Eigen::Index axis) const {
  return std::exp(variant == KernelVariant::Isotropic ? log_lengthscales[0] : log_lengthscales[axis]);
}

void KernelParams::validate(Eigen::Index input_dim) const {
  if (variant == KernelVariant::Isotropic && log_lengthscales.size() != 1) {
    throw LengthError("gp: isotropic kernel takes exactly one lengthscale");
  }
  if (variant == KernelVariant::PerAxis && log_lengthscales.size() != input_dim) {
    throw LengthError("gp: per-axis kernel needs one lengthscale per input dimension");
  }
  if (!std::isfinite(log_signal_var) || !log_lengthscales.allFinite()) {
    throw DomainError("gp: kernel parameters must be finite");
  }
}

Matrix kernel_matrix(const KernelParams& k, const Matrix& X, const Matrix& Xp) {
  if (X.cols() != Xp.cols()) throw LengthError("kernel_matrix: input dimensions differ");
  k.validate(X.cols());
  const double sf2 = k.signal_var();
  Vector inv_l(X.cols());
  for (Eigen::Index d = 0; d < X.cols(); ++d) inv_l[d] = 1.0 / k.lengthscale(d);
  Matrix out(X.rows(), Xp.rows());
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    for (Eigen::Index j = 0; j < Xp.rows(); ++j) {
      const double r2 = ((X.row(i) - Xp.row(j)).transpose().cwiseProduct(inv_l)).squaredNorm();
      out(i, j) = sf2 * std::exp(-0.5 * r2);
    }
  }
  return out;
}

namespace {

void check_model(const GpModel& m) {
  if (m.x.rows() != m.y.size()) throw LengthError("gp: x and y must have the same number of rows");
  if (m.x.rows() < 1) throw LengthError("gp: need at least one training point");
  if (!(m.noise_var >= 0.0)) throw DomainError("gp: noise variance must be nonnegative");
  m.kernel.validate(m.x.cols());
}

Eigen::LLT<Matrix> factor(const GpModel& m, const Matrix& K) {
  const auto n = K.rows();
  Matrix Kn = K;
  Kn.diagonal().array() += m.noise_var;
  Eigen::LLT<Matrix> llt(Kn);
  if (llt.info() == Eigen::Success) return llt;
  if (m.jitter) {
    Kn.diagonal().array() += 1e-9 * Kn.trace() / static_cast<double>(n);
    llt.compute(Kn);
    if (llt.info() == Eigen::Success) return llt;
  }
  throw NumericalError(
      "gp: K + noise*I is not positive definite (duplicate inputs with zero noise?); "
      "enable jitter or use a positive noise variance");
}

// dK/dtheta_j for every log hyperparameter, noise included.
std::vector<Matrix> kernel_derivatives(const GpModel& m, const Matrix& K) {
  const auto n = m.x.rows();
  std::vector<Matrix> out;
  out.push_back(K);
  const auto L = m.kernel.log_lengthscales.size();
  for (Eigen::Index a = 0; a < L; ++a) {
    Matrix dK(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        double s = 0.0;
        if (m.kernel.variant == KernelVariant::Isotropic) {
          const double l = m.kernel.lengthscale(0);
          s = (m.x.row(i) - m.x.row(j)).squaredNorm() / (l * l);
        } else {
          const double l = m.kernel.lengthscale(a);
          const double dx = m.x(i, a) - m.x(j, a);
          s = dx * dx / (l * l);
        }
        dK(i, j) = K(i, j) * s;
      }
    }
    out.push_back(dK);
  }
  out.push_back(m.noise_var * Matrix::Identity(n, n));
  return out;
}

}  // namespace

GaussianBelief gp_posterior(const GpModel& m, const Matrix& x_star) {
  check_model(m);
  const Matrix K = kernel_matrix(m.kernel, m.x, m.x);
  const auto llt = factor(m, K);
  const Matrix Ks = kernel_matrix(m.kernel, x_star, m.x);
  const Matrix Kss = kernel_matrix(m.kernel, x_star, x_star);
  GaussianBelief out;
  out.mean = Ks * llt.solve(m.y);
  out.cov = symmetrize(Kss - Ks * llt.solve(Ks.transpose()));
  return out;
}

ValueGrad log_marginal_likelihood(const GpModel& m) {
  check_model(m);
  const auto n = m.x.rows();
  const Matrix K = kernel_matrix(m.kernel, m.x, m.x);
  const auto llt = factor(m, K);
  const Vector alpha = llt.solve(m.y);
  ValueGrad out;
  out.value = -0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi) - 0.5 * log_det(llt) -
              0.5 * m.y.dot(alpha);
  const Matrix Kinv = llt.solve(Matrix::Identity(n, n));
  const Matrix W = alpha * alpha.transpose() - Kinv;
  const auto dKs = kernel_derivatives(m, K);
  out.grad.resize(static_cast<Eigen::Index>(dKs.size()));
  for (std::size_t j = 0; j < dKs.size(); ++j) {
    out.grad[static_cast<Eigen::Index>(j)] = 0.5 * W.cwiseProduct(dKs[j]).sum();
  }
  return out;
}

std::pair<Vector, Vector> loo_predictions(const GpModel& m) {
  check_model(m);
  if (m.x.rows() < 2) throw LengthError("gp: leave-one-out needs at least two points");
  const auto n = m.x.rows();
  const auto llt = factor(m, kernel_matrix(m.kernel, m.x, m.x));
  const Matrix Kinv = llt.solve(Matrix::Identity(n, n));
  const Vector alpha = Kinv * m.y;
  const Vector d = Kinv.diagonal();
  return {m.y - alpha.cwiseQuotient(d), d.cwiseInverse()};
}

ValueGrad loo_cv_score(const GpModel& m) {
  check_model(m);
  if (m.x.rows() < 2) throw LengthError("gp: leave-one-out needs at least two points");
  const auto n = m.x.rows();
  const Matrix K = kernel_matrix(m.kernel, m.x, m.x);
  const auto llt = factor(m, K);
  const Matrix Kinv = symmetrize(llt.solve(Matrix::Identity(n, n)));
  const Vector alpha = Kinv * m.y;
  const Vector d = Kinv.diagonal();

  ValueGrad out;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double var = 1.0 / d[i];
    const double resid = alpha[i] / d[i];  // y_i - mu_i
    out.value += -0.5 * std::log(2.0 * std::numbers::pi * var) - 0.5 * resid * resid / var;
  }
  const auto dKs = kernel_derivatives(m, K);
  out.grad = Vector::Zero(static_cast<Eigen::Index>(dKs.size()));
  for (std::size_t j = 0; j < dKs.size(); ++j) {
    const Matrix Z = Kinv * dKs[j];
    const Vector Za = Z * alpha;
    const Matrix ZK = Z * Kinv;
    double g = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      g += (alpha[i] * Za[i] - 0.5 * (1.0 + alpha[i] * alpha[i] / d[i]) * ZK(i, i)) / d[i];
    }
    out.grad[static_cast<Eigen::Index>(j)] = g;
  }
  return out;
}

Vector pack_params(const GpModel& m) {
  const auto L = m.kernel.log_lengthscales.size();
  Vector theta(L + 2);
  theta[0] = m.kernel.log_signal_var;
  theta.segment(1, L) = m.kernel.log_lengthscales;
  theta[L + 1] = m.noise_var > 0.0 ? std::log(m.noise_var) : -std::numeric_limits<double>::infinity();
  return theta;
}

GpModel unpack_params(const GpModel& base, const Vector& theta) {
  GpModel m = base;
  const auto L = m.kernel.log_lengthscales.size();
  if (theta.size() != L + 2) throw LengthError("gp: hyperparameter vector has the wrong length");
  m.kernel.log_signal_var = theta[0];
  m.kernel.log_lengthscales = theta.segment(1, L);
  m.noise_var = std::exp(theta[L + 1]);
  return m;
}

OptimizeResult optimize_hyperparams(const GpModel& m, Objective objective, OptimizeOptions opts) {
  check_model(m);
  if (opts.budget < 1) throw DomainError("optimize_hyperparams: budget must be >= 1");
  const auto L = m.kernel.log_lengthscales.size();
  const bool fit_noise = opts.optimize_noise && m.noise_var > 0.0;

  auto evaluate = [&](const GpModel& candidate) -> ValueGrad {
    try {
      ValueGrad vg = objective == Objective::Marginal ? log_marginal_likelihood(candidate)
                                                      : loo_cv_score(candidate);
      if (!fit_noise) vg.grad[L + 1] = 0.0;
      if (!std::isfinite(vg.value) || !vg.grad.allFinite()) vg.value = -std::numeric_limits<double>::infinity();
      return vg;
    } catch (const NumericalError&) {
      return {-std::numeric_limits<double>::infinity(), Vector::Zero(L + 2)};
    }
  };

  OptimizeResult res;
  res.model = m;
  ValueGrad cur = evaluate(m);
  if (!std::isfinite(cur.value)) throw NumericalError("optimize_hyperparams: objective is not finite at the start point");
  res.trace.push_back(cur.value);
  Vector theta = pack_params(m);
  if (!fit_noise) theta[L + 1] = 0.0;  // placeholder, never moved
  double step = opts.initial_step;

  auto model_at = [&](const Vector& th) {
    GpModel c = fit_noise ? unpack_params(m, th) : m;
    if (!fit_noise) {
      c.kernel.log_signal_var = th[0];
      c.kernel.log_lengthscales = th.segment(1, L);
    }
    return c;
  };

  for (int it = 0; it < opts.budget; ++it) {
    res.iterations = it + 1;
    const double gnorm = cur.grad.norm();
    if (gnorm < opts.grad_tol) break;
    bool accepted = false;
    for (int halving = 0; halving < 40; ++halving) {
      const Vector proposal = theta + (step / gnorm) * cur.grad;
      ValueGrad next = evaluate(model_at(proposal));
      if (next.value > cur.value) {
        theta = proposal;
        cur = next;
        accepted = true;
        step = std::min(step * 2.0, 2.0);
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
    res.trace.push_back(cur.value);
    res.model = model_at(theta);
  }
  return res;
}

}  // namespace regime::gp
