#pragma once

#include <vector>

#include "regime/linalg.hpp"

namespace regime::gp {

enum class KernelVariant { Isotropic, PerAxis };

/// Gaussian kernel sf2 * exp(-1/2 sum_d (dx_d / l_d)^2). Parameters live on
/// the log scale; the isotropic variant has a single lengthscale.
struct KernelParams {
  KernelVariant variant = KernelVariant::Isotropic;
  double log_signal_var = 0.0;
  Vector log_lengthscales = Vector::Zero(1);

  double signal_var() const;
  double lengthscale(Eigen::Index axis) const;
  void validate(Eigen::Index input_dim) const;
};

struct GpModel {
  KernelParams kernel;
  double noise_var = 0.0;
  Matrix x;  // n x D inputs
  Vector y;  // centred targets
  /// On a failed Cholesky of K + noise I, retry once with 1e-9 * trace / n
  /// added to the diagonal instead of failing.
  bool jitter = false;
};

Matrix kernel_matrix(const KernelParams& k, const Matrix& X, const Matrix& Xp);

/// Posterior over f(x_star) (latent function, no observation noise).
GaussianBelief gp_posterior(const GpModel& m, const Matrix& x_star);

/// Value plus gradient with respect to the log hyperparameters, ordered
/// (log sf2, log l_1..log l_L, log noise). The noise entry is 0 when the
/// noise variance is 0.
struct ValueGrad {
  double value = 0.0;
  Vector grad;
};

ValueGrad log_marginal_likelihood(const GpModel& m);

/// Sum over i of log p(y_i | x, y_{-i}), from the closed-form leave-one-out
/// conditionals, with gradient in the same parametrization.
ValueGrad loo_cv_score(const GpModel& m);

/// Pointwise leave-one-out predictive means and variances.
std::pair<Vector, Vector> loo_predictions(const GpModel& m);

enum class Objective { Marginal, Loo };

struct OptimizeOptions {
  int budget = 100;
  bool optimize_noise = true;
  double initial_step = 0.1;
  double grad_tol = 1e-8;
};

struct OptimizeResult {
  GpModel model;             // best point seen
  std::vector<double> trace;  // objective after each accepted step (first entry = start)
  int iterations = 0;
};

/// Gradient ascent on the log hyperparameters with a backtracking step.
OptimizeResult optimize_hyperparams(const GpModel& m, Objective objective, OptimizeOptions opts = {});

/// Packs / unpacks the log-hyperparameter vector described above.
Vector pack_params(const GpModel& m);
GpModel unpack_params(const GpModel& base, const Vector& theta);

}  // namespace regime::gp
