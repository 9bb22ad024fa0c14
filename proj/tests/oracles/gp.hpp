#pragma once

#include <cmath>
#include <numbers>
#include <random>

#include "regime/errors.hpp"
#include "regime/gp.hpp"
#include "regime/random.hpp"
#include "../test_util.hpp"

namespace oracle::gp {

using namespace regime;
using namespace regime::gp;

inline GpModel random_problem(std::mt19937_64& gen, int n, int D, bool per_axis) {
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> ud(-0.7, 0.7);
  GpModel m;
  m.kernel.variant = per_axis ? KernelVariant::PerAxis : KernelVariant::Isotropic;
  m.kernel.log_signal_var = ud(gen);
  m.kernel.log_lengthscales = Vector(per_axis ? D : 1);
  for (auto& v : m.kernel.log_lengthscales) v = ud(gen);
  m.noise_var = std::exp(ud(gen) - 1.5);
  m.x = Matrix(n, D);
  for (int i = 0; i < n; ++i)
    for (int d = 0; d < D; ++d) m.x(i, d) = 2.0 * nd(gen);
  m.y = Vector(n);
  for (auto& v : m.y) v = nd(gen);
  return m;
}

inline double objective(const GpModel& m, bool loo) {
  return loo ? loo_cv_score(m).value : log_marginal_likelihood(m).value;
}

inline double max_rel_fd_error(const GpModel& m, bool loo) {
  const ValueGrad vg = loo ? loo_cv_score(m) : log_marginal_likelihood(m);
  const Vector theta = pack_params(m);
  double worst = 0.0;
  for (Eigen::Index j = 0; j < theta.size(); ++j) {
    const double h = 1e-5;
    Vector up = theta, dn = theta;
    up[j] += h;
    dn[j] -= h;
    const double fd = (objective(unpack_params(m, up), loo) - objective(unpack_params(m, dn), loo)) / (2 * h);
    const double err = std::fabs(fd - vg.grad[j]) / std::max(1.0, std::fabs(fd));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace oracle::gp
