#include "regime/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "regime/errors.hpp"

namespace regime {

double log_sum_exp(std::span<const double> x) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : x) m = std::max(m, v);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

double log_add_exp(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  return std::max(a, b) + std::log1p(std::exp(-std::fabs(a - b)));
}

std::vector<double> log_normalize(std::span<const double> x) {
  const double lse = log_sum_exp(x);
  if (lse == -std::numeric_limits<double>::infinity()) {
    throw DomainError("log_normalize: every weight is -inf");
  }
  if (!std::isfinite(lse)) throw DomainError("log_normalize: non-finite weights");
  std::vector<double> out(x.begin(), x.end());
  for (double& v : out) v -= lse;
  return out;
}

double log_beta(double a, double b) { return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b); }

double logistic_logpdf(double x, double location, double scale) {
  const double u = (x - location) / scale;
  // -u - log(scale) - 2 log(1 + e^{-u}), written to avoid overflow for u << 0
  const double a = std::fabs(u);
  return -a - std::log(scale) - 2.0 * std::log1p(std::exp(-a));
}

double logistic_logpdf_grad(double x, double location, double scale) {
  const double u = (x - location) / scale;
  return -std::tanh(0.5 * u) / scale;
}

double mean_of(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v;
  return x.empty() ? 0.0 : s / static_cast<double>(x.size());
}

double variance_of(std::span<const double> x) {
  if (x.size() < 2) return 0.0;
  const double m = mean_of(x);
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return s / static_cast<double>(x.size() - 1);
}

}  // namespace regime
