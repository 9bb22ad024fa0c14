#pragma once

#include <span>
#include <vector>

namespace regime {

/// log(sum(exp(x))) with the max subtracted first. Returns -inf when every
/// entry is -inf (or the input is empty).
double log_sum_exp(std::span<const double> x);
double log_add_exp(double a, double b);

/// Safe log-sum-exp normalization: x - (m + log sum exp(x_i - m)).
/// Throws DomainError when every entry is -inf.
std::vector<double> log_normalize(std::span<const double> x);

/// log B(a, b) = lgamma(a) + lgamma(b) - lgamma(a + b)
double log_beta(double a, double b);

/// Logistic(location, scale) log density and its derivative in x.
double logistic_logpdf(double x, double location, double scale);
double logistic_logpdf_grad(double x, double location, double scale);

double mean_of(std::span<const double> x);
/// Sample variance (n - 1 denominator).
double variance_of(std::span<const double> x);

}  // namespace regime
