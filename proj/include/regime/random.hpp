#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>

#include "regime/linalg.hpp"

namespace regime {

/// Seeded random stream. Every sampler takes one of these by reference and
/// never touches global state; independent streams come from `substream`.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed), seed_(seed) {}

  /// Deterministic child stream keyed by integer tags (sequence index,
  /// iteration, chain id, ...). Identical (seed, tags) give identical streams
  /// regardless of call order, which keeps threaded runs reproducible.
  static Rng substream(std::uint64_t seed, std::initializer_list<std::uint64_t> tags);
  Rng substream(std::initializer_list<std::uint64_t> tags) const {
    return substream(seed_, tags);
  }

  std::uint64_t seed() const { return seed_; }
  std::mt19937_64& engine() { return engine_; }

  double uniform();  // (0, 1)
  double normal() { return normal_(engine_); }
  double normal(double mean, double sd) { return mean + sd * normal(); }
  bool bernoulli(double p) { return uniform() < p; }
  int binomial(int n, double p);
  double gamma(double shape, double scale = 1.0);
  /// log of a Gamma(shape, 1) draw; stays finite for tiny shapes.
  double log_gamma_draw(double shape);
  double chi_squared(double dof) { return gamma(0.5 * dof, 2.0); }

  /// Index drawn proportionally to exp(log_weights). Entries may be -inf.
  int categorical_log(std::span<const double> log_weights);
  int categorical(std::span<const double> weights);

  Vector dirichlet(const Vector& alpha);

  /// Draw from N(mean, sd^2) truncated to (-inf, upper].
  double truncated_normal_upper(double mean, double sd, double upper);

  Vector mvn(const Vector& mean, const Matrix& cov);
  Vector mvn_chol(const Vector& mean, const Matrix& lower_chol);

  /// Wishart(dof, scale) via the Bartlett decomposition.
  Matrix wishart(double dof, const Matrix& scale);
  /// Inverse-Wishart(dof, scale): inverse of a Wishart(dof, scale^{-1}) draw.
  Matrix inverse_wishart(double dof, const Matrix& scale);

 private:
  std::mt19937_64 engine_;
  std::uint64_t seed_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> unif_{0.0, 1.0};
};

}  // namespace regime
