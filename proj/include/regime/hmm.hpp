#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "regime/linalg.hpp"
#include "regime/random.hpp"

namespace regime::hmm {

/// Gaussian-emission HMM. Rows of P are from-states.
struct HmmParams {
  Vector pi;
  Matrix P;
  std::vector<Vector> means;
  std::vector<Matrix> covs;

  int num_states() const { return static_cast<int>(pi.size()); }
  int obs_dim() const { return means.empty() ? 0 : static_cast<int>(means[0].size()); }
  void validate() const;
};

struct PosteriorMarginals {
  Matrix gamma;             // T x K
  std::vector<Matrix> xi;   // T-1 matrices, xi[t](j, k) = p(z_t = j, z_{t+1} = k | x)
  double loglik = 0.0;
};

struct ForwardResult {
  Matrix log_filtered;  // T x K, log p(z_t | x_{1:t})
  double loglik = 0.0;
};

/// T x K matrix of log p(x_t | z_t = k). Observations are T x D (rows = time).
Matrix emission_loglik(const HmmParams& p, const Matrix& obs);

// Message passing on a precomputed emission log-likelihood matrix; the
// Bayesian samplers reuse these with their own emission models.
ForwardResult forward_from_loglik(const Vector& pi, const Matrix& P, const Matrix& loglik);
Matrix backward_from_loglik(const Matrix& P, const Matrix& loglik);
PosteriorMarginals marginals_from_loglik(const Vector& pi, const Matrix& P, const Matrix& loglik);

/// Exact draw of z_{1:T} from p(z | x): backward messages, then forward
/// ancestral sampling.
std::vector<int> ffbs_from_loglik(const Vector& pi, const Matrix& P, const Matrix& loglik, Rng& rng);

ForwardResult forward(const HmmParams& p, const Matrix& obs);
/// log p(x_{t+1:T} | z_t = k); the last row is zero.
Matrix backward(const HmmParams& p, const Matrix& obs);
PosteriorMarginals smoothed_marginals(const HmmParams& p, const Matrix& obs);

/// Pointwise argmax of gamma; ties go to the lower state index.
std::vector<int> modal_path(const PosteriorMarginals& m);

enum class CovarianceType { Auto, Full, Diagonal };

struct EmOptions {
  int max_iter = 200;
  double tol = 1e-6;
  CovarianceType cov_type = CovarianceType::Auto;  // Auto: full for dim <= 3
  std::uint64_t seed = 0;
  int threads = 1;
  /// When set, skips k-means initialization.
  const HmmParams* init = nullptr;
};

struct EmResult {
  HmmParams params;
  std::vector<PosteriorMarginals> marginals;
  std::vector<double> loglik_trace;  // total log-likelihood at each E-step
  std::vector<std::string> warnings;
  int iterations = 0;
};

/// EM with emissions and transitions pooled across all sequences.
EmResult em_fit_pooled(const std::vector<Matrix>& sequences, int K, const EmOptions& opts = {});

/// Lloyd's algorithm with k-means++ seeding; returns labels and centres.
std::pair<std::vector<int>, Matrix> kmeans(const Matrix& points, int K, Rng& rng, int max_iter = 100);

/// k-means initialization used by EM and the Bayesian samplers.
HmmParams kmeans_init(const std::vector<Matrix>& sequences, int K, Rng& rng, bool diagonal);

}  // namespace regime::hmm
