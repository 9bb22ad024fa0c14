#pragma once

#include <cstdint>
#include <vector>

#include "regime/hmm.hpp"
#include "regime/linalg.hpp"
#include "regime/random.hpp"

namespace regime::hmm {

using StateSeq = std::vector<int>;

/// Semi-conjugate emission prior: mu ~ N(mu0, Sigma0) independently of
/// Sigma ~ IW(nu, nu * Delta).
struct EmissionPrior {
  Vector mu0;
  Matrix Sigma0;
  double nu = 0.0;
  Matrix Delta;

  void validate() const;
  /// Weakly informative default: data mean, data covariance, nu = dim + 2.
  static EmissionPrior from_data(const std::vector<Matrix>& sequences);
};

struct ChainControl {
  int iterations = 1000;
  int burn_in = 0;
  int thinning = 1;
  std::uint64_t seed = 0;
  int threads = 1;
};

struct StickyConfig {
  int K = 2;
  Vector alpha;  // per-row Dirichlet base weights, length K; empty means all ones
  double kappa = 0.0;
  EmissionPrior prior;
  ChainControl chain;
  /// Starting parameters; k-means when null. pi is held at init->pi (uniform otherwise).
  const HmmParams* init = nullptr;
  /// Keep emissions at their initial values (used to isolate the state/transition blocks).
  bool fix_emissions = false;

  void validate(int dim) const;
};

/// The initial state is drawn from beta, which is resampled with the
/// sequence starts included.
struct HdpConfig {
  int L = 10;
  double gamma = 1.0;
  double alpha = 1.0;
  double kappa = 0.0;
  EmissionPrior prior;
  ChainControl chain;
  const HmmParams* init = nullptr;
  bool fix_emissions = false;
  /// Use a / (a + n - 1) for the table-count Bernoullis instead of a / (n + a).
  bool textbook_crt = false;

  double rho() const { return kappa / (alpha + kappa); }
  void validate(int dim) const;
};

struct AuxCounts {
  Matrix n;      // observed transition counts
  Matrix m;      // table counts
  Vector w;      // stickiness override counts per state
  Matrix m_bar;  // m with w removed from the diagonal
};

struct ChainDraw {
  int iteration = 0;
  std::vector<StateSeq> z;
  Matrix P;
  std::vector<Vector> means;
  std::vector<Matrix> covs;
  Vector beta;  // HDP only
  AuxCounts aux;  // HDP only
};

struct SamplerChain {
  std::vector<ChainDraw> draws;
  std::uint64_t seed = 0;
  int iterations = 0;
  int burn_in = 0;
  int thinning = 1;
  Matrix P_mean;  // posterior mean of each transition cell
  Matrix P_se;    // posterior standard deviation of each cell
};

/// Exact draw from p(z_{1:T} | x_{1:T}, params).
StateSeq ffbs_states(const HmmParams& params, const Matrix& obs, Rng& rng);

/// Transition counts pooled over sequences.
Matrix transition_counts(const std::vector<StateSeq>& z, int K);

/// Row k ~ Dir(alpha + kappa e_k + n_k.).
Matrix sample_transitions_sticky(const std::vector<StateSeq>& z, const Vector& alpha, double kappa, Rng& rng);

/// Draws mu_k | Sigma_k, then Sigma_k | mu_k, for every state. `covs` supplies
/// the current Sigma_k for the first stage; both vectors are overwritten.
void sample_emissions(const std::vector<StateSeq>& z, const std::vector<Matrix>& data, const EmissionPrior& prior,
                      std::vector<Vector>& means, std::vector<Matrix>& covs, Rng& rng);

SamplerChain sticky_hmm_gibbs(const std::vector<Matrix>& sequences, const StickyConfig& cfg);

AuxCounts hdp_aux_updates(const Matrix& n, const Vector& beta, double alpha, double kappa, Rng& rng,
                          bool textbook_crt = false);

/// beta ~ Dir(gamma / L + column sums of m_bar [+ extra_counts]).
Vector sample_beta(const Matrix& m_bar, double gamma, Rng& rng, const Vector& extra_counts = Vector());

SamplerChain hdp_hmm_gibbs(const std::vector<Matrix>& sequences, const HdpConfig& cfg);

/// Per sequence, T x D posterior mean of mu_{z_t} over the recorded draws.
std::vector<Matrix> cell_posterior_means(const SamplerChain& chain);

/// Number of states holding more than `share` of all assignments, averaged over draws.
double effective_state_count(const SamplerChain& chain, double share = 0.01);

}  // namespace regime::hmm
