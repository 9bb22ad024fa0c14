#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "regime/linalg.hpp"
#include "regime/random.hpp"

namespace regime::imgpe {

/// Log parameters of k(t, t') = v0 exp(-(t - t')^2 / sf2) + v1.
struct ExpertKernel {
  double log_v0 = 0.0;
  double log_v1 = 0.0;
  double log_sf2 = 0.0;

  std::array<double, 3> as_array() const { return {log_v0, log_v1, log_sf2}; }
  static ExpertKernel from_array(const std::array<double, 3>& a) { return {a[0], a[1], a[2]}; }
  bool operator==(const ExpertKernel&) const = default;
};

/// Diagonal jitter is this fraction of v0 + v1.
inline constexpr double kJitter = 1e-6;

struct HmcConfig {
  double step_size = 0.005;
  int leapfrog_steps = 5;
  // Logistic priors on (log v0, log v1, log sf2).
  std::array<double, 3> prior_location{0.0, 0.0, 0.0};
  std::array<double, 3> prior_scale{2.0, 2.0, 2.0};

  void validate() const;
};

/// Kernel matrix on `t`, jitter included.
Matrix kernel_matrix(const ExpertKernel& k, const Vector& t);

/// log N(y | 0, K_theta(t)).
double cluster_loglik(const Vector& t, const Vector& y, const ExpertKernel& k);

struct LogPost {
  double value = 0.0;
  std::array<double, 3> grad{};
};

/// Gaussian log-likelihood plus logistic log-priors, with the gradient in the
/// log parameters.
LogPost log_posterior(const Vector& t, const Vector& y, const ExpertKernel& k, const HmcConfig& cfg);
double log_prior(const ExpertKernel& k, const HmcConfig& cfg);
ExpertKernel sample_prior(const HmcConfig& cfg, Rng& rng);

/// Existing clusters n_k / (n - 1 + alpha), then the new cluster alpha / (n - 1 + alpha),
/// where n - 1 is the total of `counts`.
std::vector<double> crp_predictive(const std::vector<int>& counts, double alpha);

struct MixtureState {
  std::vector<int> z;  // labels 0..K-1, contiguous
  std::vector<ExpertKernel> kernels;
  double alpha = 1.0;

  int num_clusters() const { return static_cast<int>(kernels.size()); }
  void validate(Eigen::Index n) const;
};

/// One collapsed Gibbs pass over z in time order. A fresh kernel for the
/// candidate new cluster is drawn from the prior (the point's own kernel when
/// it was alone), so the sweep leaves the joint posterior invariant.
void gibbs_sweep_assignments(MixtureState& state, const Vector& t, const Vector& y, const HmcConfig& cfg, Rng& rng);

struct HmcResult {
  ExpertKernel theta;
  bool accepted = false;
  double accept_prob = 0.0;
  double delta_h = 0.0;  // H(proposal) - H(current)
};

HmcResult hmc_update_kernel(const ExpertKernel& theta, const Vector& t, const Vector& y, const HmcConfig& cfg,
                            Rng& rng);

struct ImgpeChain {
  std::vector<std::vector<int>> assignments;  // per iteration
  std::vector<std::vector<ExpertKernel>> kernels;
  std::uint64_t seed = 0;
  double alpha = 0.0;
  double hmc_acceptance = 0.0;
};

struct ImgpeOptions {
  double alpha = 1.0;
  HmcConfig hmc;
  int iterations = 500;
  std::uint64_t seed = 0;
  int threads = 1;  // per-cluster HMC updates
};

/// Starts from a single cluster with a prior kernel draw, then alternates
/// assignment sweeps and one HMC move per cluster.
ImgpeChain fit_imgpe(const Vector& t, const Vector& y, const ImgpeOptions& opts);

/// Pair counts of shared cluster membership over iterations [burn_in, end).
Matrix cooccurrence(const std::vector<std::vector<int>>& assignments, int burn_in = 0);

/// Most frequent active-cluster count over iterations [burn_in, end); ties go low.
int modal_cluster_count(const ImgpeChain& chain, int burn_in = 0);

}  // namespace regime::imgpe
