#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "regime/core.hpp"
#include "regime/lds.hpp"
#include "regime/linalg.hpp"
#include "regime/random.hpp"

namespace regime::slds {

using lds::Sequence;

/// x_t = A x_{t-1} + N(0, Q), y_t = C x_t + N(0, R) while z_t = k.
struct Regime {
  Matrix A, Q, C, R;
};

struct SldsParams {
  std::vector<Regime> regimes;
  Matrix P;        // rows are from-regimes
  Vector pi;       // distribution of z_1
  GaussianBelief initial;  // belief on x_0

  int num_regimes() const { return static_cast<int>(regimes.size()); }
  int state_dim() const { return static_cast<int>(initial.mean.size()); }
  int obs_dim() const { return regimes.empty() ? 0 : static_cast<int>(regimes[0].C.rows()); }
  void validate() const;
  lds::LdsParams regime_lds(int k) const;
};

/// Matrix-normal inverse-Wishart prior for y = B x + e, e ~ N(0, Sigma):
/// Sigma ~ IW(nu, S), B | Sigma ~ MN(M, Sigma, V^{-1}), V the column precision.
struct MniwPrior {
  Matrix M;
  Matrix V;
  double nu = 0.0;
  Matrix S;

  void validate() const;
};

struct SldsPriors {
  MniwPrior dynamics;  // (A, Q)
  MniwPrior emission;  // (C, R)
  double alpha = 1.0;  // Dirichlet weight for each transition row

  /// Scalar-state defaults scaled to the data: A centred at 1 with unit
  /// column precision, C centred at 1 with a tight prior to fix the scale of x.
  static SldsPriors defaults(const Sequence& y, int state_dim = 1);
};

/// Information-form potential: precision and precision * mean.
struct GaussianMessage {
  Matrix precision;
  Vector shift;

  static GaussianMessage from_belief(const GaussianBelief& b);
  GaussianBelief to_belief() const;
};

struct ForwardMessages {
  std::vector<GaussianMessage> filtered;  // p(x_t | y_{1:t}, z)
  lds::FilterResult moments;
};

/// Kalman forward pass with the matrices of regime z_t at step t.
ForwardMessages forward_messages_x(const std::vector<int>& z, const Sequence& y, const SldsParams& params);

/// Exact draw of x_{1:T} from p(x | z, y): x_T from the last filtered belief,
/// then x_t | x_{t+1} backwards.
Sequence backward_sample_x(const ForwardMessages& msgs, const std::vector<int>& z, const SldsParams& params, Rng& rng);

/// T x K matrix of log N(x_t | A_k x_{t-1}, Q_k) + log N(y_t | C_k x_t, R_k),
/// with x_0 integrated against the initial belief at t = 1.
Matrix regime_loglik(const Sequence& x, const Sequence& y, const SldsParams& params);

std::vector<int> sample_z_ffbs(const Sequence& x, const Sequence& y, const SldsParams& params, Rng& rng);

/// Draw of (B, Sigma) from the MNIW posterior of the regression of rows of
/// `targets` on rows of `inputs`; the prior when fewer than dim + 2 rows.
std::pair<Matrix, Matrix> sample_mniw(const Matrix& inputs, const Matrix& targets, const MniwPrior& prior, Rng& rng);

/// Conjugate draw of every regime's (A, Q), (C, R) and the rows of P.
/// pi and the initial belief are carried over from `current`.
SldsParams sample_params_mniw(const std::vector<int>& z, const Sequence& x, const Sequence& y,
                              const SldsPriors& priors, const SldsParams& current, Rng& rng);

struct SldsOptions {
  int K = 2;
  int iterations = 1000;
  int burn_in = 0;
  int thinning = 1;
  std::uint64_t seed = 0;
  /// Holds the parameters at this value and samples only (x, z).
  const SldsParams* fixed = nullptr;
  int window = 3;  // sliding-window width for the k-means initialization
};

struct SldsDraw {
  int iteration = 0;
  std::vector<int> z;
  Sequence x;
  SldsParams params;
};

struct SldsChain {
  std::vector<SldsDraw> draws;
  std::uint64_t seed = 0;
};

SldsChain fit_slds(const Sequence& y, const SldsPriors& priors, const SldsOptions& opts);

/// Fraction of time points whose labels agree under the best relabelling of `estimate`.
double segmentation_accuracy(const std::vector<int>& truth, const std::vector<int>& estimate, int K);

/// Pointwise posterior mode of z over the recorded draws; ties go low.
std::vector<int> modal_regimes(const SldsChain& chain, int K);

/// Names of the scalars in the per-time parameter tuple (A, Q, C, R entries, row-major).
std::vector<std::string> parameter_names(int state_dim, int obs_dim);

struct ParameterClustering {
  Matrix posterior_means;  // series x (T * #params), time-major
  Matrix clipped;
  core::Dendrogram tree;
  std::vector<std::string> names;
  int T = 0;
};

/// Per series, the posterior mean over draws of Theta_{z_t} at each t,
/// flattened; values are clipped to [lower, upper] before Euclidean
/// average-linkage clustering.
ParameterClustering parameter_sequence_clustering(const std::vector<SldsChain>& chains, double lower = -1.1,
                                                  double upper = 2.1);

}  // namespace regime::slds
