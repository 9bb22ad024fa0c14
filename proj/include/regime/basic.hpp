#pragma once

#include <cstdint>
#include <span>
#include <variant>
#include <vector>

#include "regime/linalg.hpp"
#include "regime/random.hpp"

namespace regime::basic {

/// x ~ N(mu, sigma^2), mu | sigma^2 ~ N(mu0, sigma^2 / lambda0), sigma^2 ~ IG(a0, b0).
struct GaussianNIG {
  double mu0 = 0.0;
  double lambda0 = 1.0;
  double a0 = 1.0;
  double b0 = 1.0;
};

/// x ~ Bernoulli(theta), theta ~ Beta(a0, b0).
struct BetaBernoulli {
  double a0 = 1.0;
  double b0 = 1.0;
};

using ObsModel = std::variant<GaussianNIG, BetaBernoulli>;

void validate(const ObsModel& model);

/// log of the conjugate marginal likelihood of one segment.
double segment_marginal(const ObsModel& model, std::span<const double> x);

/// n x T; z(i, t) = 1 marks a segment starting at t. Column 0 is always 1.
using ChangeMatrix = Eigen::MatrixXi;

ChangeMatrix initial_changes(int n, int T);
void validate_changes(const ChangeMatrix& z);

/// Point-mass mixture over changepoint probabilities q_k with weights w_k.
struct GridPrior {
  Vector q;
  Vector w;

  /// q_k = k / Kg for k = 1..Kg, uniform weights.
  static GridPrior uniform_grid(int Kg = 50);
  static GridPrior point_mass(double q);
  void validate() const;
  /// Prior mean of q, the marginal changepoint rate of a single cell.
  double mean() const;
  /// log sum_k w_k q_k^ones (1 - q_k)^zeros, with 0 * log 0 taken as 0.
  double log_moment(int ones, int zeros) const;
};

/// log P_i(t, s) for every sequence and every half-open segment [t, s).
class SegmentCache {
 public:
  SegmentCache(const Matrix& data, const ObsModel& model, int threads = 1);

  double log_p(int i, int t, int s) const { return tables_[static_cast<std::size_t>(i)](t, s - t - 1); }
  int num_sequences() const { return static_cast<int>(tables_.size()); }
  int length() const { return T_; }

 private:
  int T_ = 0;
  std::vector<Matrix> tables_;  // tables_[i](t, len - 1)
};

struct Propensity {
  double c = 0.0;
  double log_c = 0.0;
  double log_1mc = 0.0;
};

/// c = p(z_it = 1 | z_-i) given N changepoints among the other n - 1 sequences.
Propensity changepoint_propensity(int N, int n, const GridPrior& prior);

/// log Q_i(t) = log p(x_{i, t:T} | z_it = 1, z_-i) for t = 0..T-1.
std::vector<double> row_backward(int i, const ChangeMatrix& z, const SegmentCache& cache, const GridPrior& prior);

/// Exact draw of row i from p(z_i | z_-i, x).
void row_gibbs(int i, ChangeMatrix& z, const SegmentCache& cache, const GridPrior& prior, Rng& rng);

/// Log coefficients of prod_{j >= i} (A_j q + B_j (1 - q)) in the basis
/// q^m (1 - q)^(deg - m), for every suffix start i (index n gives the empty product).
std::vector<std::vector<double>> suffix_polynomials(std::span<const double> log_a, std::span<const double> log_b);

/// Exact draw of column t >= 1 from p(z_.t | z_-t, x), top-down.
void col_gibbs(int t, ChangeMatrix& z, const SegmentCache& cache, const GridPrior& prior, Rng& rng);

/// log p(x, z) up to the constant: column priors plus segment marginals.
double log_joint(const ChangeMatrix& z, const SegmentCache& cache, const GridPrior& prior);

/// One proposal: a random changepoint (t >= 1) moves one step left or right
/// into an empty in-range cell. Returns whether the move was accepted.
bool jitter_mh(ChangeMatrix& z, const SegmentCache& cache, const GridPrior& prior, Rng& rng);

struct EbResult {
  Vector w;
  std::vector<double> objective;  // per update, starting with the initial weights
};

/// Mixture-weight EM on the column counts of the samples (columns t >= 1).
EbResult eb_optimize(const std::vector<ChangeMatrix>& samples, const GridPrior& init, int max_iter = 5000,
                     double tol = 1e-12);

/// Pattern search in log space over the observation hyperparameters
/// (lambda0, a0, b0 or a0, b0), maximizing the average segment log-likelihood.
ObsModel eb_optimize_model(const std::vector<ChangeMatrix>& samples, const Matrix& data, const ObsModel& model,
                           int rounds = 20);

struct BasicOptions {
  int iterations = 200;  // sweeps per round
  int burn_in = 50;
  int eb_rounds = 0;     // prior refits; eb_rounds + 1 rounds of sampling in total
  bool eb_model = false; // also refit the observation hyperparameters
  int jitter_per_sweep = -1;  // -1: one proposal per sequence
  std::uint64_t seed = 0;
  int threads = 1;  // segment cache construction
};

struct BasicResult {
  std::vector<ChangeMatrix> samples;  // final round, after burn-in
  Matrix frequency;                   // n x T posterior changepoint frequency
  GridPrior prior;                    // prior used in the final round
  ObsModel model;
  std::vector<std::vector<double>> eb_traces;
  double jitter_acceptance = 0.0;
};

/// Each sweep: every row, every column t >= 1, then jitter proposals.
BasicResult fit_basic(const Matrix& data, const ObsModel& model, const GridPrior& prior, const BasicOptions& opts);

/// mu0 = data mean, lambda0 = a0 = b0 = 1.
GaussianNIG default_gaussian(const Matrix& data);

}  // namespace regime::basic
