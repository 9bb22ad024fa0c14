#pragma once

#include <cstdint>
#include <vector>

#include "regime/linalg.hpp"
#include "regime/random.hpp"

namespace regime::lds {

using Sequence = std::vector<Vector>;

/// z_t = A z_{t-1} + w_t, x_t = C z_t + v_t, w ~ N(0, Q), v ~ N(0, R).
/// `initial` is the belief on z_0; the first predict step produces z_1.
struct LdsParams {
  Matrix A, C, Q, R;
  GaussianBelief initial;

  int state_dim() const { return static_cast<int>(A.rows()); }
  int obs_dim() const { return static_cast<int>(C.rows()); }
  void validate() const;
};

struct FilterOptions {
  /// (I - KC) P (I - KC)' + K R K' instead of (I - KC) P.
  bool joseph_form = false;
};

struct FilterResult {
  std::vector<GaussianBelief> predicted;  // p(z_t | x_{1:t-1})
  std::vector<GaussianBelief> filtered;   // p(z_t | x_{1:t})
  double loglik = 0.0;
};

FilterResult kalman_filter(const LdsParams& p, const Sequence& obs, FilterOptions opts = {});

/// Smoothed beliefs p(z_t | x_{1:T}) from a filter run on the same data.
std::vector<GaussianBelief> rts_smooth(const LdsParams& p, const FilterResult& filter);

struct TobitConfig {
  /// Entries with y <= threshold are censored (latent x <= threshold); the
  /// rest are observed exactly.
  double threshold = 0.0;
  int iterations = 1;
  std::uint64_t seed = 0;
};

struct TobitChain {
  std::vector<Sequence> draws;  // one latent path per iteration
};

/// Dynamic tobit scan sampler. Each iteration is one forward scan followed
/// by one backward scan of single-site Gibbs updates on x_{1:T}, with the
/// full conditionals maintained by O(T) information-form recursions.
TobitChain scan_sampler_dtm(const LdsParams& p, const Sequence& y, const TobitConfig& cfg);

/// Draws an unconditional path (z_{1:T}, x_{1:T}) from the model.
std::pair<Sequence, Sequence> simulate(const LdsParams& p, int T, Rng& rng);

}  // namespace regime::lds
