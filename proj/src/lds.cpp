#include "regime/lds.hpp"

#include <cmath>
#include <string>

#include "regime/errors.hpp"

namespace regime::lds {

void LdsParams::validate() const {
  const auto d = A.rows();
  const auto p = C.rows();
  if (A.cols() != d || C.cols() != d || Q.rows() != d || Q.cols() != d || R.rows() != p ||
      R.cols() != p || initial.mean.size() != d || initial.cov.rows() != d ||
      initial.cov.cols() != d) {
    throw LengthError("lds: inconsistent parameter dimensions");
  }
}

FilterResult kalman_filter(const LdsParams& p, const Sequence& obs, FilterOptions opts) {
  p.validate();
  if (obs.empty()) throw LengthError("kalman_filter: need at least one observation");
  const auto d = p.A.rows();
  const Matrix I = Matrix::Identity(d, d);

  FilterResult out;
  out.predicted.reserve(obs.size());
  out.filtered.reserve(obs.size());
  Vector mean = p.initial.mean;
  Matrix cov = p.initial.cov;
  for (std::size_t t = 0; t < obs.size(); ++t) {
    if (obs[t].size() != p.C.rows()) throw LengthError("kalman_filter: observation dimension mismatch");
    Vector mp = p.A * mean;
    Matrix Pp = symmetrize(p.A * cov * p.A.transpose() + p.Q);
    out.predicted.push_back({mp, Pp});

    const Matrix S = symmetrize(p.C * Pp * p.C.transpose() + p.R);
    const auto llt = checked_llt(S, "kalman_filter: innovation covariance at t=" + std::to_string(t + 1));
    const Matrix K = llt.solve(p.C * Pp).transpose();
    const Vector innov = obs[t] - p.C * mp;
    out.loglik += mvn_logpdf(innov, Vector::Zero(innov.size()), llt);

    mean = mp + K * innov;
    if (opts.joseph_form) {
      const Matrix IKC = I - K * p.C;
      cov = IKC * Pp * IKC.transpose() + K * p.R * K.transpose();
    } else {
      cov = (I - K * p.C) * Pp;
    }
    cov = symmetrize(cov);
    out.filtered.push_back({mean, cov});
  }
  return out;
}

std::vector<GaussianBelief> rts_smooth(const LdsParams& p, const FilterResult& filter) {
  const std::size_t T = filter.filtered.size();
  std::vector<GaussianBelief> smoothed(T);
  if (T == 0) return smoothed;
  smoothed[T - 1] = filter.filtered[T - 1];
  for (std::size_t t = T - 1; t-- > 0;) {
    const auto& f = filter.filtered[t];
    const auto& pred = filter.predicted[t + 1];
    const auto llt = checked_llt(pred.cov, "rts_smooth: predicted covariance at t=" + std::to_string(t + 2));
    const Matrix J = llt.solve(p.A * f.cov).transpose();
    smoothed[t].mean = f.mean + J * (smoothed[t + 1].mean - pred.mean);
    smoothed[t].cov = symmetrize(f.cov + J * (smoothed[t + 1].cov - pred.cov) * J.transpose());
  }
  return smoothed;
}

namespace {

// Innovation-form quantities of the Kalman filter run on x itself. With
// e = G (x - m) the innovations, the precision of x is G' D^{-1} G, so
// u = Lambda (x - m) comes out of one backward pass over e, and the diagonal
// blocks of Lambda are M_t = D_t^{-1} + K_t' N_t K_t.
struct ScanCache {
  Vector a1;
  std::vector<Matrix> Dinv, K, L, M;
  std::vector<Matrix> fwd;  // D^{-1} C - K' N L : effect of earlier changes on u_t
  std::vector<Matrix> bwd;  // C' D^{-1} - L' N K : feeds later changes back to u_t
};

ScanCache build_cache(const LdsParams& p, std::size_t T) {
  ScanCache c;
  const auto d = p.A.rows();
  c.a1 = p.A * p.initial.mean;
  Matrix P = symmetrize(p.A * p.initial.cov * p.A.transpose() + p.Q);
  c.Dinv.resize(T);
  c.K.resize(T);
  c.L.resize(T);
  c.M.resize(T);
  c.fwd.resize(T);
  c.bwd.resize(T);
  for (std::size_t t = 0; t < T; ++t) {
    const Matrix D = symmetrize(p.C * P * p.C.transpose() + p.R);
    const auto llt = checked_llt(D, "scan_sampler_dtm: innovation covariance");
    c.Dinv[t] = symmetrize(llt.solve(Matrix::Identity(D.rows(), D.cols())));
    c.K[t] = p.A * P * p.C.transpose() * c.Dinv[t];
    c.L[t] = p.A - c.K[t] * p.C;
    P = symmetrize(p.A * P * c.L[t].transpose() + p.Q);
  }
  Matrix N = Matrix::Zero(d, d);
  for (std::size_t t = T; t-- > 0;) {
    c.M[t] = symmetrize(c.Dinv[t] + c.K[t].transpose() * N * c.K[t]);
    c.fwd[t] = c.Dinv[t] * p.C - c.K[t].transpose() * N * c.L[t];
    c.bwd[t] = p.C.transpose() * c.Dinv[t] - c.L[t].transpose() * N * c.K[t];
    N = symmetrize(p.C.transpose() * c.Dinv[t] * p.C + c.L[t].transpose() * N * c.L[t]);
  }
  return c;
}

Sequence precision_times_residual(const LdsParams& p, const ScanCache& c, const Sequence& x) {
  const std::size_t T = x.size();
  Sequence e(T);
  Vector a = c.a1;
  for (std::size_t t = 0; t < T; ++t) {
    e[t] = x[t] - p.C * a;
    a = p.A * a + c.K[t] * e[t];
  }
  Sequence u(T);
  Vector r = Vector::Zero(p.A.rows());
  for (std::size_t t = T; t-- > 0;) {
    const Vector De = c.Dinv[t] * e[t];
    u[t] = De - c.K[t].transpose() * r;
    r = p.C.transpose() * De + c.L[t].transpose() * r;
  }
  return u;
}

// Coordinate-wise update of block t given u_t = [Lambda (x - m)]_t. Returns
// the change in x_t.
Vector update_block(Vector& xt, Vector ut, const Matrix& M, const std::vector<bool>& censored,
                    double threshold, Rng& rng) {
  Vector delta = Vector::Zero(xt.size());
  for (Eigen::Index i = 0; i < xt.size(); ++i) {
    if (!censored[static_cast<std::size_t>(i)]) continue;
    const double prec = M(i, i);
    const double mean = xt[i] - ut[i] / prec;
    const double draw = rng.truncated_normal_upper(mean, 1.0 / std::sqrt(prec), threshold);
    const double step = draw - xt[i];
    xt[i] = draw;
    ut += M.col(i) * step;
    delta[i] += step;
  }
  return delta;
}

}  // namespace

TobitChain scan_sampler_dtm(const LdsParams& p, const Sequence& y, const TobitConfig& cfg) {
  p.validate();
  if (y.empty()) throw LengthError("scan_sampler_dtm: empty series");
  if (cfg.iterations < 1) throw DomainError("scan_sampler_dtm: iterations must be >= 1");
  const std::size_t T = y.size();
  const auto pdim = p.C.rows();
  std::vector<std::vector<bool>> censored(T, std::vector<bool>(static_cast<std::size_t>(pdim)));
  for (std::size_t t = 0; t < T; ++t) {
    if (y[t].size() != pdim) throw LengthError("scan_sampler_dtm: observation dimension mismatch");
    for (Eigen::Index i = 0; i < pdim; ++i) {
      if (!(y[t][i] >= 0.0)) throw DomainError("scan_sampler_dtm: observations must be nonnegative");
      censored[t][static_cast<std::size_t>(i)] = y[t][i] <= cfg.threshold;
    }
  }

  const ScanCache c = build_cache(p, T);
  Rng rng(cfg.seed);
  Sequence x = y;
  TobitChain chain;
  chain.draws.reserve(static_cast<std::size_t>(cfg.iterations));
  const auto d = p.A.rows();

  for (int it = 0; it < cfg.iterations; ++it) {
    Sequence u = precision_times_residual(p, c, x);
    Vector b = Vector::Zero(d);
    for (std::size_t t = 0; t < T; ++t) {
      const Vector ut = u[t] - c.fwd[t] * b;
      const Vector delta = update_block(x[t], ut, c.M[t], censored[t], cfg.threshold, rng);
      b = c.L[t] * b + c.K[t] * delta;
    }

    u = precision_times_residual(p, c, x);
    Vector back = Vector::Zero(d);
    for (std::size_t t = T; t-- > 0;) {
      const Vector ut = u[t] - c.K[t].transpose() * back;
      const Vector delta = update_block(x[t], ut, c.M[t], censored[t], cfg.threshold, rng);
      back = c.L[t].transpose() * back + c.bwd[t] * delta;
    }
    chain.draws.push_back(x);
  }
  return chain;
}

std::pair<Sequence, Sequence> simulate(const LdsParams& p, int T, Rng& rng) {
  p.validate();
  Sequence z, x;
  Vector state = rng.mvn(p.initial.mean, p.initial.cov);
  for (int t = 0; t < T; ++t) {
    state = p.A * state + rng.mvn(Vector::Zero(p.A.rows()), p.Q);
    z.push_back(state);
    x.push_back(p.C * state + rng.mvn(Vector::Zero(p.C.rows()), p.R));
  }
  return {z, x};
}

}  // namespace regime::lds
