#include "regime/hmm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "regime/errors.hpp"
#include "regime/parallel.hpp"
#include "regime/stats.hpp"

namespace regime::hmm {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

Matrix log_of(const Matrix& m) {
  return m.unaryExpr([](double v) { return v > 0.0 ? std::log(v) : kNegInf; });
}

Vector log_of(const Vector& v) {
  return v.unaryExpr([](double x) { return x > 0.0 ? std::log(x) : kNegInf; });
}

// log(sum_j exp(a_j + logP(j, k))) for every k: the log-space P' p product.
Vector log_mat_vec_t(const Matrix& logP, const Vector& a) {
  const auto K = logP.cols();
  Vector out(K);
  std::vector<double> buf(static_cast<std::size_t>(logP.rows()));
  for (Eigen::Index k = 0; k < K; ++k) {
    for (Eigen::Index j = 0; j < logP.rows(); ++j) buf[static_cast<std::size_t>(j)] = a[j] + logP(j, k);
    out[k] = log_sum_exp(buf);
  }
  return out;
}

// log(sum_k exp(logP(j, k) + b_k)) for every j.
Vector log_mat_vec(const Matrix& logP, const Vector& b) {
  const auto K = logP.rows();
  Vector out(K);
  std::vector<double> buf(static_cast<std::size_t>(logP.cols()));
  for (Eigen::Index j = 0; j < K; ++j) {
    for (Eigen::Index k = 0; k < logP.cols(); ++k) buf[static_cast<std::size_t>(k)] = logP(j, k) + b[k];
    out[j] = log_sum_exp(buf);
  }
  return out;
}

// Normalizes a log vector in place and returns the normalizer.
double normalize_in_place(Vector& v, std::size_t t) {
  const double lse = log_sum_exp(std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
  if (!std::isfinite(lse)) {
    throw NumericalError("hmm: observation at t=" + std::to_string(t + 1) +
                         " has zero probability under every state");
  }
  v.array() -= lse;
  return lse;
}

void check_shapes(const Vector& pi, const Matrix& P, const Matrix& loglik) {
  const auto K = pi.size();
  if (P.rows() != K || P.cols() != K || loglik.cols() != K) throw LengthError("hmm: state count mismatch");
  if (loglik.rows() < 1) throw LengthError("hmm: need at least one observation");
}

}  // namespace

void HmmParams::validate() const {
  const auto K = pi.size();
  if (K < 1) throw LengthError("hmm: need at least one state");
  if (P.rows() != K || P.cols() != K) throw LengthError("hmm: P must be K x K");
  if (static_cast<Eigen::Index>(means.size()) != K || static_cast<Eigen::Index>(covs.size()) != K) {
    throw LengthError("hmm: one emission per state required");
  }
  if ((pi.array() < 0.0).any() || std::fabs(pi.sum() - 1.0) > 1e-10) {
    throw DomainError("hmm: initial distribution must lie on the simplex");
  }
  for (Eigen::Index j = 0; j < K; ++j) {
    if ((P.row(j).array() < 0.0).any() || std::fabs(P.row(j).sum() - 1.0) > 1e-10) {
      throw DomainError("hmm: transition rows must lie on the simplex");
    }
  }
  const auto D = means[0].size();
  for (Eigen::Index k = 0; k < K; ++k) {
    if (means[static_cast<std::size_t>(k)].size() != D || covs[static_cast<std::size_t>(k)].rows() != D ||
        covs[static_cast<std::size_t>(k)].cols() != D) {
      throw LengthError("hmm: emission dimensions disagree");
    }
  }
}

Matrix emission_loglik(const HmmParams& p, const Matrix& obs) {
  p.validate();
  if (obs.cols() != p.obs_dim()) throw LengthError("hmm: observation dimension mismatch");
  const auto K = p.num_states();
  Matrix out(obs.rows(), K);
  for (int k = 0; k < K; ++k) {
    const auto llt = checked_llt(p.covs[static_cast<std::size_t>(k)], "hmm: emission covariance of state " + std::to_string(k));
    for (Eigen::Index t = 0; t < obs.rows(); ++t) {
      out(t, k) = mvn_logpdf(obs.row(t).transpose(), p.means[static_cast<std::size_t>(k)], llt);
    }
  }
  return out;
}

ForwardResult forward_from_loglik(const Vector& pi, const Matrix& P, const Matrix& loglik) {
  check_shapes(pi, P, loglik);
  const Matrix logP = log_of(P);
  const auto T = loglik.rows();
  ForwardResult out;
  out.log_filtered.resize(T, pi.size());
  Vector a = log_of(pi) + loglik.row(0).transpose();
  out.loglik = normalize_in_place(a, 0);
  out.log_filtered.row(0) = a.transpose();
  for (Eigen::Index t = 1; t < T; ++t) {
    a = log_mat_vec_t(logP, a) + loglik.row(t).transpose();
    out.loglik += normalize_in_place(a, static_cast<std::size_t>(t));
    out.log_filtered.row(t) = a.transpose();
  }
  return out;
}

Matrix backward_from_loglik(const Matrix& P, const Matrix& loglik) {
  const auto T = loglik.rows();
  const auto K = P.rows();
  const Matrix logP = log_of(P);
  Matrix b = Matrix::Zero(T, K);
  for (Eigen::Index t = T - 1; t-- > 0;) {
    const Vector next = loglik.row(t + 1).transpose() + b.row(t + 1).transpose();
    b.row(t) = log_mat_vec(logP, next).transpose();
  }
  return b;
}

PosteriorMarginals marginals_from_loglik(const Vector& pi, const Matrix& P, const Matrix& loglik) {
  const ForwardResult f = forward_from_loglik(pi, P, loglik);
  const Matrix b = backward_from_loglik(P, loglik);
  const Matrix logP = log_of(P);
  const auto T = loglik.rows();
  const auto K = pi.size();
  PosteriorMarginals out;
  out.loglik = f.loglik;
  out.gamma.resize(T, K);
  for (Eigen::Index t = 0; t < T; ++t) {
    Vector g = f.log_filtered.row(t).transpose() + b.row(t).transpose();
    normalize_in_place(g, static_cast<std::size_t>(t));
    out.gamma.row(t) = g.array().exp().transpose();
  }
  out.xi.reserve(static_cast<std::size_t>(std::max<Eigen::Index>(T - 1, 0)));
  for (Eigen::Index t = 0; t + 1 < T; ++t) {
    Matrix lx(K, K);
    for (Eigen::Index j = 0; j < K; ++j) {
      for (Eigen::Index k = 0; k < K; ++k) {
        lx(j, k) = f.log_filtered(t, j) + logP(j, k) + loglik(t + 1, k) + b(t + 1, k);
      }
    }
    const double lse = log_sum_exp(std::span<const double>(lx.data(), static_cast<std::size_t>(lx.size())));
    out.xi.push_back((lx.array() - lse).exp().matrix());
  }
  return out;
}

std::vector<int> ffbs_from_loglik(const Vector& pi, const Matrix& P, const Matrix& loglik, Rng& rng) {
  check_shapes(pi, P, loglik);
  const Matrix b = backward_from_loglik(P, loglik);
  const Matrix logP = log_of(P);
  const auto T = loglik.rows();
  const auto K = pi.size();
  std::vector<int> z(static_cast<std::size_t>(T));
  std::vector<double> w(static_cast<std::size_t>(K));
  const Vector logpi = log_of(pi);
  for (Eigen::Index k = 0; k < K; ++k) w[static_cast<std::size_t>(k)] = logpi[k] + loglik(0, k) + b(0, k);
  z[0] = rng.categorical_log(w);
  for (Eigen::Index t = 1; t < T; ++t) {
    const int prev = z[static_cast<std::size_t>(t - 1)];
    for (Eigen::Index k = 0; k < K; ++k) w[static_cast<std::size_t>(k)] = logP(prev, k) + loglik(t, k) + b(t, k);
    z[static_cast<std::size_t>(t)] = rng.categorical_log(w);
  }
  return z;
}

ForwardResult forward(const HmmParams& p, const Matrix& obs) {
  return forward_from_loglik(p.pi, p.P, emission_loglik(p, obs));
}

Matrix backward(const HmmParams& p, const Matrix& obs) { return backward_from_loglik(p.P, emission_loglik(p, obs)); }

PosteriorMarginals smoothed_marginals(const HmmParams& p, const Matrix& obs) {
  return marginals_from_loglik(p.pi, p.P, emission_loglik(p, obs));
}

std::vector<int> modal_path(const PosteriorMarginals& m) {
  std::vector<int> out(static_cast<std::size_t>(m.gamma.rows()));
  for (Eigen::Index t = 0; t < m.gamma.rows(); ++t) {
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < m.gamma.cols(); ++k) {
      if (m.gamma(t, k) > m.gamma(t, best)) best = k;
    }
    out[static_cast<std::size_t>(t)] = static_cast<int>(best);
  }
  return out;
}

std::pair<std::vector<int>, Matrix> kmeans(const Matrix& points, int K, Rng& rng, int max_iter) {
  const auto N = points.rows();
  if (K < 1 || N < 1) throw DomainError("kmeans: need K >= 1 and at least one point");
  Matrix centres(K, points.cols());
  std::vector<double> d2(static_cast<std::size_t>(N), std::numeric_limits<double>::infinity());
  auto first = static_cast<Eigen::Index>(std::min<double>(static_cast<double>(N) - 1, std::floor(rng.uniform() * static_cast<double>(N))));
  centres.row(0) = points.row(first);
  for (int c = 1; c < K; ++c) {
    for (Eigen::Index i = 0; i < N; ++i) {
      d2[static_cast<std::size_t>(i)] = std::min(d2[static_cast<std::size_t>(i)], (points.row(i) - centres.row(c - 1)).squaredNorm());
    }
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    Eigen::Index pick = 0;
    if (total > 0.0) {
      pick = rng.categorical(d2);
    } else {
      pick = static_cast<Eigen::Index>(std::min<double>(static_cast<double>(N) - 1, std::floor(rng.uniform() * static_cast<double>(N))));
    }
    centres.row(c) = points.row(pick);
  }

  std::vector<int> labels(static_cast<std::size_t>(N), -1);
  for (int it = 0; it < max_iter; ++it) {
    bool changed = false;
    for (Eigen::Index i = 0; i < N; ++i) {
      int best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (int c = 0; c < K; ++c) {
        const double d = (points.row(i) - centres.row(c)).squaredNorm();
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      if (labels[static_cast<std::size_t>(i)] != best) changed = true;
      labels[static_cast<std::size_t>(i)] = best;
    }
    if (!changed) break;
    Matrix sums = Matrix::Zero(K, points.cols());
    std::vector<int> counts(static_cast<std::size_t>(K), 0);
    for (Eigen::Index i = 0; i < N; ++i) {
      sums.row(labels[static_cast<std::size_t>(i)]) += points.row(i);
      counts[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])]++;
    }
    for (int c = 0; c < K; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) centres.row(c) = sums.row(c) / counts[static_cast<std::size_t>(c)];
    }
  }

  // Order clusters by their first coordinate so labels do not depend on the
  // seeding order.
  std::vector<int> order(static_cast<std::size_t>(K));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    for (Eigen::Index d = 0; d < centres.cols(); ++d) {
      if (centres(a, d) != centres(b, d)) return centres(a, d) < centres(b, d);
    }
    return false;
  });
  std::vector<int> rank(static_cast<std::size_t>(K));
  Matrix sorted(K, points.cols());
  for (int r = 0; r < K; ++r) {
    rank[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])] = r;
    sorted.row(r) = centres.row(order[static_cast<std::size_t>(r)]);
  }
  for (auto& l : labels) l = rank[static_cast<std::size_t>(l)];
  return {labels, sorted};
}

namespace {

Matrix pooled_points(const std::vector<Matrix>& sequences) {
  Eigen::Index n = 0;
  for (const auto& s : sequences) n += s.rows();
  Matrix out(n, sequences.at(0).cols());
  Eigen::Index r = 0;
  for (const auto& s : sequences) {
    out.middleRows(r, s.rows()) = s;
    r += s.rows();
  }
  return out;
}

Matrix covariance_of(const Matrix& pts, const Vector& mean) {
  const Matrix c = pts.rowwise() - mean.transpose();
  return c.transpose() * c / static_cast<double>(std::max<Eigen::Index>(pts.rows(), 1));
}

// Makes a covariance usable: optional diagonal restriction, plus a small
// ridge whenever the Cholesky factorization fails.
Matrix regularize(Matrix cov, bool diagonal, double scale) {
  cov = symmetrize(cov);
  if (diagonal) cov = Matrix(cov.diagonal().asDiagonal());
  const double floor = 1e-6 * std::max(scale, 1e-12);
  Eigen::LLT<Matrix> llt(cov);
  if (llt.info() != Eigen::Success || cov.diagonal().minCoeff() <= 0.0) {
    cov.diagonal().array() += floor;
  }
  return cov;
}

}  // namespace

HmmParams kmeans_init(const std::vector<Matrix>& sequences, int K, Rng& rng, bool diagonal) {
  const Matrix pts = pooled_points(sequences);
  const auto D = pts.cols();
  auto [labels, centres] = kmeans(pts, K, rng);
  const Vector grand = pts.colwise().mean().transpose();
  const Matrix pooled = covariance_of(pts, grand);
  const double scale = pooled.trace() / static_cast<double>(D);

  HmmParams p;
  p.pi = Vector::Constant(K, 1.0 / K);
  p.P = 0.9 * Matrix::Identity(K, K) + Matrix::Constant(K, K, 0.1 / K);
  for (int k = 0; k < K; ++k) {
    std::vector<Eigen::Index> idx;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == k) idx.push_back(static_cast<Eigen::Index>(i));
    }
    Matrix cov = pooled;
    if (idx.size() >= 2) {
      Matrix sub(static_cast<Eigen::Index>(idx.size()), D);
      for (std::size_t i = 0; i < idx.size(); ++i) sub.row(static_cast<Eigen::Index>(i)) = pts.row(idx[i]);
      cov = covariance_of(sub, centres.row(k).transpose());
    }
    p.means.push_back(centres.row(k).transpose());
    p.covs.push_back(regularize(cov, diagonal, scale));
  }
  return p;
}

EmResult em_fit_pooled(const std::vector<Matrix>& sequences, int K, const EmOptions& opts) {
  if (sequences.empty()) throw LengthError("em_fit_pooled: no sequences");
  if (K < 1) throw DomainError("em_fit_pooled: K must be >= 1");
  const auto D = sequences[0].cols();
  for (const auto& s : sequences) {
    if (s.cols() != D) throw LengthError("em_fit_pooled: sequences must share the emission dimension");
    if (s.rows() < 1) throw LengthError("em_fit_pooled: empty sequence");
  }
  const bool diagonal = opts.cov_type == CovarianceType::Diagonal ||
                        (opts.cov_type == CovarianceType::Auto && D > 3);

  Rng rng = Rng::substream(opts.seed, {0x454d});
  EmResult res;
  res.params = opts.init ? *opts.init : kmeans_init(sequences, K, rng, diagonal);
  res.params.validate();

  const Matrix pts = pooled_points(sequences);
  const Vector grand = pts.colwise().mean().transpose();
  const Matrix pooled_cov = covariance_of(pts, grand);
  const double scale = pooled_cov.trace() / static_cast<double>(D);

  std::vector<PosteriorMarginals> marg(sequences.size());
  double prev = -std::numeric_limits<double>::infinity();
  bool converged = false;
  for (int it = 0; it < opts.max_iter; ++it) {
    parallel_for(sequences.size(), opts.threads, [&](std::size_t s) {
      marg[s] = smoothed_marginals(res.params, sequences[s]);
    });
    double total = 0.0;
    for (const auto& m : marg) total += m.loglik;
    res.loglik_trace.push_back(total);
    res.iterations = it + 1;
    if (it > 0 && total - prev < opts.tol) {
      converged = true;
      break;
    }
    prev = total;

    // M-step: pooled expected sufficient statistics.
    Vector pi = Vector::Zero(K);
    Matrix trans = Matrix::Zero(K, K);
    Vector weight = Vector::Zero(K);
    Matrix sum_x = Matrix::Zero(D, K);
    for (std::size_t s = 0; s < sequences.size(); ++s) {
      pi += marg[s].gamma.row(0).transpose();
      for (const auto& x : marg[s].xi) trans += x;
      weight += marg[s].gamma.colwise().sum().transpose();
      sum_x += sequences[s].transpose() * marg[s].gamma;
    }
    HmmParams next = res.params;
    next.pi = pi / pi.sum();
    for (int j = 0; j < K; ++j) {
      const double rs = trans.row(j).sum();
      if (rs > 0.0) next.P.row(j) = trans.row(j) / rs;
    }
    for (int k = 0; k < K; ++k) {
      if (weight[k] < 1e-8) {
        const auto pick = static_cast<Eigen::Index>(std::min<double>(
            static_cast<double>(pts.rows()) - 1, std::floor(rng.uniform() * static_cast<double>(pts.rows()))));
        next.means[static_cast<std::size_t>(k)] = pts.row(pick).transpose();
        next.covs[static_cast<std::size_t>(k)] = regularize(pooled_cov, diagonal, scale);
        res.warnings.push_back("iteration " + std::to_string(it + 1) + ": state " + std::to_string(k) +
                               " is empty; reinitialized from a data point");
        continue;
      }
      next.means[static_cast<std::size_t>(k)] = sum_x.col(k) / weight[k];
    }
    for (int k = 0; k < K; ++k) {
      if (weight[k] < 1e-8) continue;
      Matrix S = Matrix::Zero(D, D);
      for (std::size_t s = 0; s < sequences.size(); ++s) {
        const Matrix c = sequences[s].rowwise() - next.means[static_cast<std::size_t>(k)].transpose();
        S += c.transpose() * marg[s].gamma.col(k).asDiagonal() * c;
      }
      next.covs[static_cast<std::size_t>(k)] = regularize(S / weight[k], diagonal, scale);
    }
    res.params = next;
  }
  if (!converged) {
    // Leave marginals consistent with the returned parameters.
    parallel_for(sequences.size(), opts.threads, [&](std::size_t s) {
      marg[s] = smoothed_marginals(res.params, sequences[s]);
    });
    double total = 0.0;
    for (const auto& m : marg) total += m.loglik;
    res.loglik_trace.push_back(total);
  }
  res.marginals = std::move(marg);
  return res;
}

}  // namespace regime::hmm
