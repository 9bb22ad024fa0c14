#include "regime/slds.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "regime/errors.hpp"
#include "regime/hmm.hpp"

namespace regime::slds {

namespace {

Matrix solve_psd(const Matrix& A, const Matrix& B) {
  Eigen::LLT<Matrix> llt(A);
  if (llt.info() == Eigen::Success) return llt.solve(B);
  return A.completeOrthogonalDecomposition().solve(B);
}

void check_z(const std::vector<int>& z, std::size_t T, int K) {
  if (z.size() != T) throw LengthError("slds: one regime label per time point");
  for (int k : z) {
    if (k < 0 || k >= K) throw RangeError("slds: regime label out of range");
  }
}

Matrix rows_of(const std::vector<Vector>& v, Eigen::Index dim) {
  Matrix m(static_cast<Eigen::Index>(v.size()), dim);
  for (std::size_t i = 0; i < v.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = v[i].transpose();
  return m;
}

Matrix iw_mean(const MniwPrior& p) {
  const double d = static_cast<double>(p.S.rows());
  return p.nu > d + 1.0 ? Matrix(p.S / (p.nu - d - 1.0)) : Matrix(p.S / p.nu);
}

}  // namespace

void SldsParams::validate() const {
  const auto K = static_cast<Eigen::Index>(regimes.size());
  if (K < 1) throw LengthError("slds: need at least one regime");
  if (P.rows() != K || P.cols() != K || pi.size() != K) throw LengthError("slds: P must be K x K and pi length K");
  for (Eigen::Index j = 0; j < K; ++j) {
    if ((P.row(j).array() < 0.0).any() || std::fabs(P.row(j).sum() - 1.0) > 1e-10) {
      throw DomainError("slds: transition rows must lie on the simplex");
    }
  }
  if ((pi.array() < 0.0).any() || std::fabs(pi.sum() - 1.0) > 1e-10) throw DomainError("slds: pi must lie on the simplex");
  const auto d = initial.mean.size();
  const auto D = regimes[0].C.rows();
  if (initial.cov.rows() != d || initial.cov.cols() != d) throw LengthError("slds: initial belief dimensions");
  for (const auto& r : regimes) {
    if (r.A.rows() != d || r.A.cols() != d || r.Q.rows() != d || r.Q.cols() != d || r.C.rows() != D ||
        r.C.cols() != d || r.R.rows() != D || r.R.cols() != D) {
      throw LengthError("slds: regime matrices have inconsistent dimensions");
    }
  }
}

lds::LdsParams SldsParams::regime_lds(int k) const {
  const auto& r = regimes.at(static_cast<std::size_t>(k));
  return {r.A, r.C, r.Q, r.R, initial};
}

void MniwPrior::validate() const {
  const auto dout = M.rows(), din = M.cols();
  if (V.rows() != din || V.cols() != din || S.rows() != dout || S.cols() != dout) {
    throw LengthError("mniw prior: dimension mismatch");
  }
  if (!(nu > static_cast<double>(dout) - 1.0)) throw DomainError("mniw prior: nu must exceed dim - 1");
  if (Eigen::LLT<Matrix>(V).info() != Eigen::Success) throw DomainError("mniw prior: V must be positive definite");
  if (Eigen::LLT<Matrix>(S).info() != Eigen::Success) throw DomainError("mniw prior: S must be positive definite");
}

SldsPriors SldsPriors::defaults(const Sequence& y, int state_dim) {
  if (y.empty()) throw LengthError("slds priors: empty series");
  const auto D = y[0].size();
  const auto d = static_cast<Eigen::Index>(state_dim);
  const Matrix Y = rows_of(y, D);
  double var = 0.0;
  if (Y.rows() > 1) var = (Y.rowwise() - Y.colwise().mean()).squaredNorm() / static_cast<double>((Y.rows() - 1) * D);
  var = std::max(var, 1e-6);
  SldsPriors p;
  p.dynamics = {Matrix::Zero(d, d), 0.01 * Matrix::Identity(d, d), static_cast<double>(d) + 2.0,
                0.1 * var * Matrix::Identity(d, d)};
  p.emission = {Matrix::Ones(D, d), 100.0 * Matrix::Identity(d, d), static_cast<double>(D) + 2.0,
                0.1 * var * Matrix::Identity(D, D)};
  return p;
}

GaussianMessage GaussianMessage::from_belief(const GaussianBelief& b) {
  const auto d = b.mean.size();
  GaussianMessage m;
  m.precision = symmetrize(solve_psd(b.cov, Matrix::Identity(d, d)));
  m.shift = m.precision * b.mean;
  return m;
}

GaussianBelief GaussianMessage::to_belief() const {
  const auto d = shift.size();
  const Matrix cov = symmetrize(solve_psd(precision, Matrix::Identity(d, d)));
  return {cov * shift, cov};
}

ForwardMessages forward_messages_x(const std::vector<int>& z, const Sequence& y, const SldsParams& params) {
  params.validate();
  if (y.empty()) throw LengthError("forward_messages_x: empty series");
  check_z(z, y.size(), params.num_regimes());
  const auto d = params.initial.mean.size();

  ForwardMessages out;
  Vector mean = params.initial.mean;
  Matrix cov = params.initial.cov;
  for (std::size_t t = 0; t < y.size(); ++t) {
    const auto& r = params.regimes[static_cast<std::size_t>(z[t])];
    if (y[t].size() != r.C.rows()) throw LengthError("forward_messages_x: observation dimension mismatch");
    const Vector mp = r.A * mean;
    const Matrix Pp = symmetrize(r.A * cov * r.A.transpose() + r.Q);
    out.moments.predicted.push_back({mp, Pp});
    const Matrix S = symmetrize(r.C * Pp * r.C.transpose() + r.R);
    const auto llt = checked_llt(S, "forward_messages_x: innovation covariance at t=" + std::to_string(t + 1));
    const Matrix K = llt.solve(r.C * Pp).transpose();
    const Vector innov = y[t] - r.C * mp;
    out.moments.loglik += mvn_logpdf(innov, Vector::Zero(innov.size()), llt);
    mean = mp + K * innov;
    const Matrix IKC = Matrix::Identity(d, d) - K * r.C;
    cov = symmetrize(IKC * Pp * IKC.transpose() + K * r.R * K.transpose());
    out.moments.filtered.push_back({mean, cov});
    out.filtered.push_back(GaussianMessage::from_belief({mean, cov}));
  }
  return out;
}

Sequence backward_sample_x(const ForwardMessages& msgs, const std::vector<int>& z, const SldsParams& params,
                           Rng& rng) {
  const auto& f = msgs.moments.filtered;
  const std::size_t T = f.size();
  check_z(z, T, params.num_regimes());
  Sequence x(T);
  if (T == 0) return x;
  x[T - 1] = rng.mvn(f[T - 1].mean, f[T - 1].cov);
  for (std::size_t t = T - 1; t-- > 0;) {
    const auto& A = params.regimes[static_cast<std::size_t>(z[t + 1])].A;
    const auto& pred = msgs.moments.predicted[t + 1];
    const Matrix J = solve_psd(pred.cov, A * f[t].cov).transpose();
    const Vector mean = f[t].mean + J * (x[t + 1] - pred.mean);
    const Matrix cov = symmetrize(f[t].cov - J * pred.cov * J.transpose());
    x[t] = rng.mvn(mean, cov);
  }
  return x;
}

Matrix regime_loglik(const Sequence& x, const Sequence& y, const SldsParams& params) {
  params.validate();
  if (x.size() != y.size() || x.empty()) throw LengthError("regime_loglik: x and y must be nonempty and aligned");
  const auto K = params.num_regimes();
  Matrix ll(static_cast<Eigen::Index>(x.size()), K);
  for (int k = 0; k < K; ++k) {
    const auto& r = params.regimes[static_cast<std::size_t>(k)];
    const auto qllt = checked_llt(r.Q, "regime_loglik: Q of regime " + std::to_string(k));
    const auto rllt = checked_llt(r.R, "regime_loglik: R of regime " + std::to_string(k));
    for (std::size_t t = 0; t < x.size(); ++t) {
      double v = mvn_logpdf(y[t], r.C * x[t], rllt);
      if (t == 0) {
        v += mvn_logpdf(x[0], r.A * params.initial.mean,
                        symmetrize(r.A * params.initial.cov * r.A.transpose() + r.Q));
      } else {
        v += mvn_logpdf(x[t], r.A * x[t - 1], qllt);
      }
      ll(static_cast<Eigen::Index>(t), k) = v;
    }
  }
  return ll;
}

std::vector<int> sample_z_ffbs(const Sequence& x, const Sequence& y, const SldsParams& params, Rng& rng) {
  return hmm::ffbs_from_loglik(params.pi, params.P, regime_loglik(x, y, params), rng);
}

std::pair<Matrix, Matrix> sample_mniw(const Matrix& inputs, const Matrix& targets, const MniwPrior& prior, Rng& rng) {
  const auto din = prior.M.cols();
  if (inputs.rows() != targets.rows() || inputs.cols() != din || targets.cols() != prior.M.rows()) {
    throw LengthError("sample_mniw: regression dimensions disagree with the prior");
  }
  Matrix Sxx = prior.V, Syx = prior.M * prior.V, Syy = prior.M * prior.V * prior.M.transpose();
  double nu = prior.nu;
  if (inputs.rows() >= din + 2) {
    Sxx += inputs.transpose() * inputs;
    Syx += targets.transpose() * inputs;
    Syy += targets.transpose() * targets;
    nu += static_cast<double>(inputs.rows());
  }
  const Eigen::LLT<Matrix> sxx = checked_llt(symmetrize(Sxx), "sample_mniw: column precision");
  const Matrix Mn = sxx.solve(Syx.transpose()).transpose();
  const Matrix Sn = symmetrize(prior.S + Syy - Mn * Syx.transpose());
  const Matrix Sigma = symmetrize(rng.inverse_wishart(nu, Sn));
  const Matrix col_cov = symmetrize(sxx.solve(Matrix::Identity(din, din)));
  const Matrix Lr = checked_llt(Sigma, "sample_mniw: covariance draw").matrixL();
  const Matrix Lc = checked_llt(col_cov, "sample_mniw: column covariance").matrixL();
  Matrix Z(Mn.rows(), din);
  for (auto& v : Z.reshaped()) v = rng.normal();
  return {Mn + Lr * Z * Lc.transpose(), Sigma};
}

SldsParams sample_params_mniw(const std::vector<int>& z, const Sequence& x, const Sequence& y,
                              const SldsPriors& priors, const SldsParams& current, Rng& rng) {
  const int K = current.num_regimes();
  check_z(z, x.size(), K);
  if (x.size() != y.size()) throw LengthError("sample_params_mniw: x and y lengths differ");
  const auto d = current.initial.mean.size();
  const auto D = priors.emission.M.rows();
  SldsParams out = current;
  for (int k = 0; k < K; ++k) {
    std::vector<Vector> prev, next, xs, ys;
    for (std::size_t t = 0; t < x.size(); ++t) {
      if (z[t] != k) continue;
      xs.push_back(x[t]);
      ys.push_back(y[t]);
      if (t > 0) {
        prev.push_back(x[t - 1]);
        next.push_back(x[t]);
      }
    }
    auto& r = out.regimes[static_cast<std::size_t>(k)];
    std::tie(r.A, r.Q) = sample_mniw(rows_of(prev, d), rows_of(next, d), priors.dynamics, rng);
    std::tie(r.C, r.R) = sample_mniw(rows_of(xs, d), rows_of(ys, D), priors.emission, rng);
  }
  Matrix n = Matrix::Zero(K, K);
  for (std::size_t t = 1; t < z.size(); ++t) n(z[t - 1], z[t]) += 1.0;
  for (int k = 0; k < K; ++k) {
    out.P.row(k) = rng.dirichlet(Vector::Constant(K, priors.alpha) + n.row(k).transpose()).transpose();
  }
  return out;
}

SldsChain fit_slds(const Sequence& y, const SldsPriors& priors, const SldsOptions& opts) {
  if (y.empty()) throw LengthError("fit_slds: empty series");
  if (opts.K < 1) throw DomainError("fit_slds: K must be >= 1");
  if (opts.iterations < 1 || opts.thinning < 1 || opts.burn_in < 0 || opts.burn_in >= opts.iterations) {
    throw DomainError("fit_slds: bad chain controls");
  }
  if (!(priors.alpha > 0.0)) throw DomainError("fit_slds: alpha must be positive");
  const auto T = static_cast<Eigen::Index>(y.size());
  const auto D = y[0].size();
  for (const auto& v : y) {
    if (v.size() != D) throw LengthError("fit_slds: observation dimension varies");
  }

  SldsParams params;
  if (opts.fixed) {
    params = *opts.fixed;
    if (params.num_regimes() != opts.K) throw LengthError("fit_slds: fixed parameters have the wrong K");
  } else {
    priors.dynamics.validate();
    priors.emission.validate();
    const auto d = priors.dynamics.M.rows();
    if (priors.emission.M.cols() != d || priors.emission.M.rows() != D) {
      throw LengthError("fit_slds: prior dimensions disagree with the data");
    }
    const Regime base{priors.dynamics.M, iw_mean(priors.dynamics), priors.emission.M, iw_mean(priors.emission)};
    params.regimes.assign(static_cast<std::size_t>(opts.K), base);
    params.P = 0.9 * Matrix::Identity(opts.K, opts.K) + Matrix::Constant(opts.K, opts.K, 0.1 / opts.K);
    params.pi = Vector::Constant(opts.K, 1.0 / opts.K);
    const Matrix Y = rows_of(y, D);
    const double var = T > 1 ? (Y.rowwise() - Y.colwise().mean()).squaredNorm() / static_cast<double>((T - 1) * D) : 1.0;
    params.initial = {Vector::Zero(d), std::max(var, 1e-6) * Matrix::Identity(d, d)};
  }
  params.validate();

  // z from k-means on sliding windows of y; x from RTS under the pooled parameters.
  Rng init = Rng::substream(opts.seed, {0});
  const int half = std::max(opts.window, 1) / 2;
  Matrix feats(T, D * (2 * half + 1));
  for (Eigen::Index t = 0; t < T; ++t) {
    for (int o = -half; o <= half; ++o) {
      const auto s = std::clamp<Eigen::Index>(t + o, 0, T - 1);
      feats.block(t, (o + half) * D, 1, D) = y[static_cast<std::size_t>(s)].transpose();
    }
  }
  std::vector<int> z = opts.K > 1 && T >= opts.K ? hmm::kmeans(feats, opts.K, init).first : std::vector<int>(y.size(), 0);
  const lds::LdsParams pooled = params.regime_lds(0);
  Sequence x;
  for (const auto& b : lds::rts_smooth(pooled, lds::kalman_filter(pooled, y))) x.push_back(b.mean);

  SldsChain chain;
  chain.seed = opts.seed;
  for (int it = 0; it < opts.iterations; ++it) {
    Rng rng = Rng::substream(opts.seed, {1, static_cast<std::uint64_t>(it)});
    if (!opts.fixed) params = sample_params_mniw(z, x, y, priors, params, rng);
    x = backward_sample_x(forward_messages_x(z, y, params), z, params, rng);
    z = sample_z_ffbs(x, y, params, rng);
    if (it >= opts.burn_in && (it - opts.burn_in + 1) % opts.thinning == 0) {
      chain.draws.push_back({it, z, x, params});
    }
  }
  return chain;
}

double segmentation_accuracy(const std::vector<int>& truth, const std::vector<int>& estimate, int K) {
  if (truth.size() != estimate.size() || truth.empty()) throw LengthError("segmentation_accuracy: lengths differ");
  if (K < 1 || K > 8) throw DomainError("segmentation_accuracy: K must be in 1..8");
  std::vector<int> perm(static_cast<std::size_t>(K));
  std::iota(perm.begin(), perm.end(), 0);
  std::size_t best = 0;
  do {
    std::size_t hits = 0;
    for (std::size_t t = 0; t < truth.size(); ++t) {
      const int e = estimate[t];
      if (e >= 0 && e < K && perm[static_cast<std::size_t>(e)] == truth[t]) ++hits;
    }
    best = std::max(best, hits);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return static_cast<double>(best) / static_cast<double>(truth.size());
}

std::vector<int> modal_regimes(const SldsChain& chain, int K) {
  if (chain.draws.empty()) throw LengthError("modal_regimes: empty chain");
  const std::size_t T = chain.draws[0].z.size();
  Eigen::MatrixXi counts = Eigen::MatrixXi::Zero(static_cast<Eigen::Index>(T), K);
  for (const auto& d : chain.draws) {
    for (std::size_t t = 0; t < T; ++t) ++counts(static_cast<Eigen::Index>(t), d.z[t]);
  }
  std::vector<int> out(T);
  for (std::size_t t = 0; t < T; ++t) {
    Eigen::Index k;
    counts.row(static_cast<Eigen::Index>(t)).maxCoeff(&k);
    out[t] = static_cast<int>(k);
  }
  return out;
}

std::vector<std::string> parameter_names(int state_dim, int obs_dim) {
  std::vector<std::string> names;
  auto add = [&](const std::string& m, int rows, int cols) {
    for (int i = 0; i < rows; ++i) {
      for (int j = 0; j < cols; ++j) {
        names.push_back(rows * cols == 1 ? m : m + "[" + std::to_string(i + 1) + "," + std::to_string(j + 1) + "]");
      }
    }
  };
  add("A", state_dim, state_dim);
  add("Q", state_dim, state_dim);
  add("C", obs_dim, state_dim);
  add("R", obs_dim, obs_dim);
  return names;
}

namespace {

Vector flatten(const Regime& r) {
  std::vector<double> v;
  for (const Matrix* m : {&r.A, &r.Q, &r.C, &r.R}) {
    for (Eigen::Index i = 0; i < m->rows(); ++i) {
      for (Eigen::Index j = 0; j < m->cols(); ++j) v.push_back((*m)(i, j));
    }
  }
  return Eigen::Map<Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

ParameterClustering parameter_sequence_clustering(const std::vector<SldsChain>& chains, double lower, double upper) {
  if (chains.empty()) throw LengthError("parameter_sequence_clustering: no series");
  if (!(lower < upper)) throw DomainError("parameter_sequence_clustering: lower clip must be below upper");
  ParameterClustering out;
  for (const auto& c : chains) {
    if (c.draws.empty()) throw LengthError("parameter_sequence_clustering: empty chain");
  }
  const auto& first = chains[0].draws[0];
  out.T = static_cast<int>(first.z.size());
  out.names = parameter_names(first.params.state_dim(), first.params.obs_dim());
  const auto p = static_cast<Eigen::Index>(out.names.size());
  out.posterior_means = Matrix::Zero(static_cast<Eigen::Index>(chains.size()), out.T * p);
  for (std::size_t s = 0; s < chains.size(); ++s) {
    for (const auto& d : chains[s].draws) {
      if (static_cast<int>(d.z.size()) != out.T) throw LengthError("parameter_sequence_clustering: series lengths differ");
      for (int t = 0; t < out.T; ++t) {
        const Vector v = flatten(d.params.regimes[static_cast<std::size_t>(d.z[static_cast<std::size_t>(t)])]);
        if (v.size() != p) throw LengthError("parameter_sequence_clustering: parameter shapes differ");
        out.posterior_means.row(static_cast<Eigen::Index>(s)).segment(t * p, p) += v.transpose();
      }
    }
    out.posterior_means.row(static_cast<Eigen::Index>(s)) /= static_cast<double>(chains[s].draws.size());
  }
  out.clipped = out.posterior_means.cwiseMax(lower).cwiseMin(upper);
  out.tree = core::hclust(core::pairwise_distance(out.clipped, {}), out.clipped, core::Linkage::Average);
  return out;
}

}  // namespace regime::slds
