#include "regime/imgpe.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>

#include "regime/errors.hpp"
#include "regime/parallel.hpp"
#include "regime/stats.hpp"

namespace regime::imgpe {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
const double kLog2Pi = std::log(2.0 * std::numbers::pi);

double kernel_value(const ExpertKernel& k, double a, double b) {
  const double d = a - b;
  return std::exp(k.log_v0 - d * d / std::exp(k.log_sf2)) + std::exp(k.log_v1);
}

double diagonal_value(const ExpertKernel& k) {
  const double s = std::exp(k.log_v0) + std::exp(k.log_v1);
  return s * (1.0 + kJitter);
}

Vector subset(const Vector& v, const std::vector<int>& idx) {
  Vector out(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) out[static_cast<Eigen::Index>(j)] = v[idx[j]];
  return out;
}

// Cached Cholesky factor of one cluster so that adding a point costs a
// triangular solve.
struct Cluster {
  std::vector<int> members;  // sorted
  ExpertKernel kernel;
  Matrix L;
  Vector w;  // L^{-1} y
  bool ok = true;

  void refresh(const Vector& t, const Vector& y) {
    if (members.empty()) return;
    Eigen::LLT<Matrix> llt(kernel_matrix(kernel, subset(t, members)));
    ok = llt.info() == Eigen::Success;
    if (!ok) return;
    L = llt.matrixL();
    w = L.triangularView<Eigen::Lower>().solve(subset(y, members));
  }

  // log p(y_i | cluster members) under this kernel.
  double predictive(const Vector& t, const Vector& y, int i) const {
    const double kii = diagonal_value(kernel);
    if (members.empty()) return -0.5 * (kLog2Pi + std::log(kii) + y[i] * y[i] / kii);
    if (!ok) return kNegInf;
    Vector ks(static_cast<Eigen::Index>(members.size()));
    for (std::size_t j = 0; j < members.size(); ++j) ks[static_cast<Eigen::Index>(j)] = kernel_value(kernel, t[i], t[members[j]]);
    const Vector v = L.triangularView<Eigen::Lower>().solve(ks);
    const double mean = v.dot(w);
    const double var = kii - v.squaredNorm();
    if (!(var > 0.0)) return kNegInf;
    const double r = y[i] - mean;
    return -0.5 * (kLog2Pi + std::log(var) + r * r / var);
  }
};

double sample_logistic(double loc, double scale, Rng& rng) {
  const double u = rng.uniform();
  return loc + scale * std::log(u / (1.0 - u));
}

double potential(const Vector& t, const Vector& y, const std::array<double, 3>& q, const HmcConfig& cfg,
                 std::array<double, 3>& grad) {
  try {
    const LogPost lp = log_posterior(t, y, ExpertKernel::from_array(q), cfg);
    for (int j = 0; j < 3; ++j) grad[static_cast<std::size_t>(j)] = -lp.grad[static_cast<std::size_t>(j)];
    return -lp.value;
  } catch (const NumericalError&) {
    return std::numeric_limits<double>::infinity();
  }
}

}  // namespace

void HmcConfig::validate() const {
  if (!(step_size > 0.0)) throw DomainError("hmc: step size must be positive");
  if (leapfrog_steps < 1) throw DomainError("hmc: leapfrog steps must be >= 1");
  for (double s : prior_scale) {
    if (!(s > 0.0)) throw DomainError("hmc: prior scales must be positive");
  }
}

Matrix kernel_matrix(const ExpertKernel& k, const Vector& t) {
  const auto n = t.size();
  Matrix K(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    K(i, i) = diagonal_value(k);
    for (Eigen::Index j = 0; j < i; ++j) K(i, j) = K(j, i) = kernel_value(k, t[i], t[j]);
  }
  return K;
}

double cluster_loglik(const Vector& t, const Vector& y, const ExpertKernel& k) {
  if (t.size() != y.size()) throw LengthError("cluster_loglik: times and values differ in length");
  if (t.size() < 1) throw LengthError("cluster_loglik: empty cluster");
  const auto llt = checked_llt(kernel_matrix(k, t), "cluster_loglik");
  const Vector w = llt.matrixL().solve(y);
  return -0.5 * (static_cast<double>(t.size()) * kLog2Pi + log_det(llt) + w.squaredNorm());
}

double log_prior(const ExpertKernel& k, const HmcConfig& cfg) {
  const auto q = k.as_array();
  double s = 0.0;
  for (std::size_t j = 0; j < 3; ++j) s += logistic_logpdf(q[j], cfg.prior_location[j], cfg.prior_scale[j]);
  return s;
}

LogPost log_posterior(const Vector& t, const Vector& y, const ExpertKernel& k, const HmcConfig& cfg) {
  if (t.size() != y.size()) throw LengthError("log_posterior: times and values differ in length");
  const auto n = t.size();
  const double v0 = std::exp(k.log_v0), v1 = std::exp(k.log_v1), sf2 = std::exp(k.log_sf2);
  Matrix E(n, n), D2(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      D2(i, j) = (t[i] - t[j]) * (t[i] - t[j]) / sf2;
      E(i, j) = std::exp(-D2(i, j));
    }
  }
  const Matrix K = kernel_matrix(k, t);
  const auto llt = checked_llt(K, "log_posterior");
  const Vector a = llt.solve(y);
  const Matrix W = a * a.transpose() - llt.solve(Matrix::Identity(n, n));

  LogPost out;
  out.value = -0.5 * (static_cast<double>(n) * kLog2Pi + log_det(llt) + y.dot(a)) + log_prior(k, cfg);
  // 0.5 tr(W dK) for each log parameter; jitter scales with v0 + v1.
  out.grad[0] = 0.5 * (v0 * (W.cwiseProduct(E).sum() + kJitter * W.trace()));
  out.grad[1] = 0.5 * (v1 * (W.sum() + kJitter * W.trace()));
  out.grad[2] = 0.5 * v0 * W.cwiseProduct(E.cwiseProduct(D2)).sum();
  const auto q = k.as_array();
  for (std::size_t j = 0; j < 3; ++j) out.grad[j] += logistic_logpdf_grad(q[j], cfg.prior_location[j], cfg.prior_scale[j]);
  return out;
}

ExpertKernel sample_prior(const HmcConfig& cfg, Rng& rng) {
  std::array<double, 3> q{};
  for (std::size_t j = 0; j < 3; ++j) q[j] = sample_logistic(cfg.prior_location[j], cfg.prior_scale[j], rng);
  return ExpertKernel::from_array(q);
}

std::vector<double> crp_predictive(const std::vector<int>& counts, double alpha) {
  if (!(alpha >= 0.0)) throw DomainError("crp_predictive: alpha must be >= 0");
  double others = 0.0;
  for (int c : counts) {
    if (c < 0) throw DomainError("crp_predictive: negative count");
    others += c;
  }
  const double denom = others + alpha;
  if (!(denom > 0.0)) throw DomainError("crp_predictive: no other points and alpha = 0");
  std::vector<double> p;
  for (int c : counts) p.push_back(c / denom);
  p.push_back(alpha / denom);
  return p;
}

void MixtureState::validate(Eigen::Index n) const {
  if (static_cast<Eigen::Index>(z.size()) != n) throw LengthError("imgpe: one assignment per timepoint");
  if (!(alpha >= 0.0)) throw DomainError("imgpe: alpha must be >= 0");
  std::vector<int> seen(kernels.size(), 0);
  for (int k : z) {
    if (k < 0 || k >= num_clusters()) throw RangeError("imgpe: assignment label out of range");
    seen[static_cast<std::size_t>(k)] = 1;
  }
  for (int s : seen) {
    if (!s) throw DomainError("imgpe: empty cluster");
  }
}

void gibbs_sweep_assignments(MixtureState& state, const Vector& t, const Vector& y, const HmcConfig& cfg, Rng& rng) {
  const auto n = static_cast<int>(y.size());
  if (t.size() != y.size()) throw LengthError("imgpe: times and values differ in length");
  state.validate(n);
  if (n < 2) return;

  std::vector<Cluster> clusters(state.kernels.size());
  for (std::size_t k = 0; k < clusters.size(); ++k) clusters[k].kernel = state.kernels[k];
  for (int i = 0; i < n; ++i) clusters[static_cast<std::size_t>(state.z[static_cast<std::size_t>(i)])].members.push_back(i);
  for (auto& c : clusters) c.refresh(t, y);

  for (int i = 0; i < n; ++i) {
    const auto old = static_cast<std::size_t>(state.z[static_cast<std::size_t>(i)]);
    auto& om = clusters[old].members;
    om.erase(std::find(om.begin(), om.end(), i));
    ExpertKernel aux;
    if (om.empty()) {
      aux = clusters[old].kernel;
      clusters.erase(clusters.begin() + static_cast<std::ptrdiff_t>(old));
      for (int& z : state.z) {
        if (z > static_cast<int>(old)) --z;
      }
    } else {
      clusters[old].refresh(t, y);
      aux = sample_prior(cfg, rng);
    }

    std::vector<int> counts;
    for (const auto& c : clusters) counts.push_back(static_cast<int>(c.members.size()));
    const auto prior = crp_predictive(counts, state.alpha);
    std::vector<double> logw;
    for (std::size_t k = 0; k < clusters.size(); ++k) logw.push_back(std::log(prior[k]) + clusters[k].predictive(t, y, i));
    Cluster fresh;
    fresh.kernel = aux;
    logw.push_back(std::log(prior.back()) + fresh.predictive(t, y, i));

    const auto pick = static_cast<std::size_t>(rng.categorical_log(logw));
    if (pick == clusters.size()) {
      fresh.members.push_back(i);
      fresh.refresh(t, y);
      clusters.push_back(std::move(fresh));
    } else {
      auto& m = clusters[pick].members;
      m.insert(std::lower_bound(m.begin(), m.end(), i), i);
      clusters[pick].refresh(t, y);
    }
    state.z[static_cast<std::size_t>(i)] = static_cast<int>(pick);
  }

  // Canonical labels: order of first appearance in time.
  std::sort(clusters.begin(), clusters.end(),
            [](const Cluster& a, const Cluster& b) { return a.members.front() < b.members.front(); });
  state.kernels.clear();
  for (std::size_t k = 0; k < clusters.size(); ++k) {
    state.kernels.push_back(clusters[k].kernel);
    for (int i : clusters[k].members) state.z[static_cast<std::size_t>(i)] = static_cast<int>(k);
  }
}

HmcResult hmc_update_kernel(const ExpertKernel& theta, const Vector& t, const Vector& y, const HmcConfig& cfg,
                            Rng& rng) {
  if (y.size() < 1) throw LengthError("hmc_update_kernel: empty cluster");
  if (!(cfg.step_size > 0.0) || cfg.leapfrog_steps < 0) throw DomainError("hmc_update_kernel: bad step settings");
  HmcResult res;
  res.theta = theta;

  std::array<double, 3> q = theta.as_array(), p{}, g{};
  for (double& v : p) v = rng.normal();
  const double u0 = potential(t, y, q, cfg, g);
  double k0 = 0.0;
  for (double v : p) k0 += 0.5 * v * v;
  const double eps = cfg.step_size;

  double u1 = u0;
  for (int s = 0; s < cfg.leapfrog_steps && std::isfinite(u1); ++s) {
    for (std::size_t j = 0; j < 3; ++j) p[j] -= 0.5 * eps * g[j];
    for (std::size_t j = 0; j < 3; ++j) q[j] += eps * p[j];
    u1 = potential(t, y, q, cfg, g);
    for (std::size_t j = 0; j < 3; ++j) p[j] -= 0.5 * eps * g[j];
  }
  double k1 = 0.0;
  for (double v : p) k1 += 0.5 * v * v;

  res.delta_h = (u1 + k1) - (u0 + k0);
  if (!std::isfinite(res.delta_h)) {
    res.accept_prob = 0.0;
    return res;
  }
  res.accept_prob = std::min(1.0, std::exp(-res.delta_h));
  if (rng.uniform() < res.accept_prob) {
    res.accepted = true;
    res.theta = ExpertKernel::from_array(q);
  }
  return res;
}

ImgpeChain fit_imgpe(const Vector& t, const Vector& y, const ImgpeOptions& opts) {
  if (t.size() != y.size()) throw LengthError("fit_imgpe: times and values differ in length");
  if (y.size() < 1) throw LengthError("fit_imgpe: empty series");
  if (!(opts.alpha >= 0.0)) throw DomainError("fit_imgpe: alpha must be >= 0");
  if (opts.iterations < 1) throw DomainError("fit_imgpe: iterations must be >= 1");
  opts.hmc.validate();

  Rng init = Rng::substream(opts.seed, {0});
  MixtureState state;
  state.alpha = opts.alpha;
  state.z.assign(static_cast<std::size_t>(y.size()), 0);
  state.kernels = {sample_prior(opts.hmc, init)};

  ImgpeChain chain;
  chain.seed = opts.seed;
  chain.alpha = opts.alpha;
  double accepted = 0.0, proposals = 0.0;
  for (int it = 0; it < opts.iterations; ++it) {
    const auto uit = static_cast<std::uint64_t>(it);
    Rng rng = Rng::substream(opts.seed, {1, uit});
    gibbs_sweep_assignments(state, t, y, opts.hmc, rng);

    const auto K = static_cast<std::size_t>(state.num_clusters());
    std::vector<std::vector<int>> members(K);
    for (int i = 0; i < y.size(); ++i) members[static_cast<std::size_t>(state.z[static_cast<std::size_t>(i)])].push_back(i);
    std::vector<HmcResult> moves(K);
    parallel_for(K, opts.threads, [&](std::size_t k) {
      Rng hr = Rng::substream(opts.seed, {2, uit, static_cast<std::uint64_t>(k)});
      moves[k] = hmc_update_kernel(state.kernels[k], subset(t, members[k]), subset(y, members[k]), opts.hmc, hr);
    });
    for (std::size_t k = 0; k < K; ++k) {
      state.kernels[k] = moves[k].theta;
      accepted += moves[k].accepted ? 1.0 : 0.0;
      proposals += 1.0;
    }
    chain.assignments.push_back(state.z);
    chain.kernels.push_back(state.kernels);
  }
  chain.hmc_acceptance = accepted / proposals;
  return chain;
}

Matrix cooccurrence(const std::vector<std::vector<int>>& assignments, int burn_in) {
  if (assignments.empty()) throw LengthError("cooccurrence: empty chain");
  const auto n = static_cast<Eigen::Index>(assignments[0].size());
  Matrix C = Matrix::Zero(n, n);
  for (std::size_t it = static_cast<std::size_t>(std::max(burn_in, 0)); it < assignments.size(); ++it) {
    const auto& z = assignments[it];
    if (static_cast<Eigen::Index>(z.size()) != n) throw LengthError("cooccurrence: assignment lengths differ");
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        if (z[static_cast<std::size_t>(i)] == z[static_cast<std::size_t>(j)]) C(i, j) += 1.0;
      }
    }
  }
  return C;
}

int modal_cluster_count(const ImgpeChain& chain, int burn_in) {
  std::map<int, int> freq;
  for (std::size_t it = static_cast<std::size_t>(std::max(burn_in, 0)); it < chain.kernels.size(); ++it) {
    ++freq[static_cast<int>(chain.kernels[it].size())];
  }
  int best = 0, best_count = -1;
  for (const auto& [k, c] : freq) {
    if (c > best_count) {
      best = k;
      best_count = c;
    }
  }
  return best;
}

}  // namespace regime::imgpe
