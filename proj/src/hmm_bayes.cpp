#include "regime/hmm_bayes.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "regime/errors.hpp"
#include "regime/parallel.hpp"

namespace regime::hmm {

namespace {

constexpr std::uint64_t kInitTag = 0x494e4954;
constexpr std::uint64_t kStateTag = 1;
constexpr std::uint64_t kParamTag = 2;

void check_sequences(const std::vector<Matrix>& sequences, const char* who) {
  if (sequences.empty()) throw LengthError(std::string(who) + ": no sequences");
  const auto D = sequences[0].cols();
  for (const auto& s : sequences) {
    if (s.cols() != D) throw LengthError(std::string(who) + ": sequences must share the emission dimension");
    if (s.rows() < 1) throw LengthError(std::string(who) + ": empty sequence");
  }
}

void check_chain(const ChainControl& c) {
  if (c.iterations < 1) throw DomainError("sampler: iterations must be >= 1");
  if (c.burn_in < 0 || c.burn_in >= c.iterations) throw DomainError("sampler: burn-in must lie in [0, iterations)");
  if (c.thinning < 1) throw DomainError("sampler: thinning must be >= 1");
}

bool is_pd(const Matrix& m) {
  if (m.rows() != m.cols() || !m.isApprox(m.transpose(), 1e-10)) return false;
  return Eigen::LLT<Matrix>(m).info() == Eigen::Success;
}

// Dirichlet parameters can underflow when beta puts almost no mass on a state;
// the smallest normal double stands in for zero.
Vector floor_concentration(Vector a) {
  for (auto& v : a) v = std::max(v, std::numeric_limits<double>::min());
  return a;
}

bool record_iteration(const ChainControl& c, int it) {
  return it >= c.burn_in && (it - c.burn_in + 1) % c.thinning == 0;
}

void summarize_transitions(SamplerChain& chain) {
  if (chain.draws.empty()) return;
  const auto K = chain.draws[0].P.rows();
  Matrix sum = Matrix::Zero(K, K), sq = Matrix::Zero(K, K);
  for (const auto& d : chain.draws) {
    sum += d.P;
    sq += d.P.cwiseProduct(d.P);
  }
  const double n = static_cast<double>(chain.draws.size());
  chain.P_mean = sum / n;
  if (n > 1) {
    chain.P_se = ((sq - n * chain.P_mean.cwiseProduct(chain.P_mean)) / (n - 1)).cwiseMax(0.0).cwiseSqrt();
  } else {
    chain.P_se = Matrix::Zero(K, K);
  }
}

// State and parameter blocks shared by both samplers. `update_transitions`
// draws P (and for the HDP sampler, beta and the aux counts) from the new z.
template <typename TransitionStep>
SamplerChain run_gibbs(const std::vector<Matrix>& sequences, HmmParams params, const EmissionPrior& prior,
                       const ChainControl& control, bool fix_emissions, TransitionStep&& update_transitions) {
  SamplerChain chain;
  chain.seed = control.seed;
  chain.iterations = control.iterations;
  chain.burn_in = control.burn_in;
  chain.thinning = control.thinning;

  std::vector<StateSeq> z(sequences.size());
  for (int it = 0; it < control.iterations; ++it) {
    const auto uit = static_cast<std::uint64_t>(it);
    parallel_for(sequences.size(), control.threads, [&](std::size_t s) {
      Rng rng = Rng::substream(control.seed, {kStateTag, uit, static_cast<std::uint64_t>(s)});
      z[s] = ffbs_states(params, sequences[s], rng);
    });
    Rng rng = Rng::substream(control.seed, {kParamTag, uit});
    ChainDraw draw;
    update_transitions(z, params, draw, rng);
    if (!fix_emissions) sample_emissions(z, sequences, prior, params.means, params.covs, rng);
    if (record_iteration(control, it)) {
      draw.iteration = it;
      draw.z = z;
      draw.P = params.P;
      draw.means = params.means;
      draw.covs = params.covs;
      chain.draws.push_back(std::move(draw));
    }
  }
  summarize_transitions(chain);
  return chain;
}

HmmParams initial_params(const std::vector<Matrix>& sequences, int K, const HmmParams* init, std::uint64_t seed) {
  if (init) {
    init->validate();
    if (init->num_states() != K) throw LengthError("sampler: initial parameters have the wrong number of states");
    if (init->obs_dim() != sequences[0].cols()) throw LengthError("sampler: initial parameters have the wrong dimension");
    return *init;
  }
  Rng rng = Rng::substream(seed, {kInitTag});
  HmmParams p = kmeans_init(sequences, K, rng, sequences[0].cols() > 3);
  p.pi = Vector::Constant(K, 1.0 / K);
  return p;
}

}  // namespace

void EmissionPrior::validate() const {
  const auto D = mu0.size();
  if (D < 1) throw LengthError("emission prior: empty mean");
  if (Sigma0.rows() != D || Sigma0.cols() != D || Delta.rows() != D || Delta.cols() != D) {
    throw LengthError("emission prior: dimension mismatch");
  }
  if (!(nu > static_cast<double>(D) - 1.0)) throw DomainError("emission prior: nu must exceed dim - 1");
  if (!is_pd(Sigma0)) throw DomainError("emission prior: Sigma0 must be symmetric positive definite");
  if (!is_pd(Delta)) throw DomainError("emission prior: Delta must be symmetric positive definite");
}

EmissionPrior EmissionPrior::from_data(const std::vector<Matrix>& sequences) {
  check_sequences(sequences, "emission prior");
  const auto D = sequences[0].cols();
  Eigen::Index n = 0;
  for (const auto& s : sequences) n += s.rows();
  Matrix pts(n, D);
  Eigen::Index r = 0;
  for (const auto& s : sequences) {
    pts.middleRows(r, s.rows()) = s;
    r += s.rows();
  }
  EmissionPrior p;
  p.mu0 = pts.colwise().mean().transpose();
  const Matrix centred = pts.rowwise() - p.mu0.transpose();
  Matrix cov = n > 1 ? Matrix(centred.transpose() * centred / static_cast<double>(n - 1)) : Matrix::Identity(D, D);
  cov.diagonal().array() += 1e-6 * std::max(cov.trace() / static_cast<double>(D), 1.0);
  p.Sigma0 = cov;
  p.Delta = cov;
  p.nu = static_cast<double>(D) + 2.0;
  return p;
}

void StickyConfig::validate(int dim) const {
  if (K < 1) throw DomainError("sticky: K must be >= 1");
  if (alpha.size() != 0) {
    if (alpha.size() != K) throw LengthError("sticky: alpha must have length K");
    if ((alpha.array() <= 0.0).any()) throw DomainError("sticky: alpha must be positive");
  }
  if (!(kappa >= 0.0)) throw DomainError("sticky: kappa must be >= 0");
  prior.validate();
  if (prior.mu0.size() != dim) throw LengthError("sticky: prior dimension does not match the data");
  check_chain(chain);
}

void HdpConfig::validate(int dim) const {
  if (L < 2) throw DomainError("hdp: L must be >= 2");
  if (!(gamma > 0.0) || !(alpha > 0.0)) throw DomainError("hdp: gamma and alpha must be positive");
  if (!(kappa >= 0.0) || !std::isfinite(kappa)) throw DomainError("hdp: kappa must be finite and >= 0");
  prior.validate();
  if (prior.mu0.size() != dim) throw LengthError("hdp: prior dimension does not match the data");
  check_chain(chain);
}

StateSeq ffbs_states(const HmmParams& params, const Matrix& obs, Rng& rng) {
  return ffbs_from_loglik(params.pi, params.P, emission_loglik(params, obs), rng);
}

Matrix transition_counts(const std::vector<StateSeq>& z, int K) {
  Matrix n = Matrix::Zero(K, K);
  for (const auto& seq : z) {
    for (std::size_t t = 0; t < seq.size(); ++t) {
      if (seq[t] < 0 || seq[t] >= K) throw RangeError("transition_counts: state label out of range");
      if (t > 0) n(seq[t - 1], seq[t]) += 1.0;
    }
  }
  return n;
}

Matrix sample_transitions_sticky(const std::vector<StateSeq>& z, const Vector& alpha, double kappa, Rng& rng) {
  const auto K = static_cast<int>(alpha.size());
  const Matrix n = transition_counts(z, K);
  Matrix P(K, K);
  for (int k = 0; k < K; ++k) {
    Vector conc = alpha + n.row(k).transpose();
    conc[k] += kappa;
    P.row(k) = rng.dirichlet(conc).transpose();
  }
  return P;
}

void sample_emissions(const std::vector<StateSeq>& z, const std::vector<Matrix>& data, const EmissionPrior& prior,
                      std::vector<Vector>& means, std::vector<Matrix>& covs, Rng& rng) {
  if (z.size() != data.size()) throw LengthError("sample_emissions: one state sequence per data sequence");
  const auto K = static_cast<int>(covs.size());
  const auto D = prior.mu0.size();
  std::vector<Vector> sums(static_cast<std::size_t>(K), Vector::Zero(D));
  std::vector<double> counts(static_cast<std::size_t>(K), 0.0);
  for (std::size_t s = 0; s < z.size(); ++s) {
    if (static_cast<Eigen::Index>(z[s].size()) != data[s].rows()) throw LengthError("sample_emissions: length mismatch");
    for (std::size_t t = 0; t < z[s].size(); ++t) {
      const auto k = static_cast<std::size_t>(z[s][t]);
      sums[k] += data[s].row(static_cast<Eigen::Index>(t)).transpose();
      counts[k] += 1.0;
    }
  }
  const Matrix prior_prec = prior.Sigma0.inverse();
  const Vector prior_term = prior_prec * prior.mu0;
  means.resize(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    const auto ks = static_cast<std::size_t>(k);
    // mu_k | Sigma_k
    const Matrix cov_inv = covs[ks].inverse();
    const Matrix post_cov = symmetrize((prior_prec + counts[ks] * cov_inv).inverse());
    const Vector post_mean = post_cov * (prior_term + cov_inv * sums[ks]);
    means[ks] = rng.mvn(post_mean, post_cov);

    // Sigma_k | mu_k
    Matrix scatter = prior.nu * prior.Delta;
    for (std::size_t s = 0; s < z.size(); ++s) {
      for (std::size_t t = 0; t < z[s].size(); ++t) {
        if (z[s][t] != k) continue;
        const Vector r = data[s].row(static_cast<Eigen::Index>(t)).transpose() - means[ks];
        scatter.noalias() += r * r.transpose();
      }
    }
    covs[ks] = symmetrize(rng.inverse_wishart(prior.nu + counts[ks], symmetrize(scatter)));
  }
}

SamplerChain sticky_hmm_gibbs(const std::vector<Matrix>& sequences, const StickyConfig& cfg) {
  check_sequences(sequences, "sticky_hmm_gibbs");
  cfg.validate(static_cast<int>(sequences[0].cols()));
  const Vector alpha = cfg.alpha.size() ? cfg.alpha : Vector::Ones(cfg.K);
  HmmParams params = initial_params(sequences, cfg.K, cfg.init, cfg.chain.seed);
  return run_gibbs(sequences, std::move(params), cfg.prior, cfg.chain, cfg.fix_emissions,
                   [&](const std::vector<StateSeq>& z, HmmParams& p, ChainDraw&, Rng& rng) {
                     p.P = sample_transitions_sticky(z, alpha, cfg.kappa, rng);
                   });
}

AuxCounts hdp_aux_updates(const Matrix& n, const Vector& beta, double alpha, double kappa, Rng& rng,
                          bool textbook_crt) {
  const auto L = beta.size();
  if (n.rows() != L || n.cols() != L) throw LengthError("hdp_aux_updates: counts must be L x L");
  const double rho = kappa / (alpha + kappa);
  AuxCounts aux;
  aux.n = n;
  aux.m = Matrix::Zero(L, L);
  aux.w = Vector::Zero(L);
  for (Eigen::Index j = 0; j < L; ++j) {
    for (Eigen::Index k = 0; k < L; ++k) {
      const double a = alpha * beta[k] + (j == k ? kappa : 0.0);
      const auto njk = static_cast<int>(std::lround(n(j, k)));
      int tables = 0;
      for (int c = 1; c <= njk; ++c) {
        const double p = textbook_crt ? a / (a + c - 1) : a / (c + a);
        tables += rng.bernoulli(p) ? 1 : 0;
      }
      aux.m(j, k) = tables;
    }
  }
  // The override probability is read with j = k: rho / (rho + beta_k (1 - rho)).
  for (Eigen::Index k = 0; k < L; ++k) {
    if (rho > 0.0) {
      const double p = rho / (rho + beta[k] * (1.0 - rho));
      aux.w[k] = rng.binomial(static_cast<int>(aux.m(k, k)), p);
    }
  }
  aux.m_bar = aux.m;
  aux.m_bar.diagonal() -= aux.w;
  return aux;
}

Vector sample_beta(const Matrix& m_bar, double gamma, Rng& rng, const Vector& extra_counts) {
  const auto L = m_bar.cols();
  if ((m_bar.array() < 0.0).any()) throw DomainError("sample_beta: counts must be nonnegative");
  Vector conc = Vector::Constant(L, gamma / static_cast<double>(L)) + m_bar.colwise().sum().transpose();
  if (extra_counts.size() == L) conc += extra_counts;
  return rng.dirichlet(conc);
}

SamplerChain hdp_hmm_gibbs(const std::vector<Matrix>& sequences, const HdpConfig& cfg) {
  check_sequences(sequences, "hdp_hmm_gibbs");
  cfg.validate(static_cast<int>(sequences[0].cols()));
  HmmParams params = initial_params(sequences, cfg.L, cfg.init, cfg.chain.seed);
  Vector beta = Vector::Constant(cfg.L, 1.0 / cfg.L);
  params.pi = beta;
  return run_gibbs(sequences, std::move(params), cfg.prior, cfg.chain, cfg.fix_emissions,
                   [&](const std::vector<StateSeq>& z, HmmParams& p, ChainDraw& draw, Rng& rng) {
                     const Matrix n = transition_counts(z, cfg.L);
                     for (int k = 0; k < cfg.L; ++k) {
                       Vector conc = cfg.alpha * beta + n.row(k).transpose();
                       conc[k] += cfg.kappa;
                       p.P.row(k) = rng.dirichlet(floor_concentration(conc)).transpose();
                     }
                     draw.aux = hdp_aux_updates(n, beta, cfg.alpha, cfg.kappa, rng, cfg.textbook_crt);
                     // z_1 ~ beta, so each sequence start is one more top-level count.
                     Vector starts = Vector::Zero(cfg.L);
                     for (const auto& seq : z) starts[seq[0]] += 1.0;
                     beta = sample_beta(draw.aux.m_bar, cfg.gamma, rng, starts);
                     p.pi = floor_concentration(beta);
                     p.pi /= p.pi.sum();
                     draw.beta = beta;
                   });
}

std::vector<Matrix> cell_posterior_means(const SamplerChain& chain) {
  std::vector<Matrix> out;
  if (chain.draws.empty()) return out;
  const auto D = chain.draws[0].means[0].size();
  for (const auto& seq : chain.draws[0].z) out.push_back(Matrix::Zero(static_cast<Eigen::Index>(seq.size()), D));
  for (const auto& d : chain.draws) {
    for (std::size_t s = 0; s < d.z.size(); ++s) {
      for (std::size_t t = 0; t < d.z[s].size(); ++t) {
        out[s].row(static_cast<Eigen::Index>(t)) += d.means[static_cast<std::size_t>(d.z[s][t])].transpose();
      }
    }
  }
  for (auto& m : out) m /= static_cast<double>(chain.draws.size());
  return out;
}

double effective_state_count(const SamplerChain& chain, double share) {
  if (chain.draws.empty()) return 0.0;
  double total = 0.0;
  for (const auto& d : chain.draws) {
    const auto K = static_cast<std::size_t>(d.P.rows());
    std::vector<double> occ(K, 0.0);
    double n = 0.0;
    for (const auto& seq : d.z) {
      for (int k : seq) occ[static_cast<std::size_t>(k)] += 1.0;
      n += static_cast<double>(seq.size());
    }
    for (double o : occ) total += o > share * n ? 1.0 : 0.0;
  }
  return total / static_cast<double>(chain.draws.size());
}

}  // namespace regime::hmm
