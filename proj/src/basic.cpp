#include "regime/basic.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "regime/errors.hpp"
#include "regime/parallel.hpp"
#include "regime/stats.hpp"

namespace regime::basic {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// count * log(v) with 0 * log 0 = 0.
double xlog(int count, double log_v) { return count == 0 ? 0.0 : count * log_v; }

bool positive_finite(double v) { return std::isfinite(v) && v > 0.0; }

struct GridLogs {
  std::vector<double> lw, lq, l1q;
  explicit GridLogs(const GridPrior& p) {
    for (Eigen::Index k = 0; k < p.q.size(); ++k) {
      lw.push_back(p.w[k] > 0.0 ? std::log(p.w[k]) : kNegInf);
      lq.push_back(p.q[k] > 0.0 ? std::log(p.q[k]) : kNegInf);
      l1q.push_back(p.q[k] < 1.0 ? std::log1p(-p.q[k]) : kNegInf);
    }
  }
  std::size_t size() const { return lw.size(); }
  double term(std::size_t k, int ones, int zeros) const {
    if (lw[k] == kNegInf) return kNegInf;
    return lw[k] + xlog(ones, lq[k]) + xlog(zeros, l1q[k]);
  }
  double moment(int ones, int zeros) const {
    std::vector<double> t(size());
    for (std::size_t k = 0; k < size(); ++k) t[k] = term(k, ones, zeros);
    return log_sum_exp(t);
  }
};

int column_count(const ChangeMatrix& z, int t) { return z.col(t).sum(); }

double column_log_prior(int N, int n, const GridLogs& g) { return g.moment(N, n - N); }

// Previous changepoint strictly before t and next one strictly after t (T if none).
std::pair<int, int> neighbours(const ChangeMatrix& z, int i, int t) {
  int r = t - 1;
  while (r > 0 && z(i, r) == 0) --r;
  int s = t + 1;
  const int T = static_cast<int>(z.cols());
  while (s < T && z(i, s) == 0) ++s;
  return {r, s};
}

double gaussian_marginal(const GaussianNIG& m, int n, double mean, double m2) {
  const double ln = m.lambda0 + n;
  const double an = m.a0 + 0.5 * n;
  const double d = mean - m.mu0;
  const double bn = m.b0 + 0.5 * m2 + m.lambda0 * n * d * d / (2.0 * ln);
  return std::lgamma(an) - std::lgamma(m.a0) + m.a0 * std::log(m.b0) - an * std::log(bn) +
         0.5 * (std::log(m.lambda0) - std::log(ln)) - 0.5 * n * std::log(2.0 * std::numbers::pi);
}

double bernoulli_marginal(const BetaBernoulli& m, int ones, int zeros) {
  return log_beta(m.a0 + ones, m.b0 + zeros) - log_beta(m.a0, m.b0);
}

void check_binary(const Matrix& data) {
  for (Eigen::Index i = 0; i < data.size(); ++i) {
    const double v = data.data()[i];
    if (v != 0.0 && v != 1.0) throw DomainError("BetaBernoulli data must be 0/1");
  }
}

}  // namespace

void validate(const ObsModel& model) {
  if (const auto* g = std::get_if<GaussianNIG>(&model)) {
    if (!std::isfinite(g->mu0) || !positive_finite(g->lambda0) || !positive_finite(g->a0) || !positive_finite(g->b0))
      throw DomainError("GaussianNIG needs finite mu0 and positive lambda0, a0, b0");
  } else {
    const auto& b = std::get<BetaBernoulli>(model);
    if (!positive_finite(b.a0) || !positive_finite(b.b0)) throw DomainError("BetaBernoulli needs positive a0, b0");
  }
}

double segment_marginal(const ObsModel& model, std::span<const double> x) {
  validate(model);
  if (x.empty()) throw LengthError("segment_marginal: empty segment");
  if (const auto* g = std::get_if<GaussianNIG>(&model)) {
    double mean = 0.0, m2 = 0.0;
    int n = 0;
    for (double v : x) {
      ++n;
      const double d = v - mean;
      mean += d / n;
      m2 += d * (v - mean);
    }
    return gaussian_marginal(*g, n, mean, m2);
  }
  int ones = 0;
  for (double v : x) {
    if (v != 0.0 && v != 1.0) throw DomainError("BetaBernoulli data must be 0/1");
    ones += v == 1.0;
  }
  return bernoulli_marginal(std::get<BetaBernoulli>(model), ones, static_cast<int>(x.size()) - ones);
}

ChangeMatrix initial_changes(int n, int T) {
  if (n < 1 || T < 1) throw LengthError("change matrix needs n >= 1 and T >= 1");
  ChangeMatrix z = ChangeMatrix::Zero(n, T);
  z.col(0).setOnes();
  return z;
}

void validate_changes(const ChangeMatrix& z) {
  if (z.rows() < 1 || z.cols() < 1) throw LengthError("empty change matrix");
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    if (z(i, 0) != 1) throw DomainError("first column of the change matrix must be 1");
    for (Eigen::Index t = 0; t < z.cols(); ++t)
      if (z(i, t) != 0 && z(i, t) != 1) throw DomainError("change matrix entries must be 0/1");
  }
}

GridPrior GridPrior::uniform_grid(int Kg) {
  if (Kg < 1) throw DomainError("grid needs at least one point");
  GridPrior p;
  p.q = Vector::LinSpaced(Kg, 1.0 / Kg, 1.0);
  p.w = Vector::Constant(Kg, 1.0 / Kg);
  return p;
}

GridPrior GridPrior::point_mass(double q) {
  GridPrior p;
  p.q = Vector::Constant(1, q);
  p.w = Vector::Ones(1);
  p.validate();
  return p;
}

void GridPrior::validate() const {
  if (q.size() == 0 || q.size() != w.size()) throw LengthError("grid prior needs matching non-empty q and w");
  double s = 0.0;
  for (Eigen::Index k = 0; k < q.size(); ++k) {
    if (!(q[k] >= 0.0 && q[k] <= 1.0)) throw DomainError("grid points must lie in [0, 1]");
    if (!(w[k] >= 0.0) || !std::isfinite(w[k])) throw DomainError("grid weights must be non-negative");
    s += w[k];
  }
  if (std::fabs(s - 1.0) > 1e-9) throw DomainError("grid weights must sum to 1");
}

double GridPrior::mean() const { return w.dot(q); }

double GridPrior::log_moment(int ones, int zeros) const { return GridLogs(*this).moment(ones, zeros); }

SegmentCache::SegmentCache(const Matrix& data, const ObsModel& model, int threads) : T_(static_cast<int>(data.cols())) {
  validate(model);
  if (data.rows() < 1 || data.cols() < 1) throw LengthError("segment cache needs a non-empty n x T matrix");
  if (!data.allFinite()) throw DomainError("data must be finite");
  if (std::holds_alternative<BetaBernoulli>(model)) check_binary(data);
  const int n = static_cast<int>(data.rows());
  tables_.assign(static_cast<std::size_t>(n), Matrix());
  parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t i) {
    Matrix tab = Matrix::Constant(T_, T_, kNegInf);
    for (int t = 0; t < T_; ++t) {
      double mean = 0.0, m2 = 0.0;
      int ones = 0;
      for (int s = t; s < T_; ++s) {
        const double v = data(static_cast<Eigen::Index>(i), s);
        const int len = s - t + 1;
        if (const auto* g = std::get_if<GaussianNIG>(&model)) {
          const double d = v - mean;
          mean += d / len;
          m2 += d * (v - mean);
          tab(t, len - 1) = gaussian_marginal(*g, len, mean, m2);
        } else {
          ones += v == 1.0;
          tab(t, len - 1) = bernoulli_marginal(std::get<BetaBernoulli>(model), ones, len - ones);
        }
      }
    }
    tables_[i] = std::move(tab);
  });
}

Propensity changepoint_propensity(int N, int n, const GridPrior& prior) {
  if (n < 1 || N < 0 || N > n - 1) throw DomainError("changepoint_propensity: need 0 <= N <= n - 1");
  const GridLogs g(prior);
  const double den = g.moment(N, n - 1 - N);
  if (den == kNegInf) throw DomainError("changepoint_propensity: prior gives the conditioning column zero mass");
  Propensity p;
  p.log_c = g.moment(N + 1, n - 1 - N) - den;
  p.log_1mc = g.moment(N, n - N) - den;
  p.c = std::exp(p.log_c);
  return p;
}

namespace {

struct RowTerms {
  std::vector<double> log_c, log_1mc;
};

RowTerms row_terms(int i, const ChangeMatrix& z, const GridPrior& prior) {
  const int n = static_cast<int>(z.rows()), T = static_cast<int>(z.cols());
  RowTerms r{std::vector<double>(static_cast<std::size_t>(T), kNegInf), std::vector<double>(static_cast<std::size_t>(T), kNegInf)};
  for (int t = 1; t < T; ++t) {
    const Propensity p = changepoint_propensity(column_count(z, t) - z(i, t), n, prior);
    r.log_c[static_cast<std::size_t>(t)] = p.log_c;
    r.log_1mc[static_cast<std::size_t>(t)] = p.log_1mc;
  }
  return r;
}

void check_shapes(const ChangeMatrix& z, const SegmentCache& cache) {
  if (z.rows() != cache.num_sequences() || z.cols() != cache.length())
    throw LengthError("change matrix shape does not match the segment cache");
}

std::vector<double> backward(int i, const RowTerms& rt, const SegmentCache& cache) {
  const int T = cache.length();
  std::vector<double> logQ(static_cast<std::size_t>(T), kNegInf);
  std::vector<double> terms;
  for (int t = T - 1; t >= 0; --t) {
    terms.clear();
    double acc = 0.0;  // sum of log(1 - c(r)) for r in (t, s)
    for (int s = t + 1; s < T; ++s) {
      const auto us = static_cast<std::size_t>(s);
      terms.push_back(acc + rt.log_c[us] + cache.log_p(i, t, s) + logQ[us]);
      acc += rt.log_1mc[us];
    }
    terms.push_back(acc + cache.log_p(i, t, T));
    logQ[static_cast<std::size_t>(t)] = log_sum_exp(terms);
  }
  return logQ;
}

}  // namespace

std::vector<double> row_backward(int i, const ChangeMatrix& z, const SegmentCache& cache, const GridPrior& prior) {
  check_shapes(z, cache);
  if (i < 0 || i >= z.rows()) throw RangeError("row index out of range");
  return backward(i, row_terms(i, z, prior), cache);
}

void row_gibbs(int i, ChangeMatrix& z, const SegmentCache& cache, const GridPrior& prior, Rng& rng) {
  check_shapes(z, cache);
  if (i < 0 || i >= z.rows()) throw RangeError("row index out of range");
  const int T = cache.length();
  const RowTerms rt = row_terms(i, z, prior);
  const std::vector<double> logQ = backward(i, rt, cache);
  z.row(i).setZero();
  z(i, 0) = 1;
  std::vector<double> lw;
  int s = 0;
  while (s < T - 1) {
    lw.clear();
    double acc = 0.0;
    for (int t = s + 1; t < T; ++t) {
      const auto ut = static_cast<std::size_t>(t);
      lw.push_back(acc + rt.log_c[ut] + cache.log_p(i, s, t) + logQ[ut]);
      acc += rt.log_1mc[ut];
    }
    lw.push_back(acc + cache.log_p(i, s, T));
    const int pick = rng.categorical_log(lw);
    if (pick == static_cast<int>(lw.size()) - 1) break;
    s += pick + 1;
    z(i, s) = 1;
  }
}

std::vector<std::vector<double>> suffix_polynomials(std::span<const double> log_a, std::span<const double> log_b) {
  if (log_a.size() != log_b.size()) throw LengthError("suffix_polynomials: A and B differ in length");
  const std::size_t n = log_a.size();
  std::vector<std::vector<double>> out(n + 1);
  out[n] = {0.0};
  for (std::size_t j = n; j-- > 0;) {
    const auto& prev = out[j + 1];
    std::vector<double> cur(prev.size() + 1, kNegInf);
    for (std::size_t m = 0; m < cur.size(); ++m) {
      const double from_b = m < prev.size() ? log_b[j] + prev[m] : kNegInf;
      const double from_a = m > 0 ? log_a[j] + prev[m - 1] : kNegInf;
      cur[m] = log_add_exp(from_a, from_b);
    }
    out[j] = std::move(cur);
  }
  return out;
}

void col_gibbs(int t, ChangeMatrix& z, const SegmentCache& cache, const GridPrior& prior, Rng& rng) {
  check_shapes(z, cache);
  const int n = static_cast<int>(z.rows()), T = static_cast<int>(z.cols());
  if (t < 1 || t >= T) throw RangeError("col_gibbs: column must be in [1, T)");
  std::vector<double> la(static_cast<std::size_t>(n)), lb(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const auto [r, s] = neighbours(z, i, t);
    double a = cache.log_p(i, r, t) + cache.log_p(i, t, s);
    double b = cache.log_p(i, r, s);
    // Only the ratio A : B matters for each row.
    const double m = std::max(a, b);
    la[static_cast<std::size_t>(i)] = a - m;
    lb[static_cast<std::size_t>(i)] = b - m;
  }
  const auto suffix = suffix_polynomials(la, lb);
  const GridLogs g(prior);
  int N = 0;
  std::vector<double> t0, t1, t2;
  for (int i = 0; i < n; ++i) {
    const auto& coef = suffix[static_cast<std::size_t>(i) + 1];
    const int deg = static_cast<int>(coef.size()) - 1;
    t0.clear();
    t1.clear();
    t2.clear();
    for (std::size_t k = 0; k < g.size(); ++k) {
      for (int m = 0; m <= deg; ++m) {
        const double cm = coef[static_cast<std::size_t>(m)];
        const int ones = m + N, zeros = deg - m + i - N;
        t0.push_back(cm + g.term(k, ones, zeros));
        t1.push_back(cm + g.term(k, ones + 1, zeros));
        t2.push_back(cm + g.term(k, ones, zeros + 1));
      }
    }
    const double i0 = log_sum_exp(t0);
    if (i0 == kNegInf) throw DomainError("col_gibbs: prior gives the current column zero mass");
    const double w1 = la[static_cast<std::size_t>(i)] + log_sum_exp(t1) - i0;
    const double w0 = lb[static_cast<std::size_t>(i)] + log_sum_exp(t2) - i0;
    const double p1 = std::exp(w1 - log_add_exp(w0, w1));
    z(i, t) = rng.uniform() < p1 ? 1 : 0;
    N += z(i, t);
  }
}

double log_joint(const ChangeMatrix& z, const SegmentCache& cache, const GridPrior& prior) {
  check_shapes(z, cache);
  validate_changes(z);
  const int n = static_cast<int>(z.rows()), T = static_cast<int>(z.cols());
  const GridLogs g(prior);
  double lp = 0.0;
  for (int t = 1; t < T; ++t) lp += column_log_prior(column_count(z, t), n, g);
  for (int i = 0; i < n; ++i) {
    int start = 0;
    for (int t = 1; t <= T; ++t) {
      if (t == T || z(i, t) == 1) {
        lp += cache.log_p(i, start, t);
        start = t;
      }
    }
  }
  return lp;
}

bool jitter_mh(ChangeMatrix& z, const SegmentCache& cache, const GridPrior& prior, Rng& rng) {
  check_shapes(z, cache);
  const int n = static_cast<int>(z.rows()), T = static_cast<int>(z.cols());
  std::vector<std::pair<int, int>> movable;
  for (int i = 0; i < n; ++i)
    for (int t = 1; t < T; ++t)
      if (z(i, t) == 1) movable.emplace_back(i, t);
  if (movable.empty()) return false;
  const auto pick = static_cast<std::size_t>(rng.uniform() * static_cast<double>(movable.size()));
  const auto [i, t] = movable[std::min(pick, movable.size() - 1)];
  const int t2 = rng.uniform() < 0.5 ? t - 1 : t + 1;
  // Moves off the grid or onto an occupied cell are rejected; the proposal
  // stays symmetric because the number of movable changepoints is unchanged.
  if (t2 < 1 || t2 >= T || z(i, t2) == 1) return false;
  const auto [r, s] = neighbours(z, i, t);
  const GridLogs g(prior);
  const int Nt = column_count(z, t), Nt2 = column_count(z, t2);
  double delta = column_log_prior(Nt - 1, n, g) + column_log_prior(Nt2 + 1, n, g) - column_log_prior(Nt, n, g) -
                 column_log_prior(Nt2, n, g);
  delta += cache.log_p(i, r, t2) + cache.log_p(i, t2, s) - cache.log_p(i, r, t) - cache.log_p(i, t, s);
  if (std::log(rng.uniform()) < delta) {
    z(i, t) = 0;
    z(i, t2) = 1;
    return true;
  }
  return false;
}

EbResult eb_optimize(const std::vector<ChangeMatrix>& samples, const GridPrior& init, int max_iter, double tol) {
  init.validate();
  if (samples.empty()) throw LengthError("eb_optimize: no samples");
  const int n = static_cast<int>(samples.front().rows());
  std::vector<double> hist(static_cast<std::size_t>(n) + 1, 0.0);
  double total = 0.0;
  for (const auto& z : samples) {
    if (z.rows() != n) throw LengthError("eb_optimize: samples differ in shape");
    for (Eigen::Index t = 1; t < z.cols(); ++t) {
      hist[static_cast<std::size_t>(z.col(t).sum())] += 1.0;
      total += 1.0;
    }
  }
  EbResult res;
  res.w = init.w;
  if (total == 0.0) {
    res.objective.push_back(0.0);
    return res;
  }
  const auto K = static_cast<std::size_t>(init.q.size());
  const GridLogs g(init);
  // log q^N (1 - q)^(n - N) per grid point and count.
  std::vector<std::vector<double>> lk(K, std::vector<double>(hist.size()));
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t N = 0; N < hist.size(); ++N)
      lk[k][N] = xlog(static_cast<int>(N), g.lq[k]) + xlog(n - static_cast<int>(N), g.l1q[k]);

  std::vector<double> terms(K), lw(K), next(K);
  for (int it = 0; it <= max_iter; ++it) {
    for (std::size_t k = 0; k < K; ++k) lw[k] = res.w[static_cast<Eigen::Index>(k)] > 0.0 ? std::log(res.w[static_cast<Eigen::Index>(k)]) : kNegInf;
    std::fill(next.begin(), next.end(), 0.0);
    double obj = 0.0;
    for (std::size_t N = 0; N < hist.size(); ++N) {
      if (hist[N] == 0.0) continue;
      for (std::size_t k = 0; k < K; ++k) terms[k] = lw[k] == kNegInf ? kNegInf : lw[k] + lk[k][N];
      const double lse = log_sum_exp(terms);
      obj += hist[N] * lse;
      for (std::size_t k = 0; k < K; ++k)
        if (terms[k] != kNegInf) next[k] += hist[N] * std::exp(terms[k] - lse);
    }
    obj /= static_cast<double>(samples.size());
    const bool done = !res.objective.empty() && obj - res.objective.back() < tol * std::max(1.0, std::fabs(obj));
    res.objective.push_back(obj);
    if (done || it == max_iter) break;
    for (std::size_t k = 0; k < K; ++k) res.w[static_cast<Eigen::Index>(k)] = next[k] / total;
  }
  return res;
}

namespace {

double segment_objective(const std::vector<ChangeMatrix>& samples, const Matrix& data, const ObsModel& model) {
  const SegmentCache cache(data, model);
  const int T = cache.length();
  double s = 0.0;
  for (const auto& z : samples) {
    for (int i = 0; i < cache.num_sequences(); ++i) {
      int start = 0;
      for (int t = 1; t <= T; ++t) {
        if (t == T || z(i, t) == 1) {
          s += cache.log_p(i, start, t);
          start = t;
        }
      }
    }
  }
  return s / static_cast<double>(samples.size());
}

}  // namespace

ObsModel eb_optimize_model(const std::vector<ChangeMatrix>& samples, const Matrix& data, const ObsModel& model,
                           int rounds) {
  validate(model);
  if (samples.empty()) throw LengthError("eb_optimize_model: no samples");
  ObsModel cur = model;
  double best = segment_objective(samples, data, cur);
  auto params = [](ObsModel& m) -> std::vector<double*> {
    if (auto* g = std::get_if<GaussianNIG>(&m)) return {&g->lambda0, &g->a0, &g->b0};
    auto& b = std::get<BetaBernoulli>(m);
    return {&b.a0, &b.b0};
  };
  double step = std::log(2.0);
  for (int r = 0; r < rounds; ++r) {
    bool moved = false;
    for (std::size_t j = 0; j < params(cur).size(); ++j) {
      for (double dir : {1.0, -1.0}) {
        ObsModel trial = cur;
        double* v = params(trial)[j];
        *v *= std::exp(dir * step);
        if (!positive_finite(*v)) continue;
        const double obj = segment_objective(samples, data, trial);
        if (obj > best) {
          best = obj;
          cur = trial;
          moved = true;
          break;
        }
      }
    }
    if (!moved) step *= 0.5;
  }
  return cur;
}

GaussianNIG default_gaussian(const Matrix& data) {
  if (data.size() == 0) throw LengthError("default_gaussian: empty data");
  GaussianNIG g;
  g.mu0 = data.mean();
  return g;
}

BasicResult fit_basic(const Matrix& data, const ObsModel& model, const GridPrior& prior, const BasicOptions& opts) {
  validate(model);
  prior.validate();
  if (opts.iterations < 1 || opts.burn_in < 0 || opts.burn_in >= opts.iterations)
    throw ConfigError("fit_basic: need iterations >= 1 and 0 <= burn_in < iterations");
  if (opts.eb_rounds < 0) throw ConfigError("fit_basic: eb_rounds must be >= 0");
  const int n = static_cast<int>(data.rows()), T = static_cast<int>(data.cols());
  const int jitters = opts.jitter_per_sweep < 0 ? n : opts.jitter_per_sweep;

  BasicResult res;
  res.prior = prior;
  res.model = model;
  ChangeMatrix z = initial_changes(n, T);
  long proposals = 0, accepted = 0;
  for (int round = 0; round <= opts.eb_rounds; ++round) {
    const SegmentCache cache(data, res.model, opts.threads);
    std::vector<ChangeMatrix> kept;
    proposals = accepted = 0;
    for (int it = 0; it < opts.iterations; ++it) {
      Rng rng = Rng::substream(opts.seed, {static_cast<std::uint64_t>(round), static_cast<std::uint64_t>(it)});
      for (int i = 0; i < n; ++i) row_gibbs(i, z, cache, res.prior, rng);
      for (int t = 1; t < T; ++t) col_gibbs(t, z, cache, res.prior, rng);
      for (int j = 0; j < jitters; ++j) {
        ++proposals;
        accepted += jitter_mh(z, cache, res.prior, rng);
      }
      if (it >= opts.burn_in) kept.push_back(z);
    }
    if (round < opts.eb_rounds) {
      EbResult eb = eb_optimize(kept, res.prior);
      res.prior.w = eb.w / eb.w.sum();
      res.eb_traces.push_back(std::move(eb.objective));
      if (opts.eb_model) res.model = eb_optimize_model(kept, data, res.model);
    } else {
      res.samples = std::move(kept);
    }
  }
  res.frequency = Matrix::Zero(n, T);
  for (const auto& s : res.samples) res.frequency += s.cast<double>();
  res.frequency /= static_cast<double>(res.samples.size());
  res.jitter_acceptance = proposals ? static_cast<double>(accepted) / static_cast<double>(proposals) : 0.0;
  return res;
}

}  // namespace regime::basic
