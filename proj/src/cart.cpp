#include "regime/cart.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "regime/errors.hpp"
#include "regime/format.hpp"

namespace regime::cart {

void TreeConfig::validate() const {
  if (max_splits < 0) throw ConfigError("max_splits must be >= 0");
  if (!(k >= 0.0)) throw ConfigError("penalty k must be >= 0");
  if (min_leaf < 1) throw ConfigError("min_leaf must be >= 1");
  if (loss.size() > 0) {
    if (loss.rows() != loss.cols() || loss.rows() < 2) throw ConfigError("loss matrix must be square with >= 2 classes");
    if (!loss.allFinite() || (loss.array() < 0.0).any()) throw ConfigError("loss entries must be finite and >= 0");
  }
}

int Tree::leaf_of(std::span<const double> x) const {
  if (x.size() < 2) throw LengthError("tree input needs two features");
  int at = 0;
  while (!nodes[static_cast<std::size_t>(at)].is_leaf()) {
    const TreeNode& nd = nodes[static_cast<std::size_t>(at)];
    at = x[static_cast<std::size_t>(nd.feature)] <= nd.threshold ? nd.left : nd.right;
  }
  return at;
}

double Tree::predict(std::span<const double> x) const { return nodes[static_cast<std::size_t>(leaf_of(x))].value; }

Vector Tree::predict(const Matrix& x) const {
  Vector out(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const std::array<double, 2> row{x(i, 0), x(i, 1)};
    out[i] = predict(row);
  }
  return out;
}

std::vector<int> Tree::leaves() const {
  std::vector<int> out;
  std::function<void(int)> walk = [&](int at) {
    const TreeNode& nd = nodes[static_cast<std::size_t>(at)];
    if (nd.is_leaf()) {
      out.push_back(at);
      return;
    }
    walk(nd.left);
    walk(nd.right);
  };
  if (!nodes.empty()) walk(0);
  return out;
}

int Tree::num_leaves() const { return static_cast<int>(leaves().size()); }

double Tree::training_cost() const {
  double s = 0.0;
  for (int l : leaves()) s += nodes[static_cast<std::size_t>(l)].r_hat;
  return s;
}

namespace {

struct Problem {
  const Matrix& x;
  const Vector& y;
  const TreeConfig& cfg;
  int classes = 0;
  Matrix loss;
};

struct Candidate {
  bool valid = false;
  double gain = 0.0;
  int feature = -1;
  double threshold = 0.0;
};

// Growth criterion of a sample set: SSE (regression) or count-weighted Gini.
double impurity_of(const Problem& p, const std::vector<int>& idx) {
  if (p.cfg.task == Task::Regression) {
    double mean = 0.0, m2 = 0.0;
    int n = 0;
    for (int i : idx) {
      ++n;
      const double d = p.y[i] - mean;
      mean += d / n;
      m2 += d * (p.y[i] - mean);
    }
    return m2;
  }
  std::vector<double> c(static_cast<std::size_t>(p.classes), 0.0);
  for (int i : idx) c[static_cast<std::size_t>(p.y[i])] += 1.0;
  const double n = static_cast<double>(idx.size());
  double sq = 0.0;
  for (double v : c) sq += v * v;
  return n - sq / n;
}

bool is_pure(const Problem& p, const std::vector<int>& idx) {
  for (int i : idx)
    if (p.y[i] != p.y[idx.front()]) return false;
  return true;
}

void fill_node(const Problem& p, const std::vector<int>& idx, TreeNode& nd) {
  nd.n = static_cast<int>(idx.size());
  if (p.cfg.task == Task::Regression) {
    double mean = 0.0;
    int n = 0;
    for (int i : idx) mean += (p.y[i] - mean) / ++n;
    double r = 0.0;
    for (int i : idx) r += (p.y[i] - mean) * (p.y[i] - mean);
    nd.value = mean;
    nd.r_hat = r;
    return;
  }
  Vector counts = Vector::Zero(p.classes);
  for (int i : idx) counts[static_cast<Eigen::Index>(p.y[i])] += 1.0;
  nd.class_share = counts / static_cast<double>(idx.size());
  // Loss-weighted vote: minimise sum_k count_k L(k, k').
  const Vector cost = p.loss.transpose() * counts;
  Eigen::Index best = 0;
  for (Eigen::Index j = 1; j < cost.size(); ++j)
    if (cost[j] < cost[best]) best = j;
  nd.value = static_cast<double>(best);
  nd.r_hat = cost[best];
}

Candidate best_split(const Problem& p, const std::vector<int>& idx) {
  Candidate best;
  const int n = static_cast<int>(idx.size());
  const int min_leaf = p.cfg.min_leaf;
  if (n < 2 * min_leaf || is_pure(p, idx)) return best;
  const double parent = impurity_of(p, idx);
  std::vector<int> order(idx);
  std::vector<double> left(static_cast<std::size_t>(n) + 1), right(static_cast<std::size_t>(n) + 1);
  for (int f = 0; f < 2; ++f) {
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return p.x(a, f) < p.x(b, f); });
    // left[m]: impurity of the first m sorted samples, right[m]: of the rest.
    if (p.cfg.task == Task::Regression) {
      double mean = 0.0, m2 = 0.0;
      left[0] = 0.0;
      for (int m = 0; m < n; ++m) {
        const double v = p.y[order[static_cast<std::size_t>(m)]];
        const double d = v - mean;
        mean += d / (m + 1);
        m2 += d * (v - mean);
        left[static_cast<std::size_t>(m) + 1] = m2;
      }
      mean = m2 = 0.0;
      right[static_cast<std::size_t>(n)] = 0.0;
      for (int m = n - 1; m >= 0; --m) {
        const double v = p.y[order[static_cast<std::size_t>(m)]];
        const double d = v - mean;
        mean += d / (n - m);
        m2 += d * (v - mean);
        right[static_cast<std::size_t>(m)] = m2;
      }
    } else {
      std::vector<double> c(static_cast<std::size_t>(p.classes), 0.0);
      double sq = 0.0;
      left[0] = 0.0;
      for (int m = 0; m < n; ++m) {
        double& ck = c[static_cast<std::size_t>(p.y[order[static_cast<std::size_t>(m)]])];
        sq += 2 * ck + 1;
        ck += 1;
        left[static_cast<std::size_t>(m) + 1] = (m + 1) - sq / (m + 1);
      }
      std::fill(c.begin(), c.end(), 0.0);
      sq = 0.0;
      right[static_cast<std::size_t>(n)] = 0.0;
      for (int m = n - 1; m >= 0; --m) {
        double& ck = c[static_cast<std::size_t>(p.y[order[static_cast<std::size_t>(m)]])];
        sq += 2 * ck + 1;
        ck += 1;
        right[static_cast<std::size_t>(m)] = (n - m) - sq / (n - m);
      }
    }
    for (int m = min_leaf; m <= n - min_leaf; ++m) {
      const double a = p.x(order[static_cast<std::size_t>(m) - 1], f), b = p.x(order[static_cast<std::size_t>(m)], f);
      if (!(a < b)) continue;
      const double gain = std::max(0.0, parent - left[static_cast<std::size_t>(m)] - right[static_cast<std::size_t>(m)]);
      if (!best.valid || gain > best.gain + 1e-12 * std::max(1.0, parent)) {
        best = {true, gain, f, a + 0.5 * (b - a)};
      }
    }
  }
  return best;
}

void check_inputs(const Matrix& x, const Vector& y, const TreeConfig& cfg) {
  cfg.validate();
  if (x.cols() != 2) throw LengthError("tree design matrix needs two columns (species order, time)");
  if (x.rows() != y.size()) throw LengthError("x and y differ in row count");
  if (x.rows() == 0) throw LengthError("tree needs at least one sample");
  if (!x.allFinite() || !y.allFinite()) throw DomainError("tree inputs must be finite");
}

}  // namespace

Tree grow_tree(const Matrix& x, const Vector& y, const TreeConfig& cfg) {
  check_inputs(x, y, cfg);
  Problem p{x, y, cfg, 0, Matrix()};
  if (cfg.task == Task::Classification) {
    for (Eigen::Index i = 0; i < y.size(); ++i)
      if (y[i] < 0 || y[i] != std::floor(y[i])) throw DomainError("class labels must be non-negative integers");
    p.classes = cfg.loss.size() ? static_cast<int>(cfg.loss.rows()) : std::max(2, static_cast<int>(y.maxCoeff()) + 1);
    if (y.maxCoeff() >= p.classes) throw DomainError("class label outside the loss matrix");
    p.loss = cfg.loss.size() ? cfg.loss : Matrix(Matrix::Ones(p.classes, p.classes) - Matrix::Identity(p.classes, p.classes));
  }
  Tree tree;
  tree.task = cfg.task;
  std::vector<std::vector<int>> members;
  std::vector<Candidate> cands;
  auto add_node = [&](std::vector<int> idx) {
    TreeNode nd;
    fill_node(p, idx, nd);
    tree.nodes.push_back(nd);
    cands.push_back(best_split(p, idx));
    members.push_back(std::move(idx));
    return static_cast<int>(tree.nodes.size()) - 1;
  };
  std::vector<int> all(static_cast<std::size_t>(x.rows()));
  std::iota(all.begin(), all.end(), 0);
  add_node(all);

  for (int s = 0; s < cfg.max_splits; ++s) {
    int pick = -1;
    for (std::size_t j = 0; j < cands.size(); ++j) {
      if (!tree.nodes[j].is_leaf() || !cands[j].valid) continue;
      const double scale = std::max(1.0, tree.nodes[j].r_hat);
      if (pick < 0 || cands[j].gain > cands[static_cast<std::size_t>(pick)].gain + 1e-12 * scale) pick = static_cast<int>(j);
    }
    if (pick < 0) break;
    const Candidate c = cands[static_cast<std::size_t>(pick)];
    std::vector<int> l, r;
    for (int i : members[static_cast<std::size_t>(pick)]) (x(i, c.feature) <= c.threshold ? l : r).push_back(i);
    const int li = add_node(std::move(l));
    const int ri = add_node(std::move(r));
    TreeNode& nd = tree.nodes[static_cast<std::size_t>(pick)];
    nd.feature = c.feature;
    nd.threshold = c.threshold;
    nd.left = li;
    nd.right = ri;
  }
  return tree;
}

Tree prune(const Tree& tree, double k) {
  if (!(k >= 0.0)) throw ConfigError("penalty k must be >= 0");
  Tree out = tree;
  std::function<double(int)> cost = [&](int at) -> double {
    TreeNode& nd = out.nodes[static_cast<std::size_t>(at)];
    if (nd.is_leaf()) return nd.r_hat + k;
    const double children = cost(nd.left) + cost(nd.right);
    if (nd.r_hat + k < children) {
      nd.left = nd.right = -1;
      nd.feature = -1;
      nd.threshold = 0.0;
      return nd.r_hat + k;
    }
    return children;
  };
  if (!out.nodes.empty()) cost(0);
  return out;
}

Tree fit_tree(const Matrix& x, const Vector& y, const TreeConfig& cfg) { return prune(grow_tree(x, y, cfg), cfg.k); }

std::vector<Rectangle> extract_partition(const Tree& tree, const Matrix& x) {
  if (x.cols() != 2 || x.rows() == 0) throw LengthError("partition needs the two-column training design");
  std::vector<Rectangle> out;
  std::function<void(int, Rectangle)> walk = [&](int at, Rectangle box) {
    const TreeNode& nd = tree.nodes[static_cast<std::size_t>(at)];
    if (nd.is_leaf()) {
      box.value = nd.value;
      box.leaf = at;
      out.push_back(box);
      return;
    }
    const auto f = static_cast<std::size_t>(nd.feature);
    Rectangle l = box, r = box;
    l.hi[f] = std::min(box.hi[f], nd.threshold);
    r.lo[f] = std::max(box.lo[f], nd.threshold);
    walk(nd.left, l);
    walk(nd.right, r);
  };
  Rectangle root;
  for (std::size_t f = 0; f < 2; ++f) {
    root.lo[f] = x.col(static_cast<Eigen::Index>(f)).minCoeff();
    root.hi[f] = x.col(static_cast<Eigen::Index>(f)).maxCoeff();
  }
  walk(0, root);
  return out;
}

std::string partition_tsv(const std::vector<Rectangle>& rects) {
  std::ostringstream os;
  os << "rect_id\tspecies_lo\tspecies_hi\ttime_lo\ttime_hi\tfitted_value\n";
  for (std::size_t j = 0; j < rects.size(); ++j) {
    const Rectangle& r = rects[j];
    os << j << '\t' << format_double(r.lo[0]) << '\t' << format_double(r.hi[0]) << '\t' << format_double(r.lo[1])
       << '\t' << format_double(r.hi[1]) << '\t' << format_double(r.value) << '\n';
  }
  return os.str();
}

HurdleFit fit_hurdle(const Matrix& x, const Vector& y, const TreeConfig& cfg) {
  check_inputs(x, y, cfg);
  if ((y.array() < 0.0).any()) throw DomainError("hurdle responses must be >= 0");
  TreeConfig bin = cfg;
  bin.task = Task::Classification;
  if (bin.loss.size() != 0 && bin.loss.rows() != 2) throw ConfigError("hurdle loss matrix must be 2 x 2");
  const Vector present = (y.array() > 0.0).cast<double>();
  HurdleFit fit{fit_tree(x, present, bin), std::nullopt, false};

  std::vector<Eigen::Index> pos;
  for (Eigen::Index i = 0; i < y.size(); ++i)
    if (y[i] > 0.0) pos.push_back(i);
  if (pos.empty()) {
    fit.conditional_absent = true;
    return fit;
  }
  Matrix xp(static_cast<Eigen::Index>(pos.size()), 2);
  Vector yp(static_cast<Eigen::Index>(pos.size()));
  for (std::size_t j = 0; j < pos.size(); ++j) {
    xp.row(static_cast<Eigen::Index>(j)) = x.row(pos[j]);
    yp[static_cast<Eigen::Index>(j)] = y[pos[j]];
  }
  TreeConfig reg = cfg;
  reg.task = Task::Regression;
  fit.conditional = fit_tree(xp, yp, reg);
  return fit;
}

void grid_design(const Matrix& values, const std::vector<int>& leaf_order, const std::vector<double>& times, Matrix& x,
                 Vector& y) {
  const auto S = values.rows(), T = values.cols();
  if (static_cast<Eigen::Index>(leaf_order.size()) != S) throw LengthError("leaf order must list every species");
  if (static_cast<Eigen::Index>(times.size()) != T) throw LengthError("one time per sample required");
  std::vector<int> position(static_cast<std::size_t>(S), -1);
  for (std::size_t j = 0; j < leaf_order.size(); ++j) {
    const int s = leaf_order[j];
    if (s < 0 || s >= S || position[static_cast<std::size_t>(s)] >= 0) throw DomainError("leaf order is not a permutation");
    position[static_cast<std::size_t>(s)] = static_cast<int>(j);
  }
  x.resize(S * T, 2);
  y.resize(S * T);
  for (Eigen::Index s = 0; s < S; ++s)
    for (Eigen::Index t = 0; t < T; ++t) {
      const Eigen::Index r = s * T + t;
      x(r, kSpeciesOrder) = position[static_cast<std::size_t>(s)];
      x(r, kTime) = times[static_cast<std::size_t>(t)];
      y[r] = values(s, t);
    }
}

}  // namespace regime::cart
