#include "regime/core.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>

#include "regime/errors.hpp"

namespace regime::core {

std::size_t SeriesPanel::total_samples() const {
  std::size_t n = 0;
  for (const auto& t : times) n += t.size();
  return n;
}

void SeriesPanel::validate() const {
  if (times.size() != subjects.size() || counts.size() != subjects.size()) {
    throw LengthError("panel: subjects, times and counts must have equal length");
  }
  for (std::size_t s = 0; s < subjects.size(); ++s) {
    if (static_cast<std::size_t>(counts[s].rows()) != species.size()) {
      throw LengthError("panel: subject " + subjects[s] + " has the wrong number of species rows");
    }
    if (static_cast<std::size_t>(counts[s].cols()) != times[s].size()) {
      throw LengthError("panel: subject " + subjects[s] + " has mismatched time columns");
    }
    for (std::size_t t = 1; t < times[s].size(); ++t) {
      if (!(times[s][t] > times[s][t - 1])) {
        throw DomainError("panel: times must be strictly increasing within subject " + subjects[s]);
      }
    }
    if (!counts[s].allFinite() || (counts[s].array() < 0.0).any()) {
      throw DomainError("panel: counts must be finite and nonnegative (subject " + subjects[s] + ")");
    }
  }
}

Matrix SeriesPanel::concatenated() const {
  const auto n = static_cast<Eigen::Index>(species.size());
  Matrix out(n, static_cast<Eigen::Index>(total_samples()));
  Eigen::Index col = 0;
  for (const auto& c : counts) {
    out.middleCols(col, c.cols()) = c;
    col += c.cols();
  }
  return out;
}

TransformKind parse_transform(const std::string& name) {
  if (name == "asinh") return TransformKind::Asinh;
  if (name == "binarize") return TransformKind::Binarize;
  if (name == "difference") return TransformKind::FirstDifference;
  if (name == "binarized-difference") return TransformKind::BinarizedDifference;
  throw DomainError("unknown transform '" + name + "'");
}

std::string to_string(TransformKind kind) {
  switch (kind) {
    case TransformKind::Asinh: return "asinh";
    case TransformKind::Binarize: return "binarize";
    case TransformKind::FirstDifference: return "difference";
    case TransformKind::BinarizedDifference: return "binarized-difference";
  }
  return "?";
}

namespace {

Matrix binarize(const Matrix& m) { return (m.array() > 0.0).cast<double>(); }

Matrix difference(const Matrix& m) {
  if (m.cols() < 2) throw LengthError("first difference needs at least two timepoints");
  return m.rightCols(m.cols() - 1) - m.leftCols(m.cols() - 1);
}

}  // namespace

Matrix apply_transform(const Matrix& rows, TransformKind kind) {
  switch (kind) {
    case TransformKind::Asinh:
      return rows.unaryExpr([](double x) { return std::asinh(x); });
    case TransformKind::Binarize:
      return binarize(rows);
    case TransformKind::FirstDifference:
      return difference(rows);
    case TransformKind::BinarizedDifference:
      return difference(binarize(rows));
  }
  return rows;
}

SeriesPanel apply_transform(const SeriesPanel& panel, TransformKind kind) {
  SeriesPanel out = panel;
  for (std::size_t s = 0; s < panel.subjects.size(); ++s) {
    out.counts[s] = apply_transform(panel.counts[s], kind);
    if (kind == TransformKind::FirstDifference || kind == TransformKind::BinarizedDifference) {
      out.times[s].erase(out.times[s].begin());
    }
  }
  return out;
}

DistanceKind parse_distance(const std::string& name) {
  if (name == "euclidean") return DistanceKind::Euclidean;
  if (name == "jaccard") return DistanceKind::Jaccard;
  if (name == "manhattan") return DistanceKind::Manhattan;
  if (name == "mixture") return DistanceKind::Mixture;
  throw DomainError("unknown distance '" + name + "'");
}

Linkage parse_linkage(const std::string& name) {
  if (name == "single") return Linkage::Single;
  if (name == "complete") return Linkage::Complete;
  if (name == "average") return Linkage::Average;
  throw DomainError("unknown linkage '" + name + "'");
}

double row_distance(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& y,
                    DistanceKind kind, bool jaccard_union) {
  switch (kind) {
    case DistanceKind::Euclidean:
      return (x - y).norm();
    case DistanceKind::Manhattan:
      return (x - y).cwiseAbs().sum();
    case DistanceKind::Jaccard: {
      const auto p = x.size();
      // The printed 1 - both/p is nonzero for identical rows; pin d(x, x) = 0
      // so the result stays a metric (the triangle inequality still holds).
      if (p == 0 || x == y) return 0.0;
      int both = 0;
      int either = 0;
      for (Eigen::Index k = 0; k < p; ++k) {
        const bool a = x[k] == 1.0;
        const bool b = y[k] == 1.0;
        both += (a && b) ? 1 : 0;
        either += (a || b) ? 1 : 0;
      }
      if (jaccard_union) return either == 0 ? 0.0 : 1.0 - static_cast<double>(both) / either;
      return 1.0 - static_cast<double>(both) / static_cast<double>(p);
    }
    case DistanceKind::Mixture:
      throw DomainError("row_distance: mixture must be expanded by the caller");
  }
  return 0.0;
}

Matrix pairwise_distance(const Matrix& rows, const DistanceSpec& spec) {
  std::vector<std::pair<DistanceKind, double>> parts;
  if (spec.kind == DistanceKind::Mixture) {
    double total = 0.0;
    for (const auto& [kind, w] : spec.mixture) {
      if (kind == DistanceKind::Mixture) throw DomainError("mixture distances cannot nest");
      if (!(w >= 0.0)) throw DomainError("mixture weights must be nonnegative");
      total += w;
    }
    if (spec.mixture.empty() || std::fabs(total - 1.0) > 1e-9) {
      throw DomainError("mixture weights must sum to 1");
    }
    parts = spec.mixture;
  } else {
    parts = {{spec.kind, 1.0}};
  }
  for (const auto& part : parts) {
    if (part.first == DistanceKind::Jaccard &&
        !((rows.array() == 0.0) || (rows.array() == 1.0)).all()) {
      throw DomainError("Jaccard distance requires binary input");
    }
  }

  const auto n = rows.rows();
  Matrix d = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      double v = 0.0;
      for (const auto& [kind, w] : parts) {
        if (w == 0.0) continue;
        v += w * row_distance(rows.row(i).transpose(), rows.row(j).transpose(), kind,
                              spec.jaccard_union);
      }
      d(i, j) = v;
      d(j, i) = v;
    }
  }
  return d;
}

Dendrogram hclust(const Matrix& dist, const Matrix& values, Linkage linkage) {
  const int n = static_cast<int>(dist.rows());
  if (dist.cols() != dist.rows()) throw LengthError("hclust: distance matrix must be square");
  if (values.rows() != dist.rows()) throw LengthError("hclust: values must have one row per series");

  Dendrogram tree;
  tree.num_leaves = n;
  if (n == 0) return tree;
  if (n == 1) {
    tree.leaf_order = {0};
    return tree;
  }

  // Active clusters: node id, member leaves, and the smallest member index
  // (used for deterministic tie-breaking).
  struct Cluster {
    int node;
    std::vector<int> leaves;
    double value_sum;
    double value_count;
    int min_leaf;
  };
  std::vector<Cluster> active;
  active.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    active.push_back({i, {i}, values.row(i).sum(), static_cast<double>(values.cols()), i});
  }
  Matrix d = dist;

  // Per node: mean value and children, used to build the in-order traversal.
  std::vector<double> node_mean(static_cast<std::size_t>(2 * n - 1));
  std::vector<int> node_min_leaf(static_cast<std::size_t>(2 * n - 1));
  for (int i = 0; i < n; ++i) {
    node_mean[static_cast<std::size_t>(i)] =
        values.cols() > 0 ? values.row(i).mean() : 0.0;
    node_min_leaf[static_cast<std::size_t>(i)] = i;
  }

  // Distances between active clusters are kept in d indexed by each
  // cluster's position in `active`; removed entries are swapped out.
  for (int step = 0; step < n - 1; ++step) {
    const auto m = static_cast<int>(active.size());
    int bi = -1;
    int bj = -1;
    double best = std::numeric_limits<double>::infinity();
    std::pair<int, int> best_key{n, n};
    for (int i = 0; i < m; ++i) {
      for (int j = i + 1; j < m; ++j) {
        const double v = d(i, j);
        std::pair<int, int> key = std::minmax(active[static_cast<std::size_t>(i)].min_leaf,
                                              active[static_cast<std::size_t>(j)].min_leaf);
        if (v < best || (v == best && key < best_key)) {
          best = v;
          best_key = key;
          bi = i;
          bj = j;
        }
      }
    }

    Cluster& a = active[static_cast<std::size_t>(bi)];
    Cluster& b = active[static_cast<std::size_t>(bj)];
    const double mean_a = a.value_count > 0 ? a.value_sum / a.value_count : 0.0;
    const double mean_b = b.value_count > 0 ? b.value_sum / b.value_count : 0.0;
    bool a_left = mean_a > mean_b || (mean_a == mean_b && a.min_leaf < b.min_leaf);
    const int node = n + step;
    Merge merge{a_left ? a.node : b.node, a_left ? b.node : a.node, best,
                static_cast<int>(a.leaves.size() + b.leaves.size())};
    tree.merges.push_back(merge);

    // Lance-Williams update into slot bi.
    const double na = static_cast<double>(a.leaves.size());
    const double nb = static_cast<double>(b.leaves.size());
    for (int k = 0; k < m; ++k) {
      if (k == bi || k == bj) continue;
      double v = 0.0;
      switch (linkage) {
        case Linkage::Single: v = std::min(d(bi, k), d(bj, k)); break;
        case Linkage::Complete: v = std::max(d(bi, k), d(bj, k)); break;
        case Linkage::Average: v = (na * d(bi, k) + nb * d(bj, k)) / (na + nb); break;
      }
      d(bi, k) = v;
      d(k, bi) = v;
    }
    a.leaves.insert(a.leaves.end(), b.leaves.begin(), b.leaves.end());
    a.value_sum += b.value_sum;
    a.value_count += b.value_count;
    a.min_leaf = std::min(a.min_leaf, b.min_leaf);
    a.node = node;
    node_mean[static_cast<std::size_t>(node)] = a.value_count > 0 ? a.value_sum / a.value_count : 0.0;
    node_min_leaf[static_cast<std::size_t>(node)] = a.min_leaf;

    // Remove bj by moving the last cluster into its slot.
    const int last = m - 1;
    if (bj != last) {
      active[static_cast<std::size_t>(bj)] = std::move(active[static_cast<std::size_t>(last)]);
      d.row(bj).head(m) = d.row(last).head(m);
      d.col(bj).head(m) = d.col(last).head(m);
      d(bj, bj) = 0.0;
    }
    active.pop_back();
  }

  // In-order traversal from the root.
  tree.leaf_order.reserve(static_cast<std::size_t>(n));
  std::vector<int> stack{2 * n - 2};
  while (!stack.empty()) {
    const int node = stack.back();
    stack.pop_back();
    if (node < n) {
      tree.leaf_order.push_back(node);
      continue;
    }
    const Merge& mg = tree.merges[static_cast<std::size_t>(node - n)];
    stack.push_back(mg.right);
    stack.push_back(mg.left);
  }
  return tree;
}

std::vector<int> cut_tree(const Dendrogram& tree, int k) {
  const int n = tree.num_leaves;
  if (k < 1 || k > n) throw RangeError("cut_tree: k must lie in [1, number of leaves]");

  // Union-find over the first n - k merges.
  std::vector<int> parent(static_cast<std::size_t>(2 * n - 1));
  std::iota(parent.begin(), parent.end(), 0);
  std::function<int(int)> find = [&](int x) {
    while (parent[static_cast<std::size_t>(x)] != x) {
      parent[static_cast<std::size_t>(x)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
      x = parent[static_cast<std::size_t>(x)];
    }
    return x;
  };
  for (int m = 0; m < n - k; ++m) {
    const Merge& mg = tree.merges[static_cast<std::size_t>(m)];
    const int node = n + m;
    parent[static_cast<std::size_t>(find(mg.left))] = node;
    parent[static_cast<std::size_t>(find(mg.right))] = node;
  }

  std::vector<int> labels(static_cast<std::size_t>(n), -1);
  std::vector<int> root_label(static_cast<std::size_t>(2 * n - 1), -1);
  int next = 0;
  for (int leaf : tree.leaf_order) {
    const int root = find(leaf);
    if (root_label[static_cast<std::size_t>(root)] < 0) root_label[static_cast<std::size_t>(root)] = next++;
    labels[static_cast<std::size_t>(leaf)] = root_label[static_cast<std::size_t>(root)];
  }
  return labels;
}

SummaryResult cluster_summaries(const SeriesPanel& panel, const std::vector<int>& labels,
                                std::optional<int> num_clusters) {
  if (labels.size() != panel.num_species()) {
    throw LengthError("cluster_summaries: need one label per species");
  }
  int k = num_clusters.value_or(0);
  for (int l : labels) {
    if (l < 0) throw DomainError("cluster_summaries: labels must be nonnegative");
    k = std::max(k, l + 1);
  }

  SummaryResult result;
  for (int c = 0; c < k; ++c) {
    std::vector<Eigen::Index> members;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == c) members.push_back(static_cast<Eigen::Index>(i));
    }
    if (members.empty()) {
      result.warnings.push_back("cluster " + std::to_string(c) + " has no members; skipped");
      continue;
    }
    for (std::size_t s = 0; s < panel.num_subjects(); ++s) {
      const Matrix& counts = panel.counts[s];
      ClusterSummary summary;
      summary.cluster = c;
      summary.subject = panel.subjects[s];
      summary.times = panel.times[s];
      for (Eigen::Index t = 0; t < counts.cols(); ++t) {
        int positive = 0;
        double positive_sum = 0.0;
        for (Eigen::Index i : members) {
          const double v = counts(i, t);
          if (v > 0.0) {
            ++positive;
            positive_sum += v;
          }
        }
        summary.presence.push_back(static_cast<double>(positive) / static_cast<double>(members.size()));
        summary.conditional_mean.push_back(
            positive > 0 ? std::optional<double>(positive_sum / positive) : std::nullopt);
      }
      result.summaries.push_back(std::move(summary));
    }
  }
  return result;
}

}  // namespace regime::core
