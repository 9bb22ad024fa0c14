#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "regime/core.hpp"
#include "regime/errors.hpp"

using namespace regime;
using namespace regime::core;

namespace {

// Naive agglomeration: cluster distances recomputed from the raw matrix each
// step (no Lance-Williams), children ordered by mean value. Returns leaf order.
std::vector<int> naive_order(const Matrix& dist, const Matrix& values, Linkage linkage) {
  struct Node {
    std::vector<int> leaves;
    std::vector<int> order;
  };
  std::vector<Node> nodes;
  for (int i = 0; i < dist.rows(); ++i) nodes.push_back({{i}, {i}});
  auto cluster_dist = [&](const Node& a, const Node& b) {
    double sum = 0, mn = 1e300, mx = -1e300;
    for (int i : a.leaves)
      for (int j : b.leaves) {
        sum += dist(i, j);
        mn = std::min(mn, dist(i, j));
        mx = std::max(mx, dist(i, j));
      }
    if (linkage == Linkage::Single) return mn;
    if (linkage == Linkage::Complete) return mx;
    return sum / static_cast<double>(a.leaves.size() * b.leaves.size());
  };
  auto mean = [&](const Node& a) {
    double s = 0;
    for (int i : a.leaves) s += values.row(i).sum();
    return s / static_cast<double>(a.leaves.size() * values.cols());
  };
  while (nodes.size() > 1) {
    std::size_t bi = 0, bj = 1;
    double best = 1e300;
    for (std::size_t i = 0; i < nodes.size(); ++i)
      for (std::size_t j = i + 1; j < nodes.size(); ++j) {
        const double d = cluster_dist(nodes[i], nodes[j]);
        if (d < best) {
          best = d;
          bi = i;
          bj = j;
        }
      }
    Node a = nodes[bi], b = nodes[bj];
    if (mean(b) > mean(a)) std::swap(a, b);
    Node merged;
    merged.leaves = a.leaves;
    merged.leaves.insert(merged.leaves.end(), b.leaves.begin(), b.leaves.end());
    merged.order = a.order;
    merged.order.insert(merged.order.end(), b.order.begin(), b.order.end());
    nodes.erase(nodes.begin() + static_cast<long>(bj));
    nodes[bi] = merged;
  }
  return nodes[0].order;
}

}  // namespace

TEST_CASE("asinh and binarize") {
  Matrix m(1, 3);
  m << 0.0, 1.0, 2.5;
  Matrix a = apply_transform(m, TransformKind::Asinh);
  CHECK(a(0, 0) == 0.0);
  CHECK(a(0, 1) == doctest::Approx(std::log(1.0 + std::sqrt(2.0))).epsilon(1e-14));
  CHECK(a(0, 1) == doctest::Approx(0.88137).epsilon(1e-5));

  Matrix b(1, 3);
  b << 0.0, 2.5, 0.1;
  Matrix bb = apply_transform(b, TransformKind::Binarize);
  CHECK(bb(0, 0) == 0.0);
  CHECK(bb(0, 1) == 1.0);
  CHECK(bb(0, 2) == 1.0);
}

TEST_CASE("asinh is odd and strictly increasing") {
  std::mt19937_64 gen(7);
  std::normal_distribution<double> nd(0.0, 20.0);
  for (int i = 0; i < 200; ++i) {
    double x = nd(gen), y = nd(gen);
    Matrix m(1, 3);
    m << x, -x, y;
    Matrix a = apply_transform(m, TransformKind::Asinh);
    CHECK(a(0, 0) == doctest::Approx(-a(0, 1)).epsilon(1e-15));
    if (x < y) CHECK(a(0, 0) < a(0, 2));
    if (x > y) CHECK(a(0, 0) > a(0, 2));
  }
}

TEST_CASE("differencing shapes") {
  Matrix m(2, 4);
  m << 0, 1, 3, 0, 2, 2, 0, 5;
  Matrix d = apply_transform(m, TransformKind::FirstDifference);
  CHECK(d.cols() == 3);
  CHECK(d(0, 1) == 2.0);
  Matrix bd = apply_transform(m, TransformKind::BinarizedDifference);
  CHECK(bd(0, 0) == 1.0);
  CHECK(bd(0, 2) == -1.0);
  CHECK(bd(1, 1) == -1.0);
  CHECK(bd(1, 2) == 1.0);
  Matrix one(2, 1);
  one.setZero();
  CHECK_THROWS_AS(apply_transform(one, TransformKind::FirstDifference), LengthError);

  SeriesPanel panel;
  panel.subjects = {"a"};
  panel.species = {"s1", "s2"};
  panel.times = {{0, 1, 2, 3}};
  panel.counts = {m};
  panel.validate();
  SeriesPanel out = apply_transform(panel, TransformKind::FirstDifference);
  CHECK(out.times[0] == std::vector<double>{1, 2, 3});
  CHECK(out.counts[0].cols() == 3);
}

TEST_CASE("panel validation") {
  SeriesPanel p;
  p.subjects = {"a"};
  p.species = {"s"};
  p.times = {{0, 0}};
  p.counts = {Matrix::Zero(1, 2)};
  CHECK_THROWS_AS(p.validate(), DomainError);
  p.times = {{0, 1}};
  p.counts[0](0, 0) = -1;
  CHECK_THROWS_AS(p.validate(), DomainError);
}

TEST_CASE("distance examples") {
  Matrix x(2, 4);
  x << 1, 0, 1, 0, 1, 1, 0, 0;
  DistanceSpec jac{DistanceKind::Jaccard, {}, false};
  CHECK(pairwise_distance(x, jac)(0, 1) == doctest::Approx(0.75));
  DistanceSpec jac_union{DistanceKind::Jaccard, {}, true};
  CHECK(pairwise_distance(x, jac_union)(0, 1) == doctest::Approx(1.0 - 1.0 / 3.0));

  Matrix same(2, 2);
  same << 1, 0, 1, 0;
  CHECK(pairwise_distance(same, DistanceSpec{})(0, 1) == 0.0);
  DistanceSpec mix{DistanceKind::Mixture,
                   {{DistanceKind::Euclidean, 0.5}, {DistanceKind::Jaccard, 0.5}}, false};
  CHECK(pairwise_distance(same, mix)(0, 1) == 0.0);
  CHECK(pairwise_distance(same, jac)(0, 1) == 0.0);

  Matrix nonbin(2, 2);
  nonbin << 0.5, 0, 1, 0;
  CHECK_THROWS_AS(pairwise_distance(nonbin, jac), DomainError);
  DistanceSpec bad{DistanceKind::Mixture, {{DistanceKind::Euclidean, 0.4}}, false};
  CHECK_THROWS_AS(pairwise_distance(same, bad), DomainError);
}

TEST_CASE("distance axioms and mixture triangle inequality") {
  std::mt19937_64 gen(11);
  std::bernoulli_distribution coin(0.4);
  DistanceSpec mix{DistanceKind::Mixture,
                   {{DistanceKind::Euclidean, 0.3},
                    {DistanceKind::Manhattan, 0.3},
                    {DistanceKind::Jaccard, 0.4}},
                   false};
  for (int rep = 0; rep < 100; ++rep) {
    Matrix rows(3, 8);
    for (int i = 0; i < 3; ++i)
      for (int k = 0; k < 8; ++k) rows(i, k) = coin(gen) ? 1.0 : 0.0;
    Matrix d = pairwise_distance(rows, mix);
    for (int i = 0; i < 3; ++i) {
      CHECK(d(i, i) == 0.0);
      for (int j = 0; j < 3; ++j) {
        CHECK(d(i, j) == d(j, i));
        CHECK(d(i, j) >= 0.0);
      }
    }
    CHECK(d(0, 2) <= d(0, 1) + d(1, 2) + 1e-12);
    CHECK(d(0, 1) <= d(0, 2) + d(2, 1) + 1e-12);
    CHECK(d(1, 2) <= d(1, 0) + d(0, 2) + 1e-12);
  }
}

TEST_CASE("hclust on scalar series 0, 1, 10") {
  Matrix values(3, 1);
  values << 0, 1, 10;
  Matrix dist = pairwise_distance(values, DistanceSpec{});
  Dendrogram tree = hclust(dist, values, Linkage::Average);
  REQUIRE(tree.merges.size() == 2);
  CHECK(std::min(tree.merges[0].left, tree.merges[0].right) == 0);
  CHECK(std::max(tree.merges[0].left, tree.merges[0].right) == 1);
  CHECK(tree.merges[0].left == 1);  // larger mean on the left
  CHECK(tree.merges[1].left == 2);
  CHECK(tree.leaf_order == std::vector<int>{2, 1, 0});
  CHECK(tree.leaf_order == naive_order(dist, values, Linkage::Average));
  CHECK(tree.merges[0].height == doctest::Approx(1.0));
  CHECK(tree.merges[1].height == doctest::Approx(9.5));

  auto two = cut_tree(tree, 2);
  CHECK(two[0] == two[1]);
  CHECK(two[2] != two[0]);
  auto all = cut_tree(tree, 3);
  CHECK(all[0] != all[1]);
  CHECK(all[1] != all[2]);
  CHECK(all[0] != all[2]);
  auto one = cut_tree(tree, 1);
  CHECK(one == std::vector<int>{0, 0, 0});
  CHECK_THROWS_AS(cut_tree(tree, 0), RangeError);
  CHECK_THROWS_AS(cut_tree(tree, 4), RangeError);
}

TEST_CASE("hclust degenerate and two-series trees") {
  Matrix v1(1, 2);
  v1 << 1, 2;
  Dendrogram t1 = hclust(Matrix::Zero(1, 1), v1);
  CHECK(t1.merges.empty());
  CHECK(t1.leaf_order == std::vector<int>{0});

  Matrix v2(2, 1);
  v2 << 3, 5;
  Dendrogram t2 = hclust(pairwise_distance(v2, DistanceSpec{}), v2);
  REQUIRE(t2.merges.size() == 1);
  CHECK(t2.merges[0].left == 1);
  CHECK(t2.leaf_order == std::vector<int>{1, 0});
}

TEST_CASE("hclust matches the naive oracle and is permutation invariant") {
  std::mt19937_64 gen(3);
  std::uniform_real_distribution<double> unif(0.0, 10.0);
  for (Linkage linkage : {Linkage::Single, Linkage::Complete, Linkage::Average}) {
    for (int rep = 0; rep < 20; ++rep) {
      const int n = 7;
      Matrix values(n, 4);
      for (int i = 0; i < n; ++i)
        for (int k = 0; k < 4; ++k) values(i, k) = unif(gen);
      Matrix dist = pairwise_distance(values, DistanceSpec{});
      Dendrogram tree = hclust(dist, values, linkage);
      CHECK(tree.leaf_order == naive_order(dist, values, linkage));

      std::vector<int> sorted = tree.leaf_order;
      std::sort(sorted.begin(), sorted.end());
      std::vector<int> iota(n);
      std::iota(iota.begin(), iota.end(), 0);
      CHECK(sorted == iota);

      // Heights nondecreasing along root paths.
      for (std::size_t m = 0; m < tree.merges.size(); ++m) {
        for (int child : {tree.merges[m].left, tree.merges[m].right}) {
          if (child >= n) CHECK(tree.merges[static_cast<std::size_t>(child - n)].height <= tree.merges[m].height + 1e-12);
        }
      }

      std::vector<int> perm = iota;
      std::shuffle(perm.begin(), perm.end(), gen);
      Matrix pv(n, 4);
      for (int i = 0; i < n; ++i) pv.row(i) = values.row(perm[static_cast<std::size_t>(i)]);
      Dendrogram pt = hclust(pairwise_distance(pv, DistanceSpec{}), pv, linkage);
      std::vector<int> mapped;
      for (int leaf : pt.leaf_order) mapped.push_back(perm[static_cast<std::size_t>(leaf)]);
      CHECK(mapped == tree.leaf_order);
    }
  }
}

TEST_CASE("left subtree has the larger mean at every node") {
  std::mt19937_64 gen(5);
  std::exponential_distribution<double> ex(1.0);
  const int n = 12;
  Matrix values(n, 6);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < 6; ++k) values(i, k) = ex(gen);
  Dendrogram tree = hclust(pairwise_distance(values, DistanceSpec{}), values);
  std::function<std::vector<int>(int)> leaves = [&](int node) -> std::vector<int> {
    if (node < n) return {node};
    auto l = leaves(tree.merges[static_cast<std::size_t>(node - n)].left);
    auto r = leaves(tree.merges[static_cast<std::size_t>(node - n)].right);
    l.insert(l.end(), r.begin(), r.end());
    return l;
  };
  auto mean = [&](const std::vector<int>& ls) {
    double s = 0;
    for (int i : ls) s += values.row(i).mean();
    return s / static_cast<double>(ls.size());
  };
  for (const auto& m : tree.merges) CHECK(mean(leaves(m.left)) >= mean(leaves(m.right)));
}

TEST_CASE("cluster summaries") {
  SeriesPanel p;
  p.subjects = {"a"};
  p.species = {"s1", "s2", "s3"};
  p.times = {{1, 2}};
  Matrix c(3, 2);
  c << 0, 2, 0, 4, 7, 0;
  p.counts = {c};
  auto res = cluster_summaries(p, {0, 0, 1}, 3);
  REQUIRE(res.summaries.size() == 2);
  CHECK(res.warnings.size() == 1);
  const auto& s0 = res.summaries[0];
  CHECK(s0.presence[0] == 0.0);
  CHECK(!s0.conditional_mean[0].has_value());
  CHECK(s0.presence[1] == 1.0);
  CHECK(*s0.conditional_mean[1] == 3.0);
  const auto& s1 = res.summaries[1];
  CHECK(s1.presence[0] == 1.0);
  CHECK(*s1.conditional_mean[0] == 7.0);
  CHECK(s1.presence[1] == 0.0);
  CHECK(!s1.conditional_mean[1].has_value());
  CHECK_THROWS_AS(cluster_summaries(p, {0, 1}), LengthError);
}

TEST_CASE("presence equals member-count ratio") {
  std::mt19937_64 gen(9);
  std::bernoulli_distribution coin(0.5);
  SeriesPanel p;
  p.subjects = {"a", "b"};
  p.species.resize(9);
  for (int i = 0; i < 9; ++i) p.species[static_cast<std::size_t>(i)] = "s" + std::to_string(i);
  for (int s = 0; s < 2; ++s) {
    p.times.push_back({0, 1, 2, 3, 4});
    Matrix m(9, 5);
    for (int i = 0; i < 9; ++i)
      for (int t = 0; t < 5; ++t) m(i, t) = coin(gen) ? 1.5 * (i + 1) : 0.0;
    p.counts.push_back(m);
  }
  std::vector<int> labels{0, 1, 2, 0, 1, 2, 0, 1, 2};
  auto res = cluster_summaries(p, labels);
  for (const auto& s : res.summaries) {
    const Matrix& m = p.counts[s.subject == "a" ? 0 : 1];
    for (int t = 0; t < 5; ++t) {
      int pos = 0;
      for (int i = 0; i < 9; ++i)
        if (labels[static_cast<std::size_t>(i)] == s.cluster && m(i, t) > 0) ++pos;
      CHECK(s.presence[static_cast<std::size_t>(t)] == static_cast<double>(pos) / 3.0);
    }
  }
}
