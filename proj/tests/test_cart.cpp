#include <cmath>
#include <map>
#include <random>
#include <set>

#include "doctest.h"
#include "regime/cart.hpp"
#include "regime/errors.hpp"
#include "oracles/cart.hpp"

using namespace regime;
using namespace regime::cart;

using namespace oracle::cart;

TEST_CASE("constant response gives a root leaf") {
  Matrix x;
  grid(3, 4, x);
  const Tree t = fit_tree(x, Vector::Constant(12, 2.5), TreeConfig{});
  CHECK(t.num_leaves() == 1);
  CHECK(t.root().value == 2.5);
  Matrix flat = Matrix::Zero(12, 2);
  Vector y = Vector::LinSpaced(12, 0, 11);
  CHECK(fit_tree(flat, y, TreeConfig{}).num_leaves() == 1);
}

TEST_CASE("step in time gives a single split at the step") {
  Matrix x;
  grid(1, 10, x);
  Vector y(10);
  for (int t = 0; t < 10; ++t) y[t] = t + 1 > 5 ? 1.0 : 0.0;
  TreeConfig cfg;
  const Tree t = fit_tree(x, y, cfg);
  REQUIRE(t.num_leaves() == 2);
  CHECK(t.root().feature == kTime);
  CHECK(t.root().threshold == 5.5);
  CHECK(t.training_cost() == 0.0);
  // The split removes 2.5 of squared error and costs one extra k.
  cfg.k = 2.6;
  CHECK(fit_tree(x, y, cfg).num_leaves() == 1);
  cfg.k = 2.4;
  CHECK(fit_tree(x, y, cfg).num_leaves() == 2);
  cfg.k = 1e300;
  CHECK(fit_tree(x, y, cfg).num_leaves() == 1);
}

TEST_CASE("checkerboard is reproduced by a two-level tree") {
  Matrix x;
  grid(2, 2, x);
  Vector y(4);
  y << 0, 1, 1, 0;
  TreeConfig cfg;
  cfg.min_leaf = 1;
  const Tree t = fit_tree(x, y, cfg);
  CHECK(t.num_leaves() == 4);
  CHECK((t.predict(x) - y).cwiseAbs().maxCoeff() == 0.0);
  CHECK(t.root().feature == kSpeciesOrder);  // tie goes to the lower feature
}

TEST_CASE("greedy split is the global argmin") {
  std::mt19937_64 gen(1);
  std::normal_distribution<double> nd;
  for (int rep = 0; rep < 40; ++rep) {
    const int S = 2 + rep % 5, T = 2 + (rep / 5) % 5;
    Matrix x;
    grid(S, T, x);
    Vector y(S * T);
    for (int i = 0; i < S * T; ++i) y[i] = std::round(2 * nd(gen)) + (x(i, 1) > T / 2 ? 1.5 : 0.0);
    TreeConfig cfg;
    cfg.min_leaf = 1 + rep % 3;
    double prev = 1e300;
    for (int m = 0; m < 8; ++m) {
      cfg.max_splits = m;
      const Tree a = grow_tree(x, y, cfg);
      cfg.max_splits = m + 1;
      const Tree b = grow_tree(x, y, cfg);
      bool any = false;
      const double best = brute_next(a, x, y, cfg.min_leaf, any);
      if (!any) {
        CHECK(b.num_leaves() == a.num_leaves());
        break;
      }
      CHECK(b.num_leaves() == a.num_leaves() + 1);
      CHECK(std::fabs(b.training_cost() - best) <= 1e-9 * std::max(1.0, best));
      CHECK(a.training_cost() <= prev + 1e-12);
      prev = a.training_cost();
    }
  }
}

TEST_CASE("leaf constants and pruning monotonicity") {
  std::mt19937_64 gen(2);
  std::normal_distribution<double> nd;
  Matrix x;
  grid(6, 6, x);
  for (int rep = 0; rep < 10; ++rep) {
    Vector y(36);
    for (int i = 0; i < 36; ++i) y[i] = nd(gen) + (x(i, 0) < 3 ? 2.0 : 0.0);
    TreeConfig cfg;
    cfg.max_splits = 12;
    cfg.min_leaf = 2;
    const Tree grown = grow_tree(x, y, cfg);
    for (int l : grown.leaves()) {
      double s = 0.0;
      int n = 0;
      for (int i = 0; i < 36; ++i) {
        const std::array<double, 2> row{x(i, 0), x(i, 1)};
        if (grown.leaf_of(row) == l) {
          s += y[i];
          ++n;
        }
      }
      CHECK(n >= cfg.min_leaf);
      CHECK(std::fabs(grown.nodes[static_cast<std::size_t>(l)].value - s / n) < 1e-12);
    }
    int prev = grown.num_leaves() + 1;
    for (double k : {0.0, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 50.0, 1e6}) {
      const int leaves = prune(grown, k).num_leaves();
      CHECK(leaves <= prev);
      prev = leaves;
    }
    CHECK(prev == 1);
  }
}

TEST_CASE("partition rectangles tile the grid") {
  std::mt19937_64 gen(3);
  std::normal_distribution<double> nd;
  Matrix x;
  grid(5, 7, x);
  for (int rep = 0; rep < 20; ++rep) {
    Vector y(35);
    for (int i = 0; i < 35; ++i) y[i] = nd(gen);
    TreeConfig cfg;
    cfg.max_splits = rep % 8;
    cfg.min_leaf = 1 + rep % 3;
    const Tree t = fit_tree(x, y, cfg);
    const auto rects = extract_partition(t, x);
    CHECK(static_cast<int>(rects.size()) == t.num_leaves());
    double area = 0.0;
    for (std::size_t a = 0; a < rects.size(); ++a) {
      area += (rects[a].hi[0] - rects[a].lo[0]) * (rects[a].hi[1] - rects[a].lo[1]);
      for (std::size_t b = a + 1; b < rects.size(); ++b) {
        const double ox = std::min(rects[a].hi[0], rects[b].hi[0]) - std::max(rects[a].lo[0], rects[b].lo[0]);
        const double oy = std::min(rects[a].hi[1], rects[b].hi[1]) - std::max(rects[a].lo[1], rects[b].lo[1]);
        CHECK(!(ox > 0 && oy > 0));
      }
    }
    CHECK(area == doctest::Approx(4.0 * 6.0));
    for (int i = 0; i < 35; ++i) {
      const std::array<double, 2> row{x(i, 0), x(i, 1)};
      const int leaf = t.leaf_of(row);
      int inside = 0;
      for (const auto& r : rects) {
        if (r.lo[0] <= row[0] && row[0] <= r.hi[0] && r.lo[1] <= row[1] && row[1] <= r.hi[1]) {
          ++inside;
          if (r.leaf == leaf) CHECK(r.value == t.predict(row));
        }
      }
      CHECK(inside >= 1);
    }
  }
  const Tree root = fit_tree(x, Vector::Zero(35), TreeConfig{});
  const auto one = extract_partition(root, x);
  REQUIRE(one.size() == 1u);
  CHECK(one[0].lo == std::array<double, 2>{0, 1});
  CHECK(one[0].hi == std::array<double, 2>{4, 7});
  const std::string tsv = partition_tsv(one);
  CHECK(tsv == "rect_id\tspecies_lo\tspecies_hi\ttime_lo\ttime_hi\tfitted_value\n0\t0\t4\t1\t7\t0\n");
}

TEST_CASE("classification uses a loss-weighted vote") {
  Matrix x = Matrix::Zero(5, 2);
  Vector y(5);
  y << 0, 0, 0, 1, 1;
  TreeConfig cfg;
  cfg.task = Task::Classification;
  const Tree plain = fit_tree(x, y, cfg);
  CHECK(plain.root().value == 0.0);
  CHECK(plain.root().r_hat == 2.0);
  cfg.loss = Matrix(2, 2);
  cfg.loss << 0, 1, 5, 0;  // calling a 1 a 0 costs 5
  const Tree weighted = fit_tree(x, y, cfg);
  CHECK(weighted.root().value == 1.0);
  CHECK(weighted.root().r_hat == 3.0);
  CHECK(weighted.root().class_share[1] == doctest::Approx(0.4));
}

TEST_CASE("hurdle decomposition") {
  Matrix x;
  grid(4, 10, x);
  TreeConfig cfg;
  cfg.min_leaf = 3;
  SUBCASE("all present") {
    const HurdleFit h = fit_hurdle(x, Vector::Constant(40, 3.0), cfg);
    CHECK(h.presence.num_leaves() == 1);
    CHECK(h.presence.root().class_share[1] == 1.0);
    REQUIRE(h.conditional.has_value());
    CHECK(h.conditional->root().value == 3.0);
  }
  SUBCASE("all absent") {
    const HurdleFit h = fit_hurdle(x, Vector::Zero(40), cfg);
    CHECK(h.presence.num_leaves() == 1);
    CHECK(h.presence.root().class_share[1] == 0.0);
    CHECK(h.conditional_absent);
    CHECK(!h.conditional.has_value());
  }
  SUBCASE("mixed grid matches separate fits") {
    std::mt19937_64 gen(4);
    std::uniform_real_distribution<double> u(0, 1);
    Vector y(40);
    for (int i = 0; i < 40; ++i) y[i] = (x(i, 1) > 5 && u(gen) < 0.8) ? 1 + 5 * u(gen) : 0.0;
    const HurdleFit h = fit_hurdle(x, y, cfg);
    TreeConfig bin = cfg;
    bin.task = Task::Classification;
    const Tree pres = fit_tree(x, (y.array() > 0).cast<double>().matrix(), bin);
    CHECK(h.presence.predict(x) == pres.predict(x));
    std::vector<int> pos;
    for (int i = 0; i < 40; ++i)
      if (y[i] > 0) pos.push_back(i);
    Matrix xp(static_cast<Eigen::Index>(pos.size()), 2);
    Vector yp(static_cast<Eigen::Index>(pos.size()));
    for (std::size_t j = 0; j < pos.size(); ++j) {
      xp.row(static_cast<Eigen::Index>(j)) = x.row(pos[j]);
      yp[static_cast<Eigen::Index>(j)] = y[pos[j]];
    }
    REQUIRE(h.conditional.has_value());
    CHECK(h.conditional->predict(x) == fit_tree(xp, yp, cfg).predict(x));
    CHECK(h.presence.num_leaves() >= 2);
  }
  CHECK_THROWS_AS(fit_hurdle(x, Vector::Constant(40, -1.0), cfg), DomainError);
}

TEST_CASE("grid design and validation") {
  Matrix v(2, 3);
  v << 1, 2, 3, 4, 5, 6;
  Matrix x;
  Vector y;
  grid_design(v, {1, 0}, {10, 20, 30}, x, y);
  CHECK(x(0, 0) == 1);  // species 0 sits second in the order
  CHECK(x(3, 0) == 0);
  CHECK(x(4, 1) == 20);
  CHECK(y[4] == 5);
  CHECK_THROWS_AS(grid_design(v, {0, 0}, {10, 20, 30}, x, y), DomainError);
  TreeConfig bad;
  bad.min_leaf = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = TreeConfig{};
  bad.k = -1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_THROWS_AS(fit_tree(Matrix::Zero(3, 3), Vector::Zero(3), TreeConfig{}), LengthError);
}
