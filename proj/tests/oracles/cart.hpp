#pragma once

#include <cmath>
#include <map>
#include <random>
#include <set>

#include "regime/cart.hpp"
#include "regime/errors.hpp"

namespace oracle::cart {

using namespace regime;
using namespace regime::cart;

inline void grid(int S, int T, Matrix& x) {
  x.resize(S * T, 2);
  for (int s = 0; s < S; ++s)
    for (int t = 0; t < T; ++t) {
      x(s * T + t, 0) = s;
      x(s * T + t, 1) = t + 1;
    }
}

inline double sse(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double m = 0.0;
  for (double a : v) m += a;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double a : v) s += (a - m) * (a - m);
  return s;
}

// Smallest total SSE reachable by one more admissible split of `tree`.
inline double brute_next(const Tree& tree, const Matrix& x, const Vector& y, int min_leaf, bool& any) {
  std::map<int, std::vector<int>> members;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const std::array<double, 2> row{x(i, 0), x(i, 1)};
    members[tree.leaf_of(row)].push_back(static_cast<int>(i));
  }
  double base = 0.0;
  std::map<int, double> leaf_sse;
  for (const auto& [l, idx] : members) {
    std::vector<double> v;
    for (int i : idx) v.push_back(y[i]);
    leaf_sse[l] = sse(v);
    base += leaf_sse[l];
  }
  any = false;
  double best = base;
  for (const auto& [l, idx] : members) {
    if (leaf_sse[l] == 0.0) continue;
    for (int f = 0; f < 2; ++f) {
      std::set<double> vals;
      for (int i : idx) vals.insert(x(i, f));
      for (auto it = vals.begin(); std::next(it) != vals.end(); ++it) {
        const double thr = 0.5 * (*it + *std::next(it));
        std::vector<double> a, b;
        for (int i : idx) (x(i, f) <= thr ? a : b).push_back(y[i]);
        if (static_cast<int>(a.size()) < min_leaf || static_cast<int>(b.size()) < min_leaf) continue;
        const double tot = base - leaf_sse[l] + sse(a) + sse(b);
        if (!any || tot < best) best = tot;
        any = true;
      }
    }
  }
  return best;
}

}  // namespace oracle::cart
