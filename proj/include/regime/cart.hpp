#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "regime/linalg.hpp"

namespace regime::cart {

enum class Task { Regression, Classification };

/// Feature columns of the design matrix.
enum Feature : int { kSpeciesOrder = 0, kTime = 1 };

struct TreeConfig {
  int max_splits = 10;
  double k = 0.0;  // pruning penalty per leaf
  int min_leaf = 5;
  Task task = Task::Regression;
  /// loss(k, k') for predicting k' when the truth is k; empty means 0/1 loss.
  /// Classes are 0..K-1 with K = loss.rows() (or max label + 1 when empty).
  Matrix loss;

  void validate() const;
};

struct TreeNode {
  int feature = -1;  // -1 at leaves
  double threshold = 0.0;
  int left = -1, right = -1;
  double value = 0.0;  // mean (regression) or voted class (classification)
  int n = 0;
  double r_hat = 0.0;  // cost of this node as a leaf
  Vector class_share;  // classification only: class proportions

  bool is_leaf() const { return left < 0; }
};

/// Nodes in creation order; nodes[0] is the root. Pruned-away nodes stay in
/// the vector but are unreachable.
struct Tree {
  std::vector<TreeNode> nodes;
  Task task = Task::Regression;

  const TreeNode& root() const { return nodes.front(); }
  int leaf_of(std::span<const double> x) const;
  double predict(std::span<const double> x) const;
  Vector predict(const Matrix& x) const;
  int num_leaves() const;
  int num_splits() const { return num_leaves() - 1; }
  std::vector<int> leaves() const;  // reachable leaves, left to right
  /// Sum of leaf r_hat over reachable leaves.
  double training_cost() const;
};

/// Greedy growth only: each step takes the split with the largest cost
/// reduction over every (leaf, feature, threshold). Splits that do not reduce
/// the cost are still taken while the leaf is impure. Ties go to the earliest
/// leaf, then the lower feature, then the lower threshold.
Tree grow_tree(const Matrix& x, const Vector& y, const TreeConfig& cfg);

/// Bottom-up: a split collapses when r_hat + k < summed child cost.
Tree prune(const Tree& tree, double k);

/// grow_tree then prune with cfg.k.
Tree fit_tree(const Matrix& x, const Vector& y, const TreeConfig& cfg);

struct Rectangle {
  std::array<double, 2> lo{}, hi{};
  double value = 0.0;
  int leaf = -1;
};

/// Leaf rectangles tiling the bounding box of `x`; a point on a threshold
/// belongs to the left (lower) side.
std::vector<Rectangle> extract_partition(const Tree& tree, const Matrix& x);

/// rect_id, species_lo, species_hi, time_lo, time_hi, fitted_value
std::string partition_tsv(const std::vector<Rectangle>& rects);

struct HurdleFit {
  Tree presence;  // classification of 1{y > 0}; value = class, class_share[1] = P(present)
  std::optional<Tree> conditional;  // regression on y > 0 rows; absent when none
  bool conditional_absent = false;
};

HurdleFit fit_hurdle(const Matrix& x, const Vector& y, const TreeConfig& cfg);

/// Design matrix over (species position in `leaf_order`, time) for a
/// species x samples matrix, with responses taken row-major.
void grid_design(const Matrix& values, const std::vector<int>& leaf_order, const std::vector<double>& times, Matrix& x,
                 Vector& y);

}  // namespace regime::cart
