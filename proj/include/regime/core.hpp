#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "regime/linalg.hpp"

namespace regime::core {

/// Per-subject count matrices over a shared species axis.
///
/// counts[s] is species x timepoints for subject s; times[s] holds that
/// subject's strictly increasing sample times (days). Species absent from a
/// subject are zero rows.
struct SeriesPanel {
  std::vector<std::string> subjects;
  std::vector<std::vector<double>> times;
  std::vector<Matrix> counts;
  std::vector<std::string> species;
  std::map<std::string, std::string> taxonomy;  // species -> family

  std::size_t num_species() const { return species.size(); }
  std::size_t num_subjects() const { return subjects.size(); }
  std::size_t total_samples() const;

  /// Throws DomainError / LengthError when an invariant is broken.
  void validate() const;

  /// Species x (all samples of all subjects, subject-major) matrix.
  Matrix concatenated() const;
};

enum class TransformKind { Asinh, Binarize, FirstDifference, BinarizedDifference };

TransformKind parse_transform(const std::string& name);
std::string to_string(TransformKind kind);

/// Row-wise transform of a species x time matrix.
Matrix apply_transform(const Matrix& rows, TransformKind kind);

/// Transforms every subject. Differencing drops the first time of each
/// subject (the output time of a difference is the later sample time).
SeriesPanel apply_transform(const SeriesPanel& panel, TransformKind kind);

enum class DistanceKind { Euclidean, Jaccard, Manhattan, Mixture };

struct DistanceSpec {
  DistanceKind kind = DistanceKind::Euclidean;
  /// Components and convex weights; used only when kind == Mixture.
  std::vector<std::pair<DistanceKind, double>> mixture;
  /// Jaccard denominator: false = p (number of coordinates), true = size of
  /// the union of ones.
  bool jaccard_union = false;
};

DistanceKind parse_distance(const std::string& name);

/// Symmetric n x n distance matrix between the rows of `rows`.
Matrix pairwise_distance(const Matrix& rows, const DistanceSpec& spec);

double row_distance(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& y,
                    DistanceKind kind, bool jaccard_union = false);

enum class Linkage { Single, Complete, Average };
Linkage parse_linkage(const std::string& name);

struct Merge {
  int left;   // node id: < n is a leaf, otherwise n + merge index
  int right;
  double height;
  int size;
};

struct Dendrogram {
  int num_leaves = 0;
  std::vector<Merge> merges;  // n - 1 merges in agglomeration order
  std::vector<int> leaf_order;
};

/// Agglomerative clustering. At each node the child whose leaves have the
/// larger mean of `values` (averaged over all their rows and columns) is put
/// on the left; leaf_order is the resulting in-order traversal.
Dendrogram hclust(const Matrix& dist, const Matrix& values, Linkage linkage = Linkage::Average);

/// Labels (0..k-1, numbered by first appearance in leaf_order) from undoing
/// the last k - 1 merges.
std::vector<int> cut_tree(const Dendrogram& tree, int k);

struct ClusterSummary {
  int cluster = 0;
  std::string subject;
  std::vector<double> times;
  std::vector<double> presence;
  /// Mean over strictly positive member values; nullopt where no member is
  /// positive.
  std::vector<std::optional<double>> conditional_mean;
};

struct SummaryResult {
  std::vector<ClusterSummary> summaries;
  std::vector<std::string> warnings;
};

/// Hurdle summaries per (cluster, subject). `labels` has one entry per
/// species; `num_clusters` lets callers declare clusters that may be empty.
SummaryResult cluster_summaries(const SeriesPanel& panel, const std::vector<int>& labels,
                                std::optional<int> num_clusters = std::nullopt);

}  // namespace regime::core
