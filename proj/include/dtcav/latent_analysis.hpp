#ifndef DTCAV_LATENT_ANALYSIS_HPP
#define DTCAV_LATENT_ANALYSIS_HPP

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dtcav/superpixel.hpp"
#include "dtcav/types.hpp"

namespace dtcav {

enum class ReductionMethod { None, Pca };

struct ReductionSettings {
  ReductionMethod method = ReductionMethod::Pca;
  int target_dim = 0;               // 0: smallest dim reaching explained_variance
  double explained_variance = 0.95;
  int max_dim = 32;
};

/// Fitted linear reduction: reduced = (x - mean) * components.
struct Reduction {
  Eigen::RowVectorXd mean;
  Eigen::MatrixXd components;  // d × target_dim, orthonormal columns
  Eigen::VectorXd explained_variance_ratio;

  PointMatrix apply(const PointMatrix& points) const;
};

/// PCA with the sign convention that the largest-magnitude loading of each
/// component is positive.
Reduction fit_pca(const PointMatrix& points, int target_dim);

/// Picks the PCA dimension from settings (explicit target_dim or variance rule).
Reduction fit_reduction(const PointMatrix& points, const ReductionSettings& settings);

PointMatrix reduce(const PointMatrix& points, ReductionMethod method, int target_dim);

struct KMeansResult {
  std::vector<int> assignments;
  PointMatrix centroids;  // k × dim
  double distortion = 0.0;
  int iterations = 0;
  std::vector<double> distortion_history;  // after every Lloyd iteration
};

/// k-means++ seeding followed by Lloyd iterations until the assignments stop
/// changing or max_iters is reached. Points are processed in lexicographic
/// order, so the result does not depend on input order.
KMeansResult kmeans(const PointMatrix& points, int k, std::uint64_t seed, int max_iters = 300);

/// Mean squared euclidean distance of points to their assigned centroid.
double distortion(const PointMatrix& points, std::span<const int> assignments, const PointMatrix& centroids);

struct ElbowCurve {
  std::vector<int> ks;
  std::vector<double> distortions;
};

struct ElbowChoice {
  int k = 0;
  bool no_elbow = false;
};

/// Distortions for every k in ks; each k uses its own seed derived from `seed`.
ElbowCurve distortion_curve(const PointMatrix& points, std::span<const int> ks, std::uint64_t seed);

/// k with the largest discrete second difference over interior points.
ElbowChoice elbow_select(const ElbowCurve& curve);

/// Drops (sets to -1) points farther from their centroid than the cluster's
/// 95th-percentile distance. Centroids are not recomputed.
std::vector<int> remove_outliers(std::span<const int> assignments, const PointMatrix& points,
                                 const PointMatrix& centroids, double quantile = 0.95);

/// Linear-interpolation percentile of sorted values (numpy's default rule).
double percentile_sorted(std::span<const double> sorted, double q);

struct ClusterSummary {
  int cluster_id = 0;
  std::vector<std::size_t> members;  // patch indices
  int size = 0;
  std::map<Pathology, int> per_pathology_counts;
  std::map<std::string, int> per_patient_counts;
  Eigen::VectorXd centroid;
  double mean_distance = 0.0;

  int distinct_patients() const { return static_cast<int>(per_patient_counts.size()); }
  double max_patient_share() const;
};

/// One summary per non-empty cluster; assignments of -1 are skipped.
std::vector<ClusterSummary> summarize(std::span<const int> assignments, std::span<const PatchSource> sources,
                                      const PointMatrix& points);

struct SizeStatistics {
  int min = 0;
  int max = 0;
  double mean = 0.0;
  double median = 0.0;
};

SizeStatistics size_statistics(std::span<const ClusterSummary> summaries);

}  // namespace dtcav

#endif  // DTCAV_LATENT_ANALYSIS_HPP
