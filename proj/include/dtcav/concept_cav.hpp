#ifndef DTCAV_CONCEPT_CAV_HPP
#define DTCAV_CONCEPT_CAV_HPP

#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "dtcav/latent_analysis.hpp"
#include "dtcav/types.hpp"

namespace dtcav {

struct SelectionConfig {
  int min_size = 30;
  int max_size = 600;
  int min_patients = 3;
  double max_single_patient_share = 0.5;
};

enum class RejectionReason { TooSmall, TooLarge, SinglePatient, TooFewPatients };

std::string_view to_string(RejectionReason r);
std::optional<RejectionReason> parse_rejection(std::string_view s);

struct Concept {
  int cluster_id = 0;
  std::vector<std::size_t> members;  // patch indices
  bool selected = false;
  std::optional<RejectionReason> rejection_reason;
};

/// Every cluster comes back, flagged selected or rejected with a reason.
/// Clusters dominated by one patient (share above the limit) count as single_patient.
std::vector<Concept> select_concepts(std::span<const ClusterSummary> summaries, const SelectionConfig& config);

/// Uniform sample without replacement from [0, population) minus `exclude`,
/// in seed-shuffled order.
std::vector<std::size_t> sample_counterpart(std::size_t population, std::span<const std::size_t> exclude,
                                            std::size_t size, std::uint64_t seed);

/// Gathers rows of `points` by index.
PointMatrix gather_rows(const PointMatrix& points, std::span<const std::size_t> indices);

struct CavOptions {
  double l2 = 1e-3;
  int max_steps = 10000;
  double gradient_tolerance = 1e-6;
  double holdout_fraction = 0.2;
  double low_quality_threshold = 0.65;
};

/// Unit normal of a concept-vs-counterpart logistic decision boundary,
/// pointing toward the concept side.
struct Cav {
  Eigen::VectorXd direction;
  double offset = 0.0;  // boundary: direction·x + offset = 0
  int concept_id = -1;
  std::uint64_t counterpart_seed = 0;
  double training_accuracy = 0.0;  // measured on the held-out split
  bool low_quality = false;
  int steps = 0;

  /// Same decision as the trained classifier.
  bool classifies_as_concept(const Eigen::VectorXd& x) const { return direction.dot(x) + offset > 0.0; }
};

/// L2-regularized logistic regression by full-batch accelerated gradient
/// descent on an 80/20 split. Each point's split membership depends only on
/// (seed, point), so swapping the two sets negates the direction exactly.
Cav fit_cav(const PointMatrix& concept_points, const PointMatrix& counterpart_points, std::uint64_t seed,
            const CavOptions& options = {});

}  // namespace dtcav

#endif  // DTCAV_CONCEPT_CAV_HPP
