#ifndef DTCAV_TCAV_ENGINE_HPP
#define DTCAV_TCAV_ENGINE_HPP

#include <map>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "dtcav/concept_cav.hpp"
#include "dtcav/types.hpp"

namespace dtcav {

/// S(x) for every example of one class: ∇h(f(x))·v.
struct DirectionalDerivativeSet {
  int concept_id = -1;
  Pathology class_k = Pathology::NOR;
  Eigen::VectorXd values;
};

/// Gradients for X_k, one row per example.
using ClassGradients = std::map<Pathology, Eigen::MatrixXd>;

enum class TcavStatus { Scored, Degenerate, Insignificant };

std::string_view to_string(TcavStatus s);

struct TcavResult {
  int concept_id = -1;
  Pathology class_k = Pathology::NOR;
  std::optional<double> score;  // absent when degenerate
  double p_value = 1.0;
  TcavStatus status = TcavStatus::Insignificant;
  int n_trials = 0;
  double random_mean = 0.0;
  double random_std = 0.0;
  std::vector<double> concept_scores;
};

/// Row-wise dot products of the gradients with a direction.
template <typename Derived>
Eigen::VectorXd directional_derivatives(const Eigen::MatrixBase<Derived>& gradients, const Eigen::VectorXd& direction) {
  if (gradients.cols() != direction.size())
    throw std::invalid_argument("directional_derivatives: dimension mismatch");
  if (gradients.rows() == 0) throw std::invalid_argument("directional_derivatives: empty example set");
  return gradients * direction;
}

DirectionalDerivativeSet directional_derivatives(const Eigen::MatrixXd& gradients, const Cav& cav, Pathology class_k);

/// Fraction of strictly positive derivatives.
double tcav_score(const Eigen::VectorXd& derivatives);
double tcav_score(const DirectionalDerivativeSet& derivatives);

struct WelchTest {
  double t = 0.0;
  double dof = 0.0;
  double p_value = 1.0;
  bool significant = false;
};

/// Regularized incomplete beta I_x(a, b).
double regularized_incomplete_beta(double a, double b, double x);

/// Two-sided tail probability P(|T| >= |t|) for Student's t with `dof` degrees of freedom.
double student_t_two_sided_p(double t, double dof);

/// Two-sided Welch t-test of equal means.
WelchTest significance_test(std::span<const double> concept_scores, std::span<const double> random_scores,
                            double alpha);

struct ScoreOptions {
  double alpha = 0.05;
};

/// Per-class TCAV result for one concept: mean score over the concept CAVs,
/// tested against the scores of the random CAVs.
std::vector<TcavResult> score_concept(const Concept& concept_, std::span<const Cav> concept_cavs,
                                      std::span<const Cav> random_cavs, const ClassGradients& gradients,
                                      const ScoreOptions& options = {});

struct ScoreSpread {
  std::map<int, double> per_concept;  // max - min over scored classes
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation
  double max = 0.0;
  int max_concept = -1;
};

ScoreSpread score_spread(std::span<const TcavResult> results);

}  // namespace dtcav

#endif  // DTCAV_TCAV_ENGINE_HPP
