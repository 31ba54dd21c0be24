#include "dtcav/concept_cav.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <set>
#include <stdexcept>

#include "dtcav/random.hpp"

namespace dtcav {

std::string_view to_string(RejectionReason r) {
  switch (r) {
    case RejectionReason::TooSmall: return "too_small";
    case RejectionReason::TooLarge: return "too_large";
    case RejectionReason::SinglePatient: return "single_patient";
    case RejectionReason::TooFewPatients: return "too_few_patients";
  }
  return "?";
}

std::optional<RejectionReason> parse_rejection(std::string_view s) {
  for (auto r : {RejectionReason::TooSmall, RejectionReason::TooLarge, RejectionReason::SinglePatient,
                 RejectionReason::TooFewPatients})
    if (to_string(r) == s) return r;
  return std::nullopt;
}

std::vector<Concept> select_concepts(std::span<const ClusterSummary> summaries, const SelectionConfig& config) {
  if (config.min_size > config.max_size) throw std::invalid_argument("select_concepts: min_size > max_size");
  if (!(config.max_single_patient_share > 0.0 && config.max_single_patient_share <= 1.0))
    throw std::invalid_argument("select_concepts: max_single_patient_share must lie in (0,1]");
  std::vector<Concept> out;
  out.reserve(summaries.size());
  for (const auto& s : summaries) {
    Concept c;
    c.cluster_id = s.cluster_id;
    c.members = s.members;
    if (s.distinct_patients() == 1)
      c.rejection_reason = RejectionReason::SinglePatient;
    else if (s.size < config.min_size)
      c.rejection_reason = RejectionReason::TooSmall;
    else if (s.size > config.max_size)
      c.rejection_reason = RejectionReason::TooLarge;
    else if (s.distinct_patients() < config.min_patients)
      c.rejection_reason = RejectionReason::TooFewPatients;
    else if (s.max_patient_share() > config.max_single_patient_share)
      c.rejection_reason = RejectionReason::SinglePatient;
    c.selected = !c.rejection_reason.has_value();
    out.push_back(std::move(c));
  }
  return out;
}

std::vector<std::size_t> sample_counterpart(std::size_t population, std::span<const std::size_t> exclude,
                                            std::size_t size, std::uint64_t seed) {
  const std::set<std::size_t> excluded(exclude.begin(), exclude.end());
  std::vector<std::size_t> pool;
  pool.reserve(population);
  for (std::size_t i = 0; i < population; ++i)
    if (!excluded.count(i)) pool.push_back(i);
  if (pool.size() < size) throw std::invalid_argument("sample_counterpart: population smaller than sample size");
  Rng rng(seed);
  // Partial Fisher-Yates: the first `size` slots are a uniform sample in random order.
  for (std::size_t i = 0; i < size; ++i) {
    const auto j = i + uniform_index(rng, pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(size);
  return pool;
}

PointMatrix gather_rows(const PointMatrix& points, std::span<const std::size_t> indices) {
  PointMatrix out(static_cast<Eigen::Index>(indices.size()), points.cols());
  for (std::size_t i = 0; i < indices.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = points.row(static_cast<Eigen::Index>(indices[i]));
  return out;
}

namespace {

std::uint64_t point_key(const Eigen::RowVectorXd& row, std::uint64_t seed) {
  std::uint64_t h = splitmix64(seed ^ 0x5bd1e9955bd1e995ULL);
  for (Eigen::Index j = 0; j < row.size(); ++j) {
    std::uint64_t bits;
    const double v = row(j) == 0.0 ? 0.0 : row(j);  // fold -0.0 into +0.0
    std::memcpy(&bits, &v, sizeof bits);
    h = splitmix64(h ^ bits);
  }
  return h;
}

struct Sample {
  std::uint64_t key;
  const double* data;
  bool concept_side;
};

// Lexicographic on (key, coordinates); the side label never affects order.
bool sample_less(const Sample& a, const Sample& b, Eigen::Index dim) {
  if (a.key != b.key) return a.key < b.key;
  for (Eigen::Index j = 0; j < dim; ++j) {
    if (a.data[j] != b.data[j]) return a.data[j] < b.data[j];
  }
  return false;
}

// Residual of the logistic loss, written so that flipping both the margin sign
// and the label flips the residual sign bit-exactly.
double residual(double z, bool positive) {
  return positive ? -1.0 / (1.0 + std::exp(z)) : 1.0 / (1.0 + std::exp(-z));
}

}  // namespace

Cav fit_cav(const PointMatrix& concept_points, const PointMatrix& counterpart_points, std::uint64_t seed,
            const CavOptions& options) {
  if (concept_points.cols() != counterpart_points.cols())
    throw std::invalid_argument("fit_cav: dimension mismatch between concept and counterpart points");
  if (concept_points.rows() < 2 || counterpart_points.rows() < 2)
    throw std::invalid_argument("fit_cav: each set needs at least two points");
  const Eigen::Index dim = concept_points.cols();

  Cav cav;
  cav.counterpart_seed = seed;

  std::vector<Sample> train;
  std::vector<Sample> test;
  const auto split = [&](const PointMatrix& pts, bool side, std::vector<Eigen::RowVectorXd>& storage) {
    storage.reserve(static_cast<std::size_t>(pts.rows()));
    for (Eigen::Index i = 0; i < pts.rows(); ++i) storage.emplace_back(pts.row(i));
    std::vector<Sample> s;
    for (const auto& row : storage) s.push_back({point_key(row, seed), row.data(), side});
    std::sort(s.begin(), s.end(), [&](const Sample& a, const Sample& b) { return sample_less(a, b, dim); });
    const auto n = static_cast<long>(s.size());
    const long holdout = std::clamp(std::lround(options.holdout_fraction * static_cast<double>(n)), 1L, n - 1);
    test.insert(test.end(), s.begin(), s.begin() + holdout);
    train.insert(train.end(), s.begin() + holdout, s.end());
  };
  std::vector<Eigen::RowVectorXd> concept_rows;
  std::vector<Eigen::RowVectorXd> counterpart_rows;
  split(concept_points, true, concept_rows);
  split(counterpart_points, false, counterpart_rows);
  std::sort(train.begin(), train.end(), [&](const Sample& a, const Sample& b) { return sample_less(a, b, dim); });

  const auto m = static_cast<Eigen::Index>(train.size());
  Eigen::MatrixXd x(m, dim + 1);  // last column is the intercept
  std::vector<bool> label(static_cast<std::size_t>(m));
  for (Eigen::Index i = 0; i < m; ++i) {
    x.row(i).head(dim) = Eigen::Map<const Eigen::RowVectorXd>(train[static_cast<std::size_t>(i)].data, dim);
    x(i, dim) = 1.0;
    label[static_cast<std::size_t>(i)] = train[static_cast<std::size_t>(i)].concept_side;
  }

  const bool all_identical = [&] {
    const Eigen::RowVectorXd first = concept_points.row(0);
    return (concept_points.rowwise() - first).cwiseAbs().maxCoeff() == 0.0 &&
           (counterpart_points.rowwise() - first).cwiseAbs().maxCoeff() == 0.0;
  }();
  if (all_identical) {
    cav.direction = Eigen::VectorXd::Unit(dim, 0);
    cav.training_accuracy = 0.5;
    cav.low_quality = true;
    return cav;
  }

  // Step size from the Lipschitz constant of the mean logistic loss.
  const Eigen::MatrixXd gram = x.transpose() * x / static_cast<double>(m);
  const double max_eig = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(gram, Eigen::EigenvaluesOnly).eigenvalues().maxCoeff();
  const double lipschitz = 0.25 * max_eig + options.l2;
  const double step = 1.0 / lipschitz;
  const double kappa = lipschitz / options.l2;
  const double momentum = (std::sqrt(kappa) - 1.0) / (std::sqrt(kappa) + 1.0);

  Eigen::VectorXd theta = Eigen::VectorXd::Zero(dim + 1);
  Eigen::VectorXd previous = theta;
  Eigen::VectorXd r(m);
  int steps = 0;
  for (; steps < options.max_steps; ++steps) {
    const Eigen::VectorXd look = theta + momentum * (theta - previous);
    const Eigen::VectorXd z = x * look;
    for (Eigen::Index i = 0; i < m; ++i) r(i) = residual(z(i), label[static_cast<std::size_t>(i)]);
    Eigen::VectorXd grad = x.transpose() * r / static_cast<double>(m);
    grad.head(dim) += options.l2 * look.head(dim);
    previous = theta;
    if (grad.norm() < options.gradient_tolerance) {
      theta = look;
      break;
    }
    theta = look - step * grad;
  }
  cav.steps = steps;

  const Eigen::VectorXd w = theta.head(dim);
  const double norm = w.norm();
  if (!(norm > 0.0) || !std::isfinite(norm)) {
    cav.direction = Eigen::VectorXd::Unit(dim, 0);
    cav.training_accuracy = 0.5;
    cav.low_quality = true;
    return cav;
  }
  cav.direction = w / norm;
  cav.offset = theta(dim) / norm;

  std::size_t correct = 0;
  for (const auto& s : test) {
    const double z = Eigen::Map<const Eigen::VectorXd>(s.data, dim).dot(w) + theta(dim);
    if ((z > 0.0) == s.concept_side) ++correct;
  }
  cav.training_accuracy = static_cast<double>(correct) / static_cast<double>(test.size());
  cav.low_quality = cav.training_accuracy < options.low_quality_threshold;
  return cav;
}

}  // namespace dtcav
