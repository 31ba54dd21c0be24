#include "dtcav/latent_analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "dtcav/random.hpp"

namespace dtcav {

PointMatrix Reduction::apply(const PointMatrix& points) const {
  return (points.rowwise() - mean) * components;
}

Reduction fit_pca(const PointMatrix& points, int target_dim) {
  const auto n = points.rows();
  const auto d = points.cols();
  if (target_dim < 1 || target_dim > d) throw std::invalid_argument("fit_pca: target_dim must lie in [1, dim]");
  if (n < 2) throw std::invalid_argument("fit_pca: at least two points are required");
  if (target_dim > n) throw std::invalid_argument("fit_pca: fewer points than requested components");

  Reduction r;
  r.mean = points.colwise().mean();
  const PointMatrix centered = points.rowwise() - r.mean;
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const Eigen::VectorXd values = eig.eigenvalues().reverse().cwiseMax(0.0);
  const Eigen::MatrixXd vectors = eig.eigenvectors().rowwise().reverse();

  r.components = vectors.leftCols(target_dim);
  for (int j = 0; j < target_dim; ++j) {
    Eigen::Index arg = 0;
    r.components.col(j).cwiseAbs().maxCoeff(&arg);
    if (r.components(arg, j) < 0.0) r.components.col(j) *= -1.0;
  }
  const double total = values.sum();
  r.explained_variance_ratio = total > 0.0 ? Eigen::VectorXd(values.head(target_dim) / total)
                                           : Eigen::VectorXd::Zero(target_dim);
  return r;
}

Reduction fit_reduction(const PointMatrix& points, const ReductionSettings& settings) {
  if (settings.target_dim > 0) return fit_pca(points, settings.target_dim);
  const int cap = static_cast<int>(std::min<Eigen::Index>({points.cols(), points.rows(),
                                                           static_cast<Eigen::Index>(settings.max_dim)}));
  Reduction full = fit_pca(points, std::max(cap, 1));
  int dim = 1;
  double cumulative = 0.0;
  for (int j = 0; j < full.explained_variance_ratio.size(); ++j) {
    cumulative += full.explained_variance_ratio(j);
    dim = j + 1;
    if (cumulative >= settings.explained_variance) break;
  }
  full.components.conservativeResize(Eigen::NoChange, dim);
  full.explained_variance_ratio.conservativeResize(dim);
  return full;
}

PointMatrix reduce(const PointMatrix& points, ReductionMethod method, int target_dim) {
  if (method == ReductionMethod::None) {
    if (target_dim > points.cols()) throw std::invalid_argument("reduce: target_dim exceeds dimension");
    return points;
  }
  return fit_pca(points, target_dim).apply(points);
}

// ---------------------------------------------------------------------------

double distortion(const PointMatrix& points, std::span<const int> assignments, const PointMatrix& centroids) {
  if (points.rows() == 0) return 0.0;
  double sum = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    sum += (points.row(i) - centroids.row(assignments[static_cast<std::size_t>(i)])).squaredNorm();
  return sum / static_cast<double>(points.rows());
}

namespace {

std::vector<Eigen::Index> lexicographic_order(const PointMatrix& points) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(points.rows()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    for (Eigen::Index j = 0; j < points.cols(); ++j) {
      if (points(a, j) < points(b, j)) return true;
      if (points(a, j) > points(b, j)) return false;
    }
    return false;
  });
  return order;
}

PointMatrix kmeans_plus_plus(const PointMatrix& x, int k, Rng& rng) {
  const auto n = x.rows();
  PointMatrix centroids(k, x.cols());
  std::vector<bool> chosen(static_cast<std::size_t>(n), false);
  auto first = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::uint64_t>(n)));
  centroids.row(0) = x.row(first);
  chosen[static_cast<std::size_t>(first)] = true;
  Eigen::VectorXd d2 = (x.rowwise() - centroids.row(0)).rowwise().squaredNorm();
  for (int c = 1; c < k; ++c) {
    const double total = d2.sum();
    Eigen::Index pick = -1;
    if (total > 0.0) {
      const double target = uniform01(rng) * total;
      double acc = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        acc += d2(i);
        if (d2(i) > 0.0 && acc > target) {
          pick = i;
          break;
        }
      }
      if (pick < 0) {
        for (Eigen::Index i = n - 1; i >= 0; --i)
          if (d2(i) > 0.0) {
            pick = i;
            break;
          }
      }
    } else {
      // Every remaining point duplicates a centre; take the next unchosen one.
      for (Eigen::Index i = 0; i < n; ++i)
        if (!chosen[static_cast<std::size_t>(i)]) {
          pick = i;
          break;
        }
    }
    centroids.row(c) = x.row(pick);
    chosen[static_cast<std::size_t>(pick)] = true;
    d2 = d2.cwiseMin((x.rowwise() - centroids.row(c)).rowwise().squaredNorm());
  }
  return centroids;
}

}  // namespace

KMeansResult kmeans(const PointMatrix& points, int k, std::uint64_t seed, int max_iters) {
  const auto n = points.rows();
  if (k < 1) throw std::invalid_argument("kmeans: k must be >= 1");
  if (k > n) throw std::invalid_argument("kmeans: k exceeds number of points");

  const auto order = lexicographic_order(points);
  PointMatrix x(n, points.cols());
  for (Eigen::Index i = 0; i < n; ++i) x.row(i) = points.row(order[static_cast<std::size_t>(i)]);

  Rng rng(seed);
  KMeansResult res;
  res.centroids = kmeans_plus_plus(x, k, rng);
  std::vector<int> assign(static_cast<std::size_t>(n), -1);
  std::vector<int> previous;
  Eigen::VectorXd dist(n);

  for (int iter = 0; iter < max_iters; ++iter) {
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::Index best = 0;
      dist(i) = (res.centroids.rowwise() - x.row(i)).rowwise().squaredNorm().minCoeff(&best);
      assign[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (int a : assign) ++counts[static_cast<std::size_t>(a)];
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) continue;
      // Reseed an empty cluster with the point farthest from its centroid.
      Eigen::Index far = -1;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])] < 2) continue;
        if (far < 0 || dist(i) > dist(far)) far = i;
      }
      if (far < 0) break;
      --counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(far)])];
      assign[static_cast<std::size_t>(far)] = c;
      counts[static_cast<std::size_t>(c)] = 1;
      res.centroids.row(c) = x.row(far);
      dist(far) = 0.0;
    }
    PointMatrix sums = PointMatrix::Zero(k, x.cols());
    for (Eigen::Index i = 0; i < n; ++i) sums.row(assign[static_cast<std::size_t>(i)]) += x.row(i);
    for (int c = 0; c < k; ++c)
      if (counts[static_cast<std::size_t>(c)] > 0)
        res.centroids.row(c) = sums.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);

    res.distortion_history.push_back(distortion(x, assign, res.centroids));
    res.iterations = iter + 1;
    if (assign == previous) break;
    previous = assign;
  }

  res.distortion = res.distortion_history.back();
  res.assignments.assign(static_cast<std::size_t>(n), 0);
  for (Eigen::Index i = 0; i < n; ++i)
    res.assignments[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = assign[static_cast<std::size_t>(i)];
  return res;
}

ElbowCurve distortion_curve(const PointMatrix& points, std::span<const int> ks, std::uint64_t seed) {
  ElbowCurve curve;
  for (int k : ks) {
    curve.ks.push_back(k);
    curve.distortions.push_back(
        kmeans(points, k, derive_seed(seed, "kmeans-k", {static_cast<std::uint64_t>(k)})).distortion);
  }
  return curve;
}

ElbowChoice elbow_select(const ElbowCurve& curve) {
  if (curve.ks.size() != curve.distortions.size()) throw std::invalid_argument("elbow_select: length mismatch");
  if (curve.ks.size() < 3) throw std::invalid_argument("elbow_select: curve needs at least 3 points");
  double best = -std::numeric_limits<double>::infinity();
  std::size_t arg = 1;
  for (std::size_t i = 1; i + 1 < curve.ks.size(); ++i) {
    const double second = curve.distortions[i - 1] - 2.0 * curve.distortions[i] + curve.distortions[i + 1];
    if (second > best) {
      best = second;
      arg = i;
    }
  }
  if (best <= 0.0) return {curve.ks.back(), true};
  return {curve.ks[arg], false};
}

double percentile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw std::invalid_argument("percentile of empty range");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
}

std::vector<int> remove_outliers(std::span<const int> assignments, const PointMatrix& points,
                                 const PointMatrix& centroids, double quantile) {
  std::map<int, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < assignments.size(); ++i)
    if (assignments[i] >= 0) members[assignments[i]].push_back(i);

  std::vector<int> out(assignments.begin(), assignments.end());
  for (const auto& [cluster, idx] : members) {
    std::vector<double> d(idx.size());
    for (std::size_t j = 0; j < idx.size(); ++j)
      d[j] = (points.row(static_cast<Eigen::Index>(idx[j])) - centroids.row(cluster)).norm();
    std::vector<double> sorted = d;
    std::sort(sorted.begin(), sorted.end());
    const double cut = percentile_sorted(sorted, quantile);
    for (std::size_t j = 0; j < idx.size(); ++j)
      if (d[j] > cut) out[idx[j]] = -1;
  }
  return out;
}

double ClusterSummary::max_patient_share() const {
  int top = 0;
  for (const auto& [p, c] : per_patient_counts) top = std::max(top, c);
  return size > 0 ? static_cast<double>(top) / size : 0.0;
}

std::vector<ClusterSummary> summarize(std::span<const int> assignments, std::span<const PatchSource> sources,
                                      const PointMatrix& points) {
  if (sources.size() != assignments.size()) throw std::invalid_argument("summarize: metadata count mismatch");
  std::map<int, ClusterSummary> by_id;
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    if (assignments[i] < 0) continue;
    auto& s = by_id[assignments[i]];
    s.cluster_id = assignments[i];
    s.members.push_back(i);
    ++s.size;
    ++s.per_pathology_counts[sources[i].pathology];
    ++s.per_patient_counts[sources[i].patient_id];
  }
  std::vector<ClusterSummary> out;
  out.reserve(by_id.size());
  for (auto& [id, s] : by_id) {
    s.centroid = Eigen::VectorXd::Zero(points.cols());
    for (auto m : s.members) s.centroid += points.row(static_cast<Eigen::Index>(m)).transpose();
    s.centroid /= static_cast<double>(s.size);
    double total = 0.0;
    for (auto m : s.members) total += (points.row(static_cast<Eigen::Index>(m)).transpose() - s.centroid).norm();
    s.mean_distance = total / static_cast<double>(s.size);
    out.push_back(std::move(s));
  }
  return out;
}

SizeStatistics size_statistics(std::span<const ClusterSummary> summaries) {
  if (summaries.empty()) return {};
  std::vector<double> sizes;
  for (const auto& s : summaries) sizes.push_back(s.size);
  std::sort(sizes.begin(), sizes.end());
  SizeStatistics st;
  st.min = static_cast<int>(sizes.front());
  st.max = static_cast<int>(sizes.back());
  st.mean = std::accumulate(sizes.begin(), sizes.end(), 0.0) / static_cast<double>(sizes.size());
  st.median = percentile_sorted(sizes, 0.5);
  return st;
}

}  // namespace dtcav
