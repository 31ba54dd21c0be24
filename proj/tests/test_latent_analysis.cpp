#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dtcav/latent_analysis.hpp"
#include "dtcav/random.hpp"
#include "oracles.hpp"

using namespace dtcav;

namespace {

PatchSource source(const std::string& patient, Pathology p) {
  PatchSource s;
  s.patient_id = patient;
  s.pathology = p;
  return s;
}

}  // namespace

TEST_CASE("reduce with method none is the identity") {
  Rng rng(1);
  PointMatrix x(10, 4);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = normal01(rng);
  CHECK(reduce(x, ReductionMethod::None, 2) == x);
}

TEST_CASE("rank-one data is reconstructed from one component") {
  PointMatrix x(7, 2);
  for (int i = 0; i < 7; ++i) {
    x(i, 0) = i - 2.5;
    x(i, 1) = 2.0 * (i - 2.5);
  }
  const Reduction r = fit_pca(x, 1);
  const PointMatrix y = r.apply(x);
  const PointMatrix back = (y * r.components.transpose()).rowwise() + r.mean;
  CHECK((back - x).cwiseAbs().maxCoeff() < 1e-9);
  CHECK(r.components(1, 0) > 0.0);
  CHECK(std::abs(r.components(1, 0)) > std::abs(r.components(0, 0)));
  CHECK(r.explained_variance_ratio(0) == doctest::Approx(1.0));
  CHECK(std::abs(y.mean()) < 1e-12);
}

TEST_CASE("variance rule picks the smallest sufficient dimension") {
  Rng rng(2);
  PointMatrix x(200, 5);
  const double scale[] = {10.0, 3.0, 0.1, 0.1, 0.1};
  for (int i = 0; i < 200; ++i)
    for (int j = 0; j < 5; ++j) x(i, j) = scale[j] * normal01(rng);
  ReductionSettings s;
  const Reduction r = fit_reduction(x, s);
  CHECK(r.components.cols() == 2);
  CHECK((r.components.transpose() * r.components - Eigen::MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-9);
  s.max_dim = 1;
  CHECK(fit_reduction(x, s).components.cols() == 1);
}

TEST_CASE("k = 1 centroid is the mean and distortion the mean squared distance") {
  Rng rng(3);
  PointMatrix x(50, 3);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = normal01(rng);
  const auto res = kmeans(x, 1, 9);
  const Eigen::RowVectorXd mean = x.colwise().mean();
  CHECK((res.centroids.row(0) - mean).cwiseAbs().maxCoeff() < 1e-12);
  const double expected = (x.rowwise() - mean).rowwise().squaredNorm().mean();
  CHECK(res.distortion == doctest::Approx(expected).epsilon(1e-12));
  const PointMatrix same = PointMatrix::Constant(10, 3, 1.5);
  CHECK(kmeans(same, 1, 9).distortion == 0.0);
}

TEST_CASE("three separated blobs are recovered exactly") {
  const auto blobs = oracle::three_blobs(50, 0.1, 10.0, 4, 5);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto res = kmeans(blobs.points, 3, seed);
    CHECK(oracle::adjusted_rand_index(res.assignments, blobs.labels) == 1.0);
    for (std::size_t i = 1; i < res.distortion_history.size(); ++i)
      CHECK(res.distortion_history[i] <= res.distortion_history[i - 1]);
  }
}

TEST_CASE("adjusted rand index oracle sanity") {
  CHECK(oracle::adjusted_rand_index({0, 0, 1, 1}, {1, 1, 0, 0}) == 1.0);
  // sklearn.metrics.adjusted_rand_score([0, 0, 1, 1], [0, 1, 0, 1]) = -0.5
  CHECK(oracle::adjusted_rand_index({0, 0, 1, 1}, {0, 1, 0, 1}) == doctest::Approx(-0.5));
}

TEST_CASE("distortion never increases across Lloyd iterations") {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    PointMatrix x(120, 3);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = normal01(rng);
    const auto res = kmeans(x, 2 + trial % 6, static_cast<std::uint64_t>(trial));
    REQUIRE_FALSE(res.distortion_history.empty());
    for (std::size_t i = 1; i < res.distortion_history.size(); ++i)
      CHECK(res.distortion_history[i] <= res.distortion_history[i - 1] + 1e-12);
    CHECK(res.distortion == doctest::Approx(distortion(x, res.assignments, res.centroids)));
  }
}

TEST_CASE("k-means is invariant to input order") {
  Rng rng(6);
  PointMatrix x(80, 2);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = normal01(rng);
  std::vector<int> perm(80);
  std::iota(perm.begin(), perm.end(), 0);
  shuffle_range(perm.begin(), perm.end(), rng);
  PointMatrix shuffled(80, 2);
  for (int i = 0; i < 80; ++i) shuffled.row(i) = x.row(perm[static_cast<std::size_t>(i)]);
  const auto a = kmeans(x, 4, 17);
  const auto b = kmeans(shuffled, 4, 17);
  CHECK(a.centroids == b.centroids);
  CHECK(a.distortion == b.distortion);
  for (int i = 0; i < 80; ++i)
    CHECK(b.assignments[static_cast<std::size_t>(i)] == a.assignments[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])]);
}

TEST_CASE("elbow picks the largest second difference") {
  ElbowCurve c{{1, 2, 3, 4}, {100.0, 10.0, 9.5, 9.2}};
  auto choice = elbow_select(c);
  CHECK(choice.k == 2);
  CHECK_FALSE(choice.no_elbow);

  for (double s : {0.001, 3.0, 1e6}) {
    ElbowCurve scaled = c;
    for (auto& d : scaled.distortions) d *= s;
    CHECK(elbow_select(scaled).k == 2);
  }

  ElbowCurve linear{{2, 3, 4, 5, 6}, {10.0, 8.0, 6.0, 4.0, 2.0}};
  CHECK(elbow_select(linear).no_elbow);
  CHECK_THROWS(elbow_select(ElbowCurve{{1, 2}, {3.0, 1.0}}));
}

TEST_CASE("blobs scanned over k = 1..8 give an elbow at 3") {
  const auto blobs = oracle::three_blobs(50, 0.1, 10.0, 4, 5);
  const std::vector<int> ks{1, 2, 3, 4, 5, 6, 7, 8};
  const auto curve = distortion_curve(blobs.points, ks, 42);
  CHECK(elbow_select(curve).k == 3);
}

TEST_CASE("outlier rule removes only points beyond the 95th percentile") {
  PointMatrix x(100, 2);
  for (int i = 0; i < 99; ++i) {
    x(i, 0) = std::cos(0.1 * i);
    x(i, 1) = std::sin(0.1 * i);
  }
  x(99, 0) = 50.0;
  x(99, 1) = 0.0;
  const PointMatrix centroid = PointMatrix::Zero(1, 2);
  const std::vector<int> assign(100, 0);
  const auto kept = remove_outliers(assign, x, centroid);
  CHECK(std::count(kept.begin(), kept.end(), -1) == 1);
  CHECK(kept[99] == -1);

  // Exactly equidistant members: the cut is strict, so nothing goes.
  PointMatrix square(4, 2);
  square << 1, 1, -1, 1, 1, -1, -1, -1;
  const auto none = remove_outliers(std::vector<int>(4, 0), square, PointMatrix::Zero(1, 2));
  CHECK(std::count(none.begin(), none.end(), -1) == 0);

  PointMatrix single(1, 2);
  single << 4.0, 4.0;
  const auto one = remove_outliers(std::vector<int>{0}, single, PointMatrix::Zero(1, 2));
  CHECK(one[0] == 0);
}

TEST_CASE("outlier removal never exceeds 5% + 1 per cluster") {
  Rng rng(8);
  for (int trial = 0; trial < 30; ++trial) {
    const int n = 5 + trial * 7;
    PointMatrix x(n, 3);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = std::pow(normal01(rng), 3);
    const auto res = kmeans(x, std::min(3, n), static_cast<std::uint64_t>(trial));
    const auto kept = remove_outliers(res.assignments, x, res.centroids);
    for (int c = 0; c < res.centroids.rows(); ++c) {
      const auto size = std::count(res.assignments.begin(), res.assignments.end(), c);
      long removed = 0;
      for (int i = 0; i < n; ++i)
        if (res.assignments[static_cast<std::size_t>(i)] == c && kept[static_cast<std::size_t>(i)] == -1) ++removed;
      CHECK(static_cast<double>(removed) <= 0.05 * static_cast<double>(size) + 1.0);
    }
  }
}

TEST_CASE("percentile matches numpy's linear rule") {
  const std::vector<double> v{1.0, 2.0, 3.0, 4.0, 10.0};
  // numpy.percentile([1, 2, 3, 4, 10], 95) = 8.8
  CHECK(percentile_sorted(v, 0.95) == doctest::Approx(8.8));
  CHECK(percentile_sorted(v, 0.5) == 3.0);
}

TEST_CASE("summaries count pathologies and patients") {
  PointMatrix x(3, 2);
  x << 0, 0, 1, 0, 0, 1;
  const std::vector<int> assign{0, 0, 0};
  const std::vector<PatchSource> src{source("A", Pathology::NOR), source("A", Pathology::NOR),
                                     source("B", Pathology::DCM)};
  const auto s = summarize(assign, src, x);
  REQUIRE(s.size() == 1);
  CHECK(s[0].size == 3);
  CHECK(s[0].per_pathology_counts.at(Pathology::NOR) == 2);
  CHECK(s[0].per_pathology_counts.at(Pathology::DCM) == 1);
  CHECK(s[0].per_patient_counts.at("A") == 2);
  CHECK(s[0].per_patient_counts.at("B") == 1);
  CHECK(s[0].max_patient_share() == doctest::Approx(2.0 / 3.0));
  CHECK(s[0].centroid(0) == doctest::Approx(1.0 / 3.0));

  CHECK(summarize(std::vector<int>{}, std::vector<PatchSource>{}, PointMatrix(0, 2)).empty());
}

TEST_CASE("summary sizes add up to the surviving patches") {
  const auto blobs = oracle::three_blobs(30, 0.5, 4.0, 3, 9);
  const auto res = kmeans(blobs.points, 3, 1);
  const auto kept = remove_outliers(res.assignments, blobs.points, res.centroids);
  std::vector<PatchSource> src;
  for (int i = 0; i < 90; ++i) src.push_back(source("P" + std::to_string(i % 7), kPathologies[static_cast<std::size_t>(i % 5)]));
  const auto s = summarize(kept, src, blobs.points);
  int total = 0;
  for (const auto& c : s) {
    int by_path = 0, by_patient = 0;
    for (const auto& [k, v] : c.per_pathology_counts) by_path += v;
    for (const auto& [k, v] : c.per_patient_counts) by_patient += v;
    CHECK(by_path == c.size);
    CHECK(by_patient == c.size);
    total += c.size;
  }
  CHECK(total == std::count_if(kept.begin(), kept.end(), [](int a) { return a >= 0; }));
}
