#include "dtcav/tcav_engine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace dtcav {

std::string_view to_string(TcavStatus s) {
  switch (s) {
    case TcavStatus::Scored: return "scored";
    case TcavStatus::Degenerate: return "degenerate";
    case TcavStatus::Insignificant: return "insignificant";
  }
  return "?";
}

DirectionalDerivativeSet directional_derivatives(const Eigen::MatrixXd& gradients, const Cav& cav, Pathology class_k) {
  return {cav.concept_id, class_k, directional_derivatives(gradients, cav.direction)};
}

double tcav_score(const Eigen::VectorXd& derivatives) {
  if (derivatives.size() == 0) throw std::invalid_argument("tcav_score: empty derivative set");
  return static_cast<double>((derivatives.array() > 0.0).count()) / static_cast<double>(derivatives.size());
}

double tcav_score(const DirectionalDerivativeSet& derivatives) { return tcav_score(derivatives.values); }

namespace {

// Continued fraction for the incomplete beta function (modified Lentz).
double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 500;
  constexpr double kEps = 1e-15;
  constexpr double kTiny = 1e-300;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

struct Moments {
  double mean;
  double var;  // unbiased
};

Moments moments(std::span<const double> v) {
  const double n = static_cast<double>(v.size());
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, v.size() > 1 ? ss / (n - 1.0) : 0.0};
}

}  // namespace

double regularized_incomplete_beta(double a, double b, double x) {
  if (a <= 0.0 || b <= 0.0) throw std::invalid_argument("incomplete beta: a and b must be positive");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_two_sided_p(double t, double dof) {
  if (!(dof > 0.0)) throw std::invalid_argument("student_t: dof must be positive");
  if (std::isinf(t)) return 0.0;
  return regularized_incomplete_beta(0.5 * dof, 0.5, dof / (dof + t * t));
}

WelchTest significance_test(std::span<const double> concept_scores, std::span<const double> random_scores,
                            double alpha) {
  if (concept_scores.size() < 2 || random_scores.size() < 2)
    throw std::invalid_argument("significance_test: each sample needs at least two entries");
  const auto a = moments(concept_scores);
  const auto b = moments(random_scores);
  const double na = static_cast<double>(concept_scores.size());
  const double nb = static_cast<double>(random_scores.size());
  const double va = a.var / na;
  const double vb = b.var / nb;
  WelchTest out;
  if (va + vb == 0.0) {
    if (a.mean == b.mean) {
      out.p_value = 1.0;
    } else {
      out.t = a.mean > b.mean ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
      out.p_value = 0.0;
    }
    out.dof = na + nb - 2.0;
    out.significant = out.p_value < alpha;
    return out;
  }
  out.t = (a.mean - b.mean) / std::sqrt(va + vb);
  out.dof = (va + vb) * (va + vb) / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
  out.p_value = student_t_two_sided_p(out.t, out.dof);
  out.significant = out.p_value < alpha;
  return out;
}

std::vector<TcavResult> score_concept(const Concept& concept_, std::span<const Cav> concept_cavs,
                                      std::span<const Cav> random_cavs, const ClassGradients& gradients,
                                      const ScoreOptions& options) {
  if (concept_cavs.size() < 2) throw std::invalid_argument("score_concept: at least two concept CAVs are required");
  if (random_cavs.size() < 2) throw std::invalid_argument("score_concept: at least two random CAVs are required");

  std::vector<TcavResult> results;
  for (const auto& [class_k, grads] : gradients) {
    if (grads.rows() == 0)
      throw std::invalid_argument("score_concept: missing gradients for class " + std::string(to_string(class_k)));
    TcavResult r;
    r.concept_id = concept_.cluster_id;
    r.class_k = class_k;
    r.n_trials = static_cast<int>(random_cavs.size());

    bool all_non_positive = true;
    for (const auto& cav : concept_cavs) {
      const Eigen::VectorXd s = directional_derivatives(grads, cav.direction);
      all_non_positive = all_non_positive && (s.array() <= 0.0).all();
      r.concept_scores.push_back(tcav_score(s));
    }

    std::vector<double> random_scores;
    random_scores.reserve(random_cavs.size());
    for (const auto& cav : random_cavs) random_scores.push_back(tcav_score(directional_derivatives(grads, cav.direction)));
    const auto rm = moments(random_scores);
    r.random_mean = rm.mean;
    r.random_std = std::sqrt(rm.var);

    if (all_non_positive) {
      r.status = TcavStatus::Degenerate;
      r.p_value = 1.0;
    } else {
      r.score = std::accumulate(r.concept_scores.begin(), r.concept_scores.end(), 0.0) /
                static_cast<double>(r.concept_scores.size());
      const auto test = significance_test(r.concept_scores, random_scores, options.alpha);
      r.p_value = test.p_value;
      r.status = test.significant ? TcavStatus::Scored : TcavStatus::Insignificant;
    }
    results.push_back(std::move(r));
  }
  return results;
}

ScoreSpread score_spread(std::span<const TcavResult> results) {
  std::map<int, std::pair<double, double>> range;
  for (const auto& r : results) {
    if (r.status != TcavStatus::Scored || !r.score) continue;
    auto [it, inserted] = range.emplace(r.concept_id, std::pair{*r.score, *r.score});
    if (!inserted) {
      it->second.first = std::min(it->second.first, *r.score);
      it->second.second = std::max(it->second.second, *r.score);
    }
  }
  ScoreSpread out;
  std::vector<double> spreads;
  for (const auto& [id, mm] : range) {
    const double spread = mm.second - mm.first;
    out.per_concept[id] = spread;
    spreads.push_back(spread);
    if (out.max_concept < 0 || spread > out.max) {
      out.max = spread;
      out.max_concept = id;
    }
  }
  if (!spreads.empty()) {
    const auto m = moments(spreads);
    out.mean = m.mean;
    out.std = std::sqrt(m.var);
  }
  return out;
}

}  // namespace dtcav
