#ifndef DTCAV_SEG_METRICS_HPP
#define DTCAV_SEG_METRICS_HPP

#include <array>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>

#include "dtcav/types.hpp"

namespace dtcav {

enum class EmptyPolicy {
  BothEmptyPerfect,  // both masks lack the structure: 100
  ExcludeEmpty,      // such slices are left out of the structure's statistics
};

/// Dice overlap of one structure as a percentage. Both-empty scores 100.
template <typename DerivedA, typename DerivedB>
double dice(const Eigen::MatrixBase<DerivedA>& pred, const Eigen::MatrixBase<DerivedB>& truth, Label structure) {
  if (pred.rows() != truth.rows() || pred.cols() != truth.cols())
    throw std::invalid_argument("dice: mask shapes differ");
  const auto code = static_cast<std::uint8_t>(structure);
  if (code < 1 || code > 3) throw std::invalid_argument("dice: unknown structure label");
  const auto a = (pred.array() == code);
  const auto b = (truth.array() == code);
  const double na = static_cast<double>(a.count());
  const double nb = static_cast<double>(b.count());
  if (na + nb == 0.0) return 100.0;
  const double both = static_cast<double>((a && b).count());
  return 100.0 * 2.0 * both / (na + nb);
}

struct StructureDice {
  double avg = 0.0;
  double median = 0.0;
  int n = 0;
};

struct DiceReport {
  std::string dataset_tag;
  std::string model_tag;
  StructureDice lv;
  StructureDice rv;
  StructureDice myo;
  double global = 0.0;  // mean of the three per-structure averages
};

/// Per-structure average and median over slices.
DiceReport dice_report(std::span<const std::pair<LabelGrid, LabelGrid>> pred_true_pairs, const std::string& dataset_tag,
                       const std::string& model_tag = "", EmptyPolicy policy = EmptyPolicy::BothEmptyPerfect);

}  // namespace dtcav

#endif  // DTCAV_SEG_METRICS_HPP
