#include "dtcav/seg_metrics.hpp"

#include <algorithm>
#include <numeric>
#include <vector>

namespace dtcav {

namespace {

StructureDice aggregate(std::vector<double> values) {
  StructureDice s;
  s.n = static_cast<int>(values.size());
  if (values.empty()) return s;
  std::sort(values.begin(), values.end());
  s.avg = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  const std::size_t mid = values.size() / 2;
  s.median = values.size() % 2 == 1 ? values[mid] : 0.5 * (values[mid - 1] + values[mid]);
  return s;
}

}  // namespace

DiceReport dice_report(std::span<const std::pair<LabelGrid, LabelGrid>> pred_true_pairs, const std::string& dataset_tag,
                       const std::string& model_tag, EmptyPolicy policy) {
  if (pred_true_pairs.empty()) throw std::invalid_argument("dice_report: no slices");
  std::array<std::vector<double>, 3> per;  // LV, RV, MYO
  const std::array<Label, 3> structures = {Label::LV, Label::RV, Label::MYO};
  for (const auto& [pred, truth] : pred_true_pairs) {
    for (std::size_t s = 0; s < structures.size(); ++s) {
      const auto code = static_cast<std::uint8_t>(structures[s]);
      if (policy == EmptyPolicy::ExcludeEmpty && !(pred.array() == code).any() && !(truth.array() == code).any())
        continue;
      per[s].push_back(dice(pred, truth, structures[s]));
    }
  }
  DiceReport r;
  r.dataset_tag = dataset_tag;
  r.model_tag = model_tag;
  r.lv = aggregate(per[0]);
  r.rv = aggregate(per[1]);
  r.myo = aggregate(per[2]);
  r.global = (r.lv.avg + r.rv.avg + r.myo.avg) / 3.0;
  return r;
}

}  // namespace dtcav
