#ifndef DTCAV_DATASET_HPP
#define DTCAV_DATASET_HPP

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dtcav/types.hpp"

namespace dtcav {

class DatasetError : public std::runtime_error {
 public:
  DatasetError(const std::string& record_id, const std::string& what)
      : std::runtime_error(record_id.empty() ? what : "record " + record_id + ": " + what),
        record_id_(record_id) {}
  const std::string& record_id() const { return record_id_; }

 private:
  std::string record_id_;
};

/// One 2D cardiac MRI slice with its ground-truth mask.
struct SliceRecord {
  std::string patient_id;
  int slice_index = 0;
  Phase phase = Phase::ED;
  Pathology pathology = Pathology::NOR;
  Split split = Split::Train;
  Image image;     // intensities in [0,1]
  LabelGrid mask;  // values are Label codes
  std::array<double, 2> pixel_spacing_mm{1.0, 1.0};
  std::optional<LabelGrid> prediction;  // predicted mask, when the manifest provides one

  /// "<patient>/<slice>/<phase>"; the key used by file-backed adapters.
  std::string id() const;
};

/// Inclusive pixel box.
struct RoiBox {
  int row_min = 0;
  int row_max = 0;
  int col_min = 0;
  int col_max = 0;

  int height() const { return row_max - row_min + 1; }
  int width() const { return col_max - col_min + 1; }
  bool operator==(const RoiBox&) const = default;
};

enum class PresenceSubgroup { NONE, ALL, MYO, RV, RV_MYO, LV_MYO };

inline constexpr std::array<PresenceSubgroup, 6> kPresenceSubgroups = {
    PresenceSubgroup::NONE, PresenceSubgroup::ALL,    PresenceSubgroup::MYO,
    PresenceSubgroup::RV,   PresenceSubgroup::RV_MYO, PresenceSubgroup::LV_MYO};

std::string_view to_string(PresenceSubgroup g);

/// Reads the JSON manifest and every referenced array. Records are validated
/// and their images min-max normalized.
std::vector<SliceRecord> load_manifest(const std::filesystem::path& path);

/// Writes records as a manifest plus NPY arrays under `dir`. Returns the manifest path.
std::filesystem::path write_manifest(const std::filesystem::path& dir,
                                     std::span<const SliceRecord> records);

/// Per-slice min-max scaling to [0,1]. A constant image maps to zeros.
void normalize_minmax(Image& image);

/// Padded square box around the non-background pixels, or nullopt for an empty mask.
std::optional<RoiBox> mask_roi(const LabelGrid& mask, double margin_frac);

/// Crops image and mask identically. Empty masks use `fallback`.
std::pair<SliceRecord, RoiBox> roi_crop(const SliceRecord& record, double margin_frac,
                                        const std::optional<RoiBox>& fallback = std::nullopt);

/// Union of the per-slice boxes of each patient's non-empty slices.
std::map<std::string, RoiBox> patient_fallback_boxes(std::span<const SliceRecord> records,
                                                     double margin_frac);

/// Foreground pixels over all pixels of the uncropped slices.
double heart_pixel_ratio(std::span<const SliceRecord> records,
                         std::optional<Phase> phase = std::nullopt);

PresenceSubgroup presence_subgroup(const LabelGrid& mask);

std::map<PresenceSubgroup, double> presence_distribution(std::span<const SliceRecord> records);

}  // namespace dtcav

#endif  // DTCAV_DATASET_HPP
