#ifndef DTCAV_SUPERPIXEL_HPP
#define DTCAV_SUPERPIXEL_HPP

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dtcav/dataset.hpp"
#include "dtcav/types.hpp"

namespace dtcav {

struct SlicParams {
  int n_segments = 5;
  double compactness = 10.0;
  int max_iters = 10;
  std::uint64_t seed = 0;
  std::vector<int> resolutions{5};
};

/// Identifies the slice a patch was cut from.
struct PatchSource {
  std::string patient_id;
  int slice_index = 0;
  Phase phase = Phase::ED;
  Pathology pathology = Pathology::NOR;

  std::string slice_id() const;
};

struct SuperpixelPatch {
  PatchSource source;
  int resolution = 0;
  int segment_id = 0;
  Grid<bool> membership;  // over the crop
  Image rendered;         // target_size × target_size
  double fill_value = 0.0;

  /// "<slice id>/r<resolution>/s<segment>"
  std::string id() const;
};

/// SLIC on a single intensity channel. Labels are 0..n_final-1 with every
/// segment 4-connected and n_final <= params.n_segments.
SegmentGrid slic(const Image& image, const SlicParams& params);

/// Count of distinct labels in a compact label grid.
int segment_count(const SegmentGrid& labels);

/// Bilinear resampling with half-pixel centre alignment.
Image resize_bilinear(const Image& src, int out_rows, int out_cols);

/// Renders one segment: non-members set to fill_value, then resized.
Image render_segment(const Image& crop, const Grid<bool>& membership, double fill_value, int target_size);

/// One patch per segment per resolution in params.resolutions.
std::vector<SuperpixelPatch> extract_patches(const SliceRecord& cropped, const SlicParams& params,
                                             int target_size);

/// Writes one NPY per patch plus index.json mapping patch ids to their source.
void dump_patches(const std::filesystem::path& dir, std::span<const SuperpixelPatch> patches);

}  // namespace dtcav

#endif  // DTCAV_SUPERPIXEL_HPP
