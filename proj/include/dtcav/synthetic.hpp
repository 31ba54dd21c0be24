#ifndef DTCAV_SYNTHETIC_HPP
#define DTCAV_SYNTHETIC_HPP

#include <cstdint>
#include <vector>

#include "dtcav/dataset.hpp"

namespace dtcav {

/// Synthetic slices with planted latent structure.
///
/// Discovery ("dev") slices are split into a left and a right half. The left
/// half carries texture +L or -L (alternating), the right half always carries
/// texture R. Cut into two superpixels and embedded by a brightness-blind linear
/// encoder, the patches fall into three blobs at +enc(L), -enc(L) and enc(R).
///
/// Gradient ("train") slices are random cell textures in intensity-inverted
/// pairs (x, 1 - x), so their latent codes are symmetric about zero.
struct PlantedSpec {
  int image_size = 64;
  int cell_size = 8;  // texture block size in pixels
  int n_dev = 100;
  int n_train = 100;
  double texture_amplitude = 0.2;
  double noise_sigma = 0.01;
  std::uint64_t seed = 1;
};

struct PlantedDataset {
  std::vector<SliceRecord> records;
  Image left_texture;   // +L on the left half, 0 elsewhere
  Image right_texture;  // R on the right half, 0 elsewhere
};

PlantedDataset make_planted_dataset(const PlantedSpec& spec);

/// A mask whose padded ROI covers a size×size image.
LabelGrid synthetic_heart_mask(int size);

}  // namespace dtcav

#endif  // DTCAV_SYNTHETIC_HPP
