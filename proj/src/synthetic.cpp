#include "dtcav/synthetic.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "dtcav/random.hpp"

namespace dtcav {

namespace {

// Balanced ±1 block pattern over the cells of columns [col_begin, col_end).
Image block_texture(int size, int cell, int col_begin, int col_end, Rng& rng) {
  const int cells_r = size / cell;
  const int cells_c = (col_end - col_begin) / cell;
  std::vector<double> signs(static_cast<std::size_t>(cells_r * cells_c));
  for (std::size_t i = 0; i < signs.size(); ++i) signs[i] = i % 2 == 0 ? 1.0 : -1.0;
  shuffle_range(signs.begin(), signs.end(), rng);
  Image t = Image::Zero(size, size);
  for (int r = 0; r < size; ++r)
    for (int c = col_begin; c < col_end; ++c)
      t(r, c) = signs[static_cast<std::size_t>((r / cell) * cells_c + (c - col_begin) / cell)];
  return t;
}

std::string numbered(const char* prefix, int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%03d", prefix, i);
  return buf;
}

}  // namespace

LabelGrid synthetic_heart_mask(int size) {
  LabelGrid mask = LabelGrid::Zero(size, size);
  const double s = size;
  const int top = size / 8;
  const int bottom = size - size / 8 - 1;
  const int rv_right = size / 8 + size / 5;
  for (int r = top; r <= bottom; ++r)
    for (int c = size / 8; c <= rv_right; ++c) mask(r, c) = static_cast<std::uint8_t>(Label::RV);
  const double cy = s / 2.0;
  const double cx = 0.56 * s;
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) {
      const double d = std::hypot(r - cy, c - cx);
      if (d <= 0.16 * s)
        mask(r, c) = static_cast<std::uint8_t>(Label::LV);
      else if (d <= 0.22 * s)
        mask(r, c) = static_cast<std::uint8_t>(Label::MYO);
    }
  }
  return mask;
}

PlantedDataset make_planted_dataset(const PlantedSpec& spec) {
  if (spec.image_size % (2 * spec.cell_size) != 0)
    throw std::invalid_argument("make_planted_dataset: image_size must be a multiple of 2*cell_size");
  const int n = spec.image_size;
  Rng rng(derive_seed(spec.seed, "planted"));

  PlantedDataset out;
  out.left_texture = block_texture(n, spec.cell_size, 0, n / 2, rng);
  out.right_texture = block_texture(n, spec.cell_size, n / 2, n, rng);
  const LabelGrid mask = synthetic_heart_mask(n);

  const auto add_noise = [&](Image& img) {
    for (Eigen::Index i = 0; i < img.size(); ++i) img.data()[i] += spec.noise_sigma * normal01(rng);
  };

  // Dev slices come in pairs that mirror each other on the left half and agree
  // on the right half. The right texture is stronger, so both slices of a pair
  // share their intensity extremes and normalize identically.
  Image left_part, right_part;
  for (int i = 0; i < spec.n_dev; ++i) {
    if (i % 2 == 0) {
      const double left_amp = spec.texture_amplitude * (0.9 + 0.2 * uniform01(rng));
      const double right_amp = 1.5 * spec.texture_amplitude * (0.9 + 0.2 * uniform01(rng));
      Image noise = Image::Zero(n, n);
      add_noise(noise);
      left_part = left_amp * out.left_texture;
      // Zero-mean left noise keeps the fill value of both slices equal.
      left_part.leftCols(n / 2).array() += noise.leftCols(n / 2).array() - noise.leftCols(n / 2).mean();
      right_part = right_amp * out.right_texture;
      right_part.rightCols(n - n / 2) += noise.rightCols(n - n / 2);
    }
    SliceRecord rec;
    rec.patient_id = numbered("D", i / 2);
    rec.slice_index = i % 2;
    rec.phase = i % 2 == 0 ? Phase::ED : Phase::ES;
    rec.pathology = kPathologies[static_cast<std::size_t>((i / 2) % 5)];
    rec.split = Split::Dev;
    const double sign = i % 2 == 0 ? 1.0 : -1.0;
    rec.image = (Image::Constant(n, n, 0.5) + sign * left_part + right_part).cwiseMax(0.0).cwiseMin(1.0);
    normalize_minmax(rec.image);
    rec.mask = mask;
    out.records.push_back(std::move(rec));
  }

  Image texture;
  for (int j = 0; j < spec.n_train; ++j) {
    const int pair = j / 2;
    if (j % 2 == 0) {
      texture = Image::Constant(n, n, 0.5);
      for (int r = 0; r < n; r += spec.cell_size)
        for (int c = 0; c < n; c += spec.cell_size)
          texture.block(r, c, spec.cell_size, spec.cell_size).setConstant(0.5 + 0.25 * (2.0 * uniform01(rng) - 1.0));
      add_noise(texture);
      texture = texture.cwiseMax(0.0).cwiseMin(1.0);
    }
    SliceRecord rec;
    rec.patient_id = numbered("T", pair);
    rec.slice_index = j % 2;
    rec.phase = j % 2 == 0 ? Phase::ED : Phase::ES;
    rec.pathology = pair % 2 == 0 ? Pathology::NOR : Pathology::MINF;
    rec.split = Split::Train;
    rec.image = j % 2 == 0 ? texture : Image((1.0 - texture.array()).matrix());
    normalize_minmax(rec.image);
    rec.mask = mask;
    out.records.push_back(std::move(rec));
  }
  return out;
}

}  // namespace dtcav
