#include "dtcav/superpixel.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "dtcav/npy.hpp"

namespace dtcav {

std::string PatchSource::slice_id() const {
  return patient_id + "/" + std::to_string(slice_index) + "/" + std::string(to_string(phase));
}

std::string SuperpixelPatch::id() const {
  return source.slice_id() + "/r" + std::to_string(resolution) + "/s" + std::to_string(segment_id);
}

namespace {

struct Center {
  double row;
  double col;
  double intensity;
};

double gradient_at(const Image& img, int r, int c) {
  const int rows = static_cast<int>(img.rows());
  const int cols = static_cast<int>(img.cols());
  const auto at = [&](int rr, int cc) {
    return img(std::clamp(rr, 0, rows - 1), std::clamp(cc, 0, cols - 1));
  };
  const double dx = at(r, c + 1) - at(r, c - 1);
  const double dy = at(r + 1, c) - at(r - 1, c);
  return dx * dx + dy * dy;
}

// Seeds on a near-regular grid: rows of seeds spaced evenly, the per-row count
// balanced so that exactly n seeds are placed.
std::vector<Center> grid_seeds(const Image& img, int n) {
  const int rows = static_cast<int>(img.rows());
  const int cols = static_cast<int>(img.cols());
  int nx = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n) * cols / rows) - 1e-9));
  nx = std::clamp(nx, 1, std::min(n, cols));
  int ny = (n + nx - 1) / nx;
  if (ny > rows) {
    ny = rows;
    nx = (n + ny - 1) / ny;
  }
  std::vector<Center> seeds;
  seeds.reserve(static_cast<std::size_t>(n));
  for (int r = 0; r < ny; ++r) {
    const int count = n / ny + (r < n % ny ? 1 : 0);
    const int y = static_cast<int>(std::floor((r + 0.5) * rows / ny));
    for (int i = 0; i < count; ++i) {
      const int x = static_cast<int>(std::floor((i + 0.5) * cols / count));
      seeds.push_back({static_cast<double>(y), static_cast<double>(x), img(y, x)});
    }
  }
  return seeds;
}

void perturb_to_low_gradient(const Image& img, std::vector<Center>& seeds) {
  const int rows = static_cast<int>(img.rows());
  const int cols = static_cast<int>(img.cols());
  std::set<std::pair<int, int>> taken;
  for (const auto& s : seeds) taken.emplace(static_cast<int>(s.row), static_cast<int>(s.col));
  for (auto& s : seeds) {
    const int r0 = static_cast<int>(s.row);
    const int c0 = static_cast<int>(s.col);
    int best_r = r0;
    int best_c = c0;
    double best = gradient_at(img, r0, c0);
    for (int dr = -1; dr <= 1; ++dr) {
      for (int dc = -1; dc <= 1; ++dc) {
        const int r = r0 + dr;
        const int c = c0 + dc;
        if (r < 0 || r >= rows || c < 0 || c >= cols || taken.count({r, c})) continue;
        const double g = gradient_at(img, r, c);
        if (g < best) {
          best = g;
          best_r = r;
          best_c = c;
        }
      }
    }
    if (best_r != r0 || best_c != c0) {
      taken.erase({r0, c0});
      taken.emplace(best_r, best_c);
    }
    s = {static_cast<double>(best_r), static_cast<double>(best_c), img(best_r, best_c)};
  }
}

// Merges undersized 4-connected fragments into the neighbour sharing the longest
// border until every fragment is large enough and at most max_segments remain.
SegmentGrid enforce_connectivity(const SegmentGrid& labels, int min_size, int max_segments) {
  const int rows = static_cast<int>(labels.rows());
  const int cols = static_cast<int>(labels.cols());
  SegmentGrid comp = SegmentGrid::Constant(rows, cols, -1);
  std::vector<int> size;
  std::deque<std::pair<int, int>> queue;
  constexpr int dr[4] = {-1, 0, 1, 0};
  constexpr int dc[4] = {0, -1, 0, 1};
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      if (comp(r, c) >= 0) continue;
      const int id = static_cast<int>(size.size());
      size.push_back(0);
      comp(r, c) = id;
      queue.emplace_back(r, c);
      while (!queue.empty()) {
        const auto [y, x] = queue.front();
        queue.pop_front();
        ++size[static_cast<std::size_t>(id)];
        for (int k = 0; k < 4; ++k) {
          const int yy = y + dr[k];
          const int xx = x + dc[k];
          if (yy < 0 || yy >= rows || xx < 0 || xx >= cols) continue;
          if (comp(yy, xx) >= 0 || labels(yy, xx) != labels(y, x)) continue;
          comp(yy, xx) = id;
          queue.emplace_back(yy, xx);
        }
      }
    }
  }

  const int n_comp = static_cast<int>(size.size());
  std::vector<std::map<int, int>> border(static_cast<std::size_t>(n_comp));
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const int a = comp(r, c);
      if (c + 1 < cols && comp(r, c + 1) != a) {
        ++border[static_cast<std::size_t>(a)][comp(r, c + 1)];
        ++border[static_cast<std::size_t>(comp(r, c + 1))][a];
      }
      if (r + 1 < rows && comp(r + 1, c) != a) {
        ++border[static_cast<std::size_t>(a)][comp(r + 1, c)];
        ++border[static_cast<std::size_t>(comp(r + 1, c))][a];
      }
    }
  }

  std::vector<int> parent(static_cast<std::size_t>(n_comp));
  for (int i = 0; i < n_comp; ++i) parent[static_cast<std::size_t>(i)] = i;
  std::set<std::pair<int, int>> by_size;
  for (int i = 0; i < n_comp; ++i) by_size.emplace(size[static_cast<std::size_t>(i)], i);

  while (by_size.size() > 1) {
    const auto [sz, victim] = *by_size.begin();
    if (sz >= min_size && static_cast<int>(by_size.size()) <= max_segments) break;
    auto& nbrs = border[static_cast<std::size_t>(victim)];
    int target = -1;
    int best_border = -1;
    for (const auto& [nb, count] : nbrs) {
      if (count > best_border ||
          (count == best_border && size[static_cast<std::size_t>(nb)] > size[static_cast<std::size_t>(target)])) {
        best_border = count;
        target = nb;
      }
    }
    if (target < 0) break;  // isolated; cannot happen on a connected grid
    by_size.erase({sz, victim});
    by_size.erase({size[static_cast<std::size_t>(target)], target});
    size[static_cast<std::size_t>(target)] += sz;
    by_size.emplace(size[static_cast<std::size_t>(target)], target);
    parent[static_cast<std::size_t>(victim)] = target;
    auto& tn = border[static_cast<std::size_t>(target)];
    tn.erase(victim);
    for (const auto& [nb, count] : nbrs) {
      if (nb == target) continue;
      tn[nb] += count;
      auto& other = border[static_cast<std::size_t>(nb)];
      other.erase(victim);
      other[target] += count;
    }
    nbrs.clear();
  }

  const auto find = [&](int x) {
    while (parent[static_cast<std::size_t>(x)] != x) x = parent[static_cast<std::size_t>(x)];
    return x;
  };
  SegmentGrid out(rows, cols);
  std::map<int, int> compact;
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const int root = find(comp(r, c));
      auto [it, inserted] = compact.emplace(root, static_cast<int>(compact.size()));
      out(r, c) = it->second;
    }
  }
  return out;
}

}  // namespace

SegmentGrid slic(const Image& image, const SlicParams& params) {
  const int rows = static_cast<int>(image.rows());
  const int cols = static_cast<int>(image.cols());
  const long long n_pixels = static_cast<long long>(rows) * cols;
  if (n_pixels == 0) throw std::invalid_argument("slic: empty image");
  if (params.n_segments < 1) throw std::invalid_argument("slic: n_segments must be >= 1");
  if (params.n_segments > n_pixels) throw std::invalid_argument("slic: n_segments exceeds pixel count");
  if (!(params.compactness > 0.0)) throw std::invalid_argument("slic: compactness must be positive");
  if (params.max_iters < 1) throw std::invalid_argument("slic: max_iters must be >= 1");
  if (image.minCoeff() < 0.0 || image.maxCoeff() > 1.0)
    throw std::invalid_argument("slic: image must be normalized to [0,1]");

  const int n = params.n_segments;
  const double step = std::sqrt(static_cast<double>(n_pixels) / n);
  const double spatial_weight = (params.compactness / step) * (params.compactness / step);
  const int radius = static_cast<int>(std::ceil(2.0 * step));

  std::vector<Center> centers = grid_seeds(image, n);
  perturb_to_low_gradient(image, centers);

  SegmentGrid labels = SegmentGrid::Constant(rows, cols, -1);
  Image best(rows, cols);
  const auto distance = [&](const Center& ctr, int r, int c) {
    const double di = image(r, c) - ctr.intensity;
    const double dy = r - ctr.row;
    const double dx = c - ctr.col;
    return di * di + (dy * dy + dx * dx) * spatial_weight;
  };

  for (int iter = 0; iter < params.max_iters; ++iter) {
    best.setConstant(std::numeric_limits<double>::infinity());
    SegmentGrid next = SegmentGrid::Constant(rows, cols, -1);
    for (int k = 0; k < n; ++k) {
      const auto& ctr = centers[static_cast<std::size_t>(k)];
      const int r0 = std::max(0, static_cast<int>(std::floor(ctr.row)) - radius);
      const int r1 = std::min(rows - 1, static_cast<int>(std::ceil(ctr.row)) + radius);
      const int c0 = std::max(0, static_cast<int>(std::floor(ctr.col)) - radius);
      const int c1 = std::min(cols - 1, static_cast<int>(std::ceil(ctr.col)) + radius);
      for (int r = r0; r <= r1; ++r) {
        for (int c = c0; c <= c1; ++c) {
          const double d = distance(ctr, r, c);
          if (d < best(r, c)) {
            best(r, c) = d;
            next(r, c) = k;
          }
        }
      }
    }
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        if (next(r, c) >= 0) continue;
        for (int k = 0; k < n; ++k) {
          const double d = distance(centers[static_cast<std::size_t>(k)], r, c);
          if (d < best(r, c)) {
            best(r, c) = d;
            next(r, c) = k;
          }
        }
      }
    }
    const bool converged = (next.array() == labels.array()).all();
    labels = std::move(next);
    if (converged) break;

    std::vector<Center> sums(static_cast<std::size_t>(n), Center{0.0, 0.0, 0.0});
    std::vector<long long> counts(static_cast<std::size_t>(n), 0);
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        const auto k = static_cast<std::size_t>(labels(r, c));
        sums[k].row += r;
        sums[k].col += c;
        sums[k].intensity += image(r, c);
        ++counts[k];
      }
    }
    for (std::size_t k = 0; k < centers.size(); ++k) {
      if (counts[k] == 0) continue;
      const double inv = 1.0 / static_cast<double>(counts[k]);
      centers[k] = {sums[k].row * inv, sums[k].col * inv, sums[k].intensity * inv};
    }
  }

  const int min_size = static_cast<int>((n_pixels / n) / 4);
  return enforce_connectivity(labels, min_size, n);
}

int segment_count(const SegmentGrid& labels) { return labels.size() == 0 ? 0 : labels.maxCoeff() + 1; }

Image resize_bilinear(const Image& src, int out_rows, int out_cols) {
  if (src.size() == 0 || out_rows < 1 || out_cols < 1) throw std::invalid_argument("resize_bilinear: empty size");
  const int rows = static_cast<int>(src.rows());
  const int cols = static_cast<int>(src.cols());
  const double sy = static_cast<double>(rows) / out_rows;
  const double sx = static_cast<double>(cols) / out_cols;
  Image out(out_rows, out_cols);
  for (int r = 0; r < out_rows; ++r) {
    const double y = std::clamp((r + 0.5) * sy - 0.5, 0.0, static_cast<double>(rows - 1));
    const int y0 = static_cast<int>(std::floor(y));
    const int y1 = std::min(y0 + 1, rows - 1);
    const double fy = y - y0;
    for (int c = 0; c < out_cols; ++c) {
      const double x = std::clamp((c + 0.5) * sx - 0.5, 0.0, static_cast<double>(cols - 1));
      const int x0 = static_cast<int>(std::floor(x));
      const int x1 = std::min(x0 + 1, cols - 1);
      const double fx = x - x0;
      const double top = src(y0, x0) + (src(y0, x1) - src(y0, x0)) * fx;
      const double bottom = src(y1, x0) + (src(y1, x1) - src(y1, x0)) * fx;
      out(r, c) = top + (bottom - top) * fy;
    }
  }
  return out;
}

Image render_segment(const Image& crop, const Grid<bool>& membership, double fill_value, int target_size) {
  const Image masked = membership.select(crop, Image::Constant(crop.rows(), crop.cols(), fill_value));
  return resize_bilinear(masked, target_size, target_size);
}

std::vector<SuperpixelPatch> extract_patches(const SliceRecord& cropped, const SlicParams& params,
                                             int target_size) {
  if (cropped.image.rows() < 2 || cropped.image.cols() < 2)
    throw DatasetError(cropped.id(), "crop smaller than 2x2");
  if (params.resolutions.empty()) throw std::invalid_argument("extract_patches: no resolutions configured");
  const double fill = cropped.image.mean();
  const PatchSource source{cropped.patient_id, cropped.slice_index, cropped.phase, cropped.pathology};

  std::vector<SuperpixelPatch> patches;
  for (const int resolution : params.resolutions) {
    SlicParams p = params;
    p.n_segments = resolution;
    const SegmentGrid labels = slic(cropped.image, p);
    const int count = segment_count(labels);
    for (int s = 0; s < count; ++s) {
      SuperpixelPatch patch;
      patch.source = source;
      patch.resolution = resolution;
      patch.segment_id = s;
      patch.membership = (labels.array() == s).matrix();
      patch.fill_value = fill;
      patch.rendered = render_segment(cropped.image, patch.membership, fill, target_size);
      patches.push_back(std::move(patch));
    }
  }
  return patches;
}

void dump_patches(const std::filesystem::path& dir, std::span<const SuperpixelPatch> patches) {
  std::filesystem::create_directories(dir);
  nlohmann::json index = nlohmann::json::array();
  for (std::size_t i = 0; i < patches.size(); ++i) {
    const auto& p = patches[i];
    const std::string file = std::to_string(i) + ".npy";
    npy::write_matrix(dir / file, p.rendered, npy::DType::F32);
    index.push_back({{"file", file},
                     {"id", p.id()},
                     {"patient_id", p.source.patient_id},
                     {"slice_index", p.source.slice_index},
                     {"phase", std::string(to_string(p.source.phase))},
                     {"pathology", std::string(to_string(p.source.pathology))},
                     {"resolution", p.resolution},
                     {"segment_id", p.segment_id}});
  }
  std::ofstream(dir / "index.json") << nlohmann::json{{"patches", index}}.dump(2) << "\n";
}

}  // namespace dtcav
