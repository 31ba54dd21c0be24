#ifndef DTCAV_NPY_HPP
#define DTCAV_NPY_HPP

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "dtcav/types.hpp"

/// Minimal reader/writer for NPY v1.0 files holding 1-D or 2-D little-endian arrays.
namespace dtcav::npy {

enum class DType { F32, F64, U8, I32 };

struct Header {
  DType dtype = DType::F64;
  bool fortran_order = false;
  std::vector<std::size_t> shape;
};

class NpyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

Header read_header(const std::filesystem::path& path);

/// Reads any supported dtype into a double matrix. 1-D arrays become n×1.
Eigen::MatrixXd read_matrix(const std::filesystem::path& path);

/// Reads a 2-D uint8 array.
LabelGrid read_labels(const std::filesystem::path& path);

/// Reads a 2-D int32 array.
SegmentGrid read_segments(const std::filesystem::path& path);

void write_matrix(const std::filesystem::path& path, const Eigen::MatrixXd& m,
                  DType dtype = DType::F64);
void write_vector(const std::filesystem::path& path, const Eigen::VectorXd& v,
                  DType dtype = DType::F64);
void write_labels(const std::filesystem::path& path, const LabelGrid& m);
void write_segments(const std::filesystem::path& path, const SegmentGrid& m);

}  // namespace dtcav::npy

#endif  // DTCAV_NPY_HPP
