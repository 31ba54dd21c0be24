#include "dtcav/npy.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace dtcav::npy {

static_assert(std::endian::native == std::endian::little, "NPY support assumes a little-endian host");

namespace {

constexpr std::array<char, 6> kMagic = {'\x93', 'N', 'U', 'M', 'P', 'Y'};

std::string descr_of(DType t) {
  switch (t) {
    case DType::F32: return "<f4";
    case DType::F64: return "<f8";
    case DType::U8: return "|u1";
    case DType::I32: return "<i4";
  }
  return "";
}

std::size_t size_of(DType t) {
  switch (t) {
    case DType::F32: return 4;
    case DType::F64: return 8;
    case DType::U8: return 1;
    case DType::I32: return 4;
  }
  return 0;
}

DType parse_descr(const std::string& d, const std::filesystem::path& path) {
  if (d == "<f4") return DType::F32;
  if (d == "<f8") return DType::F64;
  if (d == "|u1" || d == "<u1" || d == "u1") return DType::U8;
  if (d == "<i4") return DType::I32;
  throw NpyError("unsupported dtype '" + d + "' in " + path.string());
}

// Value of `key` in the Python dict literal of the header.
std::string dict_value(const std::string& dict, const std::string& key,
                       const std::filesystem::path& path) {
  const auto k = dict.find("'" + key + "'");
  if (k == std::string::npos) throw NpyError("header lacks '" + key + "' in " + path.string());
  auto pos = dict.find(':', k);
  if (pos == std::string::npos) throw NpyError("malformed header in " + path.string());
  ++pos;
  while (pos < dict.size() && dict[pos] == ' ') ++pos;
  if (dict[pos] == '\'') {
    const auto end = dict.find('\'', pos + 1);
    return dict.substr(pos + 1, end - pos - 1);
  }
  if (dict[pos] == '(') {
    const auto end = dict.find(')', pos);
    return dict.substr(pos + 1, end - pos - 1);
  }
  const auto end = dict.find_first_of(",}", pos);
  return dict.substr(pos, end - pos);
}

struct Opened {
  Header header;
  std::ifstream stream;
};

Opened open(const std::filesystem::path& path) {
  Opened o;
  o.stream.open(path, std::ios::binary);
  if (!o.stream) throw NpyError("cannot open " + path.string());
  std::array<char, 6> magic{};
  o.stream.read(magic.data(), magic.size());
  if (!o.stream || magic != kMagic) throw NpyError("not an NPY file: " + path.string());
  unsigned char version[2];
  o.stream.read(reinterpret_cast<char*>(version), 2);
  std::size_t header_len = 0;
  if (version[0] == 1) {
    unsigned char len[2];
    o.stream.read(reinterpret_cast<char*>(len), 2);
    header_len = len[0] | (len[1] << 8);
  } else if (version[0] == 2 || version[0] == 3) {
    unsigned char len[4];
    o.stream.read(reinterpret_cast<char*>(len), 4);
    header_len = len[0] | (len[1] << 8) | (len[2] << 16) | (static_cast<std::size_t>(len[3]) << 24);
  } else {
    throw NpyError("unsupported NPY version in " + path.string());
  }
  std::string dict(header_len, '\0');
  o.stream.read(dict.data(), static_cast<std::streamsize>(header_len));
  if (!o.stream) throw NpyError("truncated header in " + path.string());

  o.header.dtype = parse_descr(dict_value(dict, "descr", path), path);
  o.header.fortran_order = dict_value(dict, "fortran_order", path).find("True") != std::string::npos;
  std::stringstream shape(dict_value(dict, "shape", path));
  std::string item;
  while (std::getline(shape, item, ',')) {
    if (item.find_first_not_of(' ') == std::string::npos) continue;
    o.header.shape.push_back(static_cast<std::size_t>(std::stoull(item)));
  }
  if (o.header.shape.empty() || o.header.shape.size() > 2)
    throw NpyError("only 1-D and 2-D arrays are supported: " + path.string());
  return o;
}

template <typename T>
std::vector<T> read_payload(Opened& o, std::size_t count, const std::filesystem::path& path) {
  std::vector<T> v(count);
  o.stream.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(count * sizeof(T)));
  if (!o.stream) throw NpyError("truncated payload in " + path.string());
  return v;
}

std::pair<std::size_t, std::size_t> dims(const Header& h) {
  return h.shape.size() == 1 ? std::pair{h.shape[0], std::size_t{1}} : std::pair{h.shape[0], h.shape[1]};
}

// Fills a rows×cols Eigen matrix from C- or Fortran-ordered flat data.
template <typename Out, typename T>
void fill(Out& out, const std::vector<T>& flat, std::size_t rows, std::size_t cols, bool fortran) {
  out.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
          static_cast<typename Out::Scalar>(fortran ? flat[c * rows + r] : flat[r * cols + c]);
}

void write_raw(const std::filesystem::path& path, DType dtype, const std::vector<std::size_t>& shape,
               const char* data, std::size_t bytes) {
  std::string dict = "{'descr': '" + descr_of(dtype) + "', 'fortran_order': False, 'shape': (";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    dict += std::to_string(shape[i]);
    if (shape.size() == 1 || i + 1 < shape.size()) dict += ",";
    if (i + 1 < shape.size()) dict += " ";
  }
  dict += "), }";
  // Pad so that magic + version + length + dict + '\n' is a multiple of 64.
  const std::size_t preamble = kMagic.size() + 2 + 2;
  std::size_t total = preamble + dict.size() + 1;
  dict.append((64 - total % 64) % 64, ' ');
  dict += '\n';

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw NpyError("cannot write " + path.string());
  out.write(kMagic.data(), kMagic.size());
  const char version[2] = {1, 0};
  out.write(version, 2);
  const auto len = static_cast<std::uint16_t>(dict.size());
  const char len_bytes[2] = {static_cast<char>(len & 0xff), static_cast<char>(len >> 8)};
  out.write(len_bytes, 2);
  out.write(dict.data(), static_cast<std::streamsize>(dict.size()));
  out.write(data, static_cast<std::streamsize>(bytes));
  if (!out) throw NpyError("write failed for " + path.string());
}

}  // namespace

Header read_header(const std::filesystem::path& path) { return open(path).header; }

Eigen::MatrixXd read_matrix(const std::filesystem::path& path) {
  auto o = open(path);
  const auto [rows, cols] = dims(o.header);
  const auto n = rows * cols;
  Eigen::MatrixXd out;
  switch (o.header.dtype) {
    case DType::F32: fill(out, read_payload<float>(o, n, path), rows, cols, o.header.fortran_order); break;
    case DType::F64: fill(out, read_payload<double>(o, n, path), rows, cols, o.header.fortran_order); break;
    case DType::U8: fill(out, read_payload<std::uint8_t>(o, n, path), rows, cols, o.header.fortran_order); break;
    case DType::I32: fill(out, read_payload<std::int32_t>(o, n, path), rows, cols, o.header.fortran_order); break;
  }
  return out;
}

LabelGrid read_labels(const std::filesystem::path& path) {
  auto o = open(path);
  if (o.header.dtype != DType::U8 || o.header.shape.size() != 2)
    throw NpyError("expected a 2-D uint8 array in " + path.string());
  const auto [rows, cols] = dims(o.header);
  LabelGrid out;
  fill(out, read_payload<std::uint8_t>(o, rows * cols, path), rows, cols, o.header.fortran_order);
  return out;
}

SegmentGrid read_segments(const std::filesystem::path& path) {
  auto o = open(path);
  if (o.header.dtype != DType::I32 || o.header.shape.size() != 2)
    throw NpyError("expected a 2-D int32 array in " + path.string());
  const auto [rows, cols] = dims(o.header);
  SegmentGrid out;
  fill(out, read_payload<std::int32_t>(o, rows * cols, path), rows, cols, o.header.fortran_order);
  return out;
}

void write_matrix(const std::filesystem::path& path, const Eigen::MatrixXd& m, DType dtype) {
  const auto rows = static_cast<std::size_t>(m.rows());
  const auto cols = static_cast<std::size_t>(m.cols());
  std::vector<char> buf(rows * cols * size_of(dtype));
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
      char* dst = buf.data() + (r * cols + c) * size_of(dtype);
      switch (dtype) {
        case DType::F32: { const float f = static_cast<float>(v); std::memcpy(dst, &f, 4); break; }
        case DType::F64: std::memcpy(dst, &v, 8); break;
        case DType::U8: { const auto u = static_cast<std::uint8_t>(v); std::memcpy(dst, &u, 1); break; }
        case DType::I32: { const auto i = static_cast<std::int32_t>(v); std::memcpy(dst, &i, 4); break; }
      }
    }
  }
  write_raw(path, dtype, {rows, cols}, buf.data(), buf.size());
}

void write_vector(const std::filesystem::path& path, const Eigen::VectorXd& v, DType dtype) {
  const auto n = static_cast<std::size_t>(v.size());
  std::vector<char> buf(n * size_of(dtype));
  for (std::size_t i = 0; i < n; ++i) {
    char* dst = buf.data() + i * size_of(dtype);
    const double x = v(static_cast<Eigen::Index>(i));
    if (dtype == DType::F32) {
      const float f = static_cast<float>(x);
      std::memcpy(dst, &f, 4);
    } else if (dtype == DType::F64) {
      std::memcpy(dst, &x, 8);
    } else {
      throw NpyError("vectors are written as floating point only");
    }
  }
  write_raw(path, dtype, {n}, buf.data(), buf.size());
}

void write_labels(const std::filesystem::path& path, const LabelGrid& m) {
  const auto rows = static_cast<std::size_t>(m.rows());
  const auto cols = static_cast<std::size_t>(m.cols());
  std::vector<char> buf(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      buf[r * cols + c] = static_cast<char>(m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)));
  write_raw(path, DType::U8, {rows, cols}, buf.data(), buf.size());
}

void write_segments(const std::filesystem::path& path, const SegmentGrid& m) {
  Eigen::MatrixXd as_double = m.cast<double>();
  write_matrix(path, as_double, DType::I32);
}

}  // namespace dtcav::npy
