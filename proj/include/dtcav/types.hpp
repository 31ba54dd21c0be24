#ifndef DTCAV_TYPES_HPP
#define DTCAV_TYPES_HPP

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace dtcav {

/// Dense intensity grid, row-major in spirit (rows = image rows).
template <typename Scalar>
using Grid = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

using Image = Grid<double>;
using LabelGrid = Grid<std::uint8_t>;
using SegmentGrid = Grid<int>;

/// Rows are observations, columns are latent coordinates.
using PointMatrix = Eigen::MatrixXd;

enum class Phase { ED, ES };
enum class Pathology { NOR, MINF, DCM, HCM, RV };
enum class Split { Train, Dev };

/// File encoding of segmentation labels.
enum class Label : std::uint8_t { Background = 0, RV = 1, MYO = 2, LV = 3 };

inline constexpr std::array<Pathology, 5> kPathologies = {
    Pathology::NOR, Pathology::MINF, Pathology::DCM, Pathology::HCM, Pathology::RV};

/// Column order used by the cluster report.
inline constexpr std::array<Pathology, 5> kReportPathologyOrder = {
    Pathology::NOR, Pathology::RV, Pathology::MINF, Pathology::DCM, Pathology::HCM};

inline std::string_view to_string(Phase p) { return p == Phase::ED ? "ED" : "ES"; }

inline std::string_view to_string(Split s) { return s == Split::Train ? "train" : "dev"; }

inline std::string_view to_string(Pathology p) {
  switch (p) {
    case Pathology::NOR: return "NOR";
    case Pathology::MINF: return "MINF";
    case Pathology::DCM: return "DCM";
    case Pathology::HCM: return "HCM";
    case Pathology::RV: return "RV";
  }
  return "?";
}

inline std::size_t index_of(Pathology p) { return static_cast<std::size_t>(p); }

inline std::optional<Pathology> parse_pathology(std::string_view s) {
  for (auto p : kPathologies)
    if (to_string(p) == s) return p;
  return std::nullopt;
}

inline std::optional<Phase> parse_phase(std::string_view s) {
  if (s == "ED") return Phase::ED;
  if (s == "ES") return Phase::ES;
  return std::nullopt;
}

inline std::optional<Split> parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "dev") return Split::Dev;
  return std::nullopt;
}

}  // namespace dtcav

#endif  // DTCAV_TYPES_HPP
