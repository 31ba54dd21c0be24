#ifndef DTCAV_REPORT_HPP
#define DTCAV_REPORT_HPP

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dtcav/concept_cav.hpp"
#include "dtcav/tcav_engine.hpp"
#include "dtcav/types.hpp"

namespace dtcav {

struct ClassCell {
  std::optional<double> score;
  std::optional<TcavStatus> status;  // absent: class not scored
  double p_value = 1.0;
};

struct PatchThumbnail {
  std::string patch_id;
  std::filesystem::path file;  // relative to the report directory
};

struct ClusterReportEntry {
  int cluster_id = 0;
  int size = 0;
  double percentage = 0.0;  // of all patches
  std::map<Pathology, int> class_distribution;
  std::map<Pathology, ClassCell> tcav;
  bool is_concept = false;
  std::optional<RejectionReason> rejection_reason;
  std::vector<PatchThumbnail> thumbnails;

  std::string detail_page() const { return "cluster_" + std::to_string(cluster_id) + ".html"; }
};

struct ReportOptions {
  std::string title = "D-TCAV cluster review";
  int thumbnails_per_row = 6;       // shown on the index page
  int total_patches = 0;            // 0: sum of entry sizes
  int n_tests = 0;                  // raw count of significance tests, shown uncorrected
  std::vector<std::string> notes;   // free-form context lines
};

/// Writes index.html and one cluster_<id>.html per entry into out_dir.
/// Missing thumbnail files are rendered as placeholders; the returned list holds
/// one warning per missing file.
std::vector<std::string> render_report(std::span<const ClusterReportEntry> entries,
                                       const std::filesystem::path& out_dir, const ReportOptions& options = {});

/// 8-bit grayscale BMP of an image with values in [0,1] (clamped).
void write_bmp(const std::filesystem::path& path, const Image& image);

std::string html_escape(std::string_view s);

}  // namespace dtcav

#endif  // DTCAV_REPORT_HPP
