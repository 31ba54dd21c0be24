#include "dtcav/report.hpp"

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace dtcav {

namespace fs = std::filesystem;

namespace {

constexpr const char* kStyle =
    "body{font-family:sans-serif;margin:1.5em;color:#222}"
    "table{border-collapse:collapse}th,td{border:1px solid #bbb;padding:.3em .5em;text-align:right}"
    "td.l,th.l{text-align:left}tr.rejected{color:#888}"
    "img.t{width:64px;height:64px;image-rendering:pixelated;margin:1px}"
    ".ph{display:inline-block;width:64px;height:64px;background:#eee;border:1px dashed #999;margin:1px;"
    "font-size:9px;overflow:hidden}";

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string tcav_cell(const ClusterReportEntry& e, Pathology k) {
  const auto it = e.tcav.find(k);
  if (it == e.tcav.end() || !it->second.status) return "";
  const ClassCell& c = it->second;
  if (*c.status == TcavStatus::Scored && c.score) return fixed(*c.score, 2);
  if (*c.status == TcavStatus::Insignificant && c.score)
    return fixed(*c.score, 2) + " (" + std::string(to_string(*c.status)) + ")";
  return std::string(to_string(*c.status));
}

std::string concept_cell(const ClusterReportEntry& e) {
  if (e.is_concept) return "concept";
  std::string s = "not a concept";
  if (e.rejection_reason) s += " (" + std::string(to_string(*e.rejection_reason)) + ")";
  return s;
}

std::string thumbnail_html(const PatchThumbnail& t, const fs::path& out_dir, std::vector<std::string>& warnings) {
  const std::string id = html_escape(t.patch_id);
  if (!fs::exists(out_dir / t.file)) {
    warnings.push_back("missing thumbnail for patch " + t.patch_id + ": " + t.file.generic_string());
    return "<span class=\"ph\" title=\"" + id + "\">missing</span>";
  }
  return "<img class=\"t\" src=\"" + html_escape(t.file.generic_string()) + "\" alt=\"" + id + "\" title=\"" + id +
         "\">";
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("render_report: cannot write " + path.string());
  out << content;
  if (!out) throw std::runtime_error("render_report: write failed for " + path.string());
}

std::string page_head(const std::string& title) {
  return "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>" + html_escape(title) + "</title><style>" +
         kStyle + "</style></head><body>\n";
}

}  // namespace

std::string html_escape(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&#39;"; break;
      default: out += c;
    }
  }
  return out;
}

std::vector<std::string> render_report(std::span<const ClusterReportEntry> entries, const fs::path& out_dir,
                                       const ReportOptions& options) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("render_report: cannot create " + out_dir.string() + ": " + ec.message());

  int total = options.total_patches;
  if (total == 0)
    for (const auto& e : entries) total += e.size;
  const int n_concepts =
      static_cast<int>(std::count_if(entries.begin(), entries.end(), [](const auto& e) { return e.is_concept; }));

  std::vector<std::string> warnings;
  std::ostringstream idx;
  idx << page_head(options.title);
  idx << "<h1>" << html_escape(options.title) << "</h1>\n";
  idx << "<p>" << entries.size() << (entries.size() == 1 ? " cluster" : " clusters") << ", " << n_concepts
      << (n_concepts == 1 ? " concept" : " concepts") << ", " << total << " patches.";
  if (options.n_tests > 0) idx << " " << options.n_tests << " significance tests, no multiple-comparison correction.";
  idx << "</p>\n";
  for (const auto& note : options.notes) idx << "<p>" << html_escape(note) << "</p>\n";

  if (entries.empty()) {
    idx << "<p>No clusters to show.</p>\n";
  } else {
    idx << "<table>\n<tr><th rowspan=\"2\">cluster</th><th rowspan=\"2\">size</th><th rowspan=\"2\">%</th>"
        << "<th colspan=\"5\">patches per class</th><th colspan=\"5\">TCAV score</th>"
        << "<th rowspan=\"2\" class=\"l\">concept</th><th rowspan=\"2\" class=\"l\">patches</th></tr>\n<tr>";
    for (int pass = 0; pass < 2; ++pass)
      for (const auto k : kReportPathologyOrder) idx << "<th>" << to_string(k) << "</th>";
    idx << "</tr>\n";

    for (const auto& e : entries) {
      idx << "<tr" << (e.is_concept ? "" : " class=\"rejected\"") << "><td><a href=\"" << e.detail_page() << "\">"
          << e.cluster_id << "</a></td><td>" << e.size << "</td><td>" << fixed(e.percentage, 1) << "</td>";
      for (const auto k : kReportPathologyOrder) {
        const auto it = e.class_distribution.find(k);
        idx << "<td>" << (it == e.class_distribution.end() ? 0 : it->second) << "</td>";
      }
      for (const auto k : kReportPathologyOrder) idx << "<td>" << tcav_cell(e, k) << "</td>";
      idx << "<td class=\"l\">" << concept_cell(e) << "</td><td class=\"l\">";
      const std::size_t shown = std::min<std::size_t>(e.thumbnails.size(), static_cast<std::size_t>(options.thumbnails_per_row));
      for (std::size_t i = 0; i < shown; ++i) idx << thumbnail_html(e.thumbnails[i], out_dir, warnings);
      idx << "</td></tr>\n";
    }
    idx << "</table>\n";
  }
  idx << "</body></html>\n";
  write_file(out_dir / "index.html", idx.str());

  for (const auto& e : entries) {
    std::ostringstream page;
    page << page_head("Cluster " + std::to_string(e.cluster_id));
    page << "<p><a href=\"index.html\">all clusters</a></p>\n<h1>Cluster " << e.cluster_id << "</h1>\n";
    page << "<p>" << e.size << " patches (" << fixed(e.percentage, 1) << "%), " << concept_cell(e) << ".</p>\n";
    page << "<table><tr><th class=\"l\">class</th><th>patches</th><th>TCAV score</th><th>p</th></tr>\n";
    for (const auto k : kReportPathologyOrder) {
      const auto d = e.class_distribution.find(k);
      const auto t = e.tcav.find(k);
      page << "<tr><td class=\"l\">" << to_string(k) << "</td><td>" << (d == e.class_distribution.end() ? 0 : d->second)
           << "</td><td>" << tcav_cell(e, k) << "</td><td>"
           << (t != e.tcav.end() && t->second.status ? fixed(t->second.p_value, 4) : "") << "</td></tr>\n";
    }
    page << "</table>\n<h2>Patches</h2>\n<div>";
    for (const auto& t : e.thumbnails) page << thumbnail_html(t, out_dir, warnings);
    page << "</div>\n</body></html>\n";
    write_file(out_dir / e.detail_page(), page.str());
  }

  // Detail pages repeat index thumbnails; report each missing file once.
  std::sort(warnings.begin(), warnings.end());
  warnings.erase(std::unique(warnings.begin(), warnings.end()), warnings.end());
  return warnings;
}

void write_bmp(const fs::path& path, const Image& image) {
  const int w = static_cast<int>(image.cols());
  const int h = static_cast<int>(image.rows());
  if (w == 0 || h == 0) throw std::invalid_argument("write_bmp: empty image");
  const int stride = (w + 3) / 4 * 4;
  const std::uint32_t palette_bytes = 256 * 4;
  const std::uint32_t offset = 14 + 40 + palette_bytes;
  const std::uint32_t file_size = offset + static_cast<std::uint32_t>(stride * h);

  std::vector<unsigned char> buf;
  buf.reserve(file_size);
  const auto u16 = [&](std::uint32_t v) {
    buf.push_back(v & 0xff);
    buf.push_back((v >> 8) & 0xff);
  };
  const auto u32 = [&](std::uint32_t v) {
    u16(v & 0xffff);
    u16(v >> 16);
  };
  buf.push_back('B');
  buf.push_back('M');
  u32(file_size);
  u32(0);
  u32(offset);
  u32(40);
  u32(static_cast<std::uint32_t>(w));
  u32(static_cast<std::uint32_t>(h));
  u16(1);
  u16(8);
  u32(0);
  u32(static_cast<std::uint32_t>(stride * h));
  u32(2835);
  u32(2835);
  u32(256);
  u32(0);
  for (int i = 0; i < 256; ++i) {
    const auto c = static_cast<unsigned char>(i);
    buf.insert(buf.end(), {c, c, c, 0});
  }
  for (int r = h - 1; r >= 0; --r) {
    for (int c = 0; c < w; ++c) {
      const double v = std::clamp(image(r, c), 0.0, 1.0);
      buf.push_back(static_cast<unsigned char>(v * 255.0 + 0.5));
    }
    for (int p = w; p < stride; ++p) buf.push_back(0);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_bmp: cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

}  // namespace dtcav
