#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <iterator>
#include <sstream>

#include <json.hpp>

#include "dtcav/pipeline.hpp"
#include "dtcav/report.hpp"
#include "test_util.hpp"

using namespace dtcav;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

ClusterReportEntry entry(int id, int size) {
  ClusterReportEntry e;
  e.cluster_id = id;
  e.size = size;
  e.percentage = 100.0 * size / 200.0;
  return e;
}

ClassCell cell(double score, TcavStatus status = TcavStatus::Scored) {
  ClassCell c;
  c.score = score;
  c.status = status;
  c.p_value = 0.01;
  return c;
}

// Text of the index table row for cluster `id`.
std::string row_of(const std::string& html, int id) {
  const std::string key = "<a href=\"cluster_" + std::to_string(id) + ".html\">";
  const auto link = html.find(key);
  REQUIRE(link != std::string::npos);
  const auto start = html.rfind("<tr", link);
  return html.substr(start, html.find("</tr>", start) - start);
}

// The cells of one row, tags stripped.
std::vector<std::string> cells(const std::string& row) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while ((pos = row.find("<td", pos)) != std::string::npos) {
    const auto open = row.find('>', pos) + 1;
    const auto close = row.find("</td>", open);
    std::string text;
    bool in_tag = false;
    for (char c : row.substr(open, close - open)) {
      if (c == '<') in_tag = true;
      else if (c == '>') in_tag = false;
      else if (!in_tag) text += c;
    }
    out.push_back(text);
    pos = close;
  }
  return out;
}

struct Demo {
  TempDir tmp;
  PipelineConfig config;
  Demo() { config = load_config(write_demo(tmp.path / "demo", 1)); }
};

}  // namespace

TEST_CASE("stage names round-trip") {
  for (auto s : kStages) CHECK(parse_stage(to_string(s)) == s);
  CHECK_FALSE(parse_stage("bogus").has_value());
}

TEST_CASE("config JSON round-trips and rejects unknown keys") {
  const Demo demo;
  const json j = to_json(demo.config);
  const PipelineConfig back = config_from_json(j);
  CHECK(to_json(back) == j);
  CHECK(back.seed == demo.config.seed);
  CHECK(back.slic.resolutions == std::vector<int>{2});

  json bad = j;
  bad["slic"]["compactnes"] = 3.0;
  CHECK_THROWS(config_from_json(bad));
  json top = j;
  top["sede"] = 3;
  CHECK_THROWS(config_from_json(top));
}

TEST_CASE("validation names the offending field") {
  PipelineConfig c;
  c.manifest = "m.json";
  CHECK_NOTHROW(validate(c));
  c.alpha = 1.5;
  CHECK_THROWS_WITH_AS(validate(c), doctest::Contains("alpha"), std::invalid_argument);
  c.alpha = 0.05;
  c.selection.min_size = 700;
  CHECK_THROWS_AS(validate(c), std::invalid_argument);
  c.selection.min_size = 30;
  c.slic.resolutions.clear();
  CHECK_THROWS_AS(validate(c), std::invalid_argument);
}

TEST_CASE("empty manifest fails at prepare without writing outputs") {
  const TempDir tmp;
  std::ofstream(tmp.path / "m.json") << R"({"label_encoding":{"bg":0,"RV":1,"MYO":2,"LV":3},"records":[]})";
  PipelineConfig c;
  c.manifest = tmp.path / "m.json";
  const fs::path out = tmp.path / "out";
  try {
    run_pipeline(c, out);
    FAIL("expected a stage error");
  } catch (const StageError& e) {
    CHECK(e.stage() == Stage::Prepare);
    CHECK(std::string(e.what()).rfind("prepare: ", 0) == 0);
  }
  CHECK_FALSE(fs::exists(out / "results.json"));
  CHECK_FALSE(fs::exists(stage_dir(out, Stage::Prepare) / "stamp.json"));
}

TEST_CASE("demo runs end to end, reruns as a no-op and reproduces bytes") {
  const Demo demo;
  const fs::path out = demo.tmp.path / "out";
  const auto first = run_pipeline(demo.config, out);
  REQUIRE(first.size() == kStages.size());
  for (const auto& r : first) CHECK(r.executed);

  const json results = read_json(out / "results.json");
  int scored = 0;
  for (const auto& r : results) scored += r.at("status") == "scored";
  CHECK(scored >= 1);
  CHECK(fs::exists(out / "report" / "index.html"));
  CHECK(fs::exists(out / "metrics.json"));
  CHECK(fs::exists(out / "clusters.json"));

  const std::string bytes = slurp(out / "results.json");
  const auto second = run_pipeline(demo.config, out);
  for (const auto& r : second) CHECK_FALSE(r.executed);
  CHECK(slurp(out / "results.json") == bytes);

  const auto forced = run_pipeline(demo.config, out, Stage::Report, true);
  for (const auto& r : forced) CHECK(r.executed);
  CHECK(slurp(out / "results.json") == bytes);

  const fs::path other = demo.tmp.path / "other";
  run_pipeline(demo.config, other);
  CHECK(slurp(other / "results.json") == bytes);
  CHECK(slurp(other / "clusters.json") == slurp(out / "clusters.json"));
}

TEST_CASE("changing a stage setting reruns that stage and the ones after it") {
  const Demo demo;
  const fs::path out = demo.tmp.path / "out";
  run_pipeline(demo.config, out);
  PipelineConfig changed = demo.config;
  changed.alpha = 0.01;
  const auto runs = run_pipeline(changed, out);
  for (const auto& r : runs) CHECK(r.executed == (r.stage >= Stage::Score));
}

TEST_CASE("stopping early leaves later stages untouched") {
  const Demo demo;
  const fs::path out = demo.tmp.path / "out";
  const auto runs = run_pipeline(demo.config, out, Stage::Embed);
  CHECK(runs.size() == 3);
  CHECK(fs::exists(stage_dir(out, Stage::Embed) / "activations.npy"));
  CHECK_FALSE(fs::exists(stage_dir(out, Stage::Cluster)));
  CHECK_FALSE(fs::exists(out / "results.json"));
}

TEST_CASE("report totals match the patch count") {
  const Demo demo;
  const fs::path out = demo.tmp.path / "out";
  run_pipeline(demo.config, out);
  const json clusters = read_json(out / "clusters.json");
  const json patches = read_json(stage_dir(out, Stage::Patches) / "index.json");
  int sum = 0;
  for (const auto& c : clusters.at("clusters")) sum += c.at("size").get<int>();
  const int n_patches = static_cast<int>(patches.at("patches").size());
  CHECK(clusters.at("n_patches") == n_patches);
  CHECK(sum + clusters.at("n_outliers").get<int>() == n_patches);
  const json metrics = read_json(out / "metrics.json");
  CHECK(metrics.at("n_patches") == n_patches);
  CHECK(metrics.at("report_warnings").empty());
  const std::string index = slurp(out / "report" / "index.html");
  CHECK(index.find(std::to_string(n_patches) + " patches") != std::string::npos);
}

TEST_CASE("a missing model export names the stage") {
  const Demo demo;
  PipelineConfig c = demo.config;
  c.adapter.kind = "file";
  c.adapter.dir = demo.tmp.path / "nowhere";
  try {
    run_pipeline(c, demo.tmp.path / "out");
    FAIL("expected a stage error");
  } catch (const StageError& e) {
    CHECK(e.stage() == Stage::Embed);
  }
}

TEST_CASE("empty report states zero clusters") {
  const TempDir tmp;
  const auto warnings = render_report(std::vector<ClusterReportEntry>{}, tmp.path);
  CHECK(warnings.empty());
  const std::string html = slurp(tmp.path / "index.html");
  CHECK(html.find("0 clusters") != std::string::npos);
  CHECK(html.find("No clusters to show.") != std::string::npos);
}

TEST_CASE("report row shows scored classes and blanks the rest") {
  const TempDir tmp;
  ClusterReportEntry e = entry(56, 20);
  e.is_concept = true;
  e.class_distribution = {{Pathology::MINF, 8}, {Pathology::HCM, 7}, {Pathology::RV, 5}};
  e.tcav = {{Pathology::MINF, cell(0.48)}, {Pathology::HCM, cell(0.23)}, {Pathology::RV, cell(0.26)}};
  ClusterReportEntry r = entry(7, 40);
  r.rejection_reason = RejectionReason::SinglePatient;
  r.tcav = {{Pathology::NOR, ClassCell{std::nullopt, TcavStatus::Degenerate, 1.0}},
            {Pathology::DCM, cell(0.55, TcavStatus::Insignificant)}};
  const std::vector<ClusterReportEntry> entries{e, r};
  render_report(entries, tmp.path);
  const std::string html = slurp(tmp.path / "index.html");

  // Columns: cluster, size, %, five class counts, five scores (NOR RV MINF DCM HCM), concept, patches.
  const auto c56 = cells(row_of(html, 56));
  REQUIRE(c56.size() == 15);
  CHECK(c56[8] == "");
  CHECK(c56[9] == "0.26");
  CHECK(c56[10] == "0.48");
  CHECK(c56[11] == "");
  CHECK(c56[12] == "0.23");
  CHECK(c56[13] == "concept");
  CHECK(c56[4] == "5");

  const auto c7 = cells(row_of(html, 7));
  CHECK(c7[8] == "degenerate");
  CHECK(c7[11] == "0.55 (insignificant)");
  CHECK(c7[13] == "not a concept (single_patient)");
  CHECK(fs::exists(tmp.path / "cluster_56.html"));
  CHECK(fs::exists(tmp.path / "cluster_7.html"));
}

TEST_CASE("missing thumbnails render placeholders and warn once") {
  const TempDir tmp;
  ClusterReportEntry e = entry(1, 2);
  e.thumbnails = {{"a/0/ED/r5/s0", "thumbs/none.bmp"}};
  write_bmp(tmp.path / "ok.bmp", Image::Constant(3, 3, 0.5));
  e.thumbnails.push_back({"a/0/ED/r5/s1", "ok.bmp"});
  const auto warnings = render_report(std::vector<ClusterReportEntry>{e}, tmp.path);
  CHECK(warnings.size() == 1);
  const std::string detail = slurp(tmp.path / "cluster_1.html");
  CHECK(detail.find("class=\"ph\"") != std::string::npos);
  CHECK(detail.find("src=\"ok.bmp\"") != std::string::npos);
}

TEST_CASE("html escaping") { CHECK(html_escape("<a href=\"x\">&'") == "&lt;a href=&quot;x&quot;&gt;&amp;&#39;"); }

TEST_CASE("BMP header and padded rows") {
  const TempDir tmp;
  Image img(2, 3);
  img << 0.0, 0.5, 1.0, 1.0, 1.0, 2.0;
  write_bmp(tmp.path / "t.bmp", img);
  const std::string b = slurp(tmp.path / "t.bmp");
  const auto u32 = [&](std::size_t o) {
    return static_cast<std::uint32_t>(static_cast<unsigned char>(b[o])) |
           static_cast<std::uint32_t>(static_cast<unsigned char>(b[o + 1])) << 8 |
           static_cast<std::uint32_t>(static_cast<unsigned char>(b[o + 2])) << 16 |
           static_cast<std::uint32_t>(static_cast<unsigned char>(b[o + 3])) << 24;
  };
  CHECK(b.substr(0, 2) == "BM");
  CHECK(u32(2) == b.size());
  CHECK(u32(18) == 3);
  CHECK(u32(22) == 2);
  const std::uint32_t offset = u32(10);
  CHECK(b.size() == offset + 2 * 4);
  // Bottom-up: the first stored row is the last image row, clamped to 255.
  CHECK(static_cast<unsigned char>(b[offset]) == 255);
  CHECK(static_cast<unsigned char>(b[offset + 4]) == 0);
  CHECK(static_cast<unsigned char>(b[offset + 6]) == 255);
}
