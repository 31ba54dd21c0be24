#include "dtcav/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "dtcav/dataset.hpp"
#include "dtcav/npy.hpp"
#include "dtcav/random.hpp"
#include "dtcav/report.hpp"
#include "dtcav/seg_metrics.hpp"
#include "dtcav/synthetic.hpp"

namespace dtcav {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::Prepare: return "prepare";
    case Stage::Patches: return "patches";
    case Stage::Embed: return "embed";
    case Stage::Cluster: return "cluster";
    case Stage::Cavs: return "cavs";
    case Stage::Score: return "score";
    case Stage::Report: return "report";
  }
  return "?";
}

std::optional<Stage> parse_stage(std::string_view s) {
  for (auto st : kStages)
    if (to_string(st) == s) return st;
  return std::nullopt;
}

namespace {

std::string stage_message(Stage stage, const std::string& record_id, const std::string& message) {
  std::string m = std::string(to_string(stage)) + ": ";
  if (!record_id.empty()) m += "record " + record_id + ": ";
  return m + message;
}

}  // namespace

StageError::StageError(Stage stage, const std::string& record_id, const std::string& message)
    : std::runtime_error(stage_message(stage, record_id, message)), stage_(stage), record_id_(record_id) {}

// ---------------------------------------------------------------------------
// Configuration

namespace {

void check_keys(const json& j, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument("config: " + where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw std::invalid_argument("config: unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void read(const json& j, const char* key, T& into) {
  if (j.contains(key)) into = j.at(key).get<T>();
}

Split split_field(const json& j, const char* key, Split fallback) {
  if (!j.contains(key)) return fallback;
  const auto s = parse_split(j.at(key).get<std::string>());
  if (!s) throw std::invalid_argument(std::string("config: ") + key + " must be 'train' or 'dev'");
  return *s;
}

Eigen::VectorXd vector_field(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

json vector_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

}  // namespace

PipelineConfig config_from_json(const json& j, const fs::path& base_dir) {
  check_keys(j,
             {"manifest", "seed", "input_size", "roi_margin", "discovery_split", "gradient_split", "slic", "reduction",
              "k_scan", "selection", "cav", "alpha", "n_random_trials", "adapter"},
             "config");
  PipelineConfig c;
  const auto resolve = [&](const std::string& p) { return p.empty() ? fs::path{} : (base_dir / p).lexically_normal(); };
  if (j.contains("manifest")) c.manifest = resolve(j.at("manifest").get<std::string>());
  read(j, "seed", c.seed);
  read(j, "input_size", c.input_size);
  read(j, "roi_margin", c.roi_margin);
  c.discovery_split = split_field(j, "discovery_split", c.discovery_split);
  c.gradient_split = split_field(j, "gradient_split", c.gradient_split);
  read(j, "alpha", c.alpha);
  read(j, "n_random_trials", c.n_random_trials);

  if (j.contains("slic")) {
    const auto& s = j.at("slic");
    check_keys(s, {"resolutions", "compactness", "max_iters"}, "slic");
    read(s, "resolutions", c.slic.resolutions);
    read(s, "compactness", c.slic.compactness);
    read(s, "max_iters", c.slic.max_iters);
  }
  if (j.contains("reduction")) {
    const auto& r = j.at("reduction");
    check_keys(r, {"method", "target_dim", "explained_variance", "max_dim"}, "reduction");
    if (r.contains("method")) {
      const auto m = r.at("method").get<std::string>();
      if (m == "pca")
        c.reduction.method = ReductionMethod::Pca;
      else if (m == "none")
        c.reduction.method = ReductionMethod::None;
      else
        throw std::invalid_argument("config: reduction.method must be 'pca' or 'none'");
    }
    read(r, "target_dim", c.reduction.target_dim);
    read(r, "explained_variance", c.reduction.explained_variance);
    read(r, "max_dim", c.reduction.max_dim);
  }
  if (j.contains("k_scan")) {
    const auto& k = j.at("k_scan");
    check_keys(k, {"min", "max"}, "k_scan");
    read(k, "min", c.k_scan.min);
    read(k, "max", c.k_scan.max);
  }
  if (j.contains("selection")) {
    const auto& s = j.at("selection");
    check_keys(s, {"min_size", "max_size", "min_patients", "max_single_patient_share"}, "selection");
    read(s, "min_size", c.selection.min_size);
    read(s, "max_size", c.selection.max_size);
    read(s, "min_patients", c.selection.min_patients);
    read(s, "max_single_patient_share", c.selection.max_single_patient_share);
  }
  if (j.contains("cav")) {
    const auto& v = j.at("cav");
    check_keys(v, {"n_concept_cavs", "l2", "max_steps", "tolerance", "holdout_fraction", "low_quality_threshold"},
               "cav");
    read(v, "n_concept_cavs", c.n_concept_cavs);
    read(v, "l2", c.cav.l2);
    read(v, "max_steps", c.cav.max_steps);
    read(v, "tolerance", c.cav.gradient_tolerance);
    read(v, "holdout_fraction", c.cav.holdout_fraction);
    read(v, "low_quality_threshold", c.cav.low_quality_threshold);
  }
  if (j.contains("adapter")) {
    const auto& a = j.at("adapter");
    check_keys(a, {"kind", "latent_dim", "pool_grid", "epsilon", "seed", "target", "dir", "heads"}, "adapter");
    read(a, "kind", c.adapter.kind);
    read(a, "latent_dim", c.adapter.analytic.latent_dim);
    read(a, "pool_grid", c.adapter.analytic.pool_grid);
    read(a, "epsilon", c.adapter.analytic.epsilon);
    read(a, "seed", c.adapter.analytic.seed);
    if (a.contains("target")) {
      const auto t = parse_target(a.at("target").get<std::string>());
      if (!t) throw std::invalid_argument("config: adapter.target must be lv, rv, myo or foreground_sum");
      c.adapter.target = *t;
    }
    if (a.contains("dir")) c.adapter.dir = resolve(a.at("dir").get<std::string>());
    if (a.contains("heads")) {
      for (const auto& [name, head] : a.at("heads").items()) {
        const auto t = parse_target(name);
        if (!t) throw std::invalid_argument("config: unknown head '" + name + "'");
        check_keys(head, {"w", "d"}, "adapter.heads." + name);
        c.adapter.heads[*t] = QuadraticHead{vector_field(head.at("w")), vector_field(head.at("d"))};
      }
    }
  }
  c.adapter.analytic.input_size = c.input_size;
  return c;
}

PipelineConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config: cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw std::invalid_argument("config: " + path.string() + ": " + e.what());
  }
  return config_from_json(j, path.parent_path());
}

json to_json(const PipelineConfig& c) {
  json heads = json::object();
  for (const auto& [t, h] : c.adapter.heads) heads[std::string(to_string(t))] = {{"w", vector_json(h.w)}, {"d", vector_json(h.d)}};
  return {
      {"manifest", c.manifest.generic_string()},
      {"seed", c.seed},
      {"input_size", c.input_size},
      {"roi_margin", c.roi_margin},
      {"discovery_split", std::string(to_string(c.discovery_split))},
      {"gradient_split", std::string(to_string(c.gradient_split))},
      {"slic", {{"resolutions", c.slic.resolutions}, {"compactness", c.slic.compactness}, {"max_iters", c.slic.max_iters}}},
      {"reduction",
       {{"method", c.reduction.method == ReductionMethod::Pca ? "pca" : "none"},
        {"target_dim", c.reduction.target_dim},
        {"explained_variance", c.reduction.explained_variance},
        {"max_dim", c.reduction.max_dim}}},
      {"k_scan", {{"min", c.k_scan.min}, {"max", c.k_scan.max}}},
      {"selection",
       {{"min_size", c.selection.min_size},
        {"max_size", c.selection.max_size},
        {"min_patients", c.selection.min_patients},
        {"max_single_patient_share", c.selection.max_single_patient_share}}},
      {"cav",
       {{"n_concept_cavs", c.n_concept_cavs},
        {"l2", c.cav.l2},
        {"max_steps", c.cav.max_steps},
        {"tolerance", c.cav.gradient_tolerance},
        {"holdout_fraction", c.cav.holdout_fraction},
        {"low_quality_threshold", c.cav.low_quality_threshold}}},
      {"alpha", c.alpha},
      {"n_random_trials", c.n_random_trials},
      {"adapter",
       {{"kind", c.adapter.kind},
        {"latent_dim", c.adapter.analytic.latent_dim},
        {"pool_grid", c.adapter.analytic.pool_grid},
        {"epsilon", c.adapter.analytic.epsilon},
        {"seed", c.adapter.analytic.seed},
        {"target", std::string(to_string(c.adapter.target))},
        {"dir", c.adapter.dir.generic_string()},
        {"heads", heads}}},
  };
}

void validate(const PipelineConfig& c) {
  const auto fail = [](const std::string& what) { throw std::invalid_argument("config: " + what); };
  if (c.manifest.empty()) fail("manifest is required");
  if (c.input_size < 2) fail("input_size must be at least 2");
  if (!(c.roi_margin >= 0.0)) fail("roi_margin must be non-negative");
  if (c.slic.resolutions.empty()) fail("slic.resolutions must not be empty");
  for (int r : c.slic.resolutions)
    if (r < 1) fail("slic.resolutions must be positive");
  if (!(c.slic.compactness > 0.0)) fail("slic.compactness must be positive");
  if (c.slic.max_iters < 1) fail("slic.max_iters must be positive");
  if (c.reduction.target_dim < 0) fail("reduction.target_dim must be non-negative");
  if (!(c.reduction.explained_variance > 0.0 && c.reduction.explained_variance <= 1.0))
    fail("reduction.explained_variance must lie in (0, 1]");
  if (c.reduction.max_dim < 1) fail("reduction.max_dim must be positive");
  if (c.k_scan.min < 1 || c.k_scan.max < c.k_scan.min + 2) fail("k_scan needs min >= 1 and max >= min + 2");
  if (c.selection.min_size < 1 || c.selection.max_size < c.selection.min_size)
    fail("selection sizes must satisfy 1 <= min_size <= max_size");
  if (c.selection.min_patients < 1) fail("selection.min_patients must be positive");
  if (!(c.selection.max_single_patient_share > 0.0 && c.selection.max_single_patient_share <= 1.0))
    fail("selection.max_single_patient_share must lie in (0, 1]");
  if (c.n_concept_cavs < 2) fail("cav.n_concept_cavs must be at least 2");
  if (!(c.cav.l2 > 0.0)) fail("cav.l2 must be positive");
  if (c.cav.max_steps < 1) fail("cav.max_steps must be positive");
  if (!(c.cav.holdout_fraction > 0.0 && c.cav.holdout_fraction < 1.0)) fail("cav.holdout_fraction must lie in (0, 1)");
  if (c.n_random_trials < 2) fail("n_random_trials must be at least 2");
  if (!(c.alpha > 0.0 && c.alpha < 1.0)) fail("alpha must lie in (0, 1)");
  if (c.adapter.kind == "analytic") {
    const auto& a = c.adapter.analytic;
    if (a.latent_dim < 1 || a.latent_dim > a.pool_grid * a.pool_grid - 1)
      fail("adapter.latent_dim must lie in [1, pool_grid^2 - 1]");
    if (a.pool_grid < 2 || a.pool_grid > c.input_size) fail("adapter.pool_grid must lie in [2, input_size]");
    for (const auto& [t, h] : c.adapter.heads)
      if (h.w.size() != a.latent_dim || h.d.size() != a.latent_dim)
        fail("adapter.heads." + std::string(to_string(t)) + " must have latent_dim entries");
  } else if (c.adapter.kind == "file") {
    if (c.adapter.dir.empty()) fail("adapter.dir is required for the file adapter");
  } else {
    fail("adapter.kind must be 'analytic' or 'file'");
  }
}

std::unique_ptr<ModelAdapter> make_adapter(const PipelineConfig& config) {
  if (config.adapter.kind == "file") return std::make_unique<FileBackedAdapter>(config.adapter.dir);
  AnalyticReferenceSpec spec = config.adapter.analytic;
  spec.input_size = config.input_size;
  auto model = std::make_unique<AnalyticReferenceModel>(spec);
  for (const auto& [t, h] : config.adapter.heads) model->set_head(t, h);
  return model;
}

// ---------------------------------------------------------------------------
// Stage plumbing

fs::path stage_dir(const fs::path& out_dir, Stage stage) { return out_dir / "work" / std::string(to_string(stage)); }

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string file_digest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return hex64(fnv1a(ss.str()));
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return json::parse(in);
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

// Settings that determine a stage's output, upstream excluded.
json stage_settings(const PipelineConfig& c, Stage s) {
  const json all = to_json(c);
  switch (s) {
    case Stage::Prepare:
      return {{"manifest", all["manifest"]},
              {"manifest_digest", file_digest(c.manifest)},
              {"roi_margin", c.roi_margin},
              {"discovery_split", all["discovery_split"]},
              {"gradient_split", all["gradient_split"]}};
    case Stage::Patches: return {{"slic", all["slic"]}, {"input_size", c.input_size}, {"seed", c.seed}};
    case Stage::Embed: {
      json a = all["adapter"];
      if (c.adapter.kind == "file") a["index_digest"] = file_digest(c.adapter.dir / "index.json");
      return {{"adapter", a}, {"input_size", c.input_size}};
    }
    case Stage::Cluster: return {{"reduction", all["reduction"]}, {"k_scan", all["k_scan"]}, {"seed", c.seed}};
    case Stage::Cavs:
      return {{"selection", all["selection"]},
              {"cav", all["cav"]},
              {"n_random_trials", c.n_random_trials},
              {"seed", c.seed}};
    case Stage::Score: return {{"alpha", c.alpha}};
    case Stage::Report: return json::object();
  }
  return json::object();
}

std::string stored_stamp(const fs::path& out, Stage s) {
  const fs::path p = stage_dir(out, s) / "stamp.json";
  if (!fs::exists(p)) return {};
  try {
    return read_json(p).value("hash", "");
  } catch (const std::exception&) {
    return {};
  }
}

void write_stamp(const fs::path& out, Stage s, const std::string& hash) {
  write_json(stage_dir(out, s) / "stamp.json", {{"stage", std::string(to_string(s))}, {"hash", hash}});
}

json records_json(const std::vector<SliceRecord>& recs) {
  json a = json::array();
  for (const auto& r : recs) a.push_back(r.id());
  return a;
}

struct PatchEntry {
  std::string id;
  PatchSource source;
  fs::path file;
};

std::vector<PatchEntry> load_patch_index(const fs::path& dir) {
  const json idx = read_json(dir / "index.json");
  std::vector<PatchEntry> out;
  for (const auto& e : idx.at("patches")) {
    PatchEntry p;
    p.id = e.at("id").get<std::string>();
    p.source.patient_id = e.at("patient_id").get<std::string>();
    p.source.slice_index = e.at("slice_index").get<int>();
    p.source.phase = parse_phase(e.at("phase").get<std::string>()).value();
    p.source.pathology = parse_pathology(e.at("pathology").get<std::string>()).value();
    p.file = dir / e.at("file").get<std::string>();
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<SliceRecord> prepared_records(const fs::path& out, Split split) {
  const auto all = load_manifest(stage_dir(out, Stage::Prepare) / "manifest.json");
  std::vector<SliceRecord> recs;
  for (const auto& r : all)
    if (r.split == split) recs.push_back(r);
  return recs;
}

json dice_json(const DiceReport& r) {
  const auto s = [](const StructureDice& d) { return json{{"avg", d.avg}, {"median", d.median}, {"n", d.n}}; };
  return {{"dataset", r.dataset_tag}, {"model", r.model_tag}, {"lv", s(r.lv)}, {"rv", s(r.rv)}, {"myo", s(r.myo)},
          {"global", r.global}};
}

// --- prepare ---------------------------------------------------------------

void run_prepare(const PipelineConfig& c, const fs::path& out) {
  std::vector<SliceRecord> records = load_manifest(c.manifest);
  if (records.empty()) throw StageError(Stage::Prepare, "", "manifest lists no slices: " + c.manifest.string());
  std::vector<SliceRecord> used;
  for (auto& r : records)
    if (r.split == c.discovery_split || r.split == c.gradient_split) used.push_back(std::move(r));
  const auto count = [&](Split s) {
    return std::count_if(used.begin(), used.end(), [&](const SliceRecord& r) { return r.split == s; });
  };
  if (count(c.discovery_split) == 0)
    throw StageError(Stage::Prepare, "", "no slices in the discovery split '" + std::string(to_string(c.discovery_split)) + "'");
  if (count(c.gradient_split) == 0)
    throw StageError(Stage::Prepare, "", "no slices in the gradient split '" + std::string(to_string(c.gradient_split)) + "'");

  const auto fallback = patient_fallback_boxes(used, c.roi_margin);
  std::vector<SliceRecord> crops;
  json boxes = json::array();
  for (const auto& r : used) {
    const auto it = fallback.find(r.patient_id);
    auto [crop, box] = roi_crop(r, c.roi_margin, it == fallback.end() ? std::nullopt : std::optional(it->second));
    if (crop.image.rows() < 2 || crop.image.cols() < 2) throw StageError(Stage::Prepare, r.id(), "ROI smaller than 2x2");
    boxes.push_back({{"id", r.id()}, {"box", {box.row_min, box.row_max, box.col_min, box.col_max}}});
    crops.push_back(std::move(crop));
  }

  json metrics;
  metrics["n_slices"] = used.size();
  metrics["heart_pixel_ratio"] = heart_pixel_ratio(used);
  json presence = json::object();
  for (const auto& [g, share] : presence_distribution(used)) presence[std::string(to_string(g))] = share;
  metrics["presence"] = presence;
  json dice = json::array();
  for (const auto split : {Split::Train, Split::Dev}) {
    std::vector<std::pair<LabelGrid, LabelGrid>> pairs;
    for (const auto& r : used)
      if (r.split == split && r.prediction) pairs.emplace_back(*r.prediction, r.mask);
    if (!pairs.empty()) dice.push_back(dice_json(dice_report(pairs, std::string(to_string(split)), c.adapter.kind)));
  }
  metrics["dice"] = dice;

  const fs::path dir = stage_dir(out, Stage::Prepare);
  fs::create_directories(dir);
  write_manifest(dir, crops);
  write_json(dir / "boxes.json", boxes);
  write_json(dir / "dataset_metrics.json", metrics);
}

// --- patches ---------------------------------------------------------------

void run_patches(const PipelineConfig& c, const fs::path& out) {
  const auto recs = prepared_records(out, c.discovery_split);
  std::vector<SuperpixelPatch> patches;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    SlicParams p = c.slic;
    p.seed = derive_seed(c.seed, "slic", {i});
    auto more = extract_patches(recs[i], p, c.input_size);
    std::move(more.begin(), more.end(), std::back_inserter(patches));
  }
  if (patches.empty()) throw StageError(Stage::Patches, "", "no patches produced");
  const fs::path dir = stage_dir(out, Stage::Patches);
  fs::remove_all(dir);
  dump_patches(dir, patches);
}

// --- embed -----------------------------------------------------------------

constexpr std::size_t kBatch = 256;

void run_embed(const PipelineConfig& c, const fs::path& out) {
  const auto adapter = make_adapter(c);
  const auto patches = load_patch_index(stage_dir(out, Stage::Patches));

  Eigen::MatrixXd activations(static_cast<Eigen::Index>(patches.size()), adapter->latent_dim());
  for (std::size_t b = 0; b < patches.size(); b += kBatch) {
    const std::size_t e = std::min(patches.size(), b + kBatch);
    std::vector<Image> images;
    images.reserve(e - b);
    for (std::size_t i = b; i < e; ++i) images.push_back(npy::read_matrix(patches[i].file));
    std::vector<ModelInput> inputs;
    for (std::size_t i = b; i < e; ++i) inputs.push_back({patches[i].id, &images[i - b]});
    activations.middleRows(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(e - b)) =
        adapter->activation_matrix(inputs);
  }

  const auto recs = prepared_records(out, c.gradient_split);
  Eigen::MatrixXd gradients(static_cast<Eigen::Index>(recs.size()), adapter->latent_dim());
  json examples = json::array();
  for (std::size_t b = 0; b < recs.size(); b += kBatch) {
    const std::size_t e = std::min(recs.size(), b + kBatch);
    std::vector<Image> images;
    images.reserve(e - b);
    for (std::size_t i = b; i < e; ++i) images.push_back(resize_bilinear(recs[i].image, c.input_size, c.input_size));
    std::vector<ModelInput> inputs;
    std::vector<std::string> ids;
    for (std::size_t i = b; i < e; ++i) ids.push_back(recs[i].id());
    for (std::size_t i = b; i < e; ++i) inputs.push_back({ids[i - b], &images[i - b]});
    gradients.middleRows(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(e - b)) =
        adapter->gradient_matrix(inputs, c.adapter.target);
  }
  for (const auto& r : recs) examples.push_back({{"id", r.id()}, {"pathology", std::string(to_string(r.pathology))}});

  const fs::path dir = stage_dir(out, Stage::Embed);
  fs::create_directories(dir);
  npy::write_matrix(dir / "activations.npy", activations);
  npy::write_matrix(dir / "gradients.npy", gradients);
  json ids = json::array();
  for (const auto& p : patches) ids.push_back(p.id);
  write_json(dir / "index.json", {{"patch_ids", ids},
                                  {"gradient_examples", examples},
                                  {"target", std::string(to_string(c.adapter.target))},
                                  {"latent_dim", adapter->latent_dim()}});
}

// --- cluster ---------------------------------------------------------------

void run_cluster(const PipelineConfig& c, const fs::path& out) {
  const PointMatrix activations = npy::read_matrix(stage_dir(out, Stage::Embed) / "activations.npy");
  const auto patches = load_patch_index(stage_dir(out, Stage::Patches));
  const auto n = static_cast<int>(activations.rows());
  const int k_max = std::min(c.k_scan.max, n / 10);
  if (k_max < c.k_scan.min + 2)
    throw StageError(Stage::Cluster, "",
                     std::to_string(n) + " patches are too few for an elbow scan starting at k = " +
                         std::to_string(c.k_scan.min));

  const Reduction reduction = fit_reduction(activations, c.reduction);
  const PointMatrix points = reduction.apply(activations);

  std::vector<int> ks(static_cast<std::size_t>(k_max - c.k_scan.min + 1));
  std::iota(ks.begin(), ks.end(), c.k_scan.min);
  const ElbowCurve curve = distortion_curve(points, ks, c.seed);
  const ElbowChoice choice = elbow_select(curve);
  const KMeansResult km =
      kmeans(points, choice.k, derive_seed(c.seed, "kmeans-k", {static_cast<std::uint64_t>(choice.k)}));
  const auto kept = remove_outliers(km.assignments, points, km.centroids);

  std::vector<PatchSource> sources;
  for (const auto& p : patches) sources.push_back(p.source);
  const auto summaries = summarize(kept, sources, points);

  json clusters = json::array();
  for (const auto& s : summaries) {
    json per_class = json::object();
    for (const auto k : kReportPathologyOrder) {
      const auto it = s.per_pathology_counts.find(k);
      per_class[std::string(to_string(k))] = it == s.per_pathology_counts.end() ? 0 : it->second;
    }
    json member_ids = json::array();
    for (auto m : s.members) member_ids.push_back(patches[m].id);
    clusters.push_back({{"cluster_id", s.cluster_id},
                        {"size", s.size},
                        {"members", s.members},
                        {"member_ids", member_ids},
                        {"per_pathology", per_class},
                        {"per_patient", s.per_patient_counts},
                        {"mean_distance", s.mean_distance}});
  }
  const auto outliers = std::count(kept.begin(), kept.end(), -1);
  const json dump = {
      {"n_patches", n},
      {"n_outliers", outliers},
      {"k", choice.k},
      {"no_elbow", choice.no_elbow},
      {"elbow", {{"ks", curve.ks}, {"distortions", curve.distortions}}},
      {"reduction",
       {{"method", c.reduction.method == ReductionMethod::Pca ? "pca" : "none"},
        {"dim", points.cols()},
        {"explained_variance_ratio",
         std::vector<double>(reduction.explained_variance_ratio.data(),
                             reduction.explained_variance_ratio.data() + reduction.explained_variance_ratio.size())}}},
      {"clusters", clusters},
  };
  const fs::path dir = stage_dir(out, Stage::Cluster);
  fs::create_directories(dir);
  write_json(dir / "clusters.json", dump);
  write_json(out / "clusters.json", dump);
}

std::vector<ClusterSummary> load_summaries(const json& dump) {
  std::vector<ClusterSummary> out;
  for (const auto& e : dump.at("clusters")) {
    ClusterSummary s;
    s.cluster_id = e.at("cluster_id").get<int>();
    s.size = e.at("size").get<int>();
    s.members = e.at("members").get<std::vector<std::size_t>>();
    for (const auto& [name, count] : e.at("per_pathology").items())
      if (count.get<int>() > 0) s.per_pathology_counts[parse_pathology(name).value()] = count.get<int>();
    s.per_patient_counts = e.at("per_patient").get<std::map<std::string, int>>();
    s.mean_distance = e.at("mean_distance").get<double>();
    out.push_back(std::move(s));
  }
  return out;
}

// --- cavs ------------------------------------------------------------------

json cav_json(const Cav& v) {
  return {{"direction", vector_json(v.direction)},
          {"offset", v.offset},
          {"counterpart_seed", v.counterpart_seed},
          {"accuracy", v.training_accuracy},
          {"low_quality", v.low_quality},
          {"steps", v.steps}};
}

Cav cav_from_json(const json& j, int concept_id) {
  Cav v;
  v.direction = vector_field(j.at("direction"));
  v.offset = j.at("offset").get<double>();
  v.counterpart_seed = j.at("counterpart_seed").get<std::uint64_t>();
  v.training_accuracy = j.at("accuracy").get<double>();
  v.low_quality = j.at("low_quality").get<bool>();
  v.steps = j.at("steps").get<int>();
  v.concept_id = concept_id;
  return v;
}

void run_cavs(const PipelineConfig& c, const fs::path& out) {
  const PointMatrix activations = npy::read_matrix(stage_dir(out, Stage::Embed) / "activations.npy");
  const auto summaries = load_summaries(read_json(stage_dir(out, Stage::Cluster) / "clusters.json"));
  const auto concepts = select_concepts(summaries, c.selection);
  const auto n = static_cast<std::size_t>(activations.rows());

  json entries = json::array();
  for (const auto& con : concepts) {
    json e = {{"cluster_id", con.cluster_id},
              {"selected", con.selected},
              {"rejection_reason",
               con.rejection_reason ? json(std::string(to_string(*con.rejection_reason))) : json(nullptr)}};
    if (con.selected) {
      const auto cid = static_cast<std::uint64_t>(con.cluster_id);
      const PointMatrix concept_points = gather_rows(activations, con.members);
      const std::size_t pool = n - con.members.size();
      if (pool < 2) throw StageError(Stage::Cavs, "", "concept " + std::to_string(con.cluster_id) + " leaves no counterpart pool");
      const std::size_t counterpart_size = std::min(con.members.size(), pool);

      json cavs = json::array();
      for (int i = 0; i < c.n_concept_cavs; ++i) {
        const auto ui = static_cast<std::uint64_t>(i);
        const std::uint64_t cp_seed = derive_seed(c.seed, "counterpart", {cid, ui});
        const auto counterpart = sample_counterpart(n, con.members, counterpart_size, cp_seed);
        Cav v = fit_cav(concept_points, gather_rows(activations, counterpart), derive_seed(c.seed, "cav", {cid, ui}), c.cav);
        v.counterpart_seed = cp_seed;
        cavs.push_back(cav_json(v));
      }

      // Random CAVs separate two disjoint random samples of concept size.
      const std::size_t half = std::min(con.members.size(), n / 2);
      json randoms = json::array();
      for (int t = 0; t < c.n_random_trials; ++t) {
        const auto ut = static_cast<std::uint64_t>(t);
        const std::uint64_t r_seed = derive_seed(c.seed, "random-sample", {cid, ut});
        const auto sample = sample_counterpart(n, {}, 2 * half, r_seed);
        const std::span<const std::size_t> all(sample);
        Cav v = fit_cav(gather_rows(activations, all.first(half)), gather_rows(activations, all.subspan(half)),
                        derive_seed(c.seed, "random-cav", {cid, ut}), c.cav);
        v.counterpart_seed = r_seed;
        randoms.push_back(cav_json(v));
      }
      e["cavs"] = cavs;
      e["random_cavs"] = randoms;
    }
    entries.push_back(std::move(e));
  }
  const fs::path dir = stage_dir(out, Stage::Cavs);
  fs::create_directories(dir);
  write_json(dir / "cavs.json", {{"concepts", entries}});
}

// --- score -----------------------------------------------------------------

json result_json(const TcavResult& r) {
  return {{"concept_id", r.concept_id},
          {"class", std::string(to_string(r.class_k))},
          {"score", r.score ? json(*r.score) : json(nullptr)},
          {"p_value", r.p_value},
          {"status", std::string(to_string(r.status))},
          {"n_trials", r.n_trials},
          {"random_mean", r.random_mean},
          {"random_std", r.random_std},
          {"concept_scores", r.concept_scores}};
}

void run_score(const PipelineConfig& c, const fs::path& out) {
  const fs::path embed = stage_dir(out, Stage::Embed);
  const Eigen::MatrixXd grads = npy::read_matrix(embed / "gradients.npy");
  const json index = read_json(embed / "index.json");
  std::map<Pathology, std::vector<Eigen::Index>> rows;
  Eigen::Index i = 0;
  for (const auto& e : index.at("gradient_examples")) rows[parse_pathology(e.at("pathology").get<std::string>()).value()].push_back(i++);
  ClassGradients by_class;
  for (const auto& [k, idx] : rows) by_class[k] = grads(idx, Eigen::all);

  const json cavs = read_json(stage_dir(out, Stage::Cavs) / "cavs.json");
  json results = json::array();
  for (const auto& e : cavs.at("concepts")) {
    if (!e.at("selected").get<bool>()) continue;
    Concept con;
    con.cluster_id = e.at("cluster_id").get<int>();
    con.selected = true;
    std::vector<Cav> concept_cavs, random_cavs;
    for (const auto& v : e.at("cavs")) concept_cavs.push_back(cav_from_json(v, con.cluster_id));
    for (const auto& v : e.at("random_cavs")) random_cavs.push_back(cav_from_json(v, con.cluster_id));
    for (const auto& r : score_concept(con, concept_cavs, random_cavs, by_class, {c.alpha})) results.push_back(result_json(r));
  }
  fs::create_directories(stage_dir(out, Stage::Score));
  write_json(out / "results.json", results);
}

// --- report ----------------------------------------------------------------

void run_report(const PipelineConfig& c, const fs::path& out) {
  const json clusters = read_json(stage_dir(out, Stage::Cluster) / "clusters.json");
  const json cavs = read_json(stage_dir(out, Stage::Cavs) / "cavs.json");
  const json results = read_json(out / "results.json");
  const auto patches = load_patch_index(stage_dir(out, Stage::Patches));
  const int n_patches = clusters.at("n_patches").get<int>();

  std::map<int, std::pair<bool, std::optional<RejectionReason>>> flags;
  for (const auto& e : cavs.at("concepts")) {
    std::optional<RejectionReason> reason;
    if (!e.at("rejection_reason").is_null()) reason = parse_rejection(e.at("rejection_reason").get<std::string>());
    flags[e.at("cluster_id").get<int>()] = {e.at("selected").get<bool>(), reason};
  }

  std::vector<TcavResult> parsed;
  for (const auto& r : results) {
    TcavResult t;
    t.concept_id = r.at("concept_id").get<int>();
    t.class_k = parse_pathology(r.at("class").get<std::string>()).value();
    if (!r.at("score").is_null()) t.score = r.at("score").get<double>();
    t.p_value = r.at("p_value").get<double>();
    const auto st = r.at("status").get<std::string>();
    t.status = st == "scored" ? TcavStatus::Scored : st == "degenerate" ? TcavStatus::Degenerate : TcavStatus::Insignificant;
    parsed.push_back(std::move(t));
  }

  const fs::path report = out / "report";
  fs::remove_all(report);
  fs::create_directories(report / "thumbs");

  std::vector<ClusterReportEntry> entries;
  for (const auto& e : clusters.at("clusters")) {
    ClusterReportEntry r;
    r.cluster_id = e.at("cluster_id").get<int>();
    r.size = e.at("size").get<int>();
    r.percentage = 100.0 * r.size / n_patches;
    for (const auto& [name, count] : e.at("per_pathology").items())
      r.class_distribution[parse_pathology(name).value()] = count.get<int>();
    const auto f = flags.find(r.cluster_id);
    if (f != flags.end()) {
      r.is_concept = f->second.first;
      r.rejection_reason = f->second.second;
    }
    for (const auto& t : parsed)
      if (t.concept_id == r.cluster_id) r.tcav[t.class_k] = ClassCell{t.score, t.status, t.p_value};
    for (auto m : e.at("members").get<std::vector<std::size_t>>()) {
      const fs::path rel = fs::path("thumbs") / (std::to_string(m) + ".bmp");
      write_bmp(report / rel, npy::read_matrix(patches[m].file));
      r.thumbnails.push_back({patches[m].id, rel});
    }
    entries.push_back(std::move(r));
  }

  const int n_outliers = clusters.at("n_outliers").get<int>();
  const int n_tests = static_cast<int>(std::count_if(parsed.begin(), parsed.end(),
                                                     [](const TcavResult& t) { return t.status != TcavStatus::Degenerate; }));
  ReportOptions options;
  options.total_patches = n_patches;
  options.n_tests = n_tests;
  options.notes.push_back(std::to_string(n_outliers) + " of " + std::to_string(n_patches) +
                          " patches were set aside as cluster outliers.");
  options.notes.push_back("Elbow-selected k = " + std::to_string(clusters.at("k").get<int>()) +
                          (clusters.at("no_elbow").get<bool>() ? " (no elbow found; largest k scanned)." : "."));
  const auto warnings = render_report(entries, report, options);

  std::vector<ClusterSummary> summaries = load_summaries(clusters);
  const auto sizes = summaries.empty() ? SizeStatistics{} : size_statistics(summaries);
  const auto spread = score_spread(parsed);
  json per_concept = json::object();
  for (const auto& [id, s] : spread.per_concept) per_concept[std::to_string(id)] = s;
  const json dataset = read_json(stage_dir(out, Stage::Prepare) / "dataset_metrics.json");
  write_json(out / "metrics.json",
             {{"dataset", dataset},
              {"n_patches", n_patches},
              {"n_outliers", n_outliers},
              {"k", clusters.at("k")},
              {"cluster_sizes", {{"min", sizes.min}, {"max", sizes.max}, {"mean", sizes.mean}, {"median", sizes.median}}},
              {"n_concepts", std::count_if(entries.begin(), entries.end(), [](const auto& e) { return e.is_concept; })},
              {"n_tests", n_tests},
              {"alpha", c.alpha},
              {"score_spread",
               {{"per_concept", per_concept}, {"mean", spread.mean}, {"std", spread.std}, {"max", spread.max},
                {"max_concept", spread.max_concept}}},
              {"report_warnings", warnings}});
  fs::create_directories(stage_dir(out, Stage::Report));
}

void run_stage(const PipelineConfig& c, const fs::path& out, Stage s) {
  switch (s) {
    case Stage::Prepare: return run_prepare(c, out);
    case Stage::Patches: return run_patches(c, out);
    case Stage::Embed: return run_embed(c, out);
    case Stage::Cluster: return run_cluster(c, out);
    case Stage::Cavs: return run_cavs(c, out);
    case Stage::Score: return run_score(c, out);
    case Stage::Report: return run_report(c, out);
  }
}

}  // namespace

std::vector<StageRun> run_pipeline(const PipelineConfig& config, const fs::path& out_dir, Stage last, bool force,
                                   const ProgressFn& progress) {
  try {
    validate(config);
  } catch (const std::invalid_argument& e) {
    throw StageError(Stage::Prepare, "", e.what());
  }
  std::vector<StageRun> runs;
  std::string upstream;
  for (const Stage s : kStages) {
    std::string hash;
    try {
      hash = hex64(fnv1a(stage_settings(config, s).dump() + upstream));
    } catch (const std::exception& e) {
      throw StageError(s, "", e.what());
    }
    if (!force && stored_stamp(out_dir, s) == hash) {
      runs.push_back({s, false});
      if (progress) progress(std::string(to_string(s)) + ": up to date");
    } else {
      if (progress) progress(std::string(to_string(s)) + ": running");
      // Anything downstream is stale once this stage reruns.
      for (auto t : kStages)
        if (t >= s) fs::remove(stage_dir(out_dir, t) / "stamp.json");
      try {
        run_stage(config, out_dir, s);
      } catch (const StageError&) {
        throw;
      } catch (const DatasetError& e) {
        std::string msg = e.what();
        const std::string prefix = "record " + e.record_id() + ": ";
        if (!e.record_id().empty() && msg.rfind(prefix, 0) == 0) msg = msg.substr(prefix.size());
        throw StageError(s, e.record_id(), msg);
      } catch (const std::exception& e) {
        throw StageError(s, "", e.what());
      }
      write_stamp(out_dir, s, hash);
      runs.push_back({s, true});
    }
    upstream = hash;
    if (s == last) break;
  }
  return runs;
}

// ---------------------------------------------------------------------------
// Demo data

fs::path write_demo(const fs::path& dir, std::uint64_t seed) {
  PlantedSpec spec;
  spec.seed = seed;
  const PlantedDataset data = make_planted_dataset(spec);
  fs::create_directories(dir);
  write_manifest(dir / "data", data.records);

  PipelineConfig c;
  c.manifest = dir / "data" / "manifest.json";
  c.seed = seed;
  c.input_size = spec.image_size;
  c.roi_margin = 0.3;  // the padded box covers the whole slice
  c.slic.resolutions = {2};
  c.adapter.analytic.latent_dim = 63;  // full rank: inner products of centred images survive
  c.adapter.analytic.pool_grid = 8;
  c.adapter.analytic.epsilon = 0.05;
  c.adapter.analytic.seed = seed;
  c.adapter.analytic.input_size = spec.image_size;

  // Head aligned with the left-texture direction and blind to the right texture.
  const AnalyticReferenceModel model(c.adapter.analytic);
  const Eigen::VectorXd t1 = model.encode(data.left_texture);
  const Eigen::VectorXd t2 = model.encode(data.right_texture).normalized();
  const Eigen::VectorXd w = (t1 - t1.dot(t2) * t2).normalized();
  const Eigen::VectorXd d = model.head(TargetClass::LV).d;

  // |w| is four standard deviations of eps·(d⊙a)·v over the gradient
  // examples (v a random unit vector), so the linear term decides the sign of S
  // for aligned directions and the curvature term decides it for orthogonal ones.
  double sum_sq = 0.0;
  int n_train = 0;
  for (const auto& r : data.records) {
    if (r.split != Split::Train) continue;
    sum_sq += d.cwiseProduct(model.encode(r.image)).squaredNorm();
    ++n_train;
  }
  const double sigma = c.adapter.analytic.epsilon * std::sqrt(sum_sq / n_train / static_cast<double>(d.size()));
  c.adapter.heads[TargetClass::FOREGROUND_SUM] = QuadraticHead{4.0 * sigma * w, d};

  json j = to_json(c);
  j["manifest"] = "data/manifest.json";
  j["adapter"]["dir"] = "";
  const fs::path path = dir / "config.json";
  write_json(path, j);
  return path;
}

}  // namespace dtcav
