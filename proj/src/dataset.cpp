#include "dtcav/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "dtcav/npy.hpp"

namespace dtcav {

namespace fs = std::filesystem;
using nlohmann::json;

std::string SliceRecord::id() const {
  return patient_id + "/" + std::to_string(slice_index) + "/" + std::string(to_string(phase));
}

std::string_view to_string(PresenceSubgroup g) {
  switch (g) {
    case PresenceSubgroup::NONE: return "NONE";
    case PresenceSubgroup::ALL: return "ALL";
    case PresenceSubgroup::MYO: return "MYO";
    case PresenceSubgroup::RV: return "RV";
    case PresenceSubgroup::RV_MYO: return "RV_MYO";
    case PresenceSubgroup::LV_MYO: return "LV_MYO";
  }
  return "?";
}

void normalize_minmax(Image& image) {
  if (image.size() == 0) return;
  const double lo = image.minCoeff();
  const double hi = image.maxCoeff();
  if (hi > lo) {
    image = (image.array() - lo) / (hi - lo);
  } else {
    image.setZero();
  }
}

namespace {

// Maps file label codes to the internal Label encoding.
std::array<int, 256> label_table(const json& encoding) {
  std::array<int, 256> table;
  table.fill(-1);
  const std::pair<const char*, Label> names[] = {
      {"bg", Label::Background}, {"RV", Label::RV}, {"MYO", Label::MYO}, {"LV", Label::LV}};
  for (const auto& [name, label] : names) {
    int code = static_cast<int>(label);
    if (encoding.is_object() && encoding.contains(name)) code = encoding.at(name).get<int>();
    if (code < 0 || code > 255) throw DatasetError("", std::string("label code out of range for ") + name);
    table[static_cast<std::size_t>(code)] = static_cast<int>(label);
  }
  return table;
}

LabelGrid remap_mask(const LabelGrid& raw, const std::array<int, 256>& table, const std::string& id,
                     const char* what) {
  LabelGrid out(raw.rows(), raw.cols());
  for (Eigen::Index i = 0; i < raw.size(); ++i) {
    const int mapped = table[raw.data()[i]];
    if (mapped < 0)
      throw DatasetError(id, std::string("unknown label value ") + std::to_string(raw.data()[i]) + " in " + what);
    out.data()[i] = static_cast<std::uint8_t>(mapped);
  }
  return out;
}

bool any_foreground(const LabelGrid& mask) {
  return (mask.array() != static_cast<std::uint8_t>(Label::Background)).any();
}

}  // namespace

std::vector<SliceRecord> load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError("", "cannot open manifest " + path.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw DatasetError("", "malformed manifest " + path.string() + ": " + e.what());
  }
  const fs::path base = path.parent_path();
  const auto table = label_table(doc.value("label_encoding", json::object()));

  std::vector<SliceRecord> records;
  for (const auto& r : doc.value("records", json::array())) {
    SliceRecord rec;
    rec.patient_id = r.at("patient_id").get<std::string>();
    rec.slice_index = r.at("slice_index").get<int>();
    const std::string provisional_id = rec.patient_id + "/" + std::to_string(rec.slice_index);
    if (rec.slice_index < 0) throw DatasetError(provisional_id, "negative slice index");

    const auto phase = parse_phase(r.at("phase").get<std::string>());
    if (!phase) throw DatasetError(provisional_id, "unknown phase " + r.at("phase").dump());
    rec.phase = *phase;
    const auto pathology = parse_pathology(r.at("pathology").get<std::string>());
    if (!pathology) throw DatasetError(rec.id(), "unknown pathology " + r.at("pathology").dump());
    rec.pathology = *pathology;
    const auto split = parse_split(r.value("split", std::string("train")));
    if (!split) throw DatasetError(rec.id(), "unknown split " + r.at("split").dump());
    rec.split = *split;
    if (r.contains("pixel_spacing_mm")) rec.pixel_spacing_mm = r.at("pixel_spacing_mm").get<std::array<double, 2>>();

    const fs::path image_path = base / r.at("image_path").get<std::string>();
    const fs::path mask_path = base / r.at("mask_path").get<std::string>();
    if (!fs::exists(image_path)) throw DatasetError(rec.id(), "missing image file " + image_path.string());
    if (!fs::exists(mask_path)) throw DatasetError(rec.id(), "missing mask file " + mask_path.string());
    try {
      rec.image = npy::read_matrix(image_path);
      rec.mask = remap_mask(npy::read_labels(mask_path), table, rec.id(), "mask");
      if (r.contains("prediction_path") && !r.at("prediction_path").is_null()) {
        const fs::path pred_path = base / r.at("prediction_path").get<std::string>();
        rec.prediction = remap_mask(npy::read_labels(pred_path), table, rec.id(), "prediction");
      }
    } catch (const npy::NpyError& e) {
      throw DatasetError(rec.id(), e.what());
    }

    if (rec.image.rows() != rec.mask.rows() || rec.image.cols() != rec.mask.cols())
      throw DatasetError(rec.id(), "shape mismatch: image " + std::to_string(rec.image.rows()) + "x" +
                                       std::to_string(rec.image.cols()) + ", mask " +
                                       std::to_string(rec.mask.rows()) + "x" + std::to_string(rec.mask.cols()));
    if (rec.prediction && (rec.prediction->rows() != rec.mask.rows() || rec.prediction->cols() != rec.mask.cols()))
      throw DatasetError(rec.id(), "shape mismatch between prediction and mask");
    if (rec.image.size() == 0) throw DatasetError(rec.id(), "empty image");
    if (!rec.image.allFinite()) throw DatasetError(rec.id(), "non-finite intensity");
    normalize_minmax(rec.image);
    if (rec.image.minCoeff() < 0.0 || rec.image.maxCoeff() > 1.0)
      throw DatasetError(rec.id(), "intensity out of range after normalization");
    records.push_back(std::move(rec));
  }
  return records;
}

fs::path write_manifest(const fs::path& dir, std::span<const SliceRecord> records) {
  fs::create_directories(dir / "arrays");
  json doc;
  doc["version"] = 1;
  doc["label_encoding"] = {{"bg", 0}, {"RV", 1}, {"MYO", 2}, {"LV", 3}};
  doc["records"] = json::array();
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& rec = records[i];
    const std::string stem = "arrays/" + std::to_string(i);
    npy::write_matrix(dir / (stem + "_image.npy"), rec.image, npy::DType::F32);
    npy::write_labels(dir / (stem + "_mask.npy"), rec.mask);
    json r = {{"patient_id", rec.patient_id},
              {"slice_index", rec.slice_index},
              {"phase", std::string(to_string(rec.phase))},
              {"pathology", std::string(to_string(rec.pathology))},
              {"split", std::string(to_string(rec.split))},
              {"image_path", stem + "_image.npy"},
              {"mask_path", stem + "_mask.npy"},
              {"pixel_spacing_mm", rec.pixel_spacing_mm}};
    if (rec.prediction) {
      npy::write_labels(dir / (stem + "_pred.npy"), *rec.prediction);
      r["prediction_path"] = stem + "_pred.npy";
    }
    doc["records"].push_back(std::move(r));
  }
  const fs::path manifest = dir / "manifest.json";
  std::ofstream(manifest) << doc.dump(2) << "\n";
  return manifest;
}

std::optional<RoiBox> mask_roi(const LabelGrid& mask, double margin_frac) {
  if (margin_frac < 0.0 || margin_frac > 1.0) throw std::invalid_argument("margin_frac must lie in [0,1]");
  const int rows = static_cast<int>(mask.rows());
  const int cols = static_cast<int>(mask.cols());
  RoiBox box{rows, -1, cols, -1};
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      if (mask(r, c) == static_cast<std::uint8_t>(Label::Background)) continue;
      box.row_min = std::min(box.row_min, r);
      box.row_max = std::max(box.row_max, r);
      box.col_min = std::min(box.col_min, c);
      box.col_max = std::max(box.col_max, c);
    }
  }
  if (box.row_max < 0) return std::nullopt;

  const int pad = static_cast<int>(std::ceil(margin_frac * std::max(box.height(), box.width()) - 1e-12));
  box.row_min -= pad;
  box.row_max += pad;
  box.col_min -= pad;
  box.col_max += pad;
  // Grow the shorter axis to a square, extra pixel going to the far side.
  const int diff = box.height() - box.width();
  if (diff > 0) {
    box.col_min -= diff / 2;
    box.col_max += diff - diff / 2;
  } else if (diff < 0) {
    box.row_min -= (-diff) / 2;
    box.row_max += (-diff) - (-diff) / 2;
  }
  box.row_min = std::max(box.row_min, 0);
  box.col_min = std::max(box.col_min, 0);
  box.row_max = std::min(box.row_max, rows - 1);
  box.col_max = std::min(box.col_max, cols - 1);
  return box;
}

std::pair<SliceRecord, RoiBox> roi_crop(const SliceRecord& record, double margin_frac,
                                        const std::optional<RoiBox>& fallback) {
  auto box = mask_roi(record.mask, margin_frac);
  if (!box) {
    if (!fallback) throw DatasetError(record.id(), "empty mask and no fallback box");
    box = fallback;
    box->row_max = std::min<int>(box->row_max, static_cast<int>(record.mask.rows()) - 1);
    box->col_max = std::min<int>(box->col_max, static_cast<int>(record.mask.cols()) - 1);
    if (box->row_min > box->row_max || box->col_min > box->col_max)
      throw DatasetError(record.id(), "fallback box lies outside the image");
  }
  SliceRecord out;
  out.patient_id = record.patient_id;
  out.slice_index = record.slice_index;
  out.phase = record.phase;
  out.pathology = record.pathology;
  out.split = record.split;
  out.pixel_spacing_mm = record.pixel_spacing_mm;
  out.image = record.image.block(box->row_min, box->col_min, box->height(), box->width());
  out.mask = record.mask.block(box->row_min, box->col_min, box->height(), box->width());
  if (record.prediction)
    out.prediction = record.prediction->block(box->row_min, box->col_min, box->height(), box->width());
  return {std::move(out), *box};
}

std::map<std::string, RoiBox> patient_fallback_boxes(std::span<const SliceRecord> records, double margin_frac) {
  std::map<std::string, RoiBox> boxes;
  for (const auto& rec : records) {
    const auto box = mask_roi(rec.mask, margin_frac);
    if (!box) continue;
    auto [it, inserted] = boxes.emplace(rec.patient_id, *box);
    if (!inserted) {
      auto& u = it->second;
      u.row_min = std::min(u.row_min, box->row_min);
      u.row_max = std::max(u.row_max, box->row_max);
      u.col_min = std::min(u.col_min, box->col_min);
      u.col_max = std::max(u.col_max, box->col_max);
    }
  }
  return boxes;
}

double heart_pixel_ratio(std::span<const SliceRecord> records, std::optional<Phase> phase) {
  double foreground = 0.0;
  double total = 0.0;
  for (const auto& rec : records) {
    if (phase && rec.phase != *phase) continue;
    foreground += static_cast<double>((rec.mask.array() != static_cast<std::uint8_t>(Label::Background)).count());
    total += static_cast<double>(rec.mask.size());
  }
  if (total == 0.0) throw std::invalid_argument("heart_pixel_ratio: empty selection");
  return foreground / total;
}

PresenceSubgroup presence_subgroup(const LabelGrid& mask) {
  const auto has = [&](Label l) { return (mask.array() == static_cast<std::uint8_t>(l)).any(); };
  const bool lv = has(Label::LV);
  const bool rv = has(Label::RV);
  const bool myo = has(Label::MYO);
  // Combinations outside the six published subgroups fold into the nearest superset.
  if (lv && rv) return PresenceSubgroup::ALL;
  if (lv) return PresenceSubgroup::LV_MYO;
  if (rv && myo) return PresenceSubgroup::RV_MYO;
  if (rv) return PresenceSubgroup::RV;
  if (myo) return PresenceSubgroup::MYO;
  return PresenceSubgroup::NONE;
}

std::map<PresenceSubgroup, double> presence_distribution(std::span<const SliceRecord> records) {
  if (records.empty()) throw std::invalid_argument("presence_distribution: empty input");
  std::map<PresenceSubgroup, double> dist;
  for (auto g : kPresenceSubgroups) dist[g] = 0.0;
  for (const auto& rec : records) dist[presence_subgroup(rec.mask)] += 1.0;
  for (auto& [g, v] : dist) v /= static_cast<double>(records.size());
  return dist;
}

}  // namespace dtcav
