#ifndef DTCAV_PIPELINE_HPP
#define DTCAV_PIPELINE_HPP

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dtcav/concept_cav.hpp"
#include "dtcav/latent_analysis.hpp"
#include "dtcav/model_adapter.hpp"
#include "dtcav/superpixel.hpp"
#include "dtcav/tcav_engine.hpp"
#include "dtcav/types.hpp"

namespace dtcav {

enum class Stage { Prepare, Patches, Embed, Cluster, Cavs, Score, Report };

inline constexpr std::array<Stage, 7> kStages = {Stage::Prepare, Stage::Patches, Stage::Embed, Stage::Cluster,
                                                 Stage::Cavs,    Stage::Score,   Stage::Report};

std::string_view to_string(Stage s);
std::optional<Stage> parse_stage(std::string_view s);

/// A failure inside one stage. what() reads "<stage>: [record <id>: ]<message>".
class StageError : public std::runtime_error {
 public:
  StageError(Stage stage, const std::string& record_id, const std::string& message);
  Stage stage() const { return stage_; }
  const std::string& record_id() const { return record_id_; }

 private:
  Stage stage_;
  std::string record_id_;
};

struct AdapterConfig {
  std::string kind = "analytic";  // "analytic" or "file"
  AnalyticReferenceSpec analytic;  // input_size is taken from PipelineConfig
  std::map<TargetClass, QuadraticHead> heads;  // overrides of the seeded heads
  TargetClass target = TargetClass::FOREGROUND_SUM;
  std::filesystem::path dir;  // file-backed store
};

struct KScan {
  int min = 2;
  int max = 100;  // further capped at n_patches / 10
};

struct PipelineConfig {
  std::filesystem::path manifest;
  std::uint64_t seed = 0;
  int input_size = 348;
  double roi_margin = 0.1;
  Split discovery_split = Split::Dev;   // slices cut into superpixel patches
  Split gradient_split = Split::Train;  // slices forming the per-class example sets
  SlicParams slic;
  ReductionSettings reduction;
  KScan k_scan;
  SelectionConfig selection;
  CavOptions cav;
  int n_concept_cavs = 10;
  int n_random_trials = 100;
  double alpha = 0.05;
  AdapterConfig adapter;
};

/// Relative paths in the JSON are resolved against base_dir.
PipelineConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
PipelineConfig load_config(const std::filesystem::path& path);
nlohmann::json to_json(const PipelineConfig& config);

/// Throws std::invalid_argument naming the first invalid field.
void validate(const PipelineConfig& config);

std::unique_ptr<ModelAdapter> make_adapter(const PipelineConfig& config);

struct StageRun {
  Stage stage;
  bool executed = false;  // false: stamp matched, nothing done
};

using ProgressFn = std::function<void(const std::string&)>;

/// Runs every stage up to and including `last`. A stage whose stamp (hash of its
/// settings and its upstream stamp) matches the stored one is skipped.
std::vector<StageRun> run_pipeline(const PipelineConfig& config, const std::filesystem::path& out_dir,
                                   Stage last = Stage::Report, bool force = false, const ProgressFn& progress = {});

/// Work directory of one stage inside out_dir.
std::filesystem::path stage_dir(const std::filesystem::path& out_dir, Stage stage);

/// Writes a planted-concept demo: manifest plus a matching config JSON. Returns the config path.
std::filesystem::path write_demo(const std::filesystem::path& dir, std::uint64_t seed);

}  // namespace dtcav

#endif  // DTCAV_PIPELINE_HPP
