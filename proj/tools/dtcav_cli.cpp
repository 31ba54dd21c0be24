// dtcav: staged command-line driver for concept discovery and TCAV scoring.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "dtcav/pipeline.hpp"

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "dtcav_out";
  std::string stage;
  bool force = false;
  bool quiet = false;
};

int run(const Options& o, dtcav::Stage last) {
  dtcav::PipelineConfig config;
  try {
    config = dtcav::load_config(o.config);
  } catch (const std::exception& e) {
    std::cerr << "error: prepare: " << e.what() << "\n";
    return 2;
  }
  if (o.seed) config.seed = *o.seed;
  try {
    const auto progress = [&](const std::string& msg) {
      if (!o.quiet) std::cerr << msg << "\n";
    };
    dtcav::run_pipeline(config, o.out, last, o.force, progress);
  } catch (const dtcav::StageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  if (!o.quiet) std::cerr << "outputs in " << o.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Discover latent concepts of a segmentation model and score them with TCAV"};
  app.require_subcommand(1);
  Options o;

  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "Pipeline configuration (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "Override the master seed");
    sub->add_option("--out", o.out, "Output directory")->capture_default_str();
    sub->add_flag("--force", o.force, "Rerun stages even when their stamps match");
    sub->add_flag("-q,--quiet", o.quiet, "Only print errors");
  };

  for (const auto stage : dtcav::kStages) {
    const std::string name(dtcav::to_string(stage));
    auto* sub = app.add_subcommand(name, "Run the pipeline up to the " + name + " stage");
    add_common(sub);
    sub->callback([&o, stage] { std::exit(run(o, stage)); });
  }

  auto* all = app.add_subcommand("all", "Run every stage (or up to --stage)");
  add_common(all);
  all->add_option("--stage", o.stage, "Last stage to run")
      ->check(CLI::IsMember({"prepare", "patches", "embed", "cluster", "cavs", "score", "report"}));
  all->callback([&o] {
    const auto last = o.stage.empty() ? dtcav::Stage::Report : *dtcav::parse_stage(o.stage);
    std::exit(run(o, last));
  });

  std::string demo_dir;
  std::uint64_t demo_seed = 1;
  auto* demo = app.add_subcommand("demo", "Write a synthetic planted-concept dataset and config");
  demo->add_option("dir", demo_dir, "Target directory")->required();
  demo->add_option("--seed", demo_seed, "Generator seed")->capture_default_str();
  demo->callback([&] {
    try {
      std::cout << dtcav::write_demo(demo_dir, demo_seed).string() << "\n";
    } catch (const std::exception& e) {
      std::cerr << "error: demo: " << e.what() << "\n";
      std::exit(1);
    }
    std::exit(0);
  });

  CLI11_PARSE(app, argc, argv);
  return 0;
}
